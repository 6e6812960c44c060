use std::ffi::CStr;
use std::ptr;

use varband::confidence::{freedman_radius, save_radius, SaveRadiusInput};
use varband_ffi::*;

fn last_error() -> String {
    let p = vb_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn accumulator_round_trip() {
    unsafe {
        let mut acc = ptr::null_mut();
        assert_eq!(vb_accumulator_new(2, 1.0, &mut acc), VbStatus::Ok);
        let x = [1.0, 0.0];
        assert_eq!(
            vb_accumulator_update(acc, 1.0, x.as_ptr(), 2, 3.0),
            VbStatus::Ok
        );
        assert_eq!(vb_accumulator_count(acc), 1);
        let mut norm = 0.0;
        assert_eq!(
            vb_accumulator_norm(acc, x.as_ptr(), 2, &mut norm),
            VbStatus::Ok
        );
        // Sigma = diag(2, 1)
        assert!((norm - 0.5f64.sqrt()).abs() < 1e-15);
        let mut theta = [0.0; 2];
        assert_eq!(
            vb_accumulator_theta(acc, theta.as_mut_ptr(), 2),
            VbStatus::Ok
        );
        assert!((theta[0] - 1.5).abs() < 1e-15 && theta[1] == 0.0);
        assert_eq!(
            vb_accumulator_norm(acc, x.as_ptr(), 3, &mut norm),
            VbStatus::DimensionMismatch
        );
        assert!(last_error().contains("dimension"));
        vb_accumulator_free(acc);
        vb_accumulator_free(ptr::null_mut());
    }
}

#[test]
fn constructor_errors_map_to_codes() {
    unsafe {
        let mut acc = ptr::null_mut();
        assert_eq!(
            vb_accumulator_new(2, -1.0, &mut acc),
            VbStatus::InvalidParameter
        );
        assert!(acc.is_null());
        assert_eq!(
            vb_accumulator_new(2, 1.0, ptr::null_mut()),
            VbStatus::NullPointer
        );
        let mut save = ptr::null_mut();
        assert_eq!(
            vb_save_new(2, 0.1, 1.5, 1.0, &mut save),
            VbStatus::InvalidParameter
        );
        assert!(last_error().contains("delta"));
    }
}

#[test]
fn save_first_round_matches_hand_trace() {
    unsafe {
        let mut save = ptr::null_mut();
        assert_eq!(vb_save_new(1, 0.1, 0.05, 1.0, &mut save), VbStatus::Ok);
        assert_eq!(vb_save_layers(save), 4);
        let arms = [0.4, 1.0];
        let mut choice = VbChoice {
            arm: 99,
            branch: VbBranch::Ucb,
            layer: 0,
            weight: 0.0,
        };
        assert_eq!(
            vb_save_select(save, arms.as_ptr(), 2, 1, &mut choice),
            VbStatus::Ok
        );
        assert_eq!(choice.arm, 1);
        assert_eq!(choice.branch, VbBranch::Explore);
        assert_eq!(choice.layer, 1);
        assert!((choice.weight - 0.25).abs() < 1e-15);
        assert_eq!(vb_save_update(save, 1, &arms[1], 1, 0.7), VbStatus::Ok);
        let mut counts = [0u64; 4];
        assert_eq!(vb_save_counts(save, counts.as_mut_ptr(), 4), VbStatus::Ok);
        assert_eq!(counts, [1, 0, 0, 0]);
        assert_eq!(
            vb_save_update(save, 2, &arms[1], 1, 0.7),
            VbStatus::NoPendingChoice
        );
        assert_eq!(
            vb_save_select(save, arms.as_ptr(), 0, 1, &mut choice),
            VbStatus::EmptyDecisionSet
        );
        vb_save_free(save);
    }
}

#[test]
fn radii_match_the_library() {
    unsafe {
        let mut r = 0.0;
        assert_eq!(
            vb_save_radius(2, 50, 6, 0.05, 0.5, 3.0, 20, &mut r),
            VbStatus::Ok
        );
        let want = save_radius(&SaveRadiusInput {
            ell: 2,
            k: 50,
            big_l: 6,
            delta: 0.05,
            big_r: 0.5,
            varhat: 3.0,
            psi_count: 20,
        })
        .unwrap();
        assert_eq!(r, want);
        assert_eq!(vb_freedman_radius(2.0, 3.0, 0.05, &mut r), VbStatus::Ok);
        assert_eq!(r, freedman_radius(2.0, 3.0, 0.05).unwrap());
        assert_eq!(
            vb_mdp_radius(1, 1, 1, 0.1, 1, 1.0, 1.0, 0.0, 0, &mut r),
            VbStatus::Ok
        );
        assert!((r - 105.68).abs() < 0.01);
        assert_eq!(
            vb_freedman_radius(1.0, 1.0, 2.0, &mut r),
            VbStatus::InvalidParameter
        );
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(vb_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point() {
    let header = include_str!("../include/varband.h");
    for name in [
        "vb_last_error",
        "vb_version",
        "vb_accumulator_new",
        "vb_accumulator_free",
        "vb_accumulator_update",
        "vb_accumulator_norm",
        "vb_accumulator_theta",
        "vb_accumulator_count",
        "vb_save_new",
        "vb_save_free",
        "vb_save_layers",
        "vb_save_select",
        "vb_save_update",
        "vb_save_counts",
        "vb_save_radius",
        "vb_mdp_radius",
        "vb_freedman_radius",
        "typedef struct VbSave VbSave",
        "typedef struct VbAccumulator VbAccumulator",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
