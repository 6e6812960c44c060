//! Regularized weighted Gram matrices with an incrementally maintained inverse.
//!
//! A [`PsdAccumulator`] holds
//!
//! ```text
//!   gram     = reg * I + sum_i w_i^2 x_i x_i^T
//!   gram_inv = gram^{-1}                          (Sherman-Morrison, O(d^2) per update)
//!   moment   = sum_i w_i^2 y_i x_i
//! ```
//!
//! which is everything a weighted ridge regression needs. The data part
//! `sum_i w_i^2 x_i x_i^T` is also kept on its own so that quadratic forms
//! against it do not suffer cancellation against `reg * I`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Number of rank-1 updates between full re-factorizations of the inverse.
pub const REFACTOR_PERIOD: u64 = 1 << 12;

/// Slack below zero tolerated on quadratic forms before it counts as a bug.
const NEG_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PsdAccumulator {
    dim: usize,
    reg: f64,
    gram: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
    data: DMatrix<f64>,
    moment: DVector<f64>,
    count: u64,
    since_refactor: u64,
}

impl PsdAccumulator {
    pub fn new(dim: usize, reg: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dim", "must be at least 1"));
        }
        if !(reg > 0.0 && reg.is_finite()) {
            return Err(Error::param(
                "reg",
                format!("must be finite and > 0, got {reg}"),
            ));
        }
        Ok(Self {
            dim,
            reg,
            gram: DMatrix::identity(dim, dim) * reg,
            gram_inv: DMatrix::identity(dim, dim) / reg,
            data: DMatrix::zeros(dim, dim),
            moment: DVector::zeros(dim),
            count: 0,
            since_refactor: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reg(&self) -> f64 {
        self.reg
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn gram_inv(&self) -> &DMatrix<f64> {
        &self.gram_inv
    }

    /// `sum_i w_i^2 x_i x_i^T`, i.e. `gram - reg * I` without the cancellation.
    pub fn data_gram(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn moment(&self) -> &DVector<f64> {
        &self.moment
    }

    /// Number of rank-1 updates applied since construction (zero-weight ones included).
    pub fn count(&self) -> u64 {
        self.count
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Adds `w^2 x x^T` to the Gram matrix and `w^2 y x` to the moment vector.
    pub fn rank_one_update(&mut self, w: f64, x: &DVector<f64>, y: f64) -> Result<()> {
        self.check_dim(x)?;
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::param("w", format!("must lie in [0, 1], got {w}")));
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("x", "features and target must be finite"));
        }
        self.count += 1;
        if w == 0.0 {
            return Ok(());
        }
        let w2 = w * w;

        // Sherman-Morrison: (G + w2 x x^T)^{-1} = G^{-1} - w2 u u^T / (1 + w2 x^T u), u = G^{-1} x.
        let u = &self.gram_inv * x;
        let denom = 1.0 + w2 * x.dot(&u);
        sym_rank_one(&mut self.gram_inv, -w2 / denom, &u);
        sym_rank_one(&mut self.gram, w2, x);
        sym_rank_one(&mut self.data, w2, x);
        self.moment.axpy(w2 * y, x, 1.0);

        for i in 0..self.dim {
            for j in 0..i {
                if self.gram[(i, j)] != self.gram[(j, i)] {
                    return Err(Error::Internal(format!(
                        "gram lost symmetry at ({i}, {j}) after update {}",
                        self.count
                    )));
                }
            }
        }

        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_PERIOD {
            self.refactor()?;
        }
        Ok(())
    }

    /// Recomputes `gram_inv` from `gram` via Cholesky, discarding accumulated drift.
    pub fn refactor(&mut self) -> Result<()> {
        let chol = self.gram.clone().cholesky().ok_or_else(|| {
            Error::Internal("gram is not positive definite during re-factorization".into())
        })?;
        self.gram_inv = chol.inverse();
        symmetrize(&mut self.gram_inv);
        self.since_refactor = 0;
        Ok(())
    }

    /// `sqrt(x^T gram^{-1} x)`.
    pub fn elliptical_norm(&self, x: &DVector<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        quad(&self.gram_inv, x).max(0.0).sqrt()
    }

    /// `sqrt(v^T gram v)`, the norm the confidence ellipsoids are stated in.
    pub fn gram_norm(&self, v: &DVector<f64>) -> f64 {
        debug_assert_eq!(v.len(), self.dim);
        quad(&self.gram, v).max(0.0).sqrt()
    }

    /// Weighted ridge estimate `gram^{-1} moment`.
    pub fn solve_theta(&self) -> DVector<f64> {
        &self.gram_inv * &self.moment
    }

    /// `v^T (sum_i w_i^2 x_i x_i^T) v`.
    pub fn quadratic_form_data(&self, v: &DVector<f64>) -> Result<f64> {
        self.check_dim(v)?;
        let q = quad(&self.data, v);
        if q < -NEG_TOL {
            return Err(Error::Internal(format!(
                "data quadratic form is negative: {q}"
            )));
        }
        Ok(q.max(0.0))
    }
}

fn quad(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

/// `m += c x x^T`, writing each off-diagonal product once to both halves.
fn sym_rank_one(m: &mut DMatrix<f64>, c: f64, x: &DVector<f64>) {
    let n = m.nrows();
    for j in 0..n {
        let cj = c * x[j];
        for i in j..n {
            let v = m[(i, j)] + cj * x[i];
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ball(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
        let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1.0 {
            v / n
        } else {
            v
        }
    }

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn fresh_accumulator_is_scaled_identity() {
        let acc = PsdAccumulator::new(1, 0.25).unwrap();
        assert_eq!(acc.gram()[(0, 0)], 0.25);
        assert_eq!(acc.gram_inv()[(0, 0)], 4.0);

        let acc = PsdAccumulator::new(3, 1.0).unwrap();
        assert_eq!(acc.gram(), &DMatrix::<f64>::identity(3, 3));
        assert_eq!(acc.gram_inv(), &DMatrix::<f64>::identity(3, 3));
        assert_eq!(acc.count(), 0);
        assert!(acc.moment().iter().all(|&v| v == 0.0));

        // layer-1 initialization of the bandit learner
        let acc = PsdAccumulator::new(2, 2f64.powi(-2)).unwrap();
        assert_eq!(acc.gram(), &(DMatrix::<f64>::identity(2, 2) * 0.25));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(
            PsdAccumulator::new(0, 1.0),
            Err(Error::InvalidParameter { name: "dim", .. })
        ));
        assert!(PsdAccumulator::new(2, 0.0).is_err());
        assert!(PsdAccumulator::new(2, -1.0).is_err());
        assert!(PsdAccumulator::new(2, f64::NAN).is_err());
    }

    #[test]
    fn zero_weight_only_bumps_count() {
        let mut acc = PsdAccumulator::new(2, 0.5).unwrap();
        let before = acc.clone();
        acc.rank_one_update(0.0, &DVector::from_vec(vec![0.3, -0.7]), 9.0)
            .unwrap();
        assert_eq!(acc.count(), 1);
        assert_eq!(acc.gram(), before.gram());
        assert_eq!(acc.gram_inv(), before.gram_inv());
        assert_eq!(acc.moment(), before.moment());
    }

    #[test]
    fn scalar_closed_form() {
        let mut acc = PsdAccumulator::new(1, 1.0).unwrap();
        acc.rank_one_update(1.0, &DVector::from_vec(vec![2.0]), 3.0)
            .unwrap();
        assert_eq!(acc.gram()[(0, 0)], 5.0);
        assert!((acc.gram_inv()[(0, 0)] - 0.2).abs() < 1e-15);
        assert_eq!(acc.moment()[0], 6.0);
        assert!((acc.solve_theta()[0] - 1.2).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_updates() {
        let mut acc = PsdAccumulator::new(2, 1.0).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        assert!(acc.rank_one_update(1.5, &x, 0.0).is_err());
        assert!(acc.rank_one_update(-0.1, &x, 0.0).is_err());
        assert!(matches!(
            acc.rank_one_update(1.0, &DVector::from_vec(vec![1.0]), 0.0),
            Err(Error::DimensionMismatch {
                expected: 2,
                actual: 1
            })
        ));
        assert!(acc
            .rank_one_update(1.0, &DVector::from_vec(vec![f64::INFINITY, 0.0]), 0.0)
            .is_err());
        assert_eq!(acc.count(), 0);
    }

    #[test]
    fn inverse_matches_dense_inversion_after_random_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut acc = PsdAccumulator::new(3, 1.0).unwrap();
        for _ in 0..5 {
            let x = random_ball(&mut rng, 3);
            acc.rank_one_update(rng.random_range(0.0..=1.0), &x, rng.random_range(-1.0..1.0))
                .unwrap();
        }
        let dense = acc.gram().clone().try_inverse().unwrap();
        assert!(max_abs_diff(acc.gram_inv(), &dense) < 1e-10);
    }

    #[test]
    fn elliptical_norm_cases() {
        let acc = PsdAccumulator::new(1, 0.25).unwrap();
        assert_eq!(acc.elliptical_norm(&DVector::from_vec(vec![0.0])), 0.0);
        assert!((acc.elliptical_norm(&DVector::from_vec(vec![1.0])) - 2.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut acc = PsdAccumulator::new(4, 0.1).unwrap();
        for _ in 0..50 {
            acc.rank_one_update(rng.random_range(0.0..=1.0), &random_ball(&mut rng, 4), 0.0)
                .unwrap();
        }
        let dense = acc.gram().clone().try_inverse().unwrap();
        for _ in 0..20 {
            let x = random_ball(&mut rng, 4);
            let oracle = x.dot(&(&dense * &x)).sqrt();
            assert!((acc.elliptical_norm(&x) - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn solve_theta_matches_dense_solve() {
        let acc = PsdAccumulator::new(3, 1.0).unwrap();
        assert!(acc.solve_theta().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut acc = PsdAccumulator::new(3, 1.0).unwrap();
        for _ in 0..20 {
            let x = random_ball(&mut rng, 3);
            acc.rank_one_update(rng.random_range(0.0..=1.0), &x, rng.random_range(-2.0..2.0))
                .unwrap();
        }
        let oracle = acc.gram().clone().lu().solve(acc.moment()).unwrap();
        let theta = acc.solve_theta();
        assert!((&theta - &oracle).abs().max() < 1e-9);
    }

    #[test]
    fn quadratic_form_data_cases() {
        let acc = PsdAccumulator::new(3, 0.7).unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(acc.quadratic_form_data(&v).unwrap(), 0.0);

        let mut acc = PsdAccumulator::new(1, 1.0).unwrap();
        acc.rank_one_update(0.5, &DVector::from_vec(vec![2.0]), 1.0)
            .unwrap();
        let q = acc
            .quadratic_form_data(&DVector::from_vec(vec![3.0]))
            .unwrap();
        assert!((q - 9.0).abs() < 1e-14);

        // stored-log oracle: sum_i w_i^2 <v, x_i>^2
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = PsdAccumulator::new(4, 0.25).unwrap();
        let mut log = Vec::new();
        for _ in 0..200 {
            let w: f64 = rng.random_range(0.0..=1.0);
            let x = random_ball(&mut rng, 4);
            acc.rank_one_update(w, &x, 0.0).unwrap();
            log.push((w, x));
        }
        let v = random_ball(&mut rng, 4) * 3.0;
        let oracle: f64 = log.iter().map(|(w, x)| w * w * v.dot(x).powi(2)).sum();
        assert!((acc.quadratic_form_data(&v).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn refactor_keeps_inverse_consistent_over_long_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut acc = PsdAccumulator::new(6, 1.0 / 16.0).unwrap();
        for _ in 0..(2 * REFACTOR_PERIOD + 100) {
            let x = random_ball(&mut rng, 6);
            acc.rank_one_update(rng.random_range(0.0..=1.0), &x, 0.0)
                .unwrap();
        }
        let dense = acc.gram().clone().try_inverse().unwrap();
        let prod = acc.gram() * acc.gram_inv();
        assert!(max_abs_diff(&prod, &DMatrix::identity(6, 6)) < 1e-8);
        assert!(max_abs_diff(acc.gram_inv(), &dense) < 1e-8);
    }

    #[test]
    fn smallest_eigenvalue_stays_above_reg() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut acc = PsdAccumulator::new(5, 0.3).unwrap();
        for _ in 0..300 {
            acc.rank_one_update(rng.random_range(0.0..=1.0), &random_ball(&mut rng, 5), 0.0)
                .unwrap();
        }
        let eig = acc.gram().clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() >= 0.3 - 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_inverse_and_residual(
            d in 1usize..=16,
            seed in any::<u64>(),
            steps in 1usize..400,
            reg_exp in 0i32..8,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut acc = PsdAccumulator::new(d, 2f64.powi(-reg_exp)).unwrap();
            for _ in 0..steps {
                let x = random_ball(&mut rng, d);
                acc.rank_one_update(rng.random_range(0.0..=1.0), &x, rng.random_range(-1.0..1.0)).unwrap();
            }
            prop_assert_eq!(acc.count(), steps as u64);
            let dense = acc.gram().clone().try_inverse().unwrap();
            prop_assert!(max_abs_diff(acc.gram_inv(), &dense) <= 1e-8);
            let resid = (acc.gram() * acc.solve_theta() - acc.moment()).abs().max();
            prop_assert!(resid <= 1e-8);
        }

        #[test]
        fn prop_updates_never_increase_norm(
            d in 1usize..=8,
            seed in any::<u64>(),
            steps in 1usize..100,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut acc = PsdAccumulator::new(d, 1.0).unwrap();
            let probe = random_ball(&mut rng, d);
            let mut last = acc.elliptical_norm(&probe);
            for _ in 0..steps {
                let x = random_ball(&mut rng, d);
                acc.rank_one_update(rng.random_range(0.0..=1.0), &x, 0.0).unwrap();
                let now = acc.elliptical_norm(&probe);
                prop_assert!(now <= last + 1e-12);
                last = now;
            }
        }

        #[test]
        fn prop_data_form_nonnegative(
            d in 1usize..=8,
            seed in any::<u64>(),
            steps in 0usize..50,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut acc = PsdAccumulator::new(d, 0.5).unwrap();
            for _ in 0..steps {
                acc.rank_one_update(rng.random_range(0.0..=1.0), &random_ball(&mut rng, d), 0.0).unwrap();
            }
            let v = DVector::from_fn(d, |_, _| rng.random_range(-10.0..10.0));
            prop_assert!(acc.quadratic_form_data(&v).unwrap() >= 0.0);
        }
    }
}
