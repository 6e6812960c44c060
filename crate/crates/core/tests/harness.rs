use std::fs;
use std::path::Path;

use varband::harness::*;

fn small_bandit(output: &Path) -> ExperimentConfig {
    let text = format!(
        r#"{{
          "kind": "bandit", "d": 2, "K": 300, "seeds": [4, 9, 1], "R": 0.5,
          "bandit": {{ "arms": {{ "type": "fixed_sphere", "n": 6 }},
                       "schedule": {{ "type": "alternating", "values": [0.1, 0.4] }} }},
          "learners": [ {{ "type": "save" }}, {{ "type": "oful" }} ],
          "output": {:?}
        }}"#,
        output.display().to_string()
    );
    ExperimentConfig::from_json(&text, Path::new("inline.json")).unwrap()
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    names
}

#[test]
fn two_learners_three_seeds_give_six_runs_and_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_bandit(tmp.path());
    let out = run_sweep(&cfg, tmp.path()).unwrap();
    assert_eq!(out.runs.len(), 6);
    let files = csv_files(tmp.path());
    assert_eq!(files.len(), 7, "{files:?}");
    assert!(files.contains(&"summary.csv".to_string()));
    assert!(tmp.path().join("manifest.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 6);
    assert!(manifest["wall_clock_secs"].as_f64().unwrap() >= 0.0);
}

#[test]
fn sweeps_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_sweep(&small_bandit(a.path()), a.path()).unwrap();
    let mut cfg = small_bandit(b.path());
    cfg.jobs = Some(1);
    run_sweep(&cfg, b.path()).unwrap();
    let files = csv_files(a.path());
    assert_eq!(files, csv_files(b.path()));
    for f in files {
        assert_eq!(
            fs::read(a.path().join(&f)).unwrap(),
            fs::read(b.path().join(&f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn summary_median_matches_run_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_bandit(tmp.path());
    run_sweep(&cfg, tmp.path()).unwrap();
    let mut rdr = csv::Reader::from_path(tmp.path().join("summary.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let mut checked = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        if rec[col("checkpoint_k")] != *"300" {
            continue;
        }
        let learner = rec[col("learner")].to_string();
        let mut finals = Vec::new();
        for seed in [4, 9, 1] {
            let mut run =
                csv::Reader::from_path(tmp.path().join(format!("{learner}_seed{seed}.csv")))
                    .unwrap();
            let c = run
                .headers()
                .unwrap()
                .iter()
                .position(|h| h == "cum_regret")
                .unwrap();
            let last = run.records().last().unwrap().unwrap();
            finals.push(last[c].parse::<f64>().unwrap());
        }
        finals.sort_by(f64::total_cmp);
        let median: f64 = rec[col("median_cum_regret")].parse().unwrap();
        assert_eq!(median, finals[1]);
        let mean: f64 = rec[col("mean_cum_regret")].parse().unwrap();
        assert!((mean - finals.iter().sum::<f64>() / 3.0).abs() <= 1e-9 * mean.abs().max(1.0));
        checked += 1;
    }
    assert_eq!(checked, 2);
}

#[test]
fn report_reproduces_summary_cells() {
    let tmp = tempfile::tempdir().unwrap();
    run_sweep(&small_bandit(tmp.path()), tmp.path()).unwrap();
    let mut printed = Vec::new();
    report(tmp.path(), &mut printed).unwrap();
    let printed = String::from_utf8(printed).unwrap();
    let table: Vec<Vec<&str>> = printed
        .lines()
        .map(|l| l.split_whitespace().collect())
        .collect();
    let mut rdr = csv::Reader::from_path(tmp.path().join("summary.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        table[0],
        header.iter().map(String::as_str).collect::<Vec<_>>()
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(table.len(), rows.len() + 1);
    for (line, row) in table[1..].iter().zip(&rows) {
        assert_eq!(*line, row.iter().collect::<Vec<_>>());
    }
    let curves = fs::read_to_string(tmp.path().join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 300);
}

#[test]
fn mdp_sweep_writes_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg =
        parse_config(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example_mdp.json"))
            .unwrap();
    cfg.big_k = 40;
    cfg.seeds = vec![0, 1];
    let out = run_sweep(&cfg, tmp.path()).unwrap();
    assert_eq!(out.runs.len(), 4);
    let optimal = out.runs.iter().find(|r| r.learner == "optimal").unwrap();
    assert!(optimal.cum_regret.iter().all(|&r| r.abs() <= 1e-12));
}

#[test]
fn seed_offset_moves_run_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_bandit(tmp.path()).with_seed_offset(100);
    assert_eq!(cfg.seeds, vec![104, 109, 101]);
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for dir in [root.clone(), root.join("acceptance")] {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "json") {
                parse_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                seen += 1;
            }
        }
    }
    assert!(seen >= 9);
}
