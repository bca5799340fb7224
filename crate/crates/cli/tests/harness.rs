use std::path::{Path, PathBuf};

use isekf_cli::commands::{run, run_experiment, sweep, write_outputs};
use isekf_cli::config::parse_config_str;
use isekf_cli::metrics::{mean_squared_error, partition_windows, position_rmse, rmse, stage_windows};
use isekf_cli::plot::PLOT_FILES;
use isekf_cli::{parse_certify_config, parse_config, ExperimentConfig};
use proptest::prelude::*;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn bundled() -> ExperimentConfig {
    parse_config(&config("paper.cfg")).unwrap()
}

#[test]
fn bundled_configs_parse() {
    assert_eq!(bundled(), ExperimentConfig::default());
    let clean = parse_config(&config("no_outliers.cfg")).unwrap();
    assert!(clean.schedule().unwrap().segments().is_empty());
    let lin = parse_certify_config(&config("linear.cfg")).unwrap();
    assert_eq!(lin.system.state_dim(), 1);
}

// Pinned from the first run of the bundled experiment, seed 1.
const SEED1_POSITION_RMSE: [(&str, f64); 3] = [
    ("is-ekf", 1.518225912301189),
    ("ekf", 20.57142635669710),
    ("lsigma-ekf", 2.199477008862698),
];

#[test]
fn seed1_ordering_and_regression() {
    let (_, report) = run_experiment(&bundled()).unwrap();
    let pos = |label: &str| position_rmse(report.filter(label).unwrap().rmse.as_ref().unwrap());
    assert!(pos("is-ekf") < pos("lsigma-ekf"));
    assert!(pos("lsigma-ekf") < pos("ekf"));
    for (label, expected) in SEED1_POSITION_RMSE {
        let got = pos(label);
        assert!(((got - expected) / expected).abs() < 1e-9, "{label}: {got} vs {expected}");
    }
}

#[test]
fn saturated_filter_bounded_on_every_seed() {
    let base = bundled();
    let stages = stage_windows(&base.schedule().unwrap());
    for seed in 1..=20 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let (trace, report) = run_experiment(&cfg).unwrap();
        assert!(!report.filter("is-ekf").unwrap().divergent, "seed {seed}");
        let late_max = |label: &str| {
            stages[2..]
                .iter()
                .map(|w| isekf_cli::metrics::max_position_error(&trace, label, Some(w)).unwrap())
                .fold(0.0, f64::max)
        };
        assert!(late_max("ekf") > 10.0 * late_max("is-ekf"), "seed {seed}");
    }
}

#[test]
fn clean_run_gating_matches_ekf() {
    let cfg = parse_config(&config("no_outliers.cfg")).unwrap();
    let (_, report) = run_experiment(&cfg).unwrap();
    let pos = |label: &str| position_rmse(report.filter(label).unwrap().rmse.as_ref().unwrap());
    let (ekf, gate, sat) = (pos("ekf"), pos("lsigma-ekf"), pos("is-ekf"));
    assert!((gate - ekf).abs() / ekf < 0.05, "{gate} vs {ekf}");
    // With the bundled bound parameters the saturated filter clips clean
    // innovations too; its excess over the EKF is pinned, not asserted small.
    let excess = sat / ekf;
    assert!((excess - 1.2923).abs() < 1e-3, "{excess}");
}

#[test]
fn zero_horizon_is_empty() {
    let mut cfg = parse_config_str("[scenario]\nhorizon = 0\n").unwrap();
    let tmp = tempfile::tempdir().unwrap();
    cfg.output.dir = tmp.path().to_path_buf();
    let report = run(&cfg).unwrap();
    assert!(report.is_empty());
    let csv = std::fs::read_to_string(tmp.path().join("trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(!tmp.path().join(PLOT_FILES[0]).exists());
}

#[test]
fn outputs_have_contracted_shape() {
    let mut cfg = bundled();
    let tmp = tempfile::tempdir().unwrap();
    cfg.output.dir = tmp.path().to_path_buf();
    run(&cfg).unwrap();
    let csv = std::fs::read_to_string(tmp.path().join("trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 702);
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 5 + 2 + 3 + 6 + 3 + 3);
    for name in PLOT_FILES {
        assert!(tmp.path().join(name).exists(), "{name}");
    }

    // Shaded spans sit exactly on the stage boundaries in seconds.
    let svg = std::fs::read_to_string(tmp.path().join("measurement_y1.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="outlier""#).count(), 4);
    let (x_min, x_max) = (-0.05 * 70.0, 70.0 * 1.05);
    let to_px = |t: f64| 70.0 + (t - x_min) / (x_max - x_min) * 500.0;
    for (start, end) in [(150.0, 200.0), (350.0, 400.0), (450.0, 500.0), (550.0, 600.0)] {
        let x0 = to_px(start * 0.1);
        let w = to_px(end * 0.1) - x0;
        let rect = format!(r#"x="{x0:.3}" y="40.000" width="{w:.3}""#);
        assert!(svg.contains(&rect), "missing {rect}");
    }
}

#[test]
fn filter_failure_keeps_other_results() {
    let mut cfg = bundled();
    cfg.scenario.horizon = 50;
    cfg.filters.enabled = vec!["ekf".into(), "lsigma-ekf".into()];
    let (trace, report) = run_experiment(&cfg).unwrap();
    assert_eq!(trace.filter_labels, ["ekf", "lsigma-ekf"]);
    assert_eq!(report.filters.len(), 2);
    let tmp = tempfile::tempdir().unwrap();
    write_outputs(&cfg, &trace, &report, tmp.path()).unwrap();
    let header = std::fs::read_to_string(tmp.path().join("trace.csv")).unwrap();
    assert!(!header.lines().next().unwrap().contains("bound"));
}

#[test]
fn sweep_writes_seed_namespaced_outputs() {
    let mut cfg = bundled();
    let tmp = tempfile::tempdir().unwrap();
    cfg.output.dir = tmp.path().to_path_buf();
    cfg.output.svg = false;
    cfg.batch.first_seed = 3;
    cfg.batch.count = 4;
    let results = sweep(&cfg).unwrap();
    assert_eq!(results.iter().map(|r| r.seed).collect::<Vec<_>>(), [3, 4, 5, 6]);
    for seed in 3..=6 {
        assert!(tmp.path().join(format!("seed_{seed}/trace.csv")).exists());
    }
    let mut single = cfg.clone();
    single.seed = 5;
    let (_, mut report) = run_experiment(&single).unwrap();
    let mut swept = results[2].report.clone();
    for f in swept.filters.iter_mut().chain(report.filters.iter_mut()) {
        f.mean_step_nanos = 0.0;
    }
    assert_eq!(swept, report);
    assert!(tmp.path().join("sweep_summary.txt").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn window_weighted_mse_matches_full(seed in 0u64..1000, horizon in 1usize..700) {
        let mut cfg = bundled();
        cfg.seed = seed;
        cfg.scenario.horizon = horizon;
        let (trace, _) = run_experiment(&cfg).unwrap();
        let windows = partition_windows(&cfg.schedule().unwrap(), horizon);
        for label in ["is-ekf", "ekf", "lsigma-ekf"] {
            let full = mean_squared_error(&trace, label, None).unwrap();
            let mut combined = [0.0; 3];
            for w in &windows {
                let part = mean_squared_error(&trace, label, Some(w)).unwrap();
                for i in 0..3 {
                    combined[i] += part[i] * w.len() as f64 / (horizon + 1) as f64;
                }
            }
            for i in 0..3 {
                prop_assert!((full[i] - combined[i]).abs() <= 1e-12 * full[i].max(1.0));
            }
            let r = rmse(&trace, label, None).unwrap();
            prop_assert!(r.iter().all(|v| *v >= 0.0));
        }
    }
}
