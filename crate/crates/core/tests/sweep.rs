use std::path::Path;

use fedper_core::config::ExperimentConfig;
use fedper_core::metrics::{run_sweep, AxisValue, SweepAxis};
use fedper_core::metrics::sweep::point_config;
use fedper_core::protocol::RunOptions;

fn small() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/heterogeneity.json");
    let mut cfg = ExperimentConfig::from_path(&path).unwrap();
    cfg.apply_overrides(&["rounds=3", "num_clients=4"]).unwrap();
    cfg
}

#[test]
fn no_personal_layers_matches_the_baseline() {
    let res = run_sweep(&small(), SweepAxis::Kp, &[AxisValue::Count(0)], &RunOptions::default(), true).unwrap();
    let p = &res.points[0];
    let baseline = p.baseline.as_ref().unwrap();
    assert_eq!(p.history, baseline.history);
    assert_eq!(p.gap(), Some(0.0));
}

#[test]
fn singleton_sweep_equals_a_direct_run() {
    let base = small();
    let value = AxisValue::Count(2);
    let res = run_sweep(&base, SweepAxis::K, &[value], &RunOptions::default(), false).unwrap();
    let direct = point_config(&base, SweepAxis::K, value).unwrap().execute(&RunOptions::default()).unwrap();
    assert_eq!(res.points[0].history, direct.history);
    assert!(res.points[0].baseline.is_none());
}

#[test]
fn value_order_does_not_matter() {
    let base = small();
    let opts = RunOptions::default();
    let fwd = [AxisValue::Count(1), AxisValue::Count(2), AxisValue::Count(3)];
    let rev = [AxisValue::Count(3), AxisValue::Count(1), AxisValue::Count(2), AxisValue::Count(1)];
    let a = run_sweep(&base, SweepAxis::K, &fwd, &opts, false).unwrap();
    let b = run_sweep(&base, SweepAxis::K, &rev, &opts, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.points.len(), 3);
}

#[test]
fn algorithm_axis_runs_both_paths() {
    let values = [
        SweepAxis::Algorithm.parse_value("fedper").unwrap(),
        SweepAxis::Algorithm.parse_value("fedavg").unwrap(),
    ];
    let res = run_sweep(&small(), SweepAxis::Algorithm, &values, &RunOptions::default(), false).unwrap();
    assert_eq!(res.points.len(), 2);
    let names: Vec<String> = res.points.iter().map(|p| p.value.to_string()).collect();
    assert!(names.contains(&"fedavg".to_string()) && names.contains(&"fedper".to_string()));
}

#[test]
fn values_from_another_axis_are_rejected() {
    let values = [SweepAxis::Algorithm.parse_value("fedavg").unwrap()];
    assert!(run_sweep(&small(), SweepAxis::K, &values, &RunOptions::default(), false).is_err());
    assert!(run_sweep(&small(), SweepAxis::K, &[], &RunOptions::default(), false).is_err());
}
