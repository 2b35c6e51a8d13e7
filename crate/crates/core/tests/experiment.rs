use std::fs;
use std::path::Path;

use equity_attn::experiment::{
    evaluate, run_experiment, sweep, sweep_csv, ExperimentConfig, VariantSpec, METRICS_HEADER, REPORT_SCHEMA_VERSION,
    SWEEP_HEADER,
};
use equity_attn::Error;

fn config(seeds: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::baseline_vs_equity((0..seeds).collect());
    c.max_steps = 3;
    c
}

#[test]
fn two_variants_ten_seeds_give_twenty_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(10);
    c.output_dir = dir.path().to_path_buf();
    let report = run_experiment(&c).unwrap();
    let csv = fs::read_to_string(&report.metrics_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), 20);
    assert_eq!(report.trace_paths.len(), 20);

    let first = fs::read_to_string(dir.path().join("traces/baseline-seed0.jsonl")).unwrap();
    assert_eq!(first.lines().count(), c.max_steps);
    for line in first.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["schema_version"], REPORT_SCHEMA_VERSION);
        assert_eq!(v["variant"], "baseline");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report.summary_path).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], REPORT_SCHEMA_VERSION);
    assert_eq!(summary["metrics_header"], METRICS_HEADER);
    assert_eq!(summary["deltas"][0]["variant"], "dop-obc-minus-baseline");
}

#[test]
fn csv_rows_are_ordered_by_variant_then_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(4);
    c.seeds = vec![3, 1, 2, 0, 2];
    c.output_dir = dir.path().to_path_buf();
    let report = run_experiment(&c).unwrap();
    let keys: Vec<(String, u64)> = report.metrics.iter().map(|m| (m.variant.clone(), m.seed)).collect();
    let expected: Vec<(String, u64)> = ["baseline", "dop-obc"]
        .iter()
        .flat_map(|v| (0..4).map(move |s| (v.to_string(), s)))
        .collect();
    assert_eq!(keys, expected);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(5);
    let mut files = Vec::new();
    for run in ["a", "b"] {
        c.output_dir = dir.path().join(run);
        let r = run_experiment(&c).unwrap();
        let mut bytes = vec![fs::read(&r.metrics_path).unwrap(), fs::read(&r.summary_path).unwrap()];
        bytes.extend(r.trace_paths.iter().map(|p| fs::read(p).unwrap()));
        files.push(bytes);
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn unknown_override_key_is_named() {
    let mut c = config(2);
    c.variants.push(VariantSpec::new("typo").with("lamda", 0.5));
    let err = evaluate(&c).unwrap_err();
    assert!(matches!(&err, Error::UnknownParameter(k) if k == "lamda"));
    assert!(err.to_string().contains("lamda"));
}

#[test]
fn unwritable_output_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let mut c = config(1);
    c.output_dir = blocker.join("out");
    assert!(run_experiment(&c).is_err());
}

#[test]
fn lambda_zero_sweep_reproduces_the_baseline() {
    let c = config(6);
    let outcomes = evaluate(&c).unwrap();
    let baseline: Vec<_> = outcomes
        .iter()
        .filter(|o| o.metrics.variant == "baseline")
        .map(|o| &o.metrics)
        .collect();
    let expected = equity_attn::experiment::VariantSummary::from_runs("baseline", &baseline);

    let rows = sweep(&c, "lambda", &[0.0]).unwrap();
    assert_eq!(rows.len(), c.variants.len());
    assert_eq!(rows[0].summary, expected);
}

#[test]
fn sweep_emits_one_row_per_value() {
    let mut c = config(2);
    c.variants.truncate(1);
    let values = [0.1, 0.3, 0.5, 0.7];
    let rows = sweep(&c, "gamma", &values).unwrap();
    assert_eq!(rows.len(), values.len());
    assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), values);
    let csv = sweep_csv(&rows);
    assert_eq!(csv.lines().next(), Some(SWEEP_HEADER));
    assert_eq!(csv.lines().count(), 1 + values.len());
}

#[test]
fn absorbed_mass_falls_as_sigma0_grows() {
    let mut c = config(4);
    c.variants = vec![VariantSpec::new("dop-obc")];
    let rows = sweep(&c, "sigma0", &[0.0, 0.05, 1e6]).unwrap();
    let absorbed: Vec<f64> = rows.iter().map(|r| r.summary.mean_absorbed_mass).collect();
    assert!(absorbed.windows(2).all(|w| w[1] <= w[0]), "{absorbed:?}");
    assert!(absorbed[2] < 1e-12);
}

#[test]
fn smoke_config_lowers_gini() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    let c = ExperimentConfig::load(&path).unwrap();
    let outcomes = evaluate(&c).unwrap();
    let metrics: Vec<_> = outcomes.into_iter().map(|o| o.metrics).collect();
    let summary = equity_attn::experiment::summarize(&c, &metrics);
    assert_eq!(summary.deltas.len(), 1);
    assert!(summary.deltas[0].attention_gini < 0.0, "{:?}", summary.deltas[0]);
}

#[test]
fn config_files_reject_unknown_fields_and_schema() {
    let ok = r#"{"seeds":[1],"variants":[{"name":"a"}]}"#;
    assert!(ExperimentConfig::from_json(ok).is_ok());
    assert!(ExperimentConfig::from_json(r#"{"seeds":[1],"variants":[{"name":"a"}],"extra":1}"#).is_err());
    let wrong = r#"{"schema_version":2,"seeds":[1],"variants":[{"name":"a"}]}"#;
    assert!(matches!(ExperimentConfig::from_json(wrong), Err(Error::Schema { .. })));
}
