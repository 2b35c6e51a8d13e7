//! Seeded experiment runs over synthetic scenes.
//!
//! Output layout under `output_dir`:
//! - `metrics.csv`: one row per (variant, seed), header [`METRICS_HEADER`]
//! - `summary.json`: per-variant means and deltas against the reference variant
//! - `traces/<variant>-seed<seed>.jsonl`: one JSON record per decode step

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{autoregressive_decode, DecodeTrace, StepRecord, ToyModel, ToyModelConfig};
use crate::equity::{EquityContext, EquityParams, PARAM_KEYS};
use crate::error::{invalid, Error, Result};
use crate::scenesim::{
    coverage_metrics, emit_objects, generate_scene, rare_omission_rate, Scene, SceneConfig, DEFAULT_EMIT_THRESHOLD,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const METRICS_HEADER: &str =
    "variant,seed,omission_rate,false_emit_rate,attention_gini,dominant_share,rare_share_sum";
pub const SWEEP_HEADER: &str = "variant,parameter,value,omission_rate,rare_omission_rate,false_emit_rate,attention_gini,dominant_share,rare_share_sum,mean_absorbed_mass";

/// A named set of equity parameter overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

impl VariantSpec {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            overrides: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.overrides.insert(key.to_string(), value);
        self
    }

    /// Base parameters with this variant's overrides applied and validated.
    pub fn params(&self, base: &EquityParams) -> Result<EquityParams> {
        let mut p = base.clone();
        for (key, &value) in &self.overrides {
            p.set(key, value)?;
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "config_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub model: ToyModelConfig,
    #[serde(default)]
    pub equity: EquityParams,
    pub variants: Vec<VariantSpec>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_theta")]
    pub theta_emit: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Variant the deltas are taken against; defaults to the first one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_variant: Option<String>,
}

fn config_schema() -> u32 {
    CONFIG_SCHEMA_VERSION
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_theta() -> f64 {
    DEFAULT_EMIT_THRESHOLD
}

fn default_max_steps() -> usize {
    6
}

impl ExperimentConfig {
    /// Baseline (equity off) against the default penalty and boost.
    pub fn baseline_vs_equity(seeds: Vec<u64>) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            scene: SceneConfig::default(),
            model: ToyModelConfig::default(),
            equity: EquityParams::default(),
            variants: vec![
                VariantSpec::new("baseline").with("lambda", 0.0).with("gamma", 0.0),
                VariantSpec::new("dop-obc"),
            ],
            seeds,
            output_dir: default_output_dir(),
            theta_emit: DEFAULT_EMIT_THRESHOLD,
            max_steps: default_max_steps(),
            reference_variant: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Schema {
                found: self.schema_version,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        if self.variants.is_empty() {
            return Err(Error::Empty { what: "variants" });
        }
        if self.seeds.is_empty() {
            return Err(Error::Empty { what: "seeds" });
        }
        let mut names = BTreeSet::new();
        for v in &self.variants {
            let safe = !v.name.is_empty()
                && v.name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !safe {
                return Err(invalid(
                    "variants",
                    format!("name {:?} must be non-empty ASCII letters, digits, '-' or '_'", v.name),
                ));
            }
            if !names.insert(v.name.as_str()) {
                return Err(invalid("variants", format!("duplicate name {:?}", v.name)));
            }
            v.params(&self.equity)?;
        }
        if let Some(r) = &self.reference_variant {
            if !names.contains(r.as_str()) {
                return Err(invalid("reference_variant", format!("{r:?} is not a variant")));
            }
        }
        if !(self.theta_emit > 0.0 && self.theta_emit < 1.0) {
            return Err(invalid("theta_emit", "must lie in (0, 1)"));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps", "must be at least 1"));
        }
        self.scene.validate()?;
        self.model.validate()?;
        if self.scene.num_proposals() + 1 > self.model.vocab_size {
            return Err(invalid("model.vocab_size", "too small for the scene's proposal tokens"));
        }
        Ok(())
    }

    pub fn reference(&self) -> &str {
        self.reference_variant.as_deref().unwrap_or(&self.variants[0].name)
    }

    /// Keep only `names`; errors on names that are not variants.
    pub fn filter_variants(&mut self, names: &[String]) -> Result<()> {
        for n in names {
            if !self.variants.iter().any(|v| &v.name == n) {
                return Err(invalid("variant", format!("{n:?} is not in the config")));
            }
        }
        self.variants.retain(|v| names.contains(&v.name));
        if let Some(r) = &self.reference_variant {
            if !names.contains(r) {
                self.reference_variant = None;
            }
        }
        Ok(())
    }
}

/// Metrics of one (variant, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: String,
    pub seed: u64,
    pub omission_rate: f64,
    pub false_emit_rate: f64,
    pub attention_gini: f64,
    pub dominant_share: f64,
    pub rare_share_sum: f64,
    pub rare_omission_rate: f64,
    pub mean_absorbed_mass: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub scene: Scene,
    pub trace: DecodeTrace,
}

/// Generates the scene for `seed`, decodes it and scores the trace.
pub fn run_single(config: &ExperimentConfig, model: &ToyModel, variant: &VariantSpec, seed: u64) -> Result<RunOutcome> {
    let params = variant.params(&config.equity)?;
    let scene = generate_scene(&SceneConfig {
        seed,
        ..config.scene.clone()
    })?;
    let prompt = scene.prompt(model.config().vocab_size)?;
    let mut ctx = EquityContext::new(params)?;
    let out = autoregressive_decode(model, &prompt, config.max_steps, &mut ctx, &scene)?;
    let metrics = score(&variant.name, seed, &scene, &out.trace, config.theta_emit)?;
    Ok(RunOutcome {
        metrics,
        scene,
        trace: out.trace,
    })
}

pub fn score(variant: &str, seed: u64, scene: &Scene, trace: &DecodeTrace, theta: f64) -> Result<RunMetrics> {
    let shares = trace.mean_shares()?;
    let emitted = emit_objects(trace, theta, scene)?;
    let report = coverage_metrics(&emitted, scene, &shares)?;
    let dominant = scene.dominant_index();
    let rare_share_sum = (0..scene.objects.len())
        .filter(|&k| k != dominant)
        .map(|k| shares[k])
        .sum();
    Ok(RunMetrics {
        variant: variant.to_string(),
        seed,
        omission_rate: report.omission_rate,
        false_emit_rate: report.false_emit_rate,
        attention_gini: report.attention_gini,
        dominant_share: shares[dominant],
        rare_share_sum,
        rare_omission_rate: rare_omission_rate(&emitted, scene),
        mean_absorbed_mass: trace.mean_absorbed_mass(),
    })
}

/// Runs every (variant, seed) pair in parallel. Results come back ordered by
/// variant (config order), then seed ascending.
pub fn evaluate(config: &ExperimentConfig) -> Result<Vec<RunOutcome>> {
    config.validate()?;
    let model = ToyModel::new(config.model.clone())?;
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let jobs: Vec<(&VariantSpec, u64)> = config
        .variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|(v, s)| run_single(config, &model, v, *s))
        .collect()
}

/// Mean of every metric for one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub omission_rate: f64,
    pub rare_omission_rate: f64,
    pub false_emit_rate: f64,
    pub attention_gini: f64,
    pub dominant_share: f64,
    pub rare_share_sum: f64,
    pub mean_absorbed_mass: f64,
}

impl VariantSummary {
    pub fn from_runs(variant: &str, runs: &[&RunMetrics]) -> Self {
        let k = runs.len().max(1) as f64;
        let mean = |f: fn(&RunMetrics) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / k;
        Self {
            variant: variant.to_string(),
            runs: runs.len(),
            omission_rate: mean(|r| r.omission_rate),
            rare_omission_rate: mean(|r| r.rare_omission_rate),
            false_emit_rate: mean(|r| r.false_emit_rate),
            attention_gini: mean(|r| r.attention_gini),
            dominant_share: mean(|r| r.dominant_share),
            rare_share_sum: mean(|r| r.rare_share_sum),
            mean_absorbed_mass: mean(|r| r.mean_absorbed_mass),
        }
    }

    /// `self - reference`, field by field.
    pub fn delta(&self, reference: &VariantSummary) -> VariantSummary {
        Self {
            variant: format!("{}-minus-{}", self.variant, reference.variant),
            runs: self.runs,
            omission_rate: self.omission_rate - reference.omission_rate,
            rare_omission_rate: self.rare_omission_rate - reference.rare_omission_rate,
            false_emit_rate: self.false_emit_rate - reference.false_emit_rate,
            attention_gini: self.attention_gini - reference.attention_gini,
            dominant_share: self.dominant_share - reference.dominant_share,
            rare_share_sum: self.rare_share_sum - reference.rare_share_sum,
            mean_absorbed_mass: self.mean_absorbed_mass - reference.mean_absorbed_mass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub reference_variant: String,
    pub theta_emit: f64,
    pub metrics_header: String,
    pub variants: Vec<VariantSummary>,
    pub deltas: Vec<VariantSummary>,
}

pub fn summarize(config: &ExperimentConfig, metrics: &[RunMetrics]) -> Summary {
    let variants: Vec<VariantSummary> = config
        .variants
        .iter()
        .map(|v| {
            let runs: Vec<&RunMetrics> = metrics.iter().filter(|m| m.variant == v.name).collect();
            VariantSummary::from_runs(&v.name, &runs)
        })
        .collect();
    let reference = config.reference();
    let base = variants
        .iter()
        .find(|s| s.variant == reference)
        .cloned()
        .expect("reference variant validated");
    let deltas = variants
        .iter()
        .filter(|s| s.variant != reference)
        .map(|s| s.delta(&base))
        .collect();
    Summary {
        schema_version: REPORT_SCHEMA_VERSION,
        reference_variant: reference.to_string(),
        theta_emit: config.theta_emit,
        metrics_header: METRICS_HEADER.to_string(),
        variants,
        deltas,
    }
}

/// Nine significant digits.
pub fn fmt_sig(x: f64) -> String {
    format!("{x:.8e}")
}

pub fn metrics_csv(metrics: &[RunMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.variant,
            m.seed,
            fmt_sig(m.omission_rate),
            fmt_sig(m.false_emit_rate),
            fmt_sig(m.attention_gini),
            fmt_sig(m.dominant_share),
            fmt_sig(m.rare_share_sum),
        );
    }
    out
}

#[derive(Serialize)]
struct TraceLine<'a> {
    schema_version: u32,
    variant: &'a str,
    seed: u64,
    #[serde(flatten)]
    record: &'a StepRecord,
}

pub fn trace_jsonl(variant: &str, seed: u64, trace: &DecodeTrace) -> Result<String> {
    let mut out = String::new();
    for record in &trace.steps {
        out.push_str(&serde_json::to_string(&TraceLine {
            schema_version: REPORT_SCHEMA_VERSION,
            variant,
            seed,
            record,
        })?);
        out.push('\n');
    }
    Ok(out)
}

/// Paths written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub trace_paths: Vec<PathBuf>,
    pub summary: Summary,
    pub metrics: Vec<RunMetrics>,
}

/// Runs the experiment and writes metrics, summary and traces.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let outcomes = evaluate(config)?;
    let dir = &config.output_dir;
    let trace_dir = dir.join("traces");
    fs::create_dir_all(&trace_dir)?;

    let mut trace_paths = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let path = trace_dir.join(format!("{}-seed{}.jsonl", o.metrics.variant, o.metrics.seed));
        fs::write(&path, trace_jsonl(&o.metrics.variant, o.metrics.seed, &o.trace)?)?;
        trace_paths.push(path);
    }
    let metrics: Vec<RunMetrics> = outcomes.into_iter().map(|o| o.metrics).collect();
    let metrics_path = dir.join("metrics.csv");
    fs::write(&metrics_path, metrics_csv(&metrics))?;
    let summary = summarize(config, &metrics);
    let summary_path = dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(ExperimentReport {
        metrics_path,
        summary_path,
        trace_paths,
        summary,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub summary: VariantSummary,
}

/// Re-runs every variant with `parameter` forced to each of `values`. The
/// swept value is applied after the variant's own overrides.
pub fn sweep(config: &ExperimentConfig, parameter: &str, values: &[f64]) -> Result<Vec<SweepRow>> {
    if !PARAM_KEYS.contains(&parameter) {
        return Err(Error::UnknownParameter(parameter.to_string()));
    }
    if values.is_empty() {
        return Err(Error::Empty { what: "sweep values" });
    }
    config.validate()?;
    let mut rows = Vec::with_capacity(values.len() * config.variants.len());
    for variant in &config.variants {
        for &value in values {
            let mut probe = config.clone();
            probe.variants = vec![variant.clone().with(parameter, value)];
            probe.reference_variant = None;
            let outcomes = evaluate(&probe)?;
            let runs: Vec<&RunMetrics> = outcomes.iter().map(|o| &o.metrics).collect();
            rows.push(SweepRow {
                parameter: parameter.to_string(),
                value,
                summary: VariantSummary::from_runs(&variant.name, &runs),
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.variant,
            r.parameter,
            fmt_sig(r.value),
            fmt_sig(s.omission_rate),
            fmt_sig(s.rare_omission_rate),
            fmt_sig(s.false_emit_rate),
            fmt_sig(s.attention_gini),
            fmt_sig(s.dominant_share),
            fmt_sig(s.rare_share_sum),
            fmt_sig(s.mean_absorbed_mass),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seeds: Vec<u64>) -> ExperimentConfig {
        ExperimentConfig {
            max_steps: 2,
            ..ExperimentConfig::baseline_vs_equity(seeds)
        }
    }

    #[test]
    fn config_validation_errors() {
        let mut c = small(vec![1]);
        c.variants[1].overrides.insert("lamda".into(), 2.0);
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("lamda"), "{err}");

        let mut c = small(vec![]);
        assert!(c.validate().is_err());
        c.seeds = vec![1];
        c.variants.push(VariantSpec::new("baseline"));
        assert!(c.validate().is_err());

        let mut c = small(vec![1]);
        c.variants[0].name = "../evil".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let c = ExperimentConfig::from_json(r#"{"variants": [{"name": "a"}], "seeds": [3]}"#).unwrap();
        assert_eq!(c.theta_emit, DEFAULT_EMIT_THRESHOLD);
        assert_eq!(c.equity, EquityParams::default());
        assert!(ExperimentConfig::from_json(r#"{"variants": [], "seeds": [3]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"variants": [{"name": "a"}], "seeds": [3], "bogus": 1}"#).is_err());
    }

    #[test]
    fn evaluate_orders_by_variant_then_seed() {
        let out = evaluate(&small(vec![9, 2, 5])).unwrap();
        let order: Vec<(String, u64)> = out
            .iter()
            .map(|o| (o.metrics.variant.clone(), o.metrics.seed))
            .collect();
        assert_eq!(
            order,
            vec![
                ("baseline".into(), 2),
                ("baseline".into(), 5),
                ("baseline".into(), 9),
                ("dop-obc".into(), 2),
                ("dop-obc".into(), 5),
                ("dop-obc".into(), 9),
            ]
        );
    }

    #[test]
    fn csv_has_fixed_header_and_sig_digits() {
        let m = RunMetrics {
            variant: "v".into(),
            seed: 4,
            omission_rate: 0.25,
            false_emit_rate: 0.0,
            attention_gini: 1.0 / 3.0,
            dominant_share: 0.5,
            rare_share_sum: 0.125,
            rare_omission_rate: 0.0,
            mean_absorbed_mass: 0.0,
        };
        let csv = metrics_csv(&[m]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert_eq!(
            lines.next().unwrap(),
            "v,4,2.50000000e-1,0.00000000e0,3.33333333e-1,5.00000000e-1,1.25000000e-1"
        );
    }

    #[test]
    fn sweep_rejects_unknown_parameter() {
        assert!(matches!(
            sweep(&small(vec![1]), "temperature", &[1.0]),
            Err(Error::UnknownParameter(_))
        ));
    }
}
