use std::fs;
use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use equity_attn::experiment::{run_experiment, sweep, sweep_csv, ExperimentConfig};
use equity_attn::{compose_attention, generate_scene, AttentionInputs, SceneConfig};

mod check;

#[derive(Parser)]
#[command(name = "equity-attn", version, about = "Equity-aware register attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides the config's `seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Only run these variants (repeatable).
    #[arg(long)]
    variant: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (variant, seed) pair and write metrics, summary and traces.
    Run(RunArgs),
    /// Re-run the config with one equity parameter swept over a list of values.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Parameter name, e.g. lambda, gamma, sigma0, tau_p.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Compose one attention matrix from a JSON payload
    /// `{"scores": [[..]], "alphas": [..], "sigmas": [..]}`.
    Attend {
        /// Payload file; reads stdin when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Print a generated scene as JSON.
    Scene {
        /// Scene config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Oracle equivalence and invariant suite. Exits nonzero on any failure.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
    },
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config =
        ExperimentConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(seeds) = &args.seeds {
        config.seeds = seeds.clone();
    }
    if !args.variant.is_empty() {
        config.filter_variants(&args.variant)?;
    }
    config.validate()?;
    Ok(config)
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Run(args) => {
            let config = load_config(&args)?;
            let report = run_experiment(&config)?;
            println!("wrote {}", report.metrics_path.display());
            println!("wrote {}", report.summary_path.display());
            println!("wrote {} trace files", report.trace_paths.len());
            for d in &report.summary.deltas {
                println!(
                    "{}: gini {:+.4}, omission {:+.4}, false-emit {:+.4}",
                    d.variant, d.attention_gini, d.omission_rate, d.false_emit_rate
                );
            }
        }
        Command::Sweep { run, param, values } => {
            let config = load_config(&run)?;
            let rows = sweep(&config, &param, &values)?;
            let csv = sweep_csv(&rows);
            fs::create_dir_all(&config.output_dir)?;
            let path = config.output_dir.join(format!("sweep-{param}.csv"));
            fs::write(&path, &csv)?;
            print!("{csv}");
            eprintln!("wrote {}", path.display());
        }
        Command::Attend { input } => {
            let text = match input {
                Some(path) => fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?,
                None => {
                    let mut s = String::new();
                    std::io::stdin().read_to_string(&mut s)?;
                    s
                }
            };
            let inputs: AttentionInputs = serde_json::from_str(&text).context("parsing attention payload")?;
            let result = compose_attention(&inputs)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Command::Scene { config, seed } => {
            let mut cfg: SceneConfig = match config {
                Some(path) => serde_json::from_str(&fs::read_to_string(&path)?)?,
                None => SceneConfig::default(),
            };
            cfg.seed = seed;
            println!("{}", generate_scene(&cfg)?.to_json()?);
        }
        Command::Check { seed, trials } => {
            if trials == 0 {
                bail!("--trials must be at least 1");
            }
            let outcomes = check::run_checks(seed, trials);
            let mut all = true;
            for o in &outcomes {
                println!("{} {:<24} {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                all &= o.passed;
            }
            return Ok(all);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
