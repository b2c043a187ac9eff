//! `cfpo`: train, verify and compare critic-free policy optimizers on
//! synthetic tasks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 verification failure, 4 I/O error.

mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cfpo_core::experiment::{self, render_compare, render_decomposition, summarize};
use cfpo_core::gradcheck::run_gradcheck;
use cfpo_core::metrics::emit_metrics;
use cfpo_core::trainer::run_experiment;
use cfpo_core::{Algorithm, ExperimentConfig, MetricsFormat};

use manifest::{now, prepare_run_dir, sha256_hex, software_version, RunManifest};

/// Variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "CFPO_OUTPUT_DIR";

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFICATION: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

/// The target directory already belongs to a finished run.
#[derive(Debug)]
pub struct RunDirInUse(pub PathBuf);

impl std::fmt::Display for RunDirInUse {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} already exists; choose a fresh output directory", self.0.display())
    }
}

impl std::error::Error for RunDirInUse {}

#[derive(Parser)]
#[command(name = "cfpo", version, about = "Critic-free policy optimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, checkpoint and manifest
    Train {
        config: PathBuf,
        #[arg(long)]
        algorithm: Option<Algorithm>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check analytic gradients against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the full JSON report here
        #[arg(long)]
        report: Option<PathBuf>,
        /// Print the JSON report instead of the summary
        #[arg(long)]
        json: bool,
    },
    /// Covariance-rule eta sweep and per-step entropy decomposition
    Dynamics {
        config: PathBuf,
        /// Random instances in the eta sweep
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train several configurations on one task and merge their metrics
    Compare {
        #[arg(required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        /// Comma-separated seeds; every arm runs under each
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// Flags that win over values from the config file.
#[derive(Args, Default, Clone)]
struct Overrides {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    prompts_per_batch: Option<usize>,
    #[arg(long)]
    updates_per_rollout: Option<usize>,
    #[arg(long)]
    format: Option<MetricsFormat>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let t = &mut cfg.train;
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.group_size {
            t.group_size = v;
        }
        if let Some(v) = self.prompts_per_batch {
            t.prompts_per_batch = v;
        }
        if let Some(v) = self.updates_per_rollout {
            t.updates_per_rollout = v;
        }
        if let Some(v) = self.format {
            cfg.output.format = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output.dir = Some(v.clone());
        }
        cfg.validate()?;
        Ok(())
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

/// Flag, then config, then the environment variable, then `runs/<command>`.
fn resolve_output_dir(cfg_dir: Option<&Path>, command: &str) -> PathBuf {
    cfg_dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(command))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(config: &Path, algorithm: Option<Algorithm>, overrides: &Overrides) -> Result<()> {
    let mut cfg = load_config(config, overrides)?;
    if let Some(a) = algorithm {
        cfg.train.algorithm = a;
        cfg.validate()?;
    }
    let dir = resolve_output_dir(cfg.output.dir.as_deref(), "train");
    prepare_run_dir(&dir)?;
    let started_at = now();
    let effective = cfg.to_toml_string();
    let config_path = dir.join("config.toml");
    write_text(&config_path, &effective)?;

    let task = cfg_task(&cfg)?;
    let checkpoint = dir.join("policy.json");
    let outcome = run_experiment(&cfg.train, &task, Some(&checkpoint))?;
    let metrics = dir.join(format!("metrics.{}", cfg.output.format.extension()));
    emit_metrics(&outcome.records, cfg.output.format, &metrics)?;

    if let Some(last) = outcome.records.last() {
        println!(
            "{} steps: mean_reward {:.4} -> {:.4}, entropy {:.4}",
            outcome.records.len(),
            outcome.records[0].mean_reward,
            last.mean_reward,
            last.mean_entropy
        );
    } else {
        println!("0 steps");
    }
    let artifacts = BTreeMap::from([
        ("config".to_string(), config_path),
        ("metrics".to_string(), metrics.clone()),
        ("checkpoint".to_string(), checkpoint),
    ]);
    let notes = BTreeMap::from([
        ("algorithm".to_string(), cfg.train.algorithm.to_string()),
        (
            "entropy_mode".to_string(),
            serde_json::to_value(outcome.entropy_mode)?.as_str().unwrap_or_default().to_string(),
        ),
    ]);
    let m = RunManifest {
        software_version: software_version(),
        command: "train".into(),
        config_hash: sha256_hex(&effective),
        seed: cfg.train.seed,
        seeds: vec![],
        started_at,
        finished_at: now(),
        artifacts,
        notes,
    };
    m.write(&dir)?;
    println!("metrics: {}", metrics.display());
    Ok(())
}

fn cfg_task(cfg: &ExperimentConfig) -> Result<cfpo_core::env::Task> {
    Ok(cfpo_core::env::Task::new(cfg.task.clone())?)
}

fn gradcheck(trials: usize, seed: u64, report: Option<&Path>, json: bool) -> Result<()> {
    let r = run_gradcheck(trials, seed)?;
    let text = r.to_json();
    if json {
        println!("{text}");
    } else {
        print!("{}", r.summary());
        for row in &r.sign_evidence.rows {
            println!(
                "  |A|={:<2}  corr(-pi(log pi + H), fd) {:+.12}  corr(+pi(log pi + H), fd) {:+.12}",
                row.actions, row.implemented_correlation, row.printed_correlation
            );
        }
    }
    if let Some(path) = report {
        write_text(path, &format!("{text}\n"))?;
    }
    if !r.passed {
        return Err(VerificationFailed(format!("gradcheck with {trials} trials")).into());
    }
    Ok(())
}

fn dynamics(config: &Path, instances: usize, overrides: &Overrides) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let dir = resolve_output_dir(cfg.output.dir.as_deref(), "dynamics");
    prepare_run_dir(&dir)?;
    let started_at = now();
    let effective = cfg.to_toml_string();
    let config_path = dir.join("config.toml");
    write_text(&config_path, &effective)?;

    let report = experiment::dynamics_report(&cfg, cfg.train.steps, instances, cfg.train.seed)?;
    let report_path = dir.join("dynamics.json");
    write_text(&report_path, &format!("{}\n", serde_json::to_string_pretty(&report)?))?;
    let trace_path = dir.join("decomposition.csv");
    write_text(&trace_path, &render_decomposition(&report.decomposition))?;

    println!("{:>8}  {:>14}  {:>14}", "eta", "mean rel err", "max rel err");
    for row in &report.eta_sweep {
        println!(
            "{:>8}  {:>14.6e}  {:>14.6e}",
            row.eta, row.mean_relative_error, row.max_relative_error
        );
    }
    let worst = report
        .decomposition
        .iter()
        .map(|r| r.residual.abs())
        .fold(0.0, f64::max);
    println!("{} decomposition steps, max |residual| {worst:.3e}", report.decomposition.len());

    let m = RunManifest {
        software_version: software_version(),
        command: "dynamics".into(),
        config_hash: sha256_hex(&effective),
        seed: cfg.train.seed,
        seeds: vec![],
        started_at,
        finished_at: now(),
        artifacts: BTreeMap::from([
            ("config".to_string(), config_path),
            ("report".to_string(), report_path),
            ("decomposition".to_string(), trace_path),
        ]),
        notes: BTreeMap::new(),
    };
    m.write(&dir)?;
    Ok(())
}

fn compare(configs: &[PathBuf], seeds: Option<&[u64]>, overrides: &Overrides) -> Result<()> {
    let cfgs = configs
        .iter()
        .map(|p| load_config(p, overrides))
        .collect::<Result<Vec<_>>>()?;
    let first = &cfgs[0];
    let format = first.output.format;
    let dir = resolve_output_dir(first.output.dir.as_deref(), "compare");
    prepare_run_dir(&dir)?;
    let started_at = now();
    let effective: String = cfgs
        .iter()
        .map(ExperimentConfig::to_toml_string)
        .collect::<Vec<_>>()
        .join("\n# ---\n");
    let config_path = dir.join("configs.toml");
    write_text(&config_path, &effective)?;

    let runs = experiment::run_compare(&cfgs, seeds)?;
    let table_path = dir.join(format!("compare.{}", format.extension()));
    write_text(&table_path, &render_compare(&runs, format))?;
    let summary = summarize(&runs);
    let summary_path = dir.join("summary.json");
    write_text(&summary_path, &format!("{}\n", serde_json::to_string_pretty(&summary)?))?;

    println!("{:<14} {:>6} {:>12} {:>12} {:>14}", "arm", "seed", "reward@0", "reward@end", "mean clip");
    let fmt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    for s in &summary {
        println!(
            "{:<14} {:>6} {:>12} {:>12} {:>14}",
            s.arm,
            s.seed,
            fmt(s.initial_reward),
            fmt(s.final_reward),
            s.mean_clip_ratio.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
        );
    }

    let used: Vec<u64> = {
        let mut v: Vec<u64> = runs.iter().map(|r| r.seed).collect();
        v.dedup();
        v
    };
    let m = RunManifest {
        software_version: software_version(),
        command: "compare".into(),
        config_hash: sha256_hex(&effective),
        seed: used[0],
        seeds: used,
        started_at,
        finished_at: now(),
        artifacts: BTreeMap::from([
            ("configs".to_string(), config_path),
            ("table".to_string(), table_path),
            ("summary".to_string(), summary_path),
        ]),
        notes: BTreeMap::from([(
            "arms".to_string(),
            cfgs.iter().map(|c| c.train.algorithm.name()).collect::<Vec<_>>().join(","),
        )]),
    };
    m.write(&dir)?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VerificationFailed>() {
            return EXIT_VERIFICATION;
        }
        if cause.is::<RunDirInUse>() || cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<cfpo_core::Error>() {
            return match e {
                cfpo_core::Error::Config(_) => EXIT_CONFIG,
                cfpo_core::Error::Io { .. } | cfpo_core::Error::Parse { .. } => EXIT_IO,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            algorithm,
            overrides,
        } => train(&config, algorithm, &overrides),
        Command::Gradcheck {
            trials,
            seed,
            report,
            json,
        } => gradcheck(trials, seed, report.as_deref(), json),
        Command::Dynamics {
            config,
            instances,
            overrides,
        } => dynamics(&config, instances, &overrides),
        Command::Compare {
            configs,
            seeds,
            overrides,
        } => compare(&configs, seeds.as_deref(), &overrides),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
