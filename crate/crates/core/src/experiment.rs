//! Multi-arm comparisons and entropy-dynamics sweeps built on the trainer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::calculus::AdvantageVector;
use crate::config::ExperimentConfig;
use crate::dynamics::{entropy_covariance_delta, entropy_decomposition, tilted_entropy_delta};
use crate::env::Task;
use crate::error::{Error, Result};
use crate::gradcheck::{random_instance, MAX_ACTIONS, MIN_ACTIONS};
use crate::metrics::{json_object, MetricsFormat, MetricsRecord, METRIC_FIELDS};
use crate::numfmt::format_f64;
use crate::policy::PolicyDistribution;
use crate::trainer::{run_experiment, Trainer};

/// One arm trained under one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmRun {
    pub label: String,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
}

impl ArmRun {
    pub fn final_reward(&self) -> Option<f64> {
        self.records.last().map(|r| r.mean_reward)
    }

    pub fn mean_clip_ratio(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        Some(self.records.iter().map(|r| r.clip_ratio).sum::<f64>() / self.records.len() as f64)
    }
}

/// Per-run summary line of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub seed: u64,
    pub steps: usize,
    pub initial_reward: Option<f64>,
    pub final_reward: Option<f64>,
    pub mean_clip_ratio: Option<f64>,
    pub final_entropy: Option<f64>,
}

fn arm_labels(configs: &[ExperimentConfig]) -> Vec<String> {
    let names: Vec<&str> = configs.iter().map(|c| c.train.algorithm.name()).collect();
    names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            if names.iter().filter(|m| *m == n).count() > 1 {
                format!("{n}_{}", i + 1)
            } else {
                n.to_string()
            }
        })
        .collect()
}

/// Trains every arm under every seed on one shared task.
///
/// All arms must describe the same task. With `seeds` unset, all arms must
/// also agree on `train.seed`, so that every arm sees the same prompt stream.
pub fn run_compare(configs: &[ExperimentConfig], seeds: Option<&[u64]>) -> Result<Vec<ArmRun>> {
    let first = configs
        .first()
        .ok_or_else(|| Error::Config("compare needs at least one config".into()))?;
    for (i, c) in configs.iter().enumerate() {
        c.validate()?;
        if c.task != first.task {
            return Err(Error::Config(format!("config {} describes a different task than config 1", i + 1)));
        }
    }
    let seeds: Vec<u64> = match seeds {
        Some([]) => return Err(Error::Config("seed list is empty".into())),
        Some(s) => s.to_vec(),
        None => {
            if configs.iter().any(|c| c.train.seed != first.train.seed) {
                return Err(Error::Config(
                    "arms disagree on train.seed; pass an explicit seed list".into(),
                ));
            }
            vec![first.train.seed]
        }
    };
    let task = Task::new(first.task.clone())?;
    let labels = arm_labels(configs);
    let mut runs = Vec::with_capacity(seeds.len() * configs.len());
    for &seed in &seeds {
        for (cfg, label) in configs.iter().zip(&labels) {
            let mut train = cfg.train.clone();
            train.seed = seed;
            let out = run_experiment(&train, &task, None)?;
            runs.push(ArmRun {
                label: label.clone(),
                seed,
                records: out.records,
            });
        }
    }
    Ok(runs)
}

pub fn summarize(runs: &[ArmRun]) -> Vec<ArmSummary> {
    runs.iter()
        .map(|r| ArmSummary {
            arm: r.label.clone(),
            seed: r.seed,
            steps: r.records.len(),
            initial_reward: r.records.first().map(|x| x.mean_reward),
            final_reward: r.final_reward(),
            mean_clip_ratio: r.mean_clip_ratio(),
            final_entropy: r.records.last().map(|x| x.mean_entropy),
        })
        .collect()
}

/// Long-format table: `arm`, `seed`, then every metric field.
pub fn render_compare(runs: &[ArmRun], format: MetricsFormat) -> String {
    let mut out = String::new();
    if format == MetricsFormat::Csv {
        out.push_str("arm,seed,");
        out.push_str(&METRIC_FIELDS.join(","));
        out.push('\n');
    }
    for run in runs {
        for r in &run.records {
            let values = r.rendered_values();
            match format {
                MetricsFormat::Csv => {
                    out.push_str(&format!("{},{},{}\n", run.label, run.seed, values.join(",")));
                }
                MetricsFormat::Jsonl => {
                    let mut pairs: Vec<(&str, String)> = vec![
                        ("arm", format!("\"{}\"", run.label)),
                        ("seed", run.seed.to_string()),
                    ];
                    pairs.extend(METRIC_FIELDS.iter().copied().zip(values));
                    out.push_str(&json_object(&pairs));
                    out.push('\n');
                }
            }
        }
    }
    out
}

/// Prediction quality of the covariance rule at one `eta`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtaSweepRow {
    pub eta: f64,
    pub mean_relative_error: f64,
    pub max_relative_error: f64,
    /// Per instance: `|predicted - measured| / |measured|`.
    pub relative_errors: Vec<f64>,
}

/// `predicted`/`measured` entropy change of the tilting update on one row.
pub fn covariance_prediction(logits: &[f64], adv: &AdvantageVector, eta: f64) -> Result<(f64, f64)> {
    let dist = PolicyDistribution::from_logits(logits)?;
    let predicted = entropy_covariance_delta(&dist, adv, eta)?;
    let measured = tilted_entropy_delta(logits, adv, eta)?;
    Ok((predicted, measured))
}

/// `instances` fixed random rows, each evaluated at every `eta`.
pub fn eta_sweep(instances: usize, etas: &[f64], seed: u64) -> Result<Vec<EtaSweepRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<(Vec<f64>, AdvantageVector)> = (0..instances)
        .map(|_| {
            let n = rng.random_range(MIN_ACTIONS..=MAX_ACTIONS);
            random_instance(&mut rng, n)
        })
        .collect();
    etas.iter()
        .map(|&eta| {
            let errors = cases
                .iter()
                .map(|(l, a)| {
                    let (p, m) = covariance_prediction(l, a, eta)?;
                    Ok((p - m).abs() / m.abs())
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(EtaSweepRow {
                eta,
                mean_relative_error: errors.iter().sum::<f64>() / errors.len().max(1) as f64,
                max_relative_error: errors.iter().copied().fold(0.0, f64::max),
                relative_errors: errors,
            })
        })
        .collect()
}

/// Exact split of one training step's expected-entropy change.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionRow {
    pub step: u64,
    pub mean_reward: f64,
    pub shift_term: f64,
    pub update_term: f64,
    pub total: f64,
    /// `shift_term + update_term - total`.
    pub residual: f64,
}

/// Trains `steps` steps and decomposes the expected-entropy change of each.
pub fn decomposition_trace(config: &ExperimentConfig, steps: u64) -> Result<Vec<DecompositionRow>> {
    config.validate()?;
    let task = Task::new(config.task.clone())?;
    let budget = config.train.context_budget;
    if !task.spec.is_enumerable(budget) {
        return Err(Error::BudgetExceeded {
            needed: task.spec.total_contexts(),
            budget,
        });
    }
    let mut trainer = Trainer::new(config.train.clone(), task)?;
    let mut rows = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let before = trainer.policy().clone();
        let record = trainer.train_step()?;
        let d = entropy_decomposition(&before, trainer.policy(), &config.task, budget)?;
        rows.push(DecompositionRow {
            step: record.step,
            mean_reward: record.mean_reward,
            shift_term: d.shift_term,
            update_term: d.update_term,
            total: d.total,
            residual: d.shift_term + d.update_term - d.total,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicsReport {
    pub eta_sweep: Vec<EtaSweepRow>,
    pub decomposition: Vec<DecompositionRow>,
}

pub const DEFAULT_ETAS: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];

pub fn dynamics_report(
    config: &ExperimentConfig,
    steps: u64,
    instances: usize,
    seed: u64,
) -> Result<DynamicsReport> {
    Ok(DynamicsReport {
        eta_sweep: eta_sweep(instances, &DEFAULT_ETAS, seed)?,
        decomposition: decomposition_trace(config, steps)?,
    })
}

/// CSV of a decomposition trace with full-precision numbers.
pub fn render_decomposition(rows: &[DecompositionRow]) -> String {
    let mut out = String::from("step,mean_reward,shift_term,update_term,total,residual\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            format_f64(r.mean_reward),
            format_f64(r.shift_term),
            format_f64(r.update_term),
            format_f64(r.total),
            format_f64(r.residual)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{TaskKind, TaskSpec};
    use crate::trainer::{Algorithm, TrainConfig};

    fn cfg(alg: Algorithm, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            task: TaskSpec {
                vocab_size: 4,
                answer_length: 2,
                num_prompts: 6,
                task_kind: TaskKind::ModSum,
                seed: 2,
            },
            train: TrainConfig {
                algorithm: alg,
                prompts_per_batch: 4,
                steps: 4,
                seed,
                learning_rate: 0.5,
                ..TrainConfig::default()
            },
            output: Default::default(),
        }
    }

    #[test]
    fn compare_runs_every_arm_and_seed() {
        let runs = run_compare(&[cfg(Algorithm::Tepo, 0), cfg(Algorithm::Grpo, 0)], Some(&[1, 2])).unwrap();
        let keys: Vec<(String, u64)> = runs.iter().map(|r| (r.label.clone(), r.seed)).collect();
        assert_eq!(
            keys,
            vec![
                ("tepo".into(), 1),
                ("grpo".into(), 1),
                ("tepo".into(), 2),
                ("grpo".into(), 2)
            ]
        );
        // Same prompt stream and same snapshot at step 0, so the first rollout matches.
        assert_eq!(runs[0].records[0].mean_reward, runs[1].records[0].mean_reward);
        assert_eq!(runs[0].records[0].groups_retained, runs[1].records[0].groups_retained);
    }

    #[test]
    fn compare_rejects_mismatched_arms() {
        let mut other = cfg(Algorithm::Grpo, 0);
        other.task.seed = 99;
        assert!(run_compare(&[cfg(Algorithm::Tepo, 0), other], None).is_err());
        assert!(run_compare(&[cfg(Algorithm::Tepo, 0), cfg(Algorithm::Grpo, 1)], None).is_err());
        assert!(run_compare(&[], None).is_err());
        assert!(run_compare(&[cfg(Algorithm::Tepo, 0)], Some(&[])).is_err());
    }

    #[test]
    fn duplicate_algorithms_get_distinct_labels() {
        let labels = arm_labels(&[cfg(Algorithm::Tepo, 0), cfg(Algorithm::Tepo, 0), cfg(Algorithm::Grpo, 0)]);
        assert_eq!(labels, vec!["tepo_1", "tepo_2", "grpo"]);
    }

    #[test]
    fn merged_table_shapes() {
        let runs = run_compare(&[cfg(Algorithm::Tepo, 3), cfg(Algorithm::ClipHigher, 3)], None).unwrap();
        let csv = render_compare(&runs, MetricsFormat::Csv);
        assert_eq!(csv.lines().count(), 1 + 8);
        assert!(csv.starts_with("arm,seed,step,"));
        let jsonl = render_compare(&runs, MetricsFormat::Jsonl);
        for line in jsonl.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["arm"].is_string() && v["seed"].as_u64() == Some(3));
        }
        let summary = summarize(&runs);
        assert_eq!(summary.len(), 2);
        assert_eq!(summary[1].arm, "clip_higher");
    }

    #[test]
    fn eta_sweep_errors_shrink() {
        let rows = eta_sweep(10, &[10.0, 100.0, 1000.0], 4).unwrap();
        assert!(rows[1].mean_relative_error < rows[0].mean_relative_error);
        assert!(rows[2].mean_relative_error < rows[1].mean_relative_error);
        assert!(rows.iter().all(|r| r.relative_errors.len() == 10));
    }

    #[test]
    fn decomposition_trace_is_exact() {
        let rows = decomposition_trace(&cfg(Algorithm::Tepo, 1), 6).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.residual.abs() < 1e-12));
        let csv = render_decomposition(&rows);
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn decomposition_needs_enumerable_task() {
        let mut c = cfg(Algorithm::Tepo, 1);
        c.train.context_budget = 5;
        assert!(matches!(decomposition_trace(&c, 1), Err(Error::BudgetExceeded { .. })));
    }
}
