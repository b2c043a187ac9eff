//! The rollout / filter / multi-update training loop.
//!
//! Every step freezes a snapshot of the live table, samples `G` responses per
//! prompt from it, drops groups without mixed outcomes and then takes
//! `updates_per_rollout` plain gradient-ascent steps against that snapshot.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{filter_groups, Group, Response, DEFAULT_STD_FLOOR};
use crate::dynamics::state_distribution;
use crate::env::{Task, DEFAULT_CONTEXT_BUDGET};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::objective::{
    kl_divergence, ClipConfig, ISVariant, LossReport, Objective, RegularizerConfig, RolloutBatch,
};
use crate::policy::{entropy, Context, LogitTable};

/// Default entropy-bonus coefficient of the `tepo_maxent` preset.
pub const DEFAULT_MAXENT_COEF: f64 = 0.01;
/// Default KL-penalty coefficient of the `tepo_kl` preset.
pub const DEFAULT_KL_COEF: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Tepo,
    Grpo,
    ClipHigher,
    PrefixIs,
    ReinforceIs,
    TepoMaxent,
    TepoKl,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Tepo,
        Algorithm::Grpo,
        Algorithm::ClipHigher,
        Algorithm::PrefixIs,
        Algorithm::ReinforceIs,
        Algorithm::TepoMaxent,
        Algorithm::TepoKl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Tepo => "tepo",
            Algorithm::Grpo => "grpo",
            Algorithm::ClipHigher => "clip_higher",
            Algorithm::PrefixIs => "prefix_is",
            Algorithm::ReinforceIs => "reinforce_is",
            Algorithm::TepoMaxent => "tepo_maxent",
            Algorithm::TepoKl => "tepo_kl",
        }
    }

    pub fn variant(self) -> ISVariant {
        match self {
            Algorithm::Tepo | Algorithm::TepoMaxent | Algorithm::TepoKl => ISVariant::SequenceGeomean,
            Algorithm::Grpo | Algorithm::ClipHigher => ISVariant::TokenLevel,
            Algorithm::PrefixIs => ISVariant::PrefixGeomean,
            Algorithm::ReinforceIs => ISVariant::ReinforceStopgrad,
        }
    }

    pub fn default_clip(self) -> ClipConfig {
        match self {
            Algorithm::ClipHigher => ClipConfig::clip_higher(),
            _ => ClipConfig::standard(),
        }
    }

    pub fn default_entropy_coef(self) -> f64 {
        match self {
            Algorithm::TepoMaxent => DEFAULT_MAXENT_COEF,
            _ => 0.0,
        }
    }

    pub fn default_kl_coef(self) -> f64 {
        match self {
            Algorithm::TepoKl => DEFAULT_KL_COEF,
            _ => 0.0,
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

fn default_algorithm() -> Algorithm {
    Algorithm::Tepo
}
fn default_group_size() -> usize {
    8
}
fn default_prompts_per_batch() -> usize {
    16
}
fn default_updates() -> usize {
    8
}
fn default_lr() -> f64 {
    0.05
}
fn default_steps() -> u64 {
    500
}
fn default_std_floor() -> f64 {
    DEFAULT_STD_FLOOR
}
fn default_budget() -> usize {
    DEFAULT_CONTEXT_BUDGET
}

/// Training hyperparameters. Unset `clip`, `entropy_coef` and `kl_coef`
/// fall back to the algorithm's preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_prompts_per_batch")]
    pub prompts_per_batch: usize,
    #[serde(default = "default_updates")]
    pub updates_per_rollout: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<ClipConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_coef: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_coef: Option<f64>,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_std_floor")]
    pub std_floor: f64,
    /// Retained groups per inner update; unset means all at once.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mini_batch_groups: Option<usize>,
    /// Largest context count for which entropy and KL are computed exactly.
    #[serde(default = "default_budget")]
    pub context_budget: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: default_algorithm(),
            group_size: default_group_size(),
            prompts_per_batch: default_prompts_per_batch(),
            updates_per_rollout: default_updates(),
            learning_rate: default_lr(),
            clip: None,
            entropy_coef: None,
            kl_coef: None,
            steps: default_steps(),
            seed: 0,
            std_floor: default_std_floor(),
            mini_batch_groups: None,
            context_budget: default_budget(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.prompts_per_batch < 1 {
            return bad("prompts_per_batch must be >= 1".into());
        }
        if self.updates_per_rollout < 1 {
            return bad("updates_per_rollout must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.std_floor > 0.0) {
            return bad(format!("std_floor must be > 0, got {}", self.std_floor));
        }
        if self.mini_batch_groups == Some(0) {
            return bad("mini_batch_groups must be >= 1".into());
        }
        for (name, v) in [("entropy_coef", self.entropy_coef), ("kl_coef", self.kl_coef)] {
            if let Some(c) = v {
                if !(c >= 0.0) || !c.is_finite() {
                    return bad(format!("{name} must be a finite value >= 0, got {c}"));
                }
            }
        }
        self.clip_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn clip_config(&self) -> ClipConfig {
        self.clip.unwrap_or_else(|| self.algorithm.default_clip())
    }

    pub fn entropy_coef(&self) -> f64 {
        self.entropy_coef.unwrap_or_else(|| self.algorithm.default_entropy_coef())
    }

    pub fn kl_coef(&self) -> f64 {
        self.kl_coef.unwrap_or_else(|| self.algorithm.default_kl_coef())
    }
}

/// How `mean_entropy` and `kl_to_reference` were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Expectation under the enumerated state distribution.
    Exact,
    /// Mean over the distinct contexts visited by the rollout.
    Empirical,
}

const PROMPT_STREAM: u64 = u64::MAX;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, step, slot)`.
pub fn stream_rng(seed: u64, step: u64, slot: u64) -> ChaCha8Rng {
    let s = splitmix(splitmix(splitmix(seed) ^ step) ^ slot);
    ChaCha8Rng::seed_from_u64(s)
}

/// Samples `prompts_per_batch` distinct prompts and `G` responses for each
/// from `snapshot`.
///
/// Prompt choice uses its own stream and each group slot another, so the
/// prompts of a step depend only on `(seed, step)` and never on the policy.
pub fn rollout_groups(
    snapshot: &LogitTable,
    task: &Task,
    config: &TrainConfig,
    step: u64,
) -> Result<Vec<Group>> {
    let n = task.prompts.len();
    if config.prompts_per_batch > n {
        return Err(Error::Config(format!(
            "prompts_per_batch {} exceeds the task's {} prompts",
            config.prompts_per_batch, n
        )));
    }
    if snapshot.num_actions() != task.spec.vocab_size {
        return Err(Error::ShapeMismatch(format!(
            "policy vocabulary {} vs task vocabulary {}",
            snapshot.num_actions(),
            task.spec.vocab_size
        )));
    }
    let mut prompt_rng = stream_rng(config.seed, step, PROMPT_STREAM);
    let picks = index::sample(&mut prompt_rng, n, config.prompts_per_batch);
    picks
        .into_iter()
        .enumerate()
        .map(|(slot, p)| {
            let prompt_id = p as u32;
            let mut rng = stream_rng(config.seed, step, slot as u64);
            let mut responses = Vec::with_capacity(config.group_size);
            let mut rewards = Vec::with_capacity(config.group_size);
            for _ in 0..config.group_size {
                let s = snapshot.sample_sequence(prompt_id, task.spec.answer_length, &mut rng)?;
                rewards.push(task.reward(prompt_id, &s.tokens)?);
                responses.push(Response {
                    tokens: s.tokens,
                    old_logprobs: s.logprobs,
                });
            }
            Group::new(prompt_id, responses, rewards)
        })
        .collect()
}

fn distinct_contexts(groups: &[Group]) -> Vec<Context> {
    let mut set = std::collections::BTreeSet::new();
    for g in groups {
        for r in &g.responses {
            let mut ctx = Context::root(g.prompt_id);
            for tok in &r.tokens {
                let next = ctx.child(*tok);
                set.insert(ctx);
                ctx = next;
            }
        }
    }
    set.into_iter().collect()
}

/// Live policy, frozen reference, task and step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    task: Task,
    objective: Objective,
    policy: LogitTable,
    reference: LogitTable,
    step: u64,
}

impl Trainer {
    /// Starts from the uniform policy, which also serves as KL reference.
    pub fn new(config: TrainConfig, task: Task) -> Result<Self> {
        let table = LogitTable::new(task.spec.vocab()?);
        Self::with_policy(config, task, table)
    }

    pub fn with_policy(config: TrainConfig, task: Task, policy: LogitTable) -> Result<Self> {
        config.validate()?;
        task.spec.validate()?;
        if config.prompts_per_batch > task.prompts.len() {
            return Err(Error::Config(format!(
                "prompts_per_batch {} exceeds num_prompts {}",
                config.prompts_per_batch,
                task.prompts.len()
            )));
        }
        if policy.num_actions() != task.spec.vocab_size {
            return Err(Error::ShapeMismatch(format!(
                "policy vocabulary {} vs task vocabulary {}",
                policy.num_actions(),
                task.spec.vocab_size
            )));
        }
        let kl_coef = config.kl_coef();
        let regularizers = RegularizerConfig {
            entropy_coef: config.entropy_coef(),
            kl_coef,
            reference: (kl_coef > 0.0).then(|| policy.clone()),
        };
        let objective = Objective::new(config.algorithm.variant(), config.clip_config(), regularizers)?;
        Ok(Trainer {
            reference: policy.clone(),
            config,
            task,
            objective,
            policy,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn policy(&self) -> &LogitTable {
        &self.policy
    }

    pub fn reference(&self) -> &LogitTable {
        &self.reference
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn entropy_mode(&self) -> EntropyMode {
        if self.task.spec.is_enumerable(self.config.context_budget) {
            EntropyMode::Exact
        } else {
            EntropyMode::Empirical
        }
    }

    fn policy_statistics(&self, snapshot: &LogitTable, groups: &[Group]) -> Result<(f64, f64)> {
        let kl_at = |ctx: &Context| -> Result<f64> {
            kl_divergence(
                &snapshot.softmax_distribution(ctx)?,
                &self.reference.softmax_distribution(ctx)?,
            )
        };
        match self.entropy_mode() {
            EntropyMode::Exact => {
                let d = state_distribution(snapshot, &self.task.spec, self.config.context_budget)?;
                let h = d.expected_entropy(snapshot)?;
                let kl = d.expectation(kl_at)?;
                Ok((h, kl))
            }
            EntropyMode::Empirical => {
                let contexts = distinct_contexts(groups);
                let n = contexts.len().max(1) as f64;
                let mut h = 0.0;
                let mut kl = 0.0;
                for ctx in &contexts {
                    h += entropy(&snapshot.softmax_distribution(ctx)?);
                    kl += kl_at(ctx)?;
                }
                Ok((h / n, kl / n))
            }
        }
    }

    /// One rollout phase followed by `updates_per_rollout` ascent steps.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let snapshot = self.policy.clone();
        let groups = rollout_groups(&snapshot, &self.task, &self.config, self.step)?;
        let total: usize = groups.iter().map(Group::size).sum();
        let mean_reward = groups.iter().flat_map(|g| g.rewards.iter()).sum::<f64>() / total as f64;
        let (mean_entropy, kl_to_reference) = self.policy_statistics(&snapshot, &groups)?;

        let retained = filter_groups(groups);
        let mut record = MetricsRecord {
            step: self.step,
            mean_reward,
            mean_entropy,
            grad_norm: 0.0,
            clip_ratio: 0.0,
            mean_is: 1.0,
            kl_to_reference,
            groups_retained: retained.len() as u64,
        };

        if !retained.is_empty() {
            let chunk = self.config.mini_batch_groups.unwrap_or(retained.len());
            let mut batches = retained
                .chunks(chunk)
                .map(|c| RolloutBatch::from_groups(c, self.config.std_floor))
                .collect::<Result<Vec<_>>>()?;
            let mut last: Option<LossReport> = None;
            for _ in 0..self.config.updates_per_rollout {
                for batch in batches.iter_mut() {
                    batch.refresh(&self.policy)?;
                    let report = self.objective.evaluate(batch, &self.policy)?;
                    if !report.loss.is_finite() {
                        return Err(Error::NonFinite(format!("objective at step {}", self.step)));
                    }
                    self.policy.apply(&report.param_gradient, self.config.learning_rate)?;
                    last = Some(report);
                }
            }
            if let Some(report) = last {
                record.grad_norm = report.param_gradient.l2_norm();
                record.clip_ratio = report.clip_ratio;
                record.mean_is = report.mean_is;
            }
        }

        self.step += 1;
        Ok(record)
    }

    /// Runs the configured number of steps from the current state.
    pub fn run(&mut self) -> Result<Vec<MetricsRecord>> {
        (0..self.config.steps).map(|_| self.train_step()).collect()
    }
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<MetricsRecord>,
    pub policy: LogitTable,
    pub entropy_mode: EntropyMode,
}

/// Trains from the uniform policy for `config.steps` steps and, if a path is
/// given, writes the final policy checkpoint there.
pub fn run_experiment(
    config: &TrainConfig,
    task: &Task,
    checkpoint: Option<&Path>,
) -> Result<ExperimentOutcome> {
    let mut trainer = Trainer::new(config.clone(), task.clone())?;
    let records = trainer.run()?;
    if let Some(path) = checkpoint {
        trainer.policy().save(path)?;
    }
    Ok(ExperimentOutcome {
        records,
        entropy_mode: trainer.entropy_mode(),
        policy: trainer.policy,
    })
}
