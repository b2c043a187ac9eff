//! Entropy-evolution diagnostics.
//!
//! * covariance prediction of the per-state entropy change under the
//!   tilting update `phi += A / eta`;
//! * exact split of the expected-entropy change between two policies into a
//!   state-distribution-shift part and a policy-update part, evaluated over
//!   the full (enumerable) context tree;
//! * the per-sequence centered covariance of advantages and log-likelihoods.

use std::collections::BTreeMap;

use crate::calculus::AdvantageVector;
use crate::env::{canonical_answer, Task, TaskSpec};
use crate::error::{Error, Result};
use crate::policy::{entropy, Context, LogitTable, PolicyDistribution, Token};

/// Visitation probabilities `d^pi(s)` over generation contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDistribution {
    weights: BTreeMap<Context, f64>,
}

impl StateDistribution {
    pub fn weights(&self) -> &BTreeMap<Context, f64> {
        &self.weights
    }

    pub fn weight(&self, ctx: &Context) -> f64 {
        self.weights.get(ctx).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.weights.values().sum()
    }

    /// `E_{s ~ d}[f(s)]`, summed in context order.
    pub fn expectation<F>(&self, mut f: F) -> Result<f64>
    where
        F: FnMut(&Context) -> Result<f64>,
    {
        let mut acc = 0.0;
        for (ctx, w) in &self.weights {
            acc += w * f(ctx)?;
        }
        Ok(acc)
    }

    /// Expected per-context entropy of `table` under this distribution.
    pub fn expected_entropy(&self, table: &LogitTable) -> Result<f64> {
        self.expectation(|ctx| Ok(entropy(&table.softmax_distribution(ctx)?)))
    }
}

/// Exact visitation distribution: prompts uniform, positions uniform, prefixes
/// weighted by their probability under `table`. Contexts with zero
/// probability are omitted.
pub fn state_distribution(
    table: &LogitTable,
    spec: &TaskSpec,
    budget: usize,
) -> Result<StateDistribution> {
    spec.validate()?;
    let needed = spec.total_contexts();
    if needed > budget as u128 {
        return Err(Error::BudgetExceeded { needed, budget });
    }
    if table.num_actions() != spec.vocab_size {
        return Err(Error::ShapeMismatch(format!(
            "table vocabulary {} vs task vocabulary {}",
            table.num_actions(),
            spec.vocab_size
        )));
    }
    let scale = 1.0 / (spec.num_prompts as f64 * spec.answer_length as f64);
    let mut weights = BTreeMap::new();
    for p in 0..spec.num_prompts as u32 {
        let mut stack = vec![(Context::root(p), 1.0f64)];
        while let Some((ctx, prob)) = stack.pop() {
            if ctx.position() + 1 < spec.answer_length {
                let d = table.softmax_distribution(&ctx)?;
                for (t, q) in d.probs().iter().enumerate() {
                    let next = prob * q;
                    if next > 0.0 {
                        stack.push((ctx.child(t as Token), next));
                    }
                }
            }
            weights.insert(ctx, prob * scale);
        }
    }
    Ok(StateDistribution { weights })
}

/// `Cov_{a ~ pi}(log pi(a), A(a))`.
pub fn logprob_advantage_covariance(dist: &PolicyDistribution, adv: &AdvantageVector) -> Result<f64> {
    if dist.len() != adv.len() {
        return Err(Error::ShapeMismatch("advantage vs distribution".into()));
    }
    let mut e_la = 0.0;
    let mut e_l = 0.0;
    for (p, a) in dist.probs().iter().zip(adv.values()) {
        if *p > 0.0 {
            let l = p.ln();
            e_la += p * l * a;
            e_l += p * l;
        }
    }
    Ok(e_la - e_l * dist.expectation(adv.values()))
}

/// Predicted entropy change `-(1/eta) Cov(log pi, A)`.
pub fn entropy_covariance_delta(
    dist: &PolicyDistribution,
    adv: &AdvantageVector,
    eta: f64,
) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be > 0, got {eta}")));
    }
    Ok(-logprob_advantage_covariance(dist, adv)? / eta)
}

/// Measured entropy change after `phi += A / eta`.
pub fn tilted_entropy_delta(logits: &[f64], adv: &AdvantageVector, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be > 0, got {eta}")));
    }
    if logits.len() != adv.len() {
        return Err(Error::ShapeMismatch("advantage vs logits".into()));
    }
    let before = PolicyDistribution::from_logits(logits)?;
    let moved: Vec<f64> = logits.iter().zip(adv.values()).map(|(x, a)| x + a / eta).collect();
    let after = PolicyDistribution::from_logits(&moved)?;
    Ok(entropy(&after) - entropy(&before))
}

/// Expected-entropy change split into shift and update parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyDecomposition {
    /// `E_{d_k1}[H(pi_k1)] - E_{d_k}[H(pi_k1)]`
    pub shift_term: f64,
    /// `E_{d_k}[H(pi_k1)] - E_{d_k}[H(pi_k)]`
    pub update_term: f64,
    /// `E_{d_k1}[H(pi_k1)] - E_{d_k}[H(pi_k)]`
    pub total: f64,
}

pub fn entropy_decomposition(
    table_k: &LogitTable,
    table_k1: &LogitTable,
    spec: &TaskSpec,
    budget: usize,
) -> Result<EntropyDecomposition> {
    let d_k = state_distribution(table_k, spec, budget)?;
    let d_k1 = state_distribution(table_k1, spec, budget)?;
    let new_on_new = d_k1.expected_entropy(table_k1)?;
    let new_on_old = d_k.expected_entropy(table_k1)?;
    let old_on_old = d_k.expected_entropy(table_k)?;
    Ok(EntropyDecomposition {
        shift_term: new_on_new - new_on_old,
        update_term: new_on_old - old_on_old,
        total: new_on_new - old_on_old,
    })
}

/// Centered products of sequence advantages and sequence log-likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub per_sequence: Vec<f64>,
    pub group_mean: f64,
}

/// `Cov(y_i) = (A_i - mean A)(log pi(y_i) - mean log pi)`.
pub fn sequence_covariance(advantages: &[f64], seq_logprobs: &[f64]) -> Result<CovarianceReport> {
    if advantages.len() != seq_logprobs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} advantages vs {} log-likelihoods",
            advantages.len(),
            seq_logprobs.len()
        )));
    }
    let n = advantages.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "sequence covariance needs >= 2 sequences, got {n}"
        )));
    }
    let ma = advantages.iter().sum::<f64>() / n as f64;
    let ml = seq_logprobs.iter().sum::<f64>() / n as f64;
    let per_sequence: Vec<f64> = advantages
        .iter()
        .zip(seq_logprobs)
        .map(|(a, l)| (a - ma) * (l - ml))
        .collect();
    let group_mean = per_sequence.iter().sum::<f64>() / n as f64;
    Ok(CovarianceReport {
        per_sequence,
        group_mean,
    })
}

/// Exact probability that `table` answers a uniformly drawn prompt of `task`
/// correctly.
pub fn expected_reward(table: &LogitTable, task: &Task) -> Result<f64> {
    let mut total = 0.0;
    for prompt in &task.prompts {
        let mut ctx = Context::root(prompt.prompt_id);
        let mut p = 1.0;
        for tok in canonical_answer(&task.spec, prompt) {
            p *= table.log_prob(&ctx, tok)?.exp();
            ctx = ctx.child(tok);
        }
        total += p;
    }
    Ok(total / task.prompts.len() as f64)
}
