//! Group-relative advantages, the mixed-outcome group filter and the
//! broadcast of sequence advantages onto tokens.

use crate::error::{Error, Result};
use crate::policy::Token;

/// Default denominator floor for the group standard deviation.
pub const DEFAULT_STD_FLOOR: f64 = 1e-8;

/// One sampled answer plus the log-probabilities recorded while sampling it.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub tokens: Vec<Token>,
    /// Per-token `log pi_old`, frozen at rollout time.
    pub old_logprobs: Vec<f64>,
}

/// `K` responses to one prompt with their rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompt_id: u32,
    pub responses: Vec<Response>,
    pub rewards: Vec<f64>,
}

impl Group {
    pub fn new(prompt_id: u32, responses: Vec<Response>, rewards: Vec<f64>) -> Result<Self> {
        if responses.len() != rewards.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} responses but {} rewards",
                responses.len(),
                rewards.len()
            )));
        }
        if responses.len() < 2 {
            return Err(Error::InvalidArgument("a group needs at least 2 responses".into()));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("reward in group for prompt {prompt_id}")));
        }
        Ok(Group {
            prompt_id,
            responses,
            rewards,
        })
    }

    pub fn size(&self) -> usize {
        self.responses.len()
    }

    /// Responses whose binary reward is 1.
    pub fn successes(&self) -> usize {
        self.rewards.iter().filter(|r| **r == 1.0).count()
    }
}

/// Sequence- and token-level advantages of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub per_sequence: Vec<f64>,
    pub per_token: Vec<Vec<f64>>,
}

impl AdvantageSet {
    /// Normalizes the group's rewards and broadcasts them over full masks.
    pub fn for_group(group: &Group, std_floor: f64) -> Result<Self> {
        let per_sequence = group_advantage(&group.rewards, std_floor)?;
        let masks: Vec<Vec<bool>> = group
            .responses
            .iter()
            .map(|r| vec![true; r.tokens.len()])
            .collect();
        let lengths: Vec<usize> = masks.iter().map(Vec::len).collect();
        let per_token = broadcast(&per_sequence, &lengths, &masks)?;
        Ok(AdvantageSet {
            per_sequence,
            per_token,
        })
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divides by `n`).
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// `A_i = (r_i - mean r) / max(std r, std_floor)`.
///
/// A group whose rewards are all identical gets all-zero advantages.
pub fn group_advantage(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "group advantage needs >= 2 rewards, got {}",
            rewards.len()
        )));
    }
    if !(std_floor > 0.0) {
        return Err(Error::InvalidArgument(format!("std_floor must be > 0, got {std_floor}")));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward".into()));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let m = mean(rewards);
    let denom = population_std(rewards).max(std_floor);
    Ok(rewards.iter().map(|r| (r - m) / denom).collect())
}

/// Keeps groups with mixed binary outcomes: `0 < successes < K`.
pub fn filter_groups(groups: Vec<Group>) -> Vec<Group> {
    groups
        .into_iter()
        .filter(|g| {
            let s = g.successes();
            s > 0 && s < g.size()
        })
        .collect()
}

/// Copies `adv[i]` onto every masked-in token of sequence `i`; masked-out
/// tokens get 0.
pub fn broadcast(adv: &[f64], lengths: &[usize], masks: &[Vec<bool>]) -> Result<Vec<Vec<f64>>> {
    if adv.len() != lengths.len() || adv.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} advantages, {} lengths, {} masks",
            adv.len(),
            lengths.len(),
            masks.len()
        )));
    }
    adv.iter()
        .zip(lengths)
        .zip(masks)
        .enumerate()
        .map(|(i, ((a, len), mask))| {
            if mask.len() != *len {
                return Err(Error::ShapeMismatch(format!(
                    "sequence {i}: length {len} but mask has {} entries",
                    mask.len()
                )));
            }
            Ok(mask.iter().map(|m| if *m { *a } else { 0.0 }).collect())
        })
        .collect()
}

/// All-true masks for the given lengths.
pub fn full_masks(lengths: &[usize]) -> Vec<Vec<bool>> {
    lengths.iter().map(|n| vec![true; *n]).collect()
}
