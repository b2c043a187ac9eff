//! Synthetic tasks with exactly checkable answers.
//!
//! `mod_sum`: each prompt carries two operands `a, b < V`; the single correct
//! answer is `(a + b) mod V^L` written as `L` base-`V` digits, most
//! significant first. Reward is 1 for an exact match, 0 otherwise, so a
//! uniform policy succeeds with probability `V^-L`.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Context, Token, Vocab};

/// Default cap on contexts visited by exact enumeration.
pub const DEFAULT_CONTEXT_BUDGET: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    ModSum,
}

/// Task definition as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub answer_length: usize,
    pub num_prompts: usize,
    #[serde(default)]
    pub task_kind: TaskKind,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        Vocab::new(self.vocab_size)?;
        if self.answer_length < 1 {
            return Err(Error::Config("answer_length must be >= 1".into()));
        }
        if self.num_prompts < 1 {
            return Err(Error::Config("num_prompts must be >= 1".into()));
        }
        let pairs = (self.vocab_size as u128) * (self.vocab_size as u128);
        if self.num_prompts as u128 > pairs {
            return Err(Error::Config(format!(
                "num_prompts {} exceeds the {} distinct operand pairs",
                self.num_prompts, pairs
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size)
    }

    /// Contexts per prompt: `sum_{t < L} V^t`.
    pub fn contexts_per_prompt(&self) -> u128 {
        let v = self.vocab_size as u128;
        let mut total: u128 = 0;
        let mut level: u128 = 1;
        for _ in 0..self.answer_length {
            total = total.saturating_add(level);
            level = level.saturating_mul(v);
        }
        total
    }

    pub fn total_contexts(&self) -> u128 {
        self.contexts_per_prompt().saturating_mul(self.num_prompts as u128)
    }

    pub fn is_enumerable(&self, budget: usize) -> bool {
        self.total_contexts() <= budget as u128
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prompt {
    pub prompt_id: u32,
    pub operands: (Token, Token),
}

/// Draws `num_prompts` distinct operand pairs, deterministically from `seed`.
pub fn generate_prompts(spec: &TaskSpec) -> Result<Vec<Prompt>> {
    spec.validate()?;
    let v = spec.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let picks = index::sample(&mut rng, v * v, spec.num_prompts);
    Ok(picks
        .into_iter()
        .enumerate()
        .map(|(i, pair)| Prompt {
            prompt_id: i as u32,
            operands: ((pair / v) as Token, (pair % v) as Token),
        })
        .collect())
}

/// The unique rewarded response for `prompt`.
pub fn canonical_answer(spec: &TaskSpec, prompt: &Prompt) -> Vec<Token> {
    let v = spec.vocab_size as u64;
    let mut s = prompt.operands.0 as u64 + prompt.operands.1 as u64;
    let mut digits = vec![0 as Token; spec.answer_length];
    for d in digits.iter_mut().rev() {
        *d = (s % v) as Token;
        s /= v;
    }
    digits
}

/// 1.0 iff `response` equals the canonical answer token by token.
pub fn evaluate_reward(spec: &TaskSpec, prompt: &Prompt, response: &[Token]) -> Result<f64> {
    if response.len() != spec.answer_length {
        return Err(Error::InvalidArgument(format!(
            "response has {} tokens, task expects {}",
            response.len(),
            spec.answer_length
        )));
    }
    Ok(if response == canonical_answer(spec, prompt).as_slice() {
        1.0
    } else {
        0.0
    })
}

/// Every context reachable while generating, prompt-major, depth-first.
pub fn enumerate_contexts(spec: &TaskSpec, budget: usize) -> Result<Vec<Context>> {
    spec.validate()?;
    let needed = spec.total_contexts();
    if needed > budget as u128 {
        return Err(Error::BudgetExceeded { needed, budget });
    }
    let mut out = Vec::with_capacity(needed as usize);
    for p in 0..spec.num_prompts as u32 {
        let mut stack = vec![Context::root(p)];
        while let Some(ctx) = stack.pop() {
            if ctx.position() + 1 < spec.answer_length {
                for t in (0..spec.vocab_size as Token).rev() {
                    stack.push(ctx.child(t));
                }
            }
            out.push(ctx);
        }
    }
    Ok(out)
}

/// A task spec together with its generated prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub prompts: Vec<Prompt>,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        let prompts = generate_prompts(&spec)?;
        Ok(Task { spec, prompts })
    }

    pub fn reward(&self, prompt_id: u32, response: &[Token]) -> Result<f64> {
        let prompt = self
            .prompts
            .get(prompt_id as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown prompt {prompt_id}")))?;
        evaluate_reward(&self.spec, prompt, response)
    }
}
