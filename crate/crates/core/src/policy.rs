//! Tabular-context softmax policies.
//!
//! Every context (prompt, position, generated prefix) owns one row of logits.
//! Rows are created lazily: a context that was never written reads as the
//! all-zeros row, i.e. the uniform distribution.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::numfmt::format_f64;

/// Token id, always `< Vocab::size()`.
pub type Token = u32;

/// Number of actions available at every context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocab(usize);

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidVocab(size));
        }
        Ok(Vocab(size))
    }

    pub fn size(self) -> usize {
        self.0
    }
}

/// Generation state: which prompt is being answered and what has been emitted
/// so far. The position is the prefix length.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Context {
    prompt_id: u32,
    prefix: Vec<Token>,
}

impl Context {
    pub fn new(prompt_id: u32, prefix: Vec<Token>) -> Self {
        Context { prompt_id, prefix }
    }

    /// Context before the first answer token.
    pub fn root(prompt_id: u32) -> Self {
        Context::new(prompt_id, Vec::new())
    }

    /// Context reached by emitting `token` from `self`.
    pub fn child(&self, token: Token) -> Self {
        let mut prefix = self.prefix.clone();
        prefix.push(token);
        Context::new(self.prompt_id, prefix)
    }

    pub fn prompt_id(&self) -> u32 {
        self.prompt_id
    }

    pub fn position(&self) -> usize {
        self.prefix.len()
    }

    pub fn prefix(&self) -> &[Token] {
        &self.prefix
    }

    /// Serialized key: `prompt_id/position/t0-t1-...`.
    pub fn key(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/", self.prompt_id, self.prefix.len())?;
        for (i, t) in self.prefix.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for Context {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: &str| Error::InvalidContext {
            context: s.to_string(),
            reason: reason.to_string(),
        };
        let mut parts = s.splitn(3, '/');
        let (Some(p), Some(pos), Some(rest)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected prompt/position/prefix"));
        };
        let prompt_id: u32 = p.parse().map_err(|_| bad("prompt id is not an integer"))?;
        let position: usize = pos.parse().map_err(|_| bad("position is not an integer"))?;
        let prefix = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split('-')
                .map(|t| t.parse::<Token>().map_err(|_| bad("prefix token is not an integer")))
                .collect::<Result<Vec<_>>>()?
        };
        if prefix.len() != position {
            return Err(bad("position does not match prefix length"));
        }
        Ok(Context::new(prompt_id, prefix))
    }
}

/// A normalized distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDistribution {
    probs: Vec<f64>,
}

impl PolicyDistribution {
    /// Wraps probabilities, checking non-negativity and normalization (1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidVocab(probs.len()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(PolicyDistribution { probs })
    }

    /// Max-shifted softmax of a logit row.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::InvalidVocab(logits.len()));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logit row".into()));
        }
        Ok(PolicyDistribution {
            probs: softmax(logits),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// `E_pi[values]`.
    pub fn expectation(&self, values: &[f64]) -> f64 {
        self.probs.iter().zip(values).map(|(p, v)| p * v).sum()
    }
}

/// Numerically stable softmax. Caller guarantees finite input.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// Log-softmax computed as `x - m - ln(sum exp(x - m))`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - m - lse).collect()
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(dist: &PolicyDistribution) -> f64 {
    let h: f64 = -dist
        .probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>();
    // rounding can push a one-hot entropy a hair below zero
    h.max(0.0)
}

/// A gradient (or any additive update) in logit-table coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGradient {
    rows: BTreeMap<Context, Vec<f64>>,
}

impl ParamGradient {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mutable row for `ctx`, zero-initialized to `width` entries.
    pub fn row_mut(&mut self, ctx: &Context, width: usize) -> &mut Vec<f64> {
        if !self.rows.contains_key(ctx) {
            self.rows.insert(ctx.clone(), vec![0.0; width]);
        }
        self.rows.get_mut(ctx).expect("row inserted above")
    }

    pub fn get(&self, ctx: &Context) -> Option<&[f64]> {
        self.rows.get(ctx).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Context, &[f64])> {
        self.rows.iter().map(|(c, v)| (c, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `self += scale * other`, in context order.
    pub fn add_scaled(&mut self, other: &ParamGradient, scale: f64) {
        for (ctx, row) in &other.rows {
            let dst = self.row_mut(ctx, row.len());
            for (d, g) in dst.iter_mut().zip(row) {
                *d += scale * g;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.rows.values_mut() {
            for g in row {
                *g *= factor;
            }
        }
    }

    /// L2 norm over every stored coordinate.
    pub fn l2_norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute coordinate.
    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Sampled answer with its per-token log-probabilities under the sampling
/// policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub tokens: Vec<Token>,
    pub logprobs: Vec<f64>,
}

/// Policy parameters: one logit row per context.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable {
    vocab: Vocab,
    scores: BTreeMap<Context, Vec<f64>>,
}

impl LogitTable {
    /// Empty table; every context reads as uniform.
    pub fn new(vocab: Vocab) -> Self {
        LogitTable {
            vocab,
            scores: BTreeMap::new(),
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn num_actions(&self) -> usize {
        self.vocab.size()
    }

    /// Contexts with an explicitly stored row.
    pub fn stored_contexts(&self) -> impl Iterator<Item = &Context> {
        self.scores.keys()
    }

    pub fn num_stored(&self) -> usize {
        self.scores.len()
    }

    pub fn validate_context(&self, ctx: &Context) -> Result<()> {
        let v = self.vocab.size();
        if let Some(t) = ctx.prefix.iter().find(|t| (**t as usize) >= v) {
            return Err(Error::InvalidContext {
                context: ctx.key(),
                reason: format!("token {t} outside vocabulary of size {v}"),
            });
        }
        Ok(())
    }

    /// Logit row for `ctx`; unseen contexts read as zeros.
    pub fn logits(&self, ctx: &Context) -> Vec<f64> {
        self.scores
            .get(ctx)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab.size()])
    }

    /// Stores a row. The row must be finite and match the vocabulary.
    pub fn set_logits(&mut self, ctx: Context, row: Vec<f64>) -> Result<()> {
        self.validate_context(&ctx)?;
        if row.len() != self.vocab.size() {
            return Err(Error::ShapeMismatch(format!(
                "row for {} has {} entries, vocabulary is {}",
                ctx,
                row.len(),
                self.vocab.size()
            )));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteScore { context: ctx.key() });
        }
        self.scores.insert(ctx, row);
        Ok(())
    }

    /// `phi(ctx, action) += delta`.
    pub fn add_to(&mut self, ctx: &Context, action: Token, delta: f64) -> Result<()> {
        let mut row = self.logits(ctx);
        let slot = row
            .get_mut(action as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("action {action} out of range")))?;
        *slot += delta;
        self.set_logits(ctx.clone(), row)
    }

    /// `phi += step * update`, e.g. one gradient-ascent step.
    pub fn apply(&mut self, update: &ParamGradient, step: f64) -> Result<()> {
        for (ctx, g) in update.iter() {
            let mut row = self.logits(ctx);
            if g.len() != row.len() {
                return Err(Error::ShapeMismatch(format!("update row for {ctx}")));
            }
            for (x, d) in row.iter_mut().zip(g) {
                *x += step * d;
            }
            self.set_logits(ctx.clone(), row)?;
        }
        Ok(())
    }

    /// Distribution over actions at `ctx`.
    pub fn softmax_distribution(&self, ctx: &Context) -> Result<PolicyDistribution> {
        self.validate_context(ctx)?;
        let row = self.logits(ctx);
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteScore { context: ctx.key() });
        }
        PolicyDistribution::from_logits(&row)
    }

    /// `log pi(token | ctx)`.
    pub fn log_prob(&self, ctx: &Context, token: Token) -> Result<f64> {
        self.validate_context(ctx)?;
        let row = self.logits(ctx);
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteScore { context: ctx.key() });
        }
        log_softmax(&row)
            .get(token as usize)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("token {token} out of range")))
    }

    /// Draws `length` tokens autoregressively at temperature 1.
    ///
    /// Step `t` conditions on `(prompt_id, t, tokens[..t])`. Uses one uniform
    /// draw per token (inverse CDF), so the output is a pure function of the
    /// table and the generator state.
    pub fn sample_sequence<R: Rng + ?Sized>(
        &self,
        prompt_id: u32,
        length: usize,
        rng: &mut R,
    ) -> Result<SampledSequence> {
        if length == 0 {
            return Err(Error::InvalidArgument("sequence length must be >= 1".into()));
        }
        let mut ctx = Context::root(prompt_id);
        let mut tokens = Vec::with_capacity(length);
        let mut logprobs = Vec::with_capacity(length);
        for _ in 0..length {
            let row = self.logits(&ctx);
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteScore { context: ctx.key() });
            }
            let probs = softmax(&row);
            let u: f64 = rng.random();
            let token = inverse_cdf(&probs, u);
            logprobs.push(log_softmax(&row)[token]);
            tokens.push(token as Token);
            ctx = ctx.child(token as Token);
        }
        Ok(SampledSequence { tokens, logprobs })
    }

    /// Serializes the table as a JSON checkpoint with 17-digit numbers.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        out.push_str("{\n");
        out.push_str(&format!("  \"format\": \"{CHECKPOINT_FORMAT}\",\n"));
        out.push_str(&format!("  \"version\": {CHECKPOINT_VERSION},\n"));
        out.push_str(&format!("  \"vocab_size\": {},\n", self.vocab.size()));
        out.push_str("  \"contexts\": {");
        for (i, (ctx, row)) in self.scores.iter().enumerate() {
            out.push_str(if i == 0 { "\n" } else { ",\n" });
            let values: Vec<String> = row.iter().map(|x| format_f64(*x)).collect();
            out.push_str(&format!("    \"{}\": [{}]", ctx.key(), values.join(", ")));
        }
        if !self.scores.is_empty() {
            out.push_str("\n  ");
        }
        out.push_str("}\n}\n");
        out
    }

    pub fn from_checkpoint_str(text: &str, origin: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            message,
        };
        let doc: CheckpointDoc =
            serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(parse_err(format!("unknown checkpoint format {:?}", doc.format)));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(parse_err(format!("unsupported version {}", doc.version)));
        }
        let mut table = LogitTable::new(Vocab::new(doc.vocab_size)?);
        for (key, row) in doc.contexts {
            let ctx: Context = key.parse()?;
            table.set_logits(ctx, row)?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text, path)
    }
}

const CHECKPOINT_FORMAT: &str = "cfpo-logit-table";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format: String,
    version: u32,
    vocab_size: usize,
    contexts: BTreeMap<String, Vec<f64>>,
}

fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    last_positive
}
