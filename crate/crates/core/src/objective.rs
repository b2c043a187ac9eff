//! Surrogate objectives over a rollout batch.
//!
//! Every objective here is written in *maximize* form:
//!
//! ```text
//! L = (1 / total_mask) * sum_{i,t} mask_it * min(rho_it * A_it, clip(rho_it, 1 - eps_low, 1 + eps_high) * A_it)
//! ```
//!
//! The ratio `rho` depends on the [`ISVariant`]:
//!
//! * `SequenceGeomean` - one ratio per sequence, the geometric mean of its
//!   token ratios, shared by every token of the sequence.
//! * `TokenLevel` - the usual per-token ratio.
//! * `PrefixGeomean` - running geometric mean over the prefix ending at `t`.
//! * `ReinforceStopgrad` - `c_i * A * log pi` with the sequence ratio `c_i`
//!   frozen as a constant.
//!
//! Gradients are analytic. They are formed with respect to the per-token new
//! log-probabilities first and then chained through the softmax of each
//! context row into logit-table coordinates.

use std::collections::{BTreeMap, BTreeSet};

use crate::advantage::{AdvantageSet, Group};
use crate::error::{Error, Result};
use crate::policy::{entropy, Context, LogitTable, ParamGradient, PolicyDistribution, Token};

/// Diagnostics key for the fraction of masked-in tokens on the clipped branch.
pub const DIAG_CLIP_RATIO: &str = "clip_ratio";
/// Diagnostics key for the mean importance ratio over masked-in tokens.
pub const DIAG_MEAN_IS: &str = "mean_is";
/// Diagnostics key for the (coefficient-weighted) entropy bonus.
pub const DIAG_ENTROPY_BONUS: &str = "entropy_bonus";
/// Diagnostics key for the (coefficient-weighted) KL penalty.
pub const DIAG_KL_PENALTY: &str = "kl_penalty";

/// One sampled sequence with everything a loss needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub contexts: Vec<Context>,
    pub tokens: Vec<Token>,
    pub old_logprobs: Vec<f64>,
    pub new_logprobs: Vec<f64>,
    pub mask: Vec<bool>,
    pub advantages: Vec<f64>,
}

impl SequenceRecord {
    /// Builds the record for an answer to `prompt_id`. The new log-probs
    /// start equal to the old ones.
    pub fn new(
        prompt_id: u32,
        tokens: Vec<Token>,
        old_logprobs: Vec<f64>,
        mask: Vec<bool>,
        advantages: Vec<f64>,
    ) -> Result<Self> {
        let n = tokens.len();
        if old_logprobs.len() != n || mask.len() != n || advantages.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "sequence of {n} tokens has {} old log-probs, {} mask entries, {} advantages",
                old_logprobs.len(),
                mask.len(),
                advantages.len()
            )));
        }
        let mut contexts = Vec::with_capacity(n);
        let mut ctx = Context::root(prompt_id);
        for t in &tokens {
            contexts.push(ctx.clone());
            ctx = ctx.child(*t);
        }
        Ok(SequenceRecord {
            contexts,
            tokens,
            new_logprobs: old_logprobs.clone(),
            old_logprobs,
            mask,
            advantages,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `|y_i|`: number of masked-in tokens.
    pub fn masked_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Token sequences with old/new log-probabilities, masks and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    sequences: Vec<SequenceRecord>,
}

impl RolloutBatch {
    pub fn new(sequences: Vec<SequenceRecord>) -> Result<Self> {
        for (i, s) in sequences.iter().enumerate() {
            let n = s.tokens.len();
            if s.contexts.len() != n
                || s.old_logprobs.len() != n
                || s.new_logprobs.len() != n
                || s.mask.len() != n
                || s.advantages.len() != n
            {
                return Err(Error::ShapeMismatch(format!("sequence {i} has misaligned fields")));
            }
        }
        Ok(RolloutBatch { sequences })
    }

    /// Flattens retained groups into a batch, with group-normalized
    /// advantages broadcast over every token.
    pub fn from_groups(groups: &[Group], std_floor: f64) -> Result<Self> {
        let mut sequences = Vec::new();
        for g in groups {
            let adv = AdvantageSet::for_group(g, std_floor)?;
            for (resp, per_token) in g.responses.iter().zip(adv.per_token) {
                sequences.push(SequenceRecord::new(
                    g.prompt_id,
                    resp.tokens.clone(),
                    resp.old_logprobs.clone(),
                    vec![true; resp.tokens.len()],
                    per_token,
                )?);
            }
        }
        RolloutBatch::new(sequences)
    }

    pub fn sequences(&self) -> &[SequenceRecord] {
        &self.sequences
    }

    pub fn sequences_mut(&mut self) -> &mut [SequenceRecord] {
        &mut self.sequences
    }

    /// `sum_{i,t} mask_it`.
    pub fn total_mask(&self) -> usize {
        self.sequences.iter().map(SequenceRecord::masked_len).sum()
    }

    /// Re-evaluates `new_logprobs` under `table`. Old log-probs are untouched.
    pub fn refresh(&mut self, table: &LogitTable) -> Result<()> {
        for s in &mut self.sequences {
            for (t, (ctx, tok)) in s.contexts.iter().zip(&s.tokens).enumerate() {
                s.new_logprobs[t] = table.log_prob(ctx, *tok)?;
            }
        }
        Ok(())
    }

    /// Distinct contexts of masked-in tokens, in sorted order.
    pub fn visited_contexts(&self) -> Vec<Context> {
        let set: BTreeSet<&Context> = self
            .sequences
            .iter()
            .flat_map(|s| s.contexts.iter().zip(&s.mask).filter(|(_, m)| **m).map(|(c, _)| c))
            .collect();
        set.into_iter().cloned().collect()
    }

    fn validate(&self) -> Result<usize> {
        let total = self.total_mask();
        if total == 0 {
            return Err(Error::EmptyBatch("batch has no masked-in tokens".into()));
        }
        for (i, s) in self.sequences.iter().enumerate() {
            for t in 0..s.len() {
                if s.mask[t]
                    && !(s.new_logprobs[t].is_finite()
                        && s.old_logprobs[t].is_finite()
                        && s.advantages[t].is_finite())
                {
                    return Err(Error::NonFinite(format!(
                        "log-prob or advantage at sequence {i}, token {t}"
                    )));
                }
            }
        }
        Ok(total)
    }
}

/// Clip band `[1 - eps_low, 1 + eps_high]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl ClipConfig {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self> {
        let c = ClipConfig { eps_low, eps_high };
        c.validate()?;
        Ok(c)
    }

    pub fn symmetric(eps: f64) -> Result<Self> {
        Self::new(eps, eps)
    }

    /// `eps = 0.2` on both sides.
    pub fn standard() -> Self {
        ClipConfig {
            eps_low: 0.2,
            eps_high: 0.2,
        }
    }

    /// Decoupled upper bound `eps_high = 0.28`.
    pub fn clip_higher() -> Self {
        ClipConfig {
            eps_low: 0.2,
            eps_high: 0.28,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_low.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eps_low must be > 0, got {}",
                self.eps_low
            )));
        }
        if !(self.eps_high >= self.eps_low && self.eps_high.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eps_high ({}) must be >= eps_low ({})",
                self.eps_high, self.eps_low
            )));
        }
        Ok(())
    }

    fn clamp(&self, rho: f64) -> f64 {
        rho.clamp(1.0 - self.eps_low, 1.0 + self.eps_high)
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self::standard()
    }
}

/// How the importance ratio of token `t` in sequence `i` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ISVariant {
    SequenceGeomean,
    TokenLevel,
    PrefixGeomean,
    ReinforceStopgrad,
}

/// Coefficients for the optional entropy bonus and KL penalty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegularizerConfig {
    pub entropy_coef: f64,
    pub kl_coef: f64,
    pub reference: Option<LogitTable>,
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.entropy_coef >= 0.0) || !(self.kl_coef >= 0.0) {
            return Err(Error::InvalidArgument(
                "regularizer coefficients must be >= 0".into(),
            ));
        }
        if self.kl_coef > 0.0 && self.reference.is_none() {
            return Err(Error::InvalidArgument(
                "kl_coef > 0 requires a reference policy".into(),
            ));
        }
        Ok(())
    }
}

/// Objective value, its gradient in table coordinates and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Objective to maximize.
    pub loss: f64,
    /// `-loss`, for minimizing optimizers.
    pub neg_loss: f64,
    /// Ascent direction: `d loss / d phi`.
    pub param_gradient: ParamGradient,
    pub clip_ratio: f64,
    pub mean_is: f64,
    pub diagnostics: BTreeMap<String, f64>,
}

impl LossReport {
    fn new(loss: f64, param_gradient: ParamGradient, clip_ratio: f64, mean_is: f64) -> Self {
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert(DIAG_CLIP_RATIO.to_string(), clip_ratio);
        diagnostics.insert(DIAG_MEAN_IS.to_string(), mean_is);
        LossReport {
            loss,
            neg_loss: -loss,
            param_gradient,
            clip_ratio,
            mean_is,
            diagnostics,
        }
    }
}

/// Surrogate value plus its gradient with respect to each new log-prob.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEval {
    pub loss: f64,
    pub clip_ratio: f64,
    pub mean_is: f64,
    /// `d loss / d new_logprob[i][t]`.
    pub logprob_grads: Vec<Vec<f64>>,
}

/// Geometric mean of the masked-in token ratios, computed in log space.
pub fn sequence_is(new_logprobs: &[f64], old_logprobs: &[f64], mask: &[bool]) -> Result<f64> {
    check_triplet(new_logprobs, old_logprobs, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((n, o), m) in new_logprobs.iter().zip(old_logprobs).zip(mask) {
        if *m {
            sum += n - o;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyBatch("sequence has no masked-in tokens".into()));
    }
    let is = (sum / count as f64).exp();
    if !is.is_finite() {
        return Err(Error::NonFinite("sequence importance ratio".into()));
    }
    Ok(is)
}

/// Running geometric mean of token ratios over each prefix.
///
/// Positions before the first masked-in token read 1.
pub fn prefix_is(new_logprobs: &[f64], old_logprobs: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    check_triplet(new_logprobs, old_logprobs, mask)?;
    if !mask.iter().any(|m| *m) {
        return Err(Error::EmptyBatch("sequence has no masked-in tokens".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut out = Vec::with_capacity(mask.len());
    for ((n, o), m) in new_logprobs.iter().zip(old_logprobs).zip(mask) {
        if *m {
            sum += n - o;
            count += 1;
        }
        out.push(if count == 0 { 1.0 } else { (sum / count as f64).exp() });
    }
    Ok(out)
}

fn check_triplet(a: &[f64], b: &[f64], mask: &[bool]) -> Result<()> {
    if a.len() != b.len() || a.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} new log-probs, {} old log-probs, {} mask entries",
            a.len(),
            b.len(),
            mask.len()
        )));
    }
    for ((n, o), m) in a.iter().zip(b).zip(mask) {
        if *m && !(n.is_finite() && o.is_finite()) {
            return Err(Error::NonFinite("log-probability".into()));
        }
    }
    Ok(())
}

/// Per-token ratios of one sequence under `variant`; masked-out slots are 1.
fn token_ratios(s: &SequenceRecord, variant: ISVariant) -> Result<Vec<f64>> {
    match variant {
        ISVariant::SequenceGeomean | ISVariant::ReinforceStopgrad => {
            let is = sequence_is(&s.new_logprobs, &s.old_logprobs, &s.mask)?;
            Ok(vec![is; s.len()])
        }
        ISVariant::TokenLevel => Ok(s
            .new_logprobs
            .iter()
            .zip(&s.old_logprobs)
            .zip(&s.mask)
            .map(|((n, o), m)| if *m { (n - o).exp() } else { 1.0 })
            .collect()),
        ISVariant::PrefixGeomean => prefix_is(&s.new_logprobs, &s.old_logprobs, &s.mask),
    }
}

/// Clipped, token-mean surrogate and its log-prob gradient.
pub fn surrogate(batch: &RolloutBatch, variant: ISVariant, clip: ClipConfig) -> Result<SurrogateEval> {
    clip.validate()?;
    if variant == ISVariant::ReinforceStopgrad {
        return reinforce_surrogate(batch);
    }
    let total = batch.validate()? as f64;
    let mut loss = 0.0;
    let mut clipped = 0usize;
    let mut is_sum = 0.0;
    let mut logprob_grads = Vec::with_capacity(batch.sequences.len());

    for s in &batch.sequences {
        let rho = token_ratios(s, variant)?;
        // d loss / d rho_t, zero on the clipped branch
        let mut d_rho = vec![0.0; s.len()];
        for t in 0..s.len() {
            if !s.mask[t] {
                continue;
            }
            let a = s.advantages[t];
            let unclipped = rho[t] * a;
            let clipped_val = clip.clamp(rho[t]) * a;
            if clipped_val < unclipped {
                loss += clipped_val;
                clipped += 1;
            } else {
                loss += unclipped;
                d_rho[t] = a / total;
            }
            is_sum += rho[t];
        }

        let grads = match variant {
            ISVariant::TokenLevel => d_rho.iter().zip(&rho).map(|(d, r)| d * r).collect(),
            ISVariant::SequenceGeomean => {
                let len = s.masked_len() as f64;
                let upstream: f64 = d_rho.iter().sum();
                let is = rho[0];
                s.mask
                    .iter()
                    .map(|m| if *m { upstream * is / len } else { 0.0 })
                    .collect()
            }
            ISVariant::PrefixGeomean => prefix_backward(&s.mask, &rho, &d_rho),
            ISVariant::ReinforceStopgrad => unreachable!("handled above"),
        };
        logprob_grads.push(grads);
    }

    Ok(SurrogateEval {
        loss: loss / total,
        clip_ratio: clipped as f64 / total,
        mean_is: is_sum / total,
        logprob_grads,
    })
}

/// `d loss / d new_lp_s = mask_s * sum_{t >= s} d_rho_t * rho_t / count_t`,
/// where `count_t` is the number of masked-in tokens up to `t`.
fn prefix_backward(mask: &[bool], rho: &[f64], d_rho: &[f64]) -> Vec<f64> {
    let n = mask.len();
    let mut counts = Vec::with_capacity(n);
    let mut c = 0usize;
    for m in mask {
        if *m {
            c += 1;
        }
        counts.push(c);
    }
    let mut out = vec![0.0; n];
    let mut suffix = 0.0;
    for t in (0..n).rev() {
        if counts[t] > 0 {
            suffix += d_rho[t] * rho[t] / counts[t] as f64;
        }
        if mask[t] {
            out[t] = suffix;
        }
    }
    out
}

#[allow(clippy::needless_range_loop)]
fn reinforce_surrogate(batch: &RolloutBatch) -> Result<SurrogateEval> {
    let total = batch.validate()? as f64;
    let mut loss = 0.0;
    let mut is_sum = 0.0;
    let mut logprob_grads = Vec::with_capacity(batch.sequences.len());
    for s in &batch.sequences {
        // frozen coefficient: contributes value, never a derivative
        let c = sequence_is(&s.new_logprobs, &s.old_logprobs, &s.mask)?;
        let mut grads = vec![0.0; s.len()];
        for t in 0..s.len() {
            if s.mask[t] {
                loss += c * s.advantages[t] * s.new_logprobs[t];
                grads[t] = c * s.advantages[t] / total;
                is_sum += c;
            }
        }
        logprob_grads.push(grads);
    }
    Ok(SurrogateEval {
        loss: loss / total,
        clip_ratio: 0.0,
        mean_is: is_sum / total,
        logprob_grads,
    })
}

/// Chains per-token log-prob gradients into logit rows:
/// `d log pi(tok | ctx) / d phi(ctx, a) = 1[a = tok] - pi(a | ctx)`.
pub fn chain_to_logits(
    batch: &RolloutBatch,
    logprob_grads: &[Vec<f64>],
    table: &LogitTable,
) -> Result<ParamGradient> {
    if logprob_grads.len() != batch.sequences.len() {
        return Err(Error::ShapeMismatch("gradient rows vs sequences".into()));
    }
    let width = table.num_actions();
    let mut out = ParamGradient::new();
    let mut cache: BTreeMap<&Context, Vec<f64>> = BTreeMap::new();
    for (s, grads) in batch.sequences.iter().zip(logprob_grads) {
        for ((ctx, tok), g) in s.contexts.iter().zip(&s.tokens).zip(grads) {
            if *g == 0.0 {
                continue;
            }
            if !cache.contains_key(ctx) {
                let probs = table.softmax_distribution(ctx)?.probs().to_vec();
                cache.insert(ctx, probs);
            }
            let probs = &cache[ctx];
            let row = out.row_mut(ctx, width);
            for (a, (r, p)) in row.iter_mut().zip(probs).enumerate() {
                let indicator = if a == *tok as usize { 1.0 } else { 0.0 };
                *r += g * (indicator - p);
            }
        }
    }
    Ok(out)
}

/// Clipped token-mean objective with analytic gradient in table coordinates.
///
/// `table` must be the policy the batch's `new_logprobs` were evaluated under.
pub fn clipped_token_mean_loss(
    batch: &RolloutBatch,
    variant: ISVariant,
    clip: ClipConfig,
    table: &LogitTable,
) -> Result<LossReport> {
    let eval = surrogate(batch, variant, clip)?;
    let grad = chain_to_logits(batch, &eval.logprob_grads, table)?;
    Ok(LossReport::new(eval.loss, grad, eval.clip_ratio, eval.mean_is))
}

/// `(1 / total_mask) sum_{i,t} mask * c_i * A * new_lp` with `c_i` frozen.
pub fn reinforce_stopgrad_loss(batch: &RolloutBatch, table: &LogitTable) -> Result<LossReport> {
    let eval = reinforce_surrogate(batch)?;
    let grad = chain_to_logits(batch, &eval.logprob_grads, table)?;
    Ok(LossReport::new(eval.loss, grad, eval.clip_ratio, eval.mean_is))
}

/// `(1 / total_mask) sum_{i,t} IS_i * A_it * mask_it`, the unclipped
/// sequence-ratio objective that [`tepo_backward`] differentiates.
pub fn unclipped_sequence_loss(batch: &RolloutBatch) -> Result<f64> {
    let total = batch.validate()? as f64;
    let mut sum = 0.0;
    for s in &batch.sequences {
        let is = sequence_is(&s.new_logprobs, &s.old_logprobs, &s.mask)?;
        for t in 0..s.len() {
            if s.mask[t] {
                sum += is * s.advantages[t];
            }
        }
    }
    Ok(sum / total)
}

/// Backward pass of the sequence-ratio objective, step by step:
///
/// 1. `dL/d(sum_loss) = 1 / total_mask`
/// 2. `dL/d(IS_i * A_it) = mask_it / total_mask`
/// 3. `dL/dIS_i = sum_t A_it * mask_it / total_mask`
/// 4. `dL/d log pi_it = dL/dIS_i * IS_i * mask_it / |o_i|`
///
/// Returns the per-token result of step 4. Clipping is not modelled; inside
/// the clip band this equals the clipped objective's gradient.
pub fn tepo_backward_logprob(batch: &RolloutBatch) -> Result<Vec<Vec<f64>>> {
    let total = batch.validate()? as f64;
    let d_sum = 1.0 / total;
    let mut out = Vec::with_capacity(batch.sequences.len());
    for s in &batch.sequences {
        let is = sequence_is(&s.new_logprobs, &s.old_logprobs, &s.mask)?;
        let len = s.masked_len() as f64;
        let d_is: f64 = s
            .advantages
            .iter()
            .zip(&s.mask)
            .filter(|(_, m)| **m)
            .map(|(a, _)| a * d_sum)
            .sum();
        out.push(
            s.mask
                .iter()
                .map(|m| if *m { d_is * is / len } else { 0.0 })
                .collect(),
        );
    }
    Ok(out)
}

/// [`tepo_backward_logprob`] chained into logit-table coordinates.
pub fn tepo_backward(batch: &RolloutBatch, table: &LogitTable) -> Result<ParamGradient> {
    let g = tepo_backward_logprob(batch)?;
    chain_to_logits(batch, &g, table)
}

/// `coef * mean_ctx H(pi(.|ctx))` and its gradient.
pub fn entropy_bonus_term(
    table: &LogitTable,
    contexts: &[Context],
    coef: f64,
) -> Result<(f64, ParamGradient)> {
    if !(coef >= 0.0) {
        return Err(Error::InvalidArgument(format!("entropy coef must be >= 0, got {coef}")));
    }
    let mut grad = ParamGradient::new();
    if coef == 0.0 || contexts.is_empty() {
        return Ok((0.0, grad));
    }
    let n = contexts.len() as f64;
    let width = table.num_actions();
    let mut value = 0.0;
    for ctx in contexts {
        let d = table.softmax_distribution(ctx)?;
        value += entropy(&d);
        let g = crate::calculus::entropy_gradient_of(&d);
        for (r, x) in grad.row_mut(ctx, width).iter_mut().zip(g.values()) {
            *r += coef * x / n;
        }
    }
    Ok((coef * value / n, grad))
}

/// `KL(p || q)` for distributions with `q > 0` wherever `p > 0`.
pub fn kl_divergence(p: &PolicyDistribution, q: &PolicyDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch("KL between different vocabularies".into()));
    }
    let mut kl = 0.0;
    for (a, b) in p.probs().iter().zip(q.probs()) {
        if *a > 0.0 {
            if *b <= 0.0 {
                return Err(Error::InvalidArgument(
                    "reference assigns zero probability to a supported action".into(),
                ));
            }
            kl += a * (a.ln() - b.ln());
        }
    }
    Ok(kl.max(0.0))
}

/// `coef * mean_ctx KL(pi(.|ctx) || ref(.|ctx))` and its gradient.
///
/// Per context: `dKL/dphi_a = pi_a * (log pi_a - log ref_a - KL)`.
pub fn kl_penalty_term(
    table: &LogitTable,
    reference: &LogitTable,
    contexts: &[Context],
    coef: f64,
) -> Result<(f64, ParamGradient)> {
    if !(coef >= 0.0) {
        return Err(Error::InvalidArgument(format!("kl coef must be >= 0, got {coef}")));
    }
    let mut grad = ParamGradient::new();
    if coef == 0.0 || contexts.is_empty() {
        return Ok((0.0, grad));
    }
    let n = contexts.len() as f64;
    let width = table.num_actions();
    let mut value = 0.0;
    for ctx in contexts {
        let lp = crate::policy::log_softmax(&table.logits(ctx));
        let lq = crate::policy::log_softmax(&reference.logits(ctx));
        let p = table.softmax_distribution(ctx)?;
        let q = reference.softmax_distribution(ctx)?;
        let kl = kl_divergence(&p, &q)?;
        value += kl;
        let row = grad.row_mut(ctx, width);
        for (a, r) in row.iter_mut().enumerate() {
            let pa = p.probs()[a];
            if pa > 0.0 {
                *r += coef * pa * (lp[a] - lq[a] - kl) / n;
            }
        }
    }
    Ok((coef * value / n, grad))
}

/// Exponential tilting `pi'(a) ∝ pi(a) exp(A(a) / eta)`.
pub fn kl_regularized_update(
    dist: &PolicyDistribution,
    adv: &crate::calculus::AdvantageVector,
    eta: f64,
) -> Result<PolicyDistribution> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be > 0, got {eta}")));
    }
    if adv.len() != dist.len() {
        return Err(Error::ShapeMismatch("advantage vs distribution".into()));
    }
    let logw: Vec<f64> = dist
        .probs()
        .iter()
        .zip(adv.values())
        .map(|(p, a)| if *p > 0.0 { p.ln() + a / eta } else { f64::NEG_INFINITY })
        .collect();
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logw.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = w.iter().sum();
    for x in &mut w {
        *x /= z;
    }
    PolicyDistribution::new(w)
}

/// A configured objective: ratio variant, clip band and regularizers.
#[derive(Debug, Clone)]
pub struct Objective {
    pub variant: ISVariant,
    pub clip: ClipConfig,
    pub regularizers: RegularizerConfig,
}

impl Objective {
    pub fn new(variant: ISVariant, clip: ClipConfig, regularizers: RegularizerConfig) -> Result<Self> {
        clip.validate()?;
        regularizers.validate()?;
        Ok(Objective {
            variant,
            clip,
            regularizers,
        })
    }

    /// Surrogate + entropy bonus - KL penalty, with regularizers averaged over
    /// the batch's distinct visited contexts.
    pub fn evaluate(&self, batch: &RolloutBatch, table: &LogitTable) -> Result<LossReport> {
        let mut report = clipped_token_mean_loss(batch, self.variant, self.clip, table)?;
        let regs = &self.regularizers;
        let contexts = if regs.entropy_coef > 0.0 || regs.kl_coef > 0.0 {
            batch.visited_contexts()
        } else {
            Vec::new()
        };

        let (bonus, bonus_grad) = entropy_bonus_term(table, &contexts, regs.entropy_coef)?;
        let (penalty, penalty_grad) = match &regs.reference {
            Some(reference) if regs.kl_coef > 0.0 => {
                kl_penalty_term(table, reference, &contexts, regs.kl_coef)?
            }
            _ => (0.0, ParamGradient::new()),
        };

        report.loss += bonus - penalty;
        report.neg_loss = -report.loss;
        report.param_gradient.add_scaled(&bonus_grad, 1.0);
        report.param_gradient.add_scaled(&penalty_grad, -1.0);
        report.diagnostics.insert(DIAG_ENTROPY_BONUS.to_string(), bonus);
        report.diagnostics.insert(DIAG_KL_PENALTY.to_string(), penalty);
        Ok(report)
    }
}
