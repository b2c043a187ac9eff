//! Randomized finite-difference verification of the analytic gradients and
//! the entropy-gradient sign comparison.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::calculus::{
    entropy_gradient_of, finite_difference_gradient, max_relative_error, policy_gradient_of,
    printed_entropy_gradient, AdvantageVector, DEFAULT_FD_STEP,
};
use crate::error::{Error, Result};
use crate::objective::{tepo_backward, unclipped_sequence_loss, RolloutBatch, SequenceRecord};
use crate::policy::{entropy, Context, LogitTable, PolicyDistribution, Token, Vocab};

/// Relative tolerance of every check.
pub const RELATIVE_TOLERANCE: f64 = 1e-5;
/// Absolute floor: coordinates whose reference is below
/// `ABSOLUTE_FLOOR / RELATIVE_TOLERANCE` are judged by absolute error.
pub const ABSOLUTE_FLOOR: f64 = 1e-9;
/// Smallest and largest action counts drawn.
pub const MIN_ACTIONS: usize = 2;
pub const MAX_ACTIONS: usize = 16;
/// Instances in the sign comparison.
pub const SIGN_INSTANCES: usize = 24;

fn denominator_floor() -> f64 {
    ABSOLUTE_FLOOR / RELATIVE_TOLERANCE
}

/// Random logit row and advantage vector with `actions` entries.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, actions: usize) -> (Vec<f64>, AdvantageVector) {
    let logits: Vec<f64> = (0..actions).map(|_| rng.random_range(-2.0..2.0)).collect();
    let adv: Vec<f64> = (0..actions).map(|_| rng.random_range(-1.0..1.0)).collect();
    (logits, AdvantageVector::new(adv).expect("finite by construction"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceCheck {
    pub actions: usize,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub worst_relative_error: f64,
    pub passed: bool,
    pub instances: Vec<InstanceCheck>,
}

impl SuiteResult {
    fn from_instances(name: &str, instances: Vec<InstanceCheck>) -> Self {
        let worst = instances.iter().map(|i| i.max_relative_error).fold(0.0, f64::max);
        SuiteResult {
            name: name.to_string(),
            worst_relative_error: worst,
            passed: instances.iter().all(|i| i.passed),
            instances,
        }
    }
}

fn check(actions: usize, analytic: &[f64], reference: &[f64]) -> InstanceCheck {
    let err = max_relative_error(analytic, reference, denominator_floor());
    InstanceCheck {
        actions,
        coordinates: analytic.len(),
        max_relative_error: err,
        passed: analytic.len() == reference.len() && err < RELATIVE_TOLERANCE,
    }
}

fn entropy_of_logits(phi: &[f64]) -> f64 {
    PolicyDistribution::from_logits(phi).map(|d| entropy(&d)).unwrap_or(f64::NAN)
}

/// Entropy gradient against central differences of `H(softmax(phi))`.
pub fn check_entropy_gradient<R: Rng + ?Sized>(rng: &mut R, actions: usize) -> Result<InstanceCheck> {
    let (logits, _) = random_instance(rng, actions);
    let analytic = entropy_gradient_of(&PolicyDistribution::from_logits(&logits)?);
    let fd = finite_difference_gradient(entropy_of_logits, &logits, DEFAULT_FD_STEP)?;
    Ok(check(actions, analytic.values(), fd.values()))
}

/// Policy gradient against central differences of `sum softmax(phi) * A`.
pub fn check_policy_gradient<R: Rng + ?Sized>(rng: &mut R, actions: usize) -> Result<InstanceCheck> {
    let (logits, adv) = random_instance(rng, actions);
    let analytic = policy_gradient_of(&PolicyDistribution::from_logits(&logits)?, &adv)?;
    let a = adv.values().to_vec();
    let f = |phi: &[f64]| -> f64 {
        PolicyDistribution::from_logits(phi)
            .map(|d| d.expectation(&a))
            .unwrap_or(f64::NAN)
    };
    let fd = finite_difference_gradient(f, &logits, DEFAULT_FD_STEP)?;
    Ok(check(actions, analytic.values(), fd.values()))
}

/// A random batch of 2 to 4 sequences over `actions` tokens with partial
/// masks, off-policy old log-probs and its policy table.
pub fn random_sequence_batch<R: Rng + ?Sized>(
    rng: &mut R,
    actions: usize,
) -> Result<(RolloutBatch, LogitTable)> {
    let vocab = Vocab::new(actions)?;
    let mut table = LogitTable::new(vocab);
    let mut old = LogitTable::new(vocab);
    let n = rng.random_range(2..=4);
    let mut sequences = Vec::with_capacity(n);
    for _ in 0..n {
        let prompt = rng.random_range(0..2u32);
        let len = rng.random_range(1..=3usize);
        let tokens: Vec<Token> = (0..len).map(|_| rng.random_range(0..actions as Token)).collect();
        let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.75)).collect();
        let keep = rng.random_range(0..len);
        mask[keep] = true;
        let a = rng.random_range(-2.0..2.0);
        let advantages = mask.iter().map(|m| if *m { a } else { 0.0 }).collect();
        let mut ctx = Context::root(prompt);
        let mut old_lp = Vec::with_capacity(len);
        for tok in &tokens {
            if table.logits(&ctx).iter().all(|x| *x == 0.0) {
                let row: Vec<f64> = (0..actions).map(|_| rng.random_range(-1.5..1.5)).collect();
                let nudged: Vec<f64> = row.iter().map(|x| x + rng.random_range(-0.15..0.15)).collect();
                table.set_logits(ctx.clone(), row)?;
                old.set_logits(ctx.clone(), nudged)?;
            }
            old_lp.push(old.log_prob(&ctx, *tok)?);
            ctx = ctx.child(*tok);
        }
        sequences.push(SequenceRecord::new(prompt, tokens, old_lp, mask, advantages)?);
    }
    let mut batch = RolloutBatch::new(sequences)?;
    batch.refresh(&table)?;
    Ok((batch, table))
}

/// The sequence-ratio backward pass against central differences of the
/// unclipped objective over every logit of every visited context.
pub fn check_sequence_backward<R: Rng + ?Sized>(rng: &mut R, actions: usize) -> Result<InstanceCheck> {
    let (batch, table) = random_sequence_batch(rng, actions)?;
    let contexts: Vec<Context> = {
        let mut all: Vec<Context> = batch
            .sequences()
            .iter()
            .flat_map(|s| s.contexts.iter().cloned())
            .collect();
        all.sort();
        all.dedup();
        all
    };
    let flat: Vec<f64> = contexts.iter().flat_map(|c| table.logits(c)).collect();
    let analytic_rows = tepo_backward(&batch, &table)?;
    let analytic: Vec<f64> = contexts
        .iter()
        .flat_map(|c| {
            analytic_rows
                .get(c)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; actions])
        })
        .collect();
    let f = |phi: &[f64]| -> f64 {
        let mut t = table.clone();
        for (i, c) in contexts.iter().enumerate() {
            let row = phi[i * actions..(i + 1) * actions].to_vec();
            if t.set_logits(c.clone(), row).is_err() {
                return f64::NAN;
            }
        }
        let mut b = batch.clone();
        b.refresh(&t)
            .and_then(|_| unclipped_sequence_loss(&b))
            .unwrap_or(f64::NAN)
    };
    let fd = finite_difference_gradient(f, &flat, DEFAULT_FD_STEP)?;
    Ok(check(actions, &analytic, fd.values()))
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignRow {
    pub actions: usize,
    /// Correlation of `-pi (log pi + H)` with the finite-difference oracle.
    pub implemented_correlation: f64,
    /// Correlation of `+pi (log pi + H)` with the same oracle.
    pub printed_correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignEvidence {
    pub passed: bool,
    pub rows: Vec<SignRow>,
}

/// Compares both signs of the entropy gradient with the oracle on
/// `instances` random rows of 3 to 16 actions.
pub fn sign_evidence<R: Rng + ?Sized>(rng: &mut R, instances: usize) -> Result<SignEvidence> {
    let mut rows = Vec::with_capacity(instances);
    while rows.len() < instances {
        let actions = rng.random_range(3..=MAX_ACTIONS);
        let (logits, _) = random_instance(rng, actions);
        let d = PolicyDistribution::from_logits(&logits)?;
        let fd = finite_difference_gradient(entropy_of_logits, &logits, DEFAULT_FD_STEP)?;
        let imp = correlation(entropy_gradient_of(&d).values(), fd.values());
        let printed = correlation(printed_entropy_gradient(&d).values(), fd.values());
        if let (Some(i), Some(p)) = (imp, printed) {
            rows.push(SignRow {
                actions,
                implemented_correlation: i,
                printed_correlation: p,
            });
        }
    }
    let passed = rows
        .iter()
        .all(|r| r.implemented_correlation > 1.0 - 1e-9 && r.printed_correlation < -1.0 + 1e-9);
    Ok(SignEvidence { passed, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub seed: u64,
    pub relative_tolerance: f64,
    pub absolute_floor: f64,
    pub fd_step: f64,
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
    pub sign_evidence: SignEvidence,
}

impl GradcheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes")
    }

    /// One line per suite plus the sign verdict.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            out.push_str(&format!(
                "{:<20} {} instances  worst rel err {:.3e}  {}\n",
                s.name,
                s.instances.len(),
                s.worst_relative_error,
                if s.passed { "PASS" } else { "FAIL" }
            ));
        }
        let e = &self.sign_evidence;
        let min_imp = e.rows.iter().map(|r| r.implemented_correlation).fold(f64::INFINITY, f64::min);
        let max_printed = e.rows.iter().map(|r| r.printed_correlation).fold(f64::NEG_INFINITY, f64::max);
        out.push_str(&format!(
            "{:<20} {} instances  min corr(-) {:+.12}  max corr(+) {:+.12}  {}\n",
            "entropy_sign",
            e.rows.len(),
            min_imp,
            max_printed,
            if e.passed { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Runs every suite `trials` times with action counts drawn uniformly from
/// `MIN_ACTIONS..=MAX_ACTIONS`.
pub fn run_gradcheck(trials: usize, seed: u64) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    type Check = fn(&mut ChaCha8Rng, usize) -> Result<InstanceCheck>;
    let suites: [(&str, Check); 3] = [
        ("entropy_gradient", check_entropy_gradient::<ChaCha8Rng>),
        ("policy_gradient", check_policy_gradient::<ChaCha8Rng>),
        ("sequence_backward", check_sequence_backward::<ChaCha8Rng>),
    ];
    let mut results = Vec::with_capacity(suites.len());
    for (k, (name, f)) in suites.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let instances = (0..trials)
            .map(|_| {
                let actions = rng.random_range(MIN_ACTIONS..=MAX_ACTIONS);
                f(&mut rng, actions)
            })
            .collect::<Result<Vec<_>>>()?;
        results.push(SuiteResult::from_instances(name, instances));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(suites.len() as u64));
    let sign = sign_evidence(&mut rng, SIGN_INSTANCES)?;
    Ok(GradcheckReport {
        trials,
        seed,
        relative_tolerance: RELATIVE_TOLERANCE,
        absolute_floor: ABSOLUTE_FLOOR,
        fd_step: DEFAULT_FD_STEP,
        passed: results.iter().all(|s| s.passed) && sign.passed,
        suites: results,
        sign_evidence: sign,
    })
}
