//! Exact per-context gradients of entropy and expected advantage with respect
//! to one logit row, plus a central finite-difference oracle.
//!
//! Sign note: the entropy gradient of a softmax is
//! `dH/dphi_i = -pi_i * (log pi_i + H)`. Some write-ups drop the leading minus;
//! [`printed_entropy_gradient`] keeps that variant around only so the gradient
//! check report can show it disagrees with finite differences.

use crate::error::{Error, Result};
use crate::policy::{entropy, Context, LogitTable, PolicyDistribution};

/// Per-action advantages `A(s, a)` at one context.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector(Vec<f64>);

impl AdvantageVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("advantage vector".into()));
        }
        Ok(AdvantageVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Gradient with respect to one logit row.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Self {
        GradientVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

fn check_len(dist: &PolicyDistribution, adv: &AdvantageVector) -> Result<()> {
    if dist.len() != adv.len() {
        return Err(Error::ShapeMismatch(format!(
            "advantage has {} entries, distribution has {}",
            adv.len(),
            dist.len()
        )));
    }
    Ok(())
}

/// `pi_i * log pi_i` with the `0 log 0 = 0` convention.
fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// `-pi_i (log pi_i + H)` for each action.
pub fn entropy_gradient_of(dist: &PolicyDistribution) -> GradientVector {
    let h = entropy(dist);
    GradientVector(
        dist.probs()
            .iter()
            .map(|&p| -(plogp(p) + p * h))
            .collect(),
    )
}

/// `+pi_i (log pi_i + H)`: the sign-flipped form, used only as a foil.
pub fn printed_entropy_gradient(dist: &PolicyDistribution) -> GradientVector {
    GradientVector(entropy_gradient_of(dist).0.into_iter().map(|g| -g).collect())
}

pub fn entropy_gradient(table: &LogitTable, ctx: &Context) -> Result<GradientVector> {
    Ok(entropy_gradient_of(&table.softmax_distribution(ctx)?))
}

/// `pi_i (A_i - E_pi[A])`, the gradient of `E_pi[A]` for fixed `A`.
pub fn policy_gradient_of(
    dist: &PolicyDistribution,
    adv: &AdvantageVector,
) -> Result<GradientVector> {
    check_len(dist, adv)?;
    let mean = dist.expectation(adv.values());
    Ok(GradientVector(
        dist.probs()
            .iter()
            .zip(adv.values())
            .map(|(p, a)| p * (a - mean))
            .collect(),
    ))
}

pub fn policy_gradient(
    table: &LogitTable,
    ctx: &Context,
    adv: &AdvantageVector,
) -> Result<GradientVector> {
    policy_gradient_of(&table.softmax_distribution(ctx)?, adv)
}

/// `<grad H, grad J>` as the literal dot product of the two gradients.
pub fn grad_inner_product_of(dist: &PolicyDistribution, adv: &AdvantageVector) -> Result<f64> {
    let gh = entropy_gradient_of(dist);
    let gj = policy_gradient_of(dist, adv)?;
    Ok(gh.dot(&gj))
}

/// Closed form `-sum_i pi_i^2 (log pi_i + H)(A_i - E_pi[A])`.
///
/// Must agree with [`grad_inner_product_of`] to rounding.
pub fn grad_inner_product_closed_form(
    dist: &PolicyDistribution,
    adv: &AdvantageVector,
) -> Result<f64> {
    check_len(dist, adv)?;
    let h = entropy(dist);
    let mean = dist.expectation(adv.values());
    Ok(-dist
        .probs()
        .iter()
        .zip(adv.values())
        .map(|(&p, a)| p * (plogp(p) + p * h) * (a - mean))
        .sum::<f64>())
}

pub fn grad_inner_product(table: &LogitTable, ctx: &Context, adv: &AdvantageVector) -> Result<f64> {
    grad_inner_product_of(&table.softmax_distribution(ctx)?, adv)
}

/// First-order prediction of the entropy change after `phi += step * grad J`.
pub fn predicted_entropy_delta(
    table: &LogitTable,
    ctx: &Context,
    adv: &AdvantageVector,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    Ok(step * grad_inner_product(table, ctx, adv)?)
}

/// Exact entropy change of one gradient-ascent step on a logit row.
pub fn measured_entropy_delta(logits: &[f64], adv: &AdvantageVector, step: f64) -> Result<f64> {
    let before = PolicyDistribution::from_logits(logits)?;
    let gj = policy_gradient_of(&before, adv)?;
    let moved: Vec<f64> = logits
        .iter()
        .zip(gj.values())
        .map(|(x, g)| x + step * g)
        .collect();
    let after = PolicyDistribution::from_logits(&moved)?;
    Ok(entropy(&after) - entropy(&before))
}

/// Default finite-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_difference_gradient<F>(f: F, phi: &[f64], h: f64) -> Result<GradientVector>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    let mut x = phi.to_vec();
    let mut grad = Vec::with_capacity(phi.len());
    for i in 0..phi.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value at coordinate {i} (f+ = {up}, f- = {down})"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(GradientVector(grad))
}

/// Largest `|a - b| / max(|b|, floor)` over coordinates.
pub fn max_relative_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{softmax, Vocab};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Oracle values below were produced by central differences (h = 1e-5) on
    // H(softmax(phi)) and sum softmax(phi) * A, independent of the code above.
    const ENT_GRAD_09: f64 = -0.197_750_21;
    const INNER_09: f64 = -0.071_190_076_305_8;

    fn dist(p: &[f64]) -> PolicyDistribution {
        PolicyDistribution::new(p.to_vec()).unwrap()
    }

    fn adv(a: &[f64]) -> AdvantageVector {
        AdvantageVector::new(a.to_vec()).unwrap()
    }

    fn entropy_of_logits(phi: &[f64]) -> f64 {
        entropy(&PolicyDistribution::from_logits(phi).unwrap())
    }

    fn expected_adv(phi: &[f64], a: &[f64]) -> f64 {
        softmax(phi).iter().zip(a).map(|(p, v)| p * v).sum()
    }

    #[test]
    fn entropy_gradient_vanishes_at_uniform() {
        for n in [2, 5, 11] {
            let g = entropy_gradient_of(&dist(&vec![1.0 / n as f64; n]));
            assert!(g.values().iter().all(|x| x.abs() < 1e-15));
        }
    }

    #[test]
    fn entropy_gradient_skewed_pair() {
        let g = entropy_gradient_of(&dist(&[0.9, 0.1]));
        assert!((g.values()[0] - ENT_GRAD_09).abs() < 1e-8);
        assert!((g.values()[1] + ENT_GRAD_09).abs() < 1e-8);
        let printed = printed_entropy_gradient(&dist(&[0.9, 0.1]));
        assert!(printed.values()[0] > 0.0);
    }

    #[test]
    fn entropy_gradient_from_table() {
        let mut t = LogitTable::new(Vocab::new(2).unwrap());
        t.set_logits(Context::root(0), vec![9f64.ln(), 0.0]).unwrap();
        let g = entropy_gradient(&t, &Context::root(0)).unwrap();
        assert!((g.values()[0] - ENT_GRAD_09).abs() < 1e-8);
    }

    #[test]
    fn entropy_gradient_sums_to_zero_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let phi: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g = entropy_gradient_of(&PolicyDistribution::from_logits(&phi).unwrap());
        assert!(g.sum().abs() < 1e-12);
    }

    #[test]
    fn entropy_gradient_handles_exact_zero_probability() {
        let g = entropy_gradient_of(&dist(&[1.0, 0.0]));
        assert!(g.values().iter().all(|x| x.is_finite() && x.abs() < 1e-15));
    }

    #[test]
    fn policy_gradient_examples() {
        let g = policy_gradient_of(&dist(&[0.3, 0.7]), &adv(&[2.0, 2.0])).unwrap();
        assert!(g.values().iter().all(|x| x.abs() < 1e-15));
        let g = policy_gradient_of(&dist(&[0.5, 0.5]), &adv(&[1.0, -1.0])).unwrap();
        assert!((g.values()[0] - 0.5).abs() < 1e-15 && (g.values()[1] + 0.5).abs() < 1e-15);
        let g = policy_gradient_of(&dist(&[0.9, 0.1]), &adv(&[0.0, 1.0])).unwrap();
        assert!((g.values()[0] + 0.09).abs() < 1e-15 && (g.values()[1] - 0.09).abs() < 1e-15);
    }

    #[test]
    fn policy_gradient_rejects_length_mismatch() {
        assert!(policy_gradient_of(&dist(&[0.5, 0.5]), &adv(&[1.0])).is_err());
    }

    #[test]
    fn inner_product_examples() {
        let u = dist(&[0.25; 4]);
        assert!(grad_inner_product_of(&u, &adv(&[3.0, -1.0, 0.5, 2.0])).unwrap().abs() < 1e-15);
        let d = dist(&[0.9, 0.1]);
        let pos = grad_inner_product_of(&d, &adv(&[1.0, -1.0])).unwrap();
        let neg = grad_inner_product_of(&d, &adv(&[-1.0, 1.0])).unwrap();
        assert!((pos - INNER_09).abs() < 1e-10, "{pos}");
        assert!((neg + INNER_09).abs() < 1e-10, "{neg}");
    }

    #[test]
    fn predicted_delta_examples() {
        let mut t = LogitTable::new(Vocab::new(2).unwrap());
        let root = Context::root(0);
        assert_eq!(predicted_entropy_delta(&t, &root, &adv(&[1.0, 0.0]), 0.3).unwrap(), 0.0);
        t.set_logits(root.clone(), vec![9f64.ln(), 0.0]).unwrap();
        let p = predicted_entropy_delta(&t, &root, &adv(&[1.0, -1.0]), 0.01).unwrap();
        assert!((p - 0.01 * INNER_09).abs() < 1e-12);
        assert!(predicted_entropy_delta(&t, &root, &adv(&[1.0, -1.0]), 0.0).is_err());
    }

    #[test]
    fn prediction_error_is_second_order() {
        let phi = [9f64.ln(), 0.0];
        let a = adv(&[1.0, -1.0]);
        let d = PolicyDistribution::from_logits(&phi).unwrap();
        let inner = grad_inner_product_of(&d, &a).unwrap();
        let err = |s: f64| (measured_entropy_delta(&phi, &a, s).unwrap() - s * inner).abs();
        for s in [1e-1, 1e-2] {
            let ratio = err(s) / err(s / 2.0);
            assert!((3.5..4.5).contains(&ratio), "step {s}: ratio {ratio}");
        }
    }

    #[test]
    fn finite_difference_examples() {
        let a = [1.0, -1.0];
        let g = finite_difference_gradient(|x| expected_adv(x, &a), &[0.0, 0.0], 1e-5).unwrap();
        assert!((g.values()[0] - 0.5).abs() < 1e-8 && (g.values()[1] + 0.5).abs() < 1e-8);

        let g = finite_difference_gradient(entropy_of_logits, &[9f64.ln(), 0.0], 1e-5).unwrap();
        assert!((g.values()[0] - ENT_GRAD_09).abs() < 1e-7);
        assert!((g.values()[1] + ENT_GRAD_09).abs() < 1e-7);

        let g = finite_difference_gradient(|_| 3.0, &[0.1, 0.2, 0.3], 1e-5).unwrap();
        assert!(g.values().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn finite_difference_errors() {
        assert!(finite_difference_gradient(|x| x[0], &[1.0], 0.0).is_err());
        assert!(finite_difference_gradient(|x| 1.0 / (x[0] - 1e-5 - 1.0), &[1.0], 1e-5).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..17).prop_flat_map(|n| {
            (
                proptest::collection::vec(-3.0f64..3.0, n),
                proptest::collection::vec(-2.0f64..2.0, n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn gradients_sum_to_zero((phi, a) in instance()) {
            let d = PolicyDistribution::from_logits(&phi).unwrap();
            prop_assert!(entropy_gradient_of(&d).sum().abs() < 1e-10);
            prop_assert!(policy_gradient_of(&d, &adv(&a)).unwrap().sum().abs() < 1e-10);
        }

        #[test]
        fn closed_form_matches_dot((phi, a) in instance()) {
            let d = PolicyDistribution::from_logits(&phi).unwrap();
            let a = adv(&a);
            let dot = grad_inner_product_of(&d, &a).unwrap();
            let closed = grad_inner_product_closed_form(&d, &a).unwrap();
            prop_assert!((dot - closed).abs() < 1e-10);
        }

        #[test]
        fn analytic_matches_finite_differences((phi, a) in instance()) {
            let d = PolicyDistribution::from_logits(&phi).unwrap();
            let gh = entropy_gradient_of(&d);
            let fh = finite_difference_gradient(entropy_of_logits, &phi, DEFAULT_FD_STEP).unwrap();
            prop_assert!(max_relative_error(gh.values(), fh.values(), 1e-4) < 1e-5);
            let gj = policy_gradient_of(&d, &adv(&a)).unwrap();
            let fj = finite_difference_gradient(|x| expected_adv(x, &a), &phi, DEFAULT_FD_STEP).unwrap();
            prop_assert!(max_relative_error(gj.values(), fj.values(), 1e-4) < 1e-5);
        }
    }
}
