//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`). The process fails if any
//! criterion fails, except those listed in `KNOWN_FAILURES`, which are still
//! evaluated and printed with their measurements.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cfpo_core::advantage::{filter_groups, group_advantage, population_std, Group, Response, DEFAULT_STD_FLOOR};
use cfpo_core::calculus::{measured_entropy_delta, predicted_entropy_delta, AdvantageVector};
use cfpo_core::config::ExperimentConfig;
use cfpo_core::dynamics::{entropy_decomposition, expected_reward};
use cfpo_core::env::{enumerate_contexts, Task, TaskKind, TaskSpec};
use cfpo_core::experiment::{covariance_prediction, eta_sweep, render_compare, run_compare, ArmRun};
use cfpo_core::gradcheck::{random_instance, random_sequence_batch, run_gradcheck, MAX_ACTIONS, MIN_ACTIONS};
use cfpo_core::metrics::{emit_metrics, MetricsFormat};
use cfpo_core::objective::{
    clipped_token_mean_loss, kl_regularized_update, sequence_is, surrogate, ClipConfig, ISVariant, RolloutBatch,
    SequenceRecord,
};
use cfpo_core::policy::{Context, LogitTable, PolicyDistribution};

/// Criteria that currently fail as measured; see the README.
const KNOWN_FAILURES: &[u32] = &[10];

const TRAINING_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    id: u32,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn gradient_identities() -> Outcome {
    let start = Instant::now();
    let report = run_gradcheck(100, 20_250_101).expect("gradcheck runs");
    let elapsed = start.elapsed();
    let sizes_ok = report.suites.iter().all(|s| {
        s.instances.len() == 100 && s.instances.iter().all(|i| (MIN_ACTIONS..=MAX_ACTIONS).contains(&i.actions))
    });
    let worst: Vec<String> = report
        .suites
        .iter()
        .map(|s| format!("{} {:.2e}", s.name, s.worst_relative_error))
        .collect();
    Outcome {
        id: 1,
        title: "gradient identities vs central differences",
        passed: report.suites.iter().all(|s| s.passed) && sizes_ok && elapsed < Duration::from_secs(5),
        detail: format!("worst rel err: {}; {:.2?}", worst.join(", "), elapsed),
    }
}

fn sign_evidence() -> Outcome {
    let report = run_gradcheck(1, 7).expect("gradcheck runs");
    let rows = &report.sign_evidence.rows;
    let min_imp = rows.iter().map(|r| r.implemented_correlation).fold(f64::INFINITY, f64::min);
    let max_printed = rows.iter().map(|r| r.printed_correlation).fold(f64::NEG_INFINITY, f64::max);
    Outcome {
        id: 2,
        title: "entropy-gradient sign evidence",
        passed: rows.len() >= 20 && report.sign_evidence.passed && min_imp > 1.0 - 1e-9 && max_printed < -1.0 + 1e-9,
        detail: format!("{} instances, min corr(-) {min_imp:+.12}, max corr(+) {max_printed:+.12}", rows.len()),
    }
}

fn taylor_order() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_ratio = f64::INFINITY;
    for _ in 0..20 {
        let n = rng.random_range(MIN_ACTIONS..=MAX_ACTIONS);
        let (logits, adv) = random_instance(&mut rng, n);
        let ctx = Context::root(0);
        let mut table = LogitTable::new(cfpo_core::Vocab::new(n).unwrap());
        table.set_logits(ctx.clone(), logits.clone()).unwrap();
        let err = |alpha: f64| {
            let predicted = predicted_entropy_delta(&table, &ctx, &adv, alpha).unwrap();
            let measured = measured_entropy_delta(&logits, &adv, alpha).unwrap();
            (measured - predicted).abs()
        };
        for alpha in [1e-1, 1e-2, 1e-3] {
            worst_ratio = worst_ratio.min(err(alpha) / err(alpha / 2.0));
        }
    }
    Outcome {
        id: 3,
        title: "first-order entropy prediction has second-order error",
        passed: worst_ratio >= 3.5,
        detail: format!("20 instances, alpha in {{1e-1, 1e-2, 1e-3}}, smallest shrink factor {worst_ratio:.3}"),
    }
}

fn random_table(rng: &mut ChaCha8Rng, spec: &TaskSpec, scale: f64) -> LogitTable {
    let mut t = LogitTable::new(spec.vocab().unwrap());
    for ctx in enumerate_contexts(spec, 10_000).unwrap() {
        let row = (0..spec.vocab_size).map(|_| rng.random_range(-scale..scale)).collect();
        t.set_logits(ctx, row).unwrap();
    }
    t
}

fn decomposition_exactness() -> Outcome {
    let spec = TaskSpec {
        vocab_size: 10,
        answer_length: 2,
        num_prompts: 4,
        task_kind: TaskKind::ModSum,
        seed: 9,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for i in 0..50 {
        let a = random_table(&mut rng, &spec, 1.0 + (i % 5) as f64);
        let b = random_table(&mut rng, &spec, 1.0 + (i % 3) as f64);
        let d = entropy_decomposition(&a, &b, &spec, 10_000).unwrap();
        worst = worst.max((d.shift_term + d.update_term - d.total).abs());
        pairs += 1;
    }
    Outcome {
        id: 4,
        title: "entropy-change decomposition is exact",
        passed: pairs >= 50 && worst <= 1e-12,
        detail: format!("{pairs} policy pairs on V=10, L=2; max |shift + update - total| {worst:.2e}"),
    }
}

fn covariance_asymptotics() -> Outcome {
    let rows = eta_sweep(20, &[10.0, 100.0], 505).unwrap();
    let (at10, at100) = (&rows[0].relative_errors, &rows[1].relative_errors);
    let held = at10.iter().zip(at100).filter(|(a, b)| **b <= **a / 4.0).count();
    let worst = at10.iter().zip(at100).map(|(a, b)| b / a).fold(0.0, f64::max);
    // Frozen from an independent 40-digit evaluation of p = (0.9, 0.1), A = (1, -1).
    let logits = [9f64.ln(), 0.0];
    let adv = AdvantageVector::new(vec![1.0, -1.0]).unwrap();
    let (p10, m10) = covariance_prediction(&logits, &adv, 10.0).unwrap();
    let (p100, m100) = covariance_prediction(&logits, &adv, 100.0).unwrap();
    let oracle_ok = (p10 + 0.039_550_042_392_051_95).abs() < 1e-12
        && (m10 + 0.038_124_120_183_931_81).abs() < 1e-12
        && (p100 + 0.003_955_004_239_205_194_9).abs() < 1e-12
        && (m100 + 0.003_941_294_401_228_946).abs() < 1e-12;
    Outcome {
        id: 5,
        title: "covariance prediction error shrinks with eta",
        passed: held == 20 && oracle_ok,
        detail: format!(
            "20 instances: err(100) <= err(10)/4 on {held}; largest err(100)/err(10) {worst:.4}; mean rel err {:.3e} -> {:.3e}",
            rows[0].mean_relative_error, rows[1].mean_relative_error
        ),
    }
}

fn objective_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut identity_dev = 0.0f64;
    let mut identity_clip = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(MIN_ACTIONS..=MAX_ACTIONS);
        let (mut batch, table) = random_sequence_batch(&mut rng, n).unwrap();
        for s in batch.sequences_mut() {
            s.old_logprobs = s.new_logprobs.clone();
        }
        let total = batch.total_mask() as f64;
        let masked_mean: f64 = batch
            .sequences()
            .iter()
            .flat_map(|s| s.advantages.iter().zip(&s.mask).filter(|(_, m)| **m).map(|(a, _)| *a))
            .sum::<f64>()
            / total;
        for variant in [ISVariant::SequenceGeomean, ISVariant::TokenLevel, ISVariant::PrefixGeomean] {
            let r = clipped_token_mean_loss(&batch, variant, ClipConfig::standard(), &table).unwrap();
            identity_dev = identity_dev.max((r.loss - masked_mean).abs()).max((r.mean_is - 1.0).abs());
            identity_clip = identity_clip.max(r.clip_ratio);
        }
    }

    // Ratio 1.5 with positive advantage and 0.5 with negative advantage both
    // sit on the clipped branch.
    let mut clipped_grad_zero = true;
    for (ratio, a) in [(1.5f64, 1.0), (0.5f64, -1.0)] {
        let mut s = SequenceRecord::new(0, vec![0, 1], vec![-1.0, -1.2], vec![true, true], vec![a, a]).unwrap();
        s.new_logprobs = vec![-1.0 + ratio.ln(), -1.2 + ratio.ln()];
        let batch = RolloutBatch::new(vec![s]).unwrap();
        for variant in [ISVariant::SequenceGeomean, ISVariant::TokenLevel, ISVariant::PrefixGeomean] {
            let e = surrogate(&batch, variant, ClipConfig::standard()).unwrap();
            clipped_grad_zero &= e.clip_ratio == 1.0 && e.logprob_grads.iter().flatten().all(|g| *g == 0.0);
        }
    }

    let mut padding_invariant = true;
    for _ in 0..200 {
        let len = rng.random_range(1..6);
        let new: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..0.0)).collect();
        let old: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..0.0)).collect();
        let base = sequence_is(&new, &old, &vec![true; len]).unwrap();
        let pad = rng.random_range(1..4);
        let mut new_p = new.clone();
        let mut old_p = old.clone();
        let mut mask = vec![true; len];
        for _ in 0..pad {
            new_p.push(rng.random_range(-9.0..0.0));
            old_p.push(rng.random_range(-9.0..0.0));
            mask.push(false);
        }
        padding_invariant &= sequence_is(&new_p, &old_p, &mask).unwrap() == base;
    }
    Outcome {
        id: 6,
        title: "objective algebra",
        passed: identity_dev <= 1e-12 && identity_clip == 0.0 && clipped_grad_zero && padding_invariant,
        detail: format!(
            "identity batch max dev {identity_dev:.2e}, clip {identity_clip}; clipped grads zero: {clipped_grad_zero}; padding invariant: {padding_invariant}"
        ),
    }
}

fn advantage_filter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut retained = 0;
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    let mut bounds_ok = true;
    for _ in 0..2000 {
        let g_size = rng.random_range(2..=16);
        let rewards: Vec<f64> = (0..g_size).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let responses = rewards
            .iter()
            .map(|_| Response {
                tokens: vec![0],
                old_logprobs: vec![-1.0],
            })
            .collect();
        let group = Group::new(0, responses, rewards).unwrap();
        for g in filter_groups(vec![group]) {
            retained += 1;
            bounds_ok &= g.successes() > 0 && g.successes() < g.size();
            let a = group_advantage(&g.rewards, DEFAULT_STD_FLOOR).unwrap();
            worst_mean = worst_mean.max((a.iter().sum::<f64>() / a.len() as f64).abs());
            worst_std = worst_std.max((population_std(&a) - 1.0).abs());
        }
    }
    let mut worst_affine = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=16);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        if population_std(&r) < 1e-3 {
            continue;
        }
        let scale = rng.random_range(0.01..100.0);
        let shift = rng.random_range(-50.0..50.0);
        let moved: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
        let a = group_advantage(&r, DEFAULT_STD_FLOOR).unwrap();
        let b = group_advantage(&moved, DEFAULT_STD_FLOOR).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst_affine = worst_affine.max((x - y).abs());
        }
    }
    Outcome {
        id: 7,
        title: "group advantages and mixed-outcome filter",
        passed: retained > 0 && bounds_ok && worst_mean <= 1e-8 && worst_std <= 1e-8 && worst_affine <= 1e-9,
        detail: format!(
            "{retained} retained groups; max |mean| {worst_mean:.1e}, max |std - 1| {worst_std:.1e}; affine dev {worst_affine:.1e}"
        ),
    }
}

fn tilting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut improved = true;
    let mut constant_equal = true;
    let mut worst_norm = 0.0f64;
    let mut constants = 0;
    for i in 0..1000 {
        let n = rng.random_range(MIN_ACTIONS..=MAX_ACTIONS);
        let (logits, adv) = if i % 10 == 0 {
            constants += 1;
            let (l, _) = random_instance(&mut rng, n);
            let c = rng.random_range(-1.0..1.0);
            (l, AdvantageVector::new(vec![c; n]).unwrap())
        } else {
            random_instance(&mut rng, n)
        };
        let eta = rng.random_range(0.1..10.0);
        let pi = PolicyDistribution::from_logits(&logits).unwrap();
        let tilted = kl_regularized_update(&pi, &adv, eta).unwrap();
        worst_norm = worst_norm.max((tilted.probs().iter().sum::<f64>() - 1.0).abs());
        let before = pi.expectation(adv.values());
        let after = tilted.expectation(adv.values());
        if i % 10 == 0 {
            constant_equal &= (after - before).abs() <= 1e-12;
        } else {
            improved &= after > before;
        }
    }
    Outcome {
        id: 8,
        title: "exponential tilting improves expected advantage",
        passed: improved && constant_equal && worst_norm <= 1e-12,
        detail: format!(
            "1000 instances ({constants} constant-A): strict gain {improved}, equality for constant {constant_equal}, max |sum - 1| {worst_norm:.1e}"
        ),
    }
}

struct TrainingRuns {
    runs: Vec<ArmRun>,
    elapsed: Duration,
    chance: f64,
}

fn training_runs() -> TrainingRuns {
    let tepo = ExperimentConfig::load(&config_path("tepo_mod_sum.toml")).unwrap();
    let grpo = ExperimentConfig::load(&config_path("grpo_mod_sum.toml")).unwrap();
    let task = Task::new(tepo.task.clone()).unwrap();
    let chance = expected_reward(&LogitTable::new(task.spec.vocab().unwrap()), &task).unwrap();
    let start = Instant::now();
    let runs = run_compare(&[tepo, grpo], Some(&TRAINING_SEEDS)).unwrap();
    TrainingRuns {
        runs,
        elapsed: start.elapsed(),
        chance,
    }
}

fn arm<'a>(t: &'a TrainingRuns, label: &str) -> Vec<&'a ArmRun> {
    t.runs.iter().filter(|r| r.label == label).collect()
}

fn training_reward(t: &TrainingRuns) -> Outcome {
    let tepo = arm(t, "tepo");
    let grpo = arm(t, "grpo");
    let shape_ok = tepo.len() == 5 && tepo.iter().all(|r| r.records.len() == 500);
    let finals: Vec<f64> = tepo.iter().map(|r| r.final_reward().unwrap()).collect();
    let grpo_finals: Vec<f64> = grpo.iter().map(|r| r.final_reward().unwrap()).collect();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    Outcome {
        id: 9,
        title: "TEPO learns mod_sum from chance",
        passed: shape_ok
            && (t.chance - 0.01).abs() < 1e-15
            && finals.iter().all(|r| *r >= 0.9)
            && t.elapsed <= Duration::from_secs(300),
        detail: format!(
            "chance {:.4}; TEPO final [{}]; GRPO final (reported) [{}]; both arms {:.1?}",
            t.chance,
            fmt(&finals),
            fmt(&grpo_finals),
            t.elapsed
        ),
    }
}

fn training_clip_ratio(t: &TrainingRuns) -> Outcome {
    let tepo = arm(t, "tepo");
    let grpo = arm(t, "grpo");
    let mut wins = 0;
    let mut pairs = Vec::new();
    let mut finite = true;
    for (a, b) in tepo.iter().zip(&grpo) {
        assert_eq!(a.seed, b.seed);
        let (ca, cb) = (a.mean_clip_ratio().unwrap(), b.mean_clip_ratio().unwrap());
        finite &= ca.is_finite() && a.records.len() == 500;
        if ca <= cb {
            wins += 1;
        }
        pairs.push(format!("{:.5}/{:.5}", ca, cb));
    }
    Outcome {
        id: 10,
        title: "TEPO mean clip ratio <= GRPO on >= 4 of 5 seeds",
        passed: finite && wins >= 4,
        detail: format!("TEPO/GRPO per seed [{}]; TEPO <= GRPO on {wins}/5", pairs.join(" ")),
    }
}

fn determinism(first: &TrainingRuns) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let again = training_runs();
    let mut identical = render_compare(&first.runs, MetricsFormat::Csv) == render_compare(&again.runs, MetricsFormat::Csv);
    for (i, (a, b)) in first.runs.iter().zip(&again.runs).enumerate() {
        for fmt in [MetricsFormat::Jsonl, MetricsFormat::Csv] {
            let pa = dir.path().join(format!("a{i}.{}", fmt.extension()));
            let pb = dir.path().join(format!("b{i}.{}", fmt.extension()));
            emit_metrics(&a.records, fmt, &pa).unwrap();
            emit_metrics(&b.records, fmt, &pb).unwrap();
            identical &= std::fs::read(&pa).unwrap() == std::fs::read(&pb).unwrap();
        }
    }
    let gc = run_gradcheck(100, 20_250_101).unwrap().to_json() == run_gradcheck(100, 20_250_101).unwrap().to_json();
    let sweep = format!("{:?}", eta_sweep(20, &[10.0, 100.0], 505).unwrap())
        == format!("{:?}", eta_sweep(20, &[10.0, 100.0], 505).unwrap());
    Outcome {
        id: 11,
        title: "same seed gives byte-identical outputs",
        passed: identical && gc && sweep,
        detail: format!("training metrics files {identical}, gradcheck report {gc}, eta sweep {sweep}"),
    }
}

fn main() {
    let mut outcomes = vec![
        gradient_identities(),
        sign_evidence(),
        taylor_order(),
        decomposition_exactness(),
        covariance_asymptotics(),
        objective_algebra(),
        advantage_filter(),
        tilting(),
    ];
    let runs = training_runs();
    outcomes.push(training_reward(&runs));
    outcomes.push(training_clip_ratio(&runs));
    outcomes.push(determinism(&runs));

    let mut unexpected = Vec::new();
    for o in &outcomes {
        let known = KNOWN_FAILURES.contains(&o.id);
        let verdict = match (o.passed, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("criterion {:>2} {:<13} {} :: {}", o.id, verdict, o.title, o.detail);
        if !o.passed && !known {
            unexpected.push(o.id);
        }
        if o.passed && known {
            println!("criterion {:>2} now passes; remove it from KNOWN_FAILURES", o.id);
            unexpected.push(o.id);
        }
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("acceptance: {passed}/{} criteria pass", outcomes.len());
    if !unexpected.is_empty() {
        eprintln!("unexpected acceptance results: {unexpected:?}");
        std::process::exit(1);
    }
}
