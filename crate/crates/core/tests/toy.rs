use memtree_core::toy::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_policy(rng: &mut ChaCha8Rng, scale: f64) -> ToyPolicy {
    ToyPolicy::from_theta((0..FEATURE_DIM * ACTION_COUNT).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn random_features(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let state = ToyState { query_type: rng.gen_range(0..COLLECTIONS), best: 0.0, found: rng.gen(), depth: 0 };
    state.features()
}

fn central_difference(theta: &[f64], h: f64, mut f: impl FnMut(&ToyPolicy) -> f64) -> Vec<f64> {
    (0..theta.len())
        .map(|i| {
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[i] += h;
            minus[i] -= h;
            (f(&ToyPolicy::from_theta(plus)) - f(&ToyPolicy::from_theta(minus))) / (2.0 * h)
        })
        .collect()
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Samples whose ratio sits within `margin` of a clip edge make the
/// surrogate non-differentiable inside the difference stencil.
fn away_from_kinks(policy: &ToyPolicy, old: &ToyPolicy, batch: &[ToySample], eps: f64, margin: f64) -> bool {
    batch.iter().all(|s| {
        let rho = policy.probs(&s.features)[s.action] / old.probs(&s.features)[s.action];
        (rho - (1.0 + eps)).abs() > margin && (rho - (1.0 - eps)).abs() > margin
    })
}

#[test]
fn grpo_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 20 {
        let old = random_policy(&mut rng, 1.0);
        let reference = random_policy(&mut rng, 1.0);
        let policy = ToyPolicy::from_theta(old.theta.iter().map(|t| t + rng.gen_range(-0.3..0.3)).collect());
        let batch: Vec<ToySample> = (0..12)
            .map(|_| ToySample {
                features: random_features(&mut rng),
                action: rng.gen_range(0..ACTION_COUNT),
                advantage: rng.gen_range(-2.0..2.0),
            })
            .collect();
        if !away_from_kinks(&policy, &old, &batch, 0.2, 1e-3) {
            continue;
        }
        let (_, analytic) = grpo_loss(&policy, &old, &reference, &batch, 0.2, 0.05).unwrap();
        let numeric = central_difference(&policy.theta, 1e-5, |p| grpo_loss(p, &old, &reference, &batch, 0.2, 0.05).unwrap().0);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
        checked += 1;
    }
}

#[test]
fn sft_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let policy = random_policy(&mut rng, 1.5);
        let batch: Vec<(Vec<f64>, usize)> =
            (0..10).map(|_| (random_features(&mut rng), rng.gen_range(0..ACTION_COUNT))).collect();
        let (_, analytic) = sft_loss(&policy, &batch).unwrap();
        let numeric = central_difference(&policy.theta, 1e-5, |p| sft_loss(p, &batch).unwrap().0);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn identity_ratio_loss_is_negative_mean_advantage() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let policy = random_policy(&mut rng, 1.0);
    let batch: Vec<ToySample> = (0..7)
        .map(|i| ToySample { features: random_features(&mut rng), action: i % ACTION_COUNT, advantage: i as f64 - 3.5 + 0.25 })
        .collect();
    let mean_a = batch.iter().map(|s| s.advantage).sum::<f64>() / batch.len() as f64;
    let (loss, _) = grpo_loss(&policy, &policy, &ToyPolicy::zeros(), &batch, 0.2, 0.0).unwrap();
    assert!((loss + mean_a).abs() < 1e-12);
}

#[test]
fn positive_advantage_clipped_at_upper_edge() {
    // Two live actions: old policy 0.4 on action 0, new policy 0.6, so ρ = 1.5.
    let x = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    let logit = |p: f64| p.ln();
    let mut old = vec![0.0; FEATURE_DIM * ACTION_COUNT];
    let mut new = vec![0.0; FEATURE_DIM * ACTION_COUNT];
    let bias = (FEATURE_DIM - 1) * ACTION_COUNT;
    for a in 2..ACTION_COUNT {
        old[bias + a] = -200.0;
        new[bias + a] = -200.0;
    }
    old[bias] = logit(0.4);
    old[bias + 1] = logit(0.6);
    new[bias] = logit(0.6);
    new[bias + 1] = logit(0.4);
    let old = ToyPolicy::from_theta(old);
    let new = ToyPolicy::from_theta(new);
    let sample = ToySample { features: x, action: 0, advantage: 2.0 };
    let (loss, grad) = grpo_loss(&new, &old, &ToyPolicy::zeros(), &[sample], 0.2, 0.0).unwrap();
    assert!((loss + 1.2 * 2.0).abs() < 1e-9, "loss {loss}");
    assert!(grad.iter().all(|g| *g == 0.0));
}

#[test]
fn degenerate_old_probability_rejected() {
    let mut theta = vec![0.0; FEATURE_DIM * ACTION_COUNT];
    theta[(FEATURE_DIM - 1) * ACTION_COUNT] = -1e6;
    let old = ToyPolicy::from_theta(theta);
    let sample = ToySample { features: vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], action: 0, advantage: 1.0 };
    let err = grpo_loss(&ToyPolicy::zeros(), &old, &ToyPolicy::zeros(), &[sample], 0.2, 0.0).unwrap_err();
    assert!(matches!(err, ToyError::DegenerateOldProbability { .. }));
    assert_eq!(grpo_loss(&old, &old, &old, &[], 0.2, 0.0).unwrap_err(), ToyError::EmptyBatch);
}

#[test]
fn uniform_sft_loss_is_log_action_count() {
    let batch: Vec<(Vec<f64>, usize)> =
        (0..ACTION_COUNT).map(|a| (ToyState { query_type: a % COLLECTIONS, best: 0.0, found: false, depth: 0 }.features(), a)).collect();
    let (loss, _) = sft_loss(&ToyPolicy::zeros(), &batch).unwrap();
    assert!((loss - (ACTION_COUNT as f64).ln()).abs() < 1e-12);
}

#[test]
fn sft_loss_vanishes_as_target_scores_grow() {
    let x = ToyState { query_type: 1, best: 0.0, found: false, depth: 0 }.features();
    let batch = vec![(x, 3usize)];
    let bias = (FEATURE_DIM - 1) * ACTION_COUNT;
    let mut previous = f64::INFINITY;
    for scale in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let mut theta = vec![0.0; FEATURE_DIM * ACTION_COUNT];
        theta[bias + 3] = scale;
        let (loss, _) = sft_loss(&ToyPolicy::from_theta(theta), &batch).unwrap();
        assert!(loss < previous);
        previous = loss;
    }
    assert!(previous < 1e-12);
}

#[test]
fn sft_descent_raises_target_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch: Vec<(Vec<f64>, usize)> = (0..COLLECTIONS)
        .map(|c| (ToyState { query_type: c, best: 0.0, found: false, depth: 0 }.features(), c))
        .collect();
    let mut policy = random_policy(&mut rng, 0.1);
    let (before, _) = sft_loss(&policy, &batch).unwrap();
    for _ in 0..50 {
        descend(&mut policy, 1.0, 30, |p| sft_loss(p, &batch)).unwrap();
    }
    let (after, _) = sft_loss(&policy, &batch).unwrap();
    assert!(after < 0.2 * before, "{before} -> {after}");
}

#[test]
fn ascent_direction_raises_surrogate_for_unclipped_positive_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let old = random_policy(&mut rng, 1.0);
        let policy = ToyPolicy::from_theta(old.theta.iter().map(|t| t + rng.gen_range(-0.05..0.05)).collect());
        let sample = ToySample { features: random_features(&mut rng), action: rng.gen_range(0..ACTION_COUNT), advantage: 1.0 };
        let batch = [sample];
        let rho = policy.probs(&batch[0].features)[batch[0].action] / old.probs(&batch[0].features)[batch[0].action];
        assert!(rho < 1.2);
        let (loss, grad) = grpo_loss(&policy, &old, &old, &batch, 0.2, 0.0).unwrap();
        let stepped = ToyPolicy::from_theta(policy.theta.iter().zip(&grad).map(|(t, g)| t - 1e-6 * g).collect());
        let (after, _) = grpo_loss(&stepped, &old, &old, &batch, 0.2, 0.0).unwrap();
        assert!(after < loss, "surrogate did not rise");
    }
}

#[test]
fn huge_beta_anchors_to_reference() {
    let env = SyntheticEnv::generate(4, 16, 4);
    let config = TrainerConfig { beta: 1e3, steps: 20, ..TrainerConfig::default() };
    let report = train(&env, &config, 9).unwrap();
    let tv = env.max_tv(&report.policy, &report.reference);
    assert!(tv < 1e-3, "total variation {tv}");
}

#[test]
fn training_is_deterministic() {
    let env = SyntheticEnv::generate(4, 16, 4);
    let config = TrainerConfig { steps: 15, ..TrainerConfig::default() };
    let a = train(&env, &config, 17).unwrap();
    let b = train(&env, &config, 17).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.policy, b.policy);
}

#[test]
fn invalid_config_rejected() {
    let env = SyntheticEnv::generate(4, 4, 4);
    for config in [
        TrainerConfig { clip_eps: 0.0, ..TrainerConfig::default() },
        TrainerConfig { clip_eps: 1.0, ..TrainerConfig::default() },
        TrainerConfig { beta: -1.0, ..TrainerConfig::default() },
    ] {
        assert!(matches!(train(&env, &config, 1), Err(ToyError::InvalidConfig(_))));
    }
}

#[test]
fn curve_text_has_two_columns() {
    let env = SyntheticEnv::generate(4, 4, 4);
    let report = train(&env, &TrainerConfig { steps: 3, ..TrainerConfig::default() }, 1).unwrap();
    let text = curve_text(&report.curve);
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split_whitespace().count() == 2));
}

proptest! {
    #[test]
    fn probabilities_are_a_distribution(theta in prop::collection::vec(-20.0f64..20.0, FEATURE_DIM * ACTION_COUNT), q in 0usize..COLLECTIONS, found: bool) {
        let p = ToyPolicy::from_theta(theta).probs(&ToyState { query_type: q, best: 0.0, found, depth: 0 }.features());
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn kl_nonnegative_and_zero_on_equal(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_policy(&mut rng, 2.0);
        let b = random_policy(&mut rng, 2.0);
        let x = random_features(&mut rng);
        let (pa, pb) = (a.probs(&x), b.probs(&x));
        prop_assert!(kl(&pa, &pb) >= -1e-15);
        prop_assert!(kl(&pa, &pa).abs() < 1e-15);
    }

    #[test]
    fn clipping_inactive_inside_trust_region(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let old = random_policy(&mut rng, 1.0);
        let policy = ToyPolicy::from_theta(old.theta.iter().map(|t| t + rng.gen_range(-0.02..0.02)).collect());
        let batch: Vec<ToySample> = (0..8)
            .map(|_| ToySample { features: random_features(&mut rng), action: rng.gen_range(0..ACTION_COUNT), advantage: rng.gen_range(-2.0..2.0) })
            .collect();
        let mut unclipped = 0.0;
        for s in &batch {
            let rho = policy.probs(&s.features)[s.action] / old.probs(&s.features)[s.action];
            prop_assume!((0.8..=1.2).contains(&rho));
            unclipped -= rho * s.advantage / batch.len() as f64;
        }
        let (loss, _) = grpo_loss(&policy, &old, &old, &batch, 0.2, 0.0).unwrap();
        prop_assert_eq!(loss, unclipped);
    }
}
