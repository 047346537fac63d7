//! Desk-scale policy optimization: a softmax-linear policy over six
//! retrieval actions, trained with the clipped group-relative objective on
//! tree rollouts from a synthetic "search the right collection, then
//! finish" environment. Gradients are analytic so they can be checked
//! against finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mot::{
    backprop_perform, build_ensemble, compute_advantages, score_evid, score_rewards, EnsembleConfig, MotError, Rollout,
    TreeStep,
};
use crate::rng::{derive_seed_n, substream};

/// Five search collections plus finish.
pub const ACTION_COUNT: usize = 6;
pub const COLLECTIONS: usize = 5;
pub const FINISH: usize = 5;
/// One-hot query type, evidence-found flag, bias.
pub const FEATURE_DIM: usize = COLLECTIONS + 2;
pub const ACTION_NAMES: [&str; ACTION_COUNT] =
    ["search_summary", "search_facts", "search_experiences", "search_personas", "search_turns", "finish"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToyError {
    #[error("old policy assigns probability {prob} to sampled action {action}")]
    DegenerateOldProbability { action: usize, prob: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mot(#[from] MotError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    /// Row-major `FEATURE_DIM × ACTION_COUNT`.
    pub theta: Vec<f64>,
}

impl Default for ToyPolicy {
    fn default() -> Self {
        ToyPolicy::zeros()
    }
}

impl ToyPolicy {
    pub fn zeros() -> Self {
        ToyPolicy { theta: vec![0.0; FEATURE_DIM * ACTION_COUNT] }
    }

    pub fn from_theta(theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), FEATURE_DIM * ACTION_COUNT, "theta has wrong length");
        ToyPolicy { theta }
    }

    pub fn logits(&self, x: &[f64]) -> [f64; ACTION_COUNT] {
        let mut z = [0.0; ACTION_COUNT];
        for (f, xf) in x.iter().enumerate() {
            if *xf == 0.0 {
                continue;
            }
            for (a, za) in z.iter_mut().enumerate() {
                *za += xf * self.theta[f * ACTION_COUNT + a];
            }
        }
        z
    }

    pub fn probs(&self, x: &[f64]) -> [f64; ACTION_COUNT] {
        softmax(&self.logits(x))
    }

    pub fn log_probs(&self, x: &[f64]) -> [f64; ACTION_COUNT] {
        let z = self.logits(x);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        z.map(|v| v - lse)
    }

    fn axpy(&self, scale: f64, dir: &[f64]) -> ToyPolicy {
        ToyPolicy { theta: self.theta.iter().zip(dir).map(|(t, d)| t + scale * d).collect() }
    }
}

fn softmax(z: &[f64; ACTION_COUNT]) -> [f64; ACTION_COUNT] {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Accumulates `x ⊗ dz` into a parameter-shaped gradient.
fn outer_add(grad: &mut [f64], x: &[f64], dz: &[f64; ACTION_COUNT], scale: f64) {
    for (f, xf) in x.iter().enumerate() {
        if *xf == 0.0 {
            continue;
        }
        for a in 0..ACTION_COUNT {
            grad[f * ACTION_COUNT + a] += scale * xf * dz[a];
        }
    }
}

/// Exact `KL(p‖q)` for categoricals.
pub fn kl(p: &[f64; ACTION_COUNT], q: &[f64; ACTION_COUNT]) -> f64 {
    p.iter().zip(q).map(|(pi, qi)| if *pi > 0.0 { pi * (pi.ln() - qi.ln()) } else { 0.0 }).sum()
}

// ---------------------------------------------------------------- environment

/// One query: its type and the answer quality each collection yields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyInstance {
    pub query_type: usize,
    pub quality: [f64; COLLECTIONS],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyState {
    pub query_type: usize,
    pub best: f64,
    pub found: bool,
    pub depth: usize,
}

impl ToyState {
    pub fn features(&self) -> Vec<f64> {
        let mut x = vec![0.0; FEATURE_DIM];
        x[self.query_type] = 1.0;
        x[COLLECTIONS] = if self.found { 1.0 } else { 0.0 };
        x[COLLECTIONS + 1] = 1.0;
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnv {
    pub instances: Vec<ToyInstance>,
    pub max_depth: usize,
    /// Quality threshold that flips the found flag.
    pub found_threshold: f64,
}

impl SyntheticEnv {
    /// The matching collection always yields quality 1; the others yield
    /// partial quality below 0.3.
    pub fn generate(seed: u64, instances: usize, max_depth: usize) -> Self {
        let mut rng = substream(seed, &["toy-env"]);
        let instances = (0..instances)
            .map(|_| {
                let query_type = rng.gen_range(0..COLLECTIONS);
                let mut quality = [0.0; COLLECTIONS];
                for (c, q) in quality.iter_mut().enumerate() {
                    *q = if c == query_type { 1.0 } else { (rng.gen::<f64>() * 0.3 * 100.0).round() / 100.0 };
                }
                ToyInstance { query_type, quality }
            })
            .collect();
        SyntheticEnv { instances, max_depth, found_threshold: 0.5 }
    }

    pub fn initial_state(&self, instance: usize) -> ToyState {
        ToyState { query_type: self.instances[instance].query_type, best: 0.0, found: false, depth: 0 }
    }

    /// Applies `action`; the second value is true when the episode ends.
    pub fn step(&self, instance: usize, state: &ToyState, action: usize) -> (ToyState, bool) {
        let mut next = *state;
        next.depth += 1;
        if action < COLLECTIONS {
            next.best = next.best.max(self.instances[instance].quality[action]);
            next.found |= next.best >= self.found_threshold;
        }
        (next, action == FINISH || next.depth >= self.max_depth)
    }

    /// Exact expected final reward of `policy` on one instance, by
    /// enumerating every action sequence.
    pub fn expected_reward(&self, policy: &ToyPolicy, instance: usize) -> f64 {
        self.expect_from(policy, instance, &self.initial_state(instance))
    }

    fn expect_from(&self, policy: &ToyPolicy, instance: usize, state: &ToyState) -> f64 {
        let p = policy.probs(&state.features());
        let mut total = 0.0;
        for (a, pa) in p.iter().enumerate() {
            let (next, done) = self.step(instance, state, a);
            total += pa * if done { next.best } else { self.expect_from(policy, instance, &next) };
        }
        total
    }

    pub fn mean_expected_reward(&self, policy: &ToyPolicy) -> f64 {
        if self.instances.is_empty() {
            return 0.0;
        }
        (0..self.instances.len()).map(|i| self.expected_reward(policy, i)).sum::<f64>() / self.instances.len() as f64
    }

    /// Best achievable expected reward (always 1 here: search the matching
    /// collection, then finish), found by enumeration.
    pub fn optimal_reward(&self, instance: usize) -> f64 {
        self.best_from(instance, &self.initial_state(instance))
    }

    fn best_from(&self, instance: usize, state: &ToyState) -> f64 {
        (0..ACTION_COUNT)
            .map(|a| {
                let (next, done) = self.step(instance, state, a);
                if done { next.best } else { self.best_from(instance, &next) }
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Every state reachable with nonzero probability, with duplicates.
    pub fn reachable_states(&self, instance: usize) -> Vec<ToyState> {
        let mut out = Vec::new();
        let mut stack = vec![self.initial_state(instance)];
        while let Some(s) = stack.pop() {
            out.push(s);
            for a in 0..ACTION_COUNT {
                let (next, done) = self.step(instance, &s, a);
                if !done {
                    stack.push(next);
                }
            }
        }
        out
    }

    /// Largest total-variation distance between two policies over all
    /// reachable states.
    pub fn max_tv(&self, a: &ToyPolicy, b: &ToyPolicy) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.instances.len() {
            for s in self.reachable_states(i) {
                let x = s.features();
                let (pa, pb) = (a.probs(&x), b.probs(&x));
                let tv = 0.5 * pa.iter().zip(&pb).map(|(u, v)| (u - v).abs()).sum::<f64>();
                worst = worst.max(tv);
            }
        }
        worst
    }
}

// ---------------------------------------------------------------- rollouts on the tree engine

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStep {
    /// State the action was taken from.
    pub state: ToyState,
    pub action: usize,
    pub after: ToyState,
    pub terminal: bool,
}

impl TreeStep for ToyStep {
    fn is_terminal(&self) -> bool {
        self.terminal
    }
    fn fmt_ok(&self) -> bool {
        true
    }
}

pub struct ToyRollout<'a> {
    pub env: &'a SyntheticEnv,
    pub instance: usize,
    pub policy: &'a ToyPolicy,
}

impl Rollout for ToyRollout<'_> {
    type Step = ToyStep;

    fn extend(&self, prefix: &[ToyStep], sample_seed: u64, max_depth: usize) -> Result<Vec<ToyStep>, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let mut state = prefix.last().map_or_else(|| self.env.initial_state(self.instance), |s| s.after);
        let cap = max_depth.min(self.env.max_depth);
        let mut steps = Vec::new();
        loop {
            let p = self.policy.probs(&state.features());
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut action = ACTION_COUNT - 1;
            for (a, pa) in p.iter().enumerate() {
                acc += pa;
                if u < acc {
                    action = a;
                    break;
                }
            }
            let (after, mut done) = self.env.step(self.instance, &state, action);
            done |= after.depth >= cap;
            steps.push(ToyStep { state, action, after, terminal: done });
            if done {
                return Ok(steps);
            }
            state = after;
        }
    }

    fn failed_step(&self, message: &str) -> ToyStep {
        unreachable!("toy rollouts cannot fail: {message}")
    }
}

// ---------------------------------------------------------------- objectives

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySample {
    pub features: Vec<f64>,
    pub action: usize,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub clip_eps: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Queries drawn per update.
    pub batch_queries: usize,
    /// Gradient steps per batch against the same frozen old policy.
    pub inner_epochs: usize,
    /// Step-halving limit for the sufficient-decrease line search.
    pub max_backtracks: usize,
    pub instances: usize,
    pub ensemble: EnsembleConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            clip_eps: 0.2,
            beta: 0.001,
            learning_rate: 0.5,
            steps: 200,
            batch_queries: 8,
            inner_epochs: 4,
            max_backtracks: 30,
            instances: 32,
            ensemble: EnsembleConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(ToyError::InvalidConfig(format!("clip_eps must lie in (0,1), got {}", self.clip_eps)));
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(ToyError::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(ToyError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_queries == 0 || self.instances == 0 {
            return Err(ToyError::InvalidConfig("batch_queries and instances must be positive".into()));
        }
        self.ensemble.validate()?;
        Ok(())
    }
}

/// Clipped surrogate with KL anchoring. Returns the loss to minimize and
/// its gradient with respect to `policy.theta`.
pub fn grpo_loss(
    policy: &ToyPolicy,
    old: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[ToySample],
    clip_eps: f64,
    beta: f64,
) -> Result<(f64, Vec<f64>), ToyError> {
    if batch.is_empty() {
        return Err(ToyError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; policy.theta.len()];
    for s in batch {
        let p = policy.probs(&s.features);
        let p_old = old.probs(&s.features)[s.action];
        if !(p_old > 0.0 && p_old.is_finite()) {
            return Err(ToyError::DegenerateOldProbability { action: s.action, prob: p_old });
        }
        let rho = p[s.action] / p_old;
        let a = s.advantage;
        let unclipped = rho * a;
        let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
        // the unclipped branch is active (and carries gradient) when it is the min
        let unclipped_active = unclipped <= clipped;
        loss -= unclipped.min(clipped) / n;
        if unclipped_active {
            // d(ρA)/dz = ρA·(e_a − p)
            let mut dz = p.map(|pj| -pj);
            dz[s.action] += 1.0;
            outer_add(&mut grad, &s.features, &dz, -unclipped / n);
        }
        if beta > 0.0 {
            let q = reference.probs(&s.features);
            let k = kl(&p, &q);
            loss += beta * k / n;
            // dKL/dz_j = p_j·(ln p_j − ln q_j − KL)
            let dz: [f64; ACTION_COUNT] = std::array::from_fn(|j| p[j] * (p[j].ln() - q[j].ln() - k));
            outer_add(&mut grad, &s.features, &dz, beta / n);
        }
    }
    Ok((loss, grad))
}

/// Negative mean log-likelihood of the target actions.
pub fn sft_loss(policy: &ToyPolicy, batch: &[(Vec<f64>, usize)]) -> Result<(f64, Vec<f64>), ToyError> {
    if batch.is_empty() {
        return Err(ToyError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; policy.theta.len()];
    for (x, a) in batch {
        let lp = policy.log_probs(x);
        loss -= lp[*a] / n;
        let mut dz = lp.map(f64::exp);
        dz[*a] -= 1.0;
        outer_add(&mut grad, x, &dz, 1.0 / n);
    }
    Ok((loss, grad))
}

/// Gradient step with step halving until the loss decreases sufficiently.
/// Returns the accepted step size (0 if no decrease was found).
pub fn descend(
    policy: &mut ToyPolicy,
    learning_rate: f64,
    max_backtracks: usize,
    mut objective: impl FnMut(&ToyPolicy) -> Result<(f64, Vec<f64>), ToyError>,
) -> Result<f64, ToyError> {
    let (l0, g) = objective(policy)?;
    let g2: f64 = g.iter().map(|v| v * v).sum();
    if g2 == 0.0 {
        return Ok(0.0);
    }
    let mut t = learning_rate;
    for _ in 0..=max_backtracks {
        let candidate = policy.axpy(-t, &g);
        let (l1, _) = objective(&candidate)?;
        if l1 <= l0 - 1e-4 * t * g2 {
            *policy = candidate;
            return Ok(t);
        }
        t *= 0.5;
    }
    Ok(0.0)
}

// ---------------------------------------------------------------- training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Exact expected reward over all environment instances.
    pub mean_reward: f64,
    /// Mean leaf reward of the rollouts drawn at this step.
    pub batch_leaf_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub curve: Vec<CurvePoint>,
    pub reference: ToyPolicy,
    pub policy: ToyPolicy,
}

impl TrainReport {
    pub fn initial_reward(&self) -> f64 {
        self.curve.first().map_or(0.0, |p| p.mean_reward)
    }

    pub fn final_reward(&self) -> f64 {
        self.curve.last().map_or(0.0, |p| p.mean_reward)
    }
}

/// Two columns, `step mean_reward`.
pub fn curve_text(curve: &[CurvePoint]) -> String {
    let mut out = String::from("# step mean_reward\n");
    for p in curve {
        out.push_str(&format!("{} {:.6}\n", p.step, p.mean_reward));
    }
    out
}

/// Rolls out a tree ensemble per batch query, scores it and returns one
/// sample per node together with the mean leaf reward.
pub fn gather_batch(
    env: &SyntheticEnv,
    policy: &ToyPolicy,
    instances: &[usize],
    ensemble: &EnsembleConfig,
    seed: u64,
) -> Result<(Vec<ToySample>, f64), ToyError> {
    let mut samples = Vec::new();
    let mut leaf_sum = 0.0;
    let mut leaf_count = 0usize;
    for (q, &instance) in instances.iter().enumerate() {
        let rollout = ToyRollout { env, instance, policy };
        let mut trees = build_ensemble(&rollout, ensemble, derive_seed_n(seed, "toy-query", &[q as u64]))?;
        for tree in &mut trees {
            score_evid(tree, |t, id| if t.nodes[id].step.after.found { 1.0 } else { 0.0 });
            backprop_perform(tree, |t, id| t.nodes[id].step.after.best);
            score_rewards(tree, ensemble.alpha);
        }
        compute_advantages(&mut trees, ensemble);
        for tree in &trees {
            for node in &tree.nodes {
                if node.is_leaf() {
                    leaf_sum += node.step.after.best;
                    leaf_count += 1;
                }
                samples.push(ToySample { features: node.step.state.features(), action: node.step.action, advantage: node.a_total });
            }
        }
    }
    Ok((samples, leaf_sum / leaf_count.max(1) as f64))
}

pub fn train(env: &SyntheticEnv, config: &TrainerConfig, seed: u64) -> Result<TrainReport, ToyError> {
    config.validate()?;
    let reference = ToyPolicy::zeros();
    let mut policy = reference.clone();
    let mut curve = Vec::with_capacity(config.steps + 1);
    let mut last_batch = 0.0;
    for step in 0..config.steps {
        let mut rng = substream(seed, &["toy-batch", &step.to_string()]);
        let picks: Vec<usize> = (0..config.batch_queries).map(|_| rng.gen_range(0..env.instances.len())).collect();
        let old = policy.clone();
        let (samples, batch_reward) =
            gather_batch(env, &old, &picks, &config.ensemble, derive_seed_n(seed, "toy-rollouts", &[step as u64]))?;
        curve.push(CurvePoint { step, mean_reward: env.mean_expected_reward(&policy), batch_leaf_reward: batch_reward });
        last_batch = batch_reward;
        for _ in 0..config.inner_epochs {
            descend(&mut policy, config.learning_rate, config.max_backtracks, |p| {
                grpo_loss(p, &old, &reference, &samples, config.clip_eps, config.beta)
            })?;
        }
    }
    curve.push(CurvePoint { step: config.steps, mean_reward: env.mean_expected_reward(&policy), batch_leaf_reward: last_batch });
    Ok(TrainReport { seed, curve, reference, policy })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_policy_probabilities() {
        let p = ToyPolicy::zeros().probs(&ToyState { query_type: 2, best: 0.0, found: false, depth: 0 }.features());
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| (*v - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn optimal_is_one() {
        let env = SyntheticEnv::generate(3, 4, 4);
        for i in 0..4 {
            assert!((env.optimal_reward(i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_respects_depth() {
        let env = SyntheticEnv::generate(3, 2, 4);
        let policy = ToyPolicy::zeros();
        let r = ToyRollout { env: &env, instance: 0, policy: &policy };
        for s in 0..50 {
            let steps = r.extend(&[], s, 4).unwrap();
            assert!(steps.len() <= 4);
            assert!(steps.last().unwrap().terminal);
        }
    }
}
