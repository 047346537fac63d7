//! Memory operation trees: ensembles of rollout trees grown from a seed
//! trajectory by grafting branch rollouts at sampled pivots, node rewards
//! with child-mean performance backup, and dual-scale advantages.
//!
//! The engine is generic over the step type so the toy trainer can reuse it;
//! [`RetrievalRollout`] adapts the retrieval loop.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::DbSnapshot;
use crate::memory::{ItemId, TurnId};
use crate::metrics::LeafMetric;
use crate::policy::{Policy, ToolCall};
use crate::retrieval::{continue_from, RetrievalConfig, RetrievalStep, Sampling, Trajectory};
use crate::rng::{derive_seed_n, substream};

pub trait TreeStep: Clone + Send + Sync {
    /// Finish or forced answer.
    fn is_terminal(&self) -> bool;
    /// Schema validity of the step's tool call.
    fn fmt_ok(&self) -> bool;
}

/// Produces complete rollouts continuing a path of steps.
pub trait Rollout: Sync {
    type Step: TreeStep;

    /// New steps extending `prefix` to a terminal step, using at most
    /// `max_depth - prefix.len()` steps.
    fn extend(&self, prefix: &[Self::Step], sample_seed: u64, max_depth: usize) -> Result<Vec<Self::Step>, String>;

    /// Terminal step standing in for a rollout that failed outright.
    fn failed_step(&self, message: &str) -> Self::Step;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    /// Trees per query.
    pub g: usize,
    /// Expansion rounds.
    pub m: usize,
    /// Pivots per tree per round.
    pub n_v: usize,
    pub max_depth: usize,
    /// Evidence weight in the node reward.
    pub alpha: f64,
    /// Standardization floor.
    pub epsilon_std: f64,
    /// Rollout temperature; >0 lets stochastic policies diverge between branches.
    pub temperature: f64,
    pub leaf_metric: LeafMetric,
    /// Population (true) or sample standard deviation.
    pub population_std: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            g: 3,
            m: 2,
            n_v: 3,
            max_depth: 4,
            alpha: 0.5,
            epsilon_std: 1e-8,
            temperature: 1.0,
            leaf_metric: LeafMetric::F1,
            population_std: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MotError {
    #[error("invalid ensemble config: {0}")]
    InvalidConfig(String),
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), MotError> {
        let bad = |m: &str| Err(MotError::InvalidConfig(m.to_owned()));
        if self.g == 0 {
            return bad("g must be positive");
        }
        if self.n_v == 0 {
            return bad("n_v must be positive");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be a non-negative number");
        }
        if !(self.epsilon_std > 0.0) {
            return bad("epsilon_std must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotNode<S> {
    pub node_id: usize,
    /// None for the depth-1 node hanging off the query root.
    pub parent: Option<usize>,
    pub depth: usize,
    pub step: S,
    pub children: Vec<usize>,
    pub fmt_ok: bool,
    pub evid: f64,
    pub perform: f64,
    pub reward: f64,
    pub a_intra: f64,
    pub a_inter: f64,
    pub a_total: f64,
}

impl<S> MotNode<S> {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// One grafted branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expansion {
    pub round: usize,
    pub pivot: usize,
    pub pivot_depth: usize,
    pub branch_seed: u64,
    pub new_nodes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mot<S> {
    pub tree_id: usize,
    pub seed: u64,
    pub nodes: Vec<MotNode<S>>,
    pub seed_path: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_failure: Option<String>,
    pub log: Vec<Expansion>,
}

impl<S: TreeStep> Mot<S> {
    fn graft(&mut self, parent: Option<usize>, steps: Vec<S>) -> Vec<usize> {
        let mut ids = Vec::with_capacity(steps.len());
        let mut parent = parent;
        for step in steps {
            let id = self.nodes.len();
            let depth = parent.map_or(1, |p| self.nodes[p].depth + 1);
            if let Some(p) = parent {
                self.nodes[p].children.push(id);
            }
            self.nodes.push(MotNode {
                node_id: id,
                parent,
                depth,
                fmt_ok: step.fmt_ok(),
                step,
                children: Vec::new(),
                evid: 0.0,
                perform: 0.0,
                reward: 0.0,
                a_intra: 0.0,
                a_inter: 0.0,
                a_total: 0.0,
            });
            ids.push(id);
            parent = Some(id);
        }
        ids
    }

    /// Node ids from the depth-1 node down to `node`.
    pub fn path(&self, node: usize) -> Vec<usize> {
        let mut out = vec![node];
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    pub fn path_steps(&self, node: usize) -> Vec<S> {
        self.path(node).into_iter().map(|i| self.nodes[i].step.clone()).collect()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &MotNode<S>> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    /// Pivot candidates: non-terminal nodes above the depth cap.
    pub fn pivot_candidates(&self, max_depth: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| !n.step.is_terminal() && n.depth < max_depth)
            .map(|n| n.node_id)
            .collect()
    }

    /// Node count implied by the construction log.
    pub fn logged_node_count(&self) -> usize {
        self.seed_path.len() + self.log.iter().map(|e| e.new_nodes.len()).sum::<usize>()
    }
}

fn complete<R: Rollout>(rollout: &R, prefix: &[R::Step], seed: u64, max_depth: usize) -> (Vec<R::Step>, Option<String>) {
    match rollout.extend(prefix, seed, max_depth) {
        Ok(steps) if !steps.is_empty() && steps.last().is_some_and(TreeStep::is_terminal) => (steps, None),
        Ok(steps) if steps.is_empty() => {
            let msg = "rollout produced no steps".to_owned();
            (vec![rollout.failed_step(&msg)], Some(msg))
        }
        Ok(mut steps) => {
            // A path must end in a terminal node; close it if the rollout did not.
            let msg = "rollout ended on a non-terminal step".to_owned();
            if prefix.len() + steps.len() >= max_depth {
                steps.pop();
            }
            steps.push(rollout.failed_step(&msg));
            (steps, Some(msg))
        }
        Err(e) => (vec![rollout.failed_step(&e)], Some(e)),
    }
}

/// Builds one tree: seed rollout, then `m` rounds of pivot sampling and
/// branch grafting. Branches within a round run in parallel against the
/// tree as it stood at the start of the round.
pub fn build_tree<R: Rollout>(rollout: &R, config: &EnsembleConfig, tree_id: usize, seed: u64) -> Mot<R::Step> {
    let mut tree = Mot { tree_id, seed, nodes: Vec::new(), seed_path: Vec::new(), seed_failure: None, log: Vec::new() };
    let seed_rollout = derive_seed_n(seed, "seed-rollout", &[tree_id as u64]);
    let (steps, failure) = complete(rollout, &[], seed_rollout, config.max_depth);
    tree.seed_path = tree.graft(None, steps);
    tree.seed_failure = failure;

    for round in 1..=config.m {
        let candidates = tree.pivot_candidates(config.max_depth);
        if candidates.is_empty() {
            break;
        }
        let mut rng = substream(seed, &["pivots", &tree_id.to_string(), &round.to_string()]);
        let take = config.n_v.min(candidates.len());
        let pivots: Vec<usize> = sample(&mut rng, candidates.len(), take).into_iter().map(|i| candidates[i]).collect();
        let branches: Vec<(usize, u64, Vec<R::Step>, Option<String>)> = pivots
            .par_iter()
            .map(|&pivot| {
                let branch_seed = derive_seed_n(seed, "branch", &[tree_id as u64, round as u64, pivot as u64]);
                let prefix = tree.path_steps(pivot);
                let (steps, failed) = complete(rollout, &prefix, branch_seed, config.max_depth);
                (pivot, branch_seed, steps, failed)
            })
            .collect();
        for (pivot, branch_seed, steps, failed) in branches {
            let new_nodes = tree.graft(Some(pivot), steps);
            tree.log.push(Expansion {
                round,
                pivot,
                pivot_depth: tree.nodes[pivot].depth,
                branch_seed,
                new_nodes,
                failed,
            });
        }
    }
    tree
}

/// `g` trees, built in parallel; tree `i` uses a substream of `seed`.
pub fn build_ensemble<R: Rollout>(rollout: &R, config: &EnsembleConfig, seed: u64) -> Result<Vec<Mot<R::Step>>, MotError> {
    config.validate()?;
    Ok((0..config.g)
        .into_par_iter()
        .map(|i| build_tree(rollout, config, i, derive_seed_n(seed, "tree", &[i as u64])))
        .collect())
}

/// Leaf perform from `leaf_score`; internal perform is the mean over direct
/// children. Children always carry larger ids than their parent, so one
/// reverse pass suffices.
pub fn backprop_perform<S: TreeStep>(tree: &mut Mot<S>, mut leaf_score: impl FnMut(&Mot<S>, usize) -> f64) {
    for id in (0..tree.nodes.len()).rev() {
        let perform = if tree.nodes[id].is_leaf() {
            leaf_score(tree, id)
        } else {
            let children = &tree.nodes[id].children;
            children.iter().map(|&c| tree.nodes[c].perform).sum::<f64>() / children.len() as f64
        };
        tree.nodes[id].perform = perform;
    }
}

/// Fills `evid` for every node.
pub fn score_evid<S: TreeStep>(tree: &mut Mot<S>, mut evid: impl FnMut(&Mot<S>, usize) -> f64) {
    for id in 0..tree.nodes.len() {
        let e = evid(tree, id);
        tree.nodes[id].evid = e;
    }
}

/// `R(v) = I_fmt · (α·Evid + Perform)`.
pub fn node_reward(fmt_ok: bool, alpha: f64, evid: f64, perform: f64) -> f64 {
    if fmt_ok { alpha * evid + perform } else { 0.0 }
}

pub fn score_rewards<S: TreeStep>(tree: &mut Mot<S>, alpha: f64) {
    for n in &mut tree.nodes {
        n.reward = node_reward(n.fmt_ok, alpha, n.evid, n.perform);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn stats(values: &[f64], population: bool) -> Stats {
    let n = values.len();
    if n == 0 {
        return Stats { mean: 0.0, std: 0.0, count: 0 };
    }
    // Centering on the first value keeps the mean bit-exact for constant
    // inputs, so σ = 0 groups get exactly zero advantage.
    let pivot = values[0];
    let mean = pivot + values.iter().map(|v| v - pivot).sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let denom = if population { n as f64 } else { (n.max(2) - 1) as f64 };
    Stats { mean, std: (ss / denom).sqrt(), count: n }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAdvantage {
    pub tree_id: usize,
    pub node_id: usize,
    pub reward: f64,
    pub a_intra: f64,
    pub a_inter: f64,
    pub a_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageReport {
    pub alpha: f64,
    pub epsilon_std: f64,
    pub population_std: bool,
    pub nodes: Vec<NodeAdvantage>,
    pub per_tree: Vec<Stats>,
    pub global: Stats,
}

/// Within-tree and across-ensemble z-scores of node rewards, over all nodes.
pub fn compute_advantages<S: TreeStep>(trees: &mut [Mot<S>], config: &EnsembleConfig) -> AdvantageReport {
    let eps = config.epsilon_std;
    let all: Vec<f64> = trees.iter().flat_map(|t| t.nodes.iter().map(|n| n.reward)).collect();
    let global = stats(&all, config.population_std);
    let mut per_tree = Vec::with_capacity(trees.len());
    let mut nodes = Vec::with_capacity(all.len());
    for tree in trees.iter_mut() {
        let rewards: Vec<f64> = tree.nodes.iter().map(|n| n.reward).collect();
        let local = stats(&rewards, config.population_std);
        for n in &mut tree.nodes {
            n.a_intra = (n.reward - local.mean) / (local.std + eps);
            n.a_inter = (n.reward - global.mean) / (global.std + eps);
            n.a_total = n.a_intra + n.a_inter;
            nodes.push(NodeAdvantage {
                tree_id: tree.tree_id,
                node_id: n.node_id,
                reward: n.reward,
                a_intra: n.a_intra,
                a_inter: n.a_inter,
                a_total: n.a_total,
            });
        }
        per_tree.push(local);
    }
    AdvantageReport {
        alpha: config.alpha,
        epsilon_std: eps,
        population_std: config.population_std,
        nodes,
        per_tree,
        global,
    }
}

// ---------------------------------------------------------------- retrieval adapter

impl TreeStep for RetrievalStep {
    fn is_terminal(&self) -> bool {
        RetrievalStep::is_terminal(self)
    }

    fn fmt_ok(&self) -> bool {
        self.valid_format
    }
}

/// Retrieval rollouts against a fixed snapshot.
pub struct RetrievalRollout<'a> {
    pub query: &'a str,
    pub db: &'a DbSnapshot,
    pub policy: &'a dyn Policy,
    pub retrieval: &'a RetrievalConfig,
    pub temperature: f64,
}

impl Rollout for RetrievalRollout<'_> {
    type Step = RetrievalStep;

    fn extend(&self, prefix: &[RetrievalStep], sample_seed: u64, max_depth: usize) -> Result<Vec<RetrievalStep>, String> {
        // Search steps fill depths up to max_depth - 1; the last slot is
        // reserved for the (possibly forced) answer.
        let config = RetrievalConfig { max_steps: max_depth.saturating_sub(1).max(1), ..self.retrieval.clone() };
        let t = Trajectory::from_steps(self.query, prefix.to_vec());
        let full = continue_from(&t, self.db, self.policy, &config, Sampling::seeded(self.temperature, sample_seed))
            .map_err(|e| e.to_string())?;
        Ok(full.steps[prefix.len()..].to_vec())
    }

    fn failed_step(&self, message: &str) -> RetrievalStep {
        RetrievalStep {
            step_index: 0,
            reasoning: String::new(),
            action: ToolCall { tool_name: String::new(), arguments: Default::default(), raw_text: message.to_owned() },
            observation: Vec::new(),
            valid_format: false,
            violation: Some(message.to_owned()),
            forced: true,
        }
    }
}

/// Cumulative retrieved item ids along the path to `node`.
pub fn cumulative_retrieved(tree: &Mot<RetrievalStep>, node: usize) -> BTreeSet<ItemId> {
    tree.path(node)
        .into_iter()
        .flat_map(|i| tree.nodes[i].step.observation.iter().map(|h| h.item_id.clone()))
        .collect()
}

/// Fraction of evidence turns covered by the sources of retrieved items;
/// 0 when there is no evidence annotation.
pub fn evidence_coverage(
    retrieved: &BTreeSet<ItemId>,
    evidence: &BTreeSet<TurnId>,
    store: &crate::memory::MemoryStore,
) -> f64 {
    if evidence.is_empty() {
        return 0.0;
    }
    let covered: BTreeSet<&TurnId> = retrieved
        .iter()
        .filter_map(|id| store.get(id))
        .flat_map(|item| item.source_turn_ids.iter())
        .filter(|t| evidence.contains(*t))
        .collect();
    covered.len() as f64 / evidence.len() as f64
}

/// A fully scored ensemble for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEnsemble {
    pub query: String,
    pub gold_answer: String,
    pub evidence_turn_ids: BTreeSet<TurnId>,
    pub seed: u64,
    pub config: EnsembleConfig,
    pub trees: Vec<Mot<RetrievalStep>>,
    pub report: AdvantageReport,
}

impl QueryEnsemble {
    /// (tree index, leaf node id) for every leaf of every tree.
    pub fn leaves(&self) -> Vec<(usize, usize)> {
        self.trees
            .iter()
            .enumerate()
            .flat_map(|(t, tree)| tree.leaves().map(move |n| (t, n.node_id)))
            .collect()
    }
}

/// Builds, scores and standardizes the ensemble for one question.
pub fn run_query_ensemble(
    query: &str,
    gold_answer: &str,
    evidence: &BTreeSet<TurnId>,
    db: &DbSnapshot,
    policy: &dyn Policy,
    retrieval: &RetrievalConfig,
    config: &EnsembleConfig,
    seed: u64,
) -> Result<QueryEnsemble, MotError> {
    let rollout = RetrievalRollout { query, db, policy, retrieval, temperature: config.temperature };
    let mut trees = build_ensemble(&rollout, config, seed)?;
    for tree in &mut trees {
        score_evid(tree, |t, id| evidence_coverage(&cumulative_retrieved(t, id), evidence, &db.store));
        backprop_perform(tree, |t, id| {
            let answer = t.nodes[id].step.action.str_arg("answer").unwrap_or("");
            config.leaf_metric.score(answer, gold_answer)
        });
        score_rewards(tree, config.alpha);
    }
    let report = compute_advantages(&mut trees, config);
    Ok(QueryEnsemble {
        query: query.to_owned(),
        gold_answer: gold_answer.to_owned(),
        evidence_turn_ids: evidence.clone(),
        seed,
        config: config.clone(),
        trees,
        report,
    })
}
