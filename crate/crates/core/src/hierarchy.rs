//! Per-level model banks, top-down routing over per-parent models with a
//! flat fallback, and cross-level post-processing of level distributions.

use crate::nnet::{Classifier, NetError};
use crate::scalar::{argmax, Scalar};
use crate::taxonomy::Taxonomy;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("level {level}: expected {expected} classes, found {found}")]
    InconsistentScheme { level: usize, expected: usize, found: usize },
    #[error("expected {expected} level distributions, found {found}")]
    MissingLevel { expected: usize, found: usize },
    #[error("invalid level weights: {0}")]
    InvalidWeights(String),
    #[error("pruning level {0} is outside the taxonomy")]
    InvalidPruneLevel(usize),
    #[error("unknown parent code `{0}`")]
    UnknownParent(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Probabilities over the nodes of one level, indexed by level position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelDistribution {
    pub level: usize,
    pub probs: Vec<f64>,
}

impl LevelDistribution {
    pub fn uniform(level: usize, n: usize) -> Self {
        LevelDistribution { level, probs: vec![1.0 / n as f64; n] }
    }

    /// Highest-probability position; ties go to the smallest code.
    pub fn top(&self) -> usize {
        argmax(&self.probs).expect("non-empty distribution")
    }
}

/// One model per taxonomy level, each over that level's sorted node list.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelBank<S> {
    pub models: Vec<Classifier<S>>,
}

impl<S: Scalar> LevelBank<S> {
    pub fn new(models: Vec<Classifier<S>>, taxonomy: &Taxonomy) -> Result<Self, HierarchyError> {
        if models.len() != taxonomy.depth() {
            return Err(HierarchyError::MissingLevel { expected: taxonomy.depth(), found: models.len() });
        }
        for (k, m) in models.iter().enumerate() {
            let expected = taxonomy.level_count(k + 1);
            if m.num_classes() != expected {
                return Err(HierarchyError::InconsistentScheme { level: k + 1, expected, found: m.num_classes() });
            }
        }
        Ok(LevelBank { models })
    }
}

/// Independent distributions at every level; no consistency is enforced.
pub fn predict_levels<S: Scalar>(bank: &LevelBank<S>, x: &[S]) -> Result<Vec<LevelDistribution>, HierarchyError> {
    bank.models
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let probs = m.predict_proba(x)?.iter().map(|p| p.as_f64()).collect();
            Ok(LevelDistribution { level: k + 1, probs })
        })
        .collect()
}

/// How level distributions are aggregated into leaf scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Leaf-level distribution only.
    #[serde(rename = "none", alias = "leaf")]
    Leaf,
    TotalAvg,
    WeightedAvg,
    JointProb,
}

impl FromStr for CombineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "leaf" | "none" => Ok(CombineMode::Leaf),
            "total_avg" => Ok(CombineMode::TotalAvg),
            "weighted_avg" => Ok(CombineMode::WeightedAvg),
            "joint_prob" => Ok(CombineMode::JointProb),
            other => Err(format!("unknown post-processing mode `{other}` (none, total_avg, weighted_avg, joint_prob)")),
        }
    }
}

impl fmt::Display for CombineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombineMode::Leaf => "none",
            CombineMode::TotalAvg => "total_avg",
            CombineMode::WeightedAvg => "weighted_avg",
            CombineMode::JointProb => "joint_prob",
        })
    }
}

/// Depth weights `1, 2, …, depth`.
pub fn default_level_weights(depth: usize) -> Vec<f64> {
    (1..=depth).map(|k| k as f64).collect()
}

/// Level-position paths of every leaf: `paths[leaf][k]` is the position of
/// the leaf's level-`k+1` ancestor.
pub fn leaf_paths(taxonomy: &Taxonomy) -> Vec<Vec<usize>> {
    taxonomy
        .leaves()
        .iter()
        .map(|&leaf| taxonomy.ancestor_indices(leaf).into_iter().map(|i| taxonomy.position(i)).collect())
        .collect()
}

fn check_dists(taxonomy: &Taxonomy, dists: &[LevelDistribution]) -> Result<(), HierarchyError> {
    if dists.len() != taxonomy.depth() {
        return Err(HierarchyError::MissingLevel { expected: taxonomy.depth(), found: dists.len() });
    }
    for (k, d) in dists.iter().enumerate() {
        let expected = taxonomy.level_count(k + 1);
        if d.probs.len() != expected {
            return Err(HierarchyError::InconsistentScheme { level: k + 1, expected, found: d.probs.len() });
        }
    }
    Ok(())
}

fn normalize(scores: &mut [f64]) {
    let total: f64 = scores.iter().sum();
    if total > 0.0 && total.is_finite() {
        scores.iter_mut().for_each(|s| *s /= total);
    } else {
        let u = 1.0 / scores.len() as f64;
        scores.iter_mut().for_each(|s| *s = u);
    }
}

/// Unnormalized path aggregate for each leaf. Joint scores are plain products.
pub fn path_scores(taxonomy: &Taxonomy, dists: &[LevelDistribution], mode: CombineMode, weights: &[f64]) -> Result<Vec<f64>, HierarchyError> {
    check_dists(taxonomy, dists)?;
    let depth = taxonomy.depth();
    if mode == CombineMode::WeightedAvg {
        if weights.len() != depth {
            return Err(HierarchyError::InvalidWeights(format!("{} weights for {} levels", weights.len(), depth)));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(HierarchyError::InvalidWeights(format!("{weights:?}")));
        }
    }
    let weight_sum: f64 = weights.iter().sum();
    Ok(leaf_paths(taxonomy)
        .iter()
        .map(|path| {
            let p = path.iter().enumerate().map(|(k, &pos)| dists[k].probs[pos]);
            match mode {
                CombineMode::Leaf => dists[depth - 1].probs[path[depth - 1]],
                CombineMode::TotalAvg => p.sum::<f64>() / depth as f64,
                CombineMode::WeightedAvg => p.zip(weights).map(|(q, w)| q * w).sum::<f64>() / weight_sum,
                CombineMode::JointProb => p.product(),
            }
        })
        .collect())
}

/// Leaf score distribution under `mode`. Joint products are formed in log
/// space so deep paths of small probabilities do not underflow before
/// renormalization.
pub fn combine_levels(taxonomy: &Taxonomy, dists: &[LevelDistribution], mode: CombineMode, weights: &[f64]) -> Result<Vec<f64>, HierarchyError> {
    if mode != CombineMode::JointProb {
        let mut scores = path_scores(taxonomy, dists, mode, weights)?;
        normalize(&mut scores);
        return Ok(scores);
    }
    check_dists(taxonomy, dists)?;
    let logs: Vec<f64> = leaf_paths(taxonomy)
        .iter()
        .map(|path| path.iter().enumerate().map(|(k, &pos)| dists[k].probs[pos].ln()).sum())
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut scores: Vec<f64> = if max == f64::NEG_INFINITY {
        vec![0.0; logs.len()]
    } else {
        logs.iter().map(|l| (l - max).exp()).collect()
    };
    normalize(&mut scores);
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pruned {
    pub scores: Vec<f64>,
    /// Pruning removed all mass and the unpruned scores were kept.
    pub fallback: bool,
}

/// Zeroes leaves whose ancestor at any of `levels` differs from that level's
/// argmax, then renormalizes.
pub fn logical_prune(taxonomy: &Taxonomy, dists: &[LevelDistribution], scores: &[f64], levels: &[usize]) -> Result<Pruned, HierarchyError> {
    check_dists(taxonomy, dists)?;
    if let Some(&bad) = levels.iter().find(|&&l| l == 0 || l > taxonomy.depth()) {
        return Err(HierarchyError::InvalidPruneLevel(bad));
    }
    let keep: Vec<(usize, usize)> = levels.iter().map(|&l| (l - 1, dists[l - 1].top())).collect();
    let mut pruned: Vec<f64> = leaf_paths(taxonomy)
        .iter()
        .zip(scores)
        .map(|(path, &s)| if keep.iter().all(|&(k, top)| path[k] == top) { s } else { 0.0 })
        .collect();
    if pruned.iter().sum::<f64>() <= 0.0 {
        let mut scores = scores.to_vec();
        normalize(&mut scores);
        return Ok(Pruned { scores, fallback: true });
    }
    normalize(&mut pruned);
    Ok(Pruned { scores: pruned, fallback: false })
}

/// Model over the children of one parent node.
#[derive(Clone, Debug, PartialEq)]
pub struct ChildModel<S> {
    /// Child node indices, sorted by code; class `i` is `children[i]`.
    pub children: Vec<usize>,
    pub model: Classifier<S>,
}

/// Top-down router: a level-1 root model, per-parent child models, and a
/// flat leaf model used whenever routing stops above the leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct LcpnRouter<S> {
    pub root: Classifier<S>,
    /// Keyed by parent node index.
    pub children: BTreeMap<usize, ChildModel<S>>,
    pub flat: Classifier<S>,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteAction {
    /// Confidence above threshold and a model or single child below.
    Descend,
    /// Routing stopped; the flat model chose the leaf.
    Fallback,
    /// Reached a leaf by descent.
    Leaf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteStep {
    pub level: usize,
    pub code: String,
    pub confidence: f64,
    pub action: RouteAction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Routed {
    /// Leaf node index.
    pub leaf: usize,
    pub confidence: f64,
    pub trace: Vec<RouteStep>,
    pub used_flat: bool,
}

impl<S: Scalar> LcpnRouter<S> {
    pub fn new(taxonomy: &Taxonomy, root: Classifier<S>, children: BTreeMap<usize, ChildModel<S>>, flat: Classifier<S>, threshold: f64) -> Result<Self, HierarchyError> {
        if root.num_classes() != taxonomy.level_count(1) {
            return Err(HierarchyError::InconsistentScheme { level: 1, expected: taxonomy.level_count(1), found: root.num_classes() });
        }
        let leaves = taxonomy.leaves().len();
        if flat.num_classes() != leaves {
            return Err(HierarchyError::InconsistentScheme { level: taxonomy.depth(), expected: leaves, found: flat.num_classes() });
        }
        for (&parent, child) in &children {
            let expected = &taxonomy.node(parent).children;
            if child.model.num_classes() != child.children.len() || &child.children != expected {
                return Err(HierarchyError::InconsistentScheme {
                    level: taxonomy.node(parent).code.level() + 1,
                    expected: expected.len(),
                    found: child.model.num_classes(),
                });
            }
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(HierarchyError::InvalidWeights(format!("threshold {threshold} outside [0, 1]")));
        }
        Ok(LcpnRouter { root, children, flat, threshold })
    }

    /// Routes `x` from the root. A decision descends only when its
    /// confidence strictly exceeds the threshold, so `threshold = 1` always
    /// defers to the flat model.
    pub fn predict(&self, taxonomy: &Taxonomy, x: &[S]) -> Result<Routed, HierarchyError> {
        let mut trace = Vec::new();
        let root_probs = self.root.predict_proba(x)?;
        let top = argmax(&root_probs).expect("root has classes");
        let mut node = taxonomy.level_nodes(1)[top];
        let mut confidence = root_probs[top].as_f64();
        loop {
            let level = taxonomy.node(node).code.level();
            let code = taxonomy.code_str(node).to_string();
            if taxonomy.is_leaf(node) {
                trace.push(RouteStep { level, code, confidence, action: RouteAction::Leaf });
                return Ok(Routed { leaf: taxonomy.position(node), confidence, trace, used_flat: false });
            }
            let kids = &taxonomy.node(node).children;
            let next = if confidence <= self.threshold {
                None
            } else if let Some(child) = self.children.get(&node) {
                let probs = child.model.predict_proba(x)?;
                let i = argmax(&probs).expect("child model has classes");
                Some((child.children[i], probs[i].as_f64()))
            } else if kids.len() == 1 {
                Some((kids[0], 1.0))
            } else {
                None
            };
            match next {
                Some((child, conf)) => {
                    trace.push(RouteStep { level, code, confidence, action: RouteAction::Descend });
                    node = child;
                    confidence = conf;
                }
                None => {
                    trace.push(RouteStep { level, code, confidence, action: RouteAction::Fallback });
                    let probs = self.flat.predict_proba(x)?;
                    let leaf = argmax(&probs).expect("flat model has classes");
                    let conf = probs[leaf].as_f64();
                    let leaf_node = taxonomy.leaves()[leaf];
                    trace.push(RouteStep {
                        level: taxonomy.depth(),
                        code: taxonomy.code_str(leaf_node).to_string(),
                        confidence: conf,
                        action: RouteAction::Leaf,
                    });
                    return Ok(Routed { leaf, confidence: conf, trace, used_flat: true });
                }
            }
        }
    }
}
