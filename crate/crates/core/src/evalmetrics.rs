//! Accuracy, macro-F1, top-k accuracy, hierarchical precision/recall/F,
//! confusion matrices and error-vs-support tables.

use crate::scalar::ranked_indices;
use crate::taxonomy::Taxonomy;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("{preds} predictions but {golds} gold labels")]
    Misaligned { preds: usize, golds: usize },
    #[error("class {class} is outside the {classes}-class space")]
    ClassOutOfRange { class: usize, classes: usize },
}

/// Which classes enter the macro average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Classes {
    /// Every class of the level; unseen classes count as F1 = 0.
    #[default]
    All,
    /// Only classes occurring among predictions or gold labels.
    Present,
}

fn aligned(preds: usize, golds: usize) -> Result<(), MetricError> {
    if preds != golds {
        return Err(MetricError::Misaligned { preds, golds });
    }
    if golds == 0 {
        return Err(MetricError::EmptyEvaluation);
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64, MetricError> {
    aligned(preds.len(), golds.len())?;
    Ok(preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / golds.len() as f64)
}

/// Unweighted mean of per-class F1 over `classes` classes.
pub fn macro_f1(preds: &[usize], golds: &[usize], classes: usize, mode: F1Classes) -> Result<f64, MetricError> {
    aligned(preds.len(), golds.len())?;
    if let Some(&class) = preds.iter().chain(golds).find(|&&c| c >= classes) {
        return Err(MetricError::ClassOutOfRange { class, classes });
    }
    let mut tp = vec![0u64; classes];
    let mut predicted = vec![0u64; classes];
    let mut actual = vec![0u64; classes];
    for (&p, &g) in preds.iter().zip(golds) {
        predicted[p] += 1;
        actual[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for c in 0..classes {
        if mode == F1Classes::Present && predicted[c] == 0 && actual[c] == 0 {
            continue;
        }
        count += 1;
        if tp[c] > 0 {
            let p = tp[c] as f64 / predicted[c] as f64;
            let r = tp[c] as f64 / actual[c] as f64;
            sum += 2.0 * p * r / (p + r);
        }
    }
    Ok(sum / count as f64)
}

/// Percentage of samples whose gold class is among the first `k` entries of
/// its ranking. `k` is capped at the ranking length.
pub fn topk_from_rankings(rankings: &[Vec<usize>], golds: &[usize], k: usize) -> Result<f64, MetricError> {
    aligned(rankings.len(), golds.len())?;
    let hits = rankings.iter().zip(golds).filter(|(r, g)| r.iter().take(k).any(|c| c == *g)).count();
    Ok(100.0 * hits as f64 / golds.len() as f64)
}

/// Top-k accuracy (percent) of score vectors; ties rank the lower index first.
pub fn topk_accuracy(scores: &[Vec<f64>], golds: &[usize], k: usize) -> Result<f64, MetricError> {
    if let Some(s) = scores.first() {
        if k > s.len() {
            log::warn!("top-{k} requested over {} classes; capping", s.len());
        }
    }
    let rankings: Vec<Vec<usize>> = scores.iter().map(|s| ranked_indices(s)).collect();
    topk_from_rankings(&rankings, golds, k)
}

/// Ranking of level-`level` positions induced by a leaf ranking: each
/// ancestor takes the rank of its best-ranked leaf.
pub fn level_ranking(taxonomy: &Taxonomy, leaf_ranking: &[usize], level: usize) -> Vec<usize> {
    let mut seen = HashSet::new();
    leaf_ranking
        .iter()
        .map(|&leaf| taxonomy.position(taxonomy.ancestor_at(taxonomy.leaves()[leaf], level)))
        .filter(|p| seen.insert(*p))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl Prf {
    fn from_counts(common: f64, predicted: f64, gold: f64) -> Self {
        let precision = if predicted > 0.0 { common / predicted } else { 0.0 };
        let recall = if gold > 0.0 { common / gold } else { 0.0 };
        let f = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f }
    }
}

/// Ancestor-set overlap of one prediction: `(|P∩T|, |P|, |T|)`.
pub fn ancestor_overlap(taxonomy: &Taxonomy, pred: usize, gold: usize) -> (usize, usize, usize) {
    let p = taxonomy.ancestor_indices(pred);
    let t = taxonomy.ancestor_indices(gold);
    let common = p.iter().filter(|i| t.contains(i)).count();
    (common, p.len(), t.len())
}

/// hP, hR and hF of one (prediction, gold) pair of node indices.
pub fn hierarchical_prf(taxonomy: &Taxonomy, pred: usize, gold: usize) -> Prf {
    let (c, p, t) = ancestor_overlap(taxonomy, pred, gold);
    Prf::from_counts(c as f64, p as f64, t as f64)
}

/// Same as [`hierarchical_prf`] with codes, which must exist in the taxonomy.
pub fn hierarchical_prf_codes(taxonomy: &Taxonomy, pred: &str, gold: &str) -> Result<Prf, crate::taxonomy::TaxonomyError> {
    Ok(hierarchical_prf(taxonomy, taxonomy.lookup(pred)?, taxonomy.lookup(gold)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalSummary {
    /// Intersections and set sizes summed over samples.
    pub micro: Prf,
    /// Per-sample values averaged.
    pub per_sample: Prf,
}

pub fn corpus_hierarchical_prf(taxonomy: &Taxonomy, preds: &[usize], golds: &[usize]) -> Result<HierarchicalSummary, MetricError> {
    aligned(preds.len(), golds.len())?;
    let (mut c, mut p, mut t) = (0usize, 0usize, 0usize);
    let mut mean = Prf::default();
    for (&pi, &gi) in preds.iter().zip(golds) {
        let (ci, ni, mi) = ancestor_overlap(taxonomy, pi, gi);
        c += ci;
        p += ni;
        t += mi;
        let s = Prf::from_counts(ci as f64, ni as f64, mi as f64);
        mean.precision += s.precision;
        mean.recall += s.recall;
        mean.f += s.f;
    }
    let n = golds.len() as f64;
    Ok(HierarchicalSummary {
        micro: Prf::from_counts(c as f64, p as f64, t as f64),
        per_sample: Prf { precision: mean.precision / n, recall: mean.recall / n, f: mean.f / n },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportRow {
    pub class: usize,
    pub support: u64,
    pub errors: u64,
    pub error_rate: f64,
}

/// Support and error rate (1 − recall) per gold class, ascending by support
/// then class; classes without support are omitted.
pub fn error_vs_support(preds: &[usize], golds: &[usize]) -> Result<Vec<SupportRow>, MetricError> {
    aligned(preds.len(), golds.len())?;
    let mut table: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for (&p, &g) in preds.iter().zip(golds) {
        let e = table.entry(g).or_default();
        e.0 += 1;
        if p != g {
            e.1 += 1;
        }
    }
    let mut rows: Vec<SupportRow> = table
        .into_iter()
        .map(|(class, (support, errors))| SupportRow { class, support, errors, error_rate: errors as f64 / support as f64 })
        .collect();
    rows.sort_by_key(|r| (r.support, r.class));
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub level: usize,
    pub labels: Vec<String>,
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// CSV grid with true labels down the rows and predicted labels across.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(l);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// Confusion matrix at `level` of leaf-position predictions, truncating
/// both sides to their level ancestors.
pub fn confusion(taxonomy: &Taxonomy, preds: &[usize], golds: &[usize], level: usize) -> Result<ConfusionMatrix, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::Misaligned { preds: preds.len(), golds: golds.len() });
    }
    let n = taxonomy.level_count(level);
    let mut counts = vec![vec![0u64; n]; n];
    let lift = |leaf: usize| taxonomy.position(taxonomy.ancestor_at(taxonomy.leaves()[leaf], level));
    for (&p, &g) in preds.iter().zip(golds) {
        counts[lift(g)][lift(p)] += 1;
    }
    Ok(ConfusionMatrix { level, labels: taxonomy.level_codes(level), counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: usize,
    pub classes: usize,
    pub macro_f1: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub f1_classes: F1Classes,
    pub levels: Vec<LevelMetrics>,
    pub hierarchical: HierarchicalSummary,
    /// Leaf-level support table with class codes.
    pub support: Vec<(String, SupportRow)>,
}

/// Level rankings (levels 1..=depth) induced by a leaf ranking.
pub fn level_rankings(taxonomy: &Taxonomy, leaf_ranking: &[usize]) -> Vec<Vec<usize>> {
    (1..=taxonomy.depth()).map(|level| level_ranking(taxonomy, leaf_ranking, level)).collect()
}

/// Scores predictions against gold leaf positions. `rankings[i][k]` ranks
/// level-`k+1` positions for sample `i`, best first; the leaf-level ranking
/// gives the leaf prediction. Level rankings derived with [`level_rankings`]
/// make level top-1 equal to ancestor-truncation accuracy.
pub fn evaluate(taxonomy: &Taxonomy, rankings: &[Vec<Vec<usize>>], golds: &[usize], f1_classes: F1Classes) -> Result<EvalReport, MetricError> {
    aligned(rankings.len(), golds.len())?;
    let depth = taxonomy.depth();
    if rankings.iter().any(|r| r.len() != depth || r.iter().any(Vec::is_empty)) {
        return Err(MetricError::EmptyEvaluation);
    }
    let mut levels = Vec::new();
    for level in 1..=depth {
        let ranked: Vec<Vec<usize>> = rankings.iter().map(|r| r[level - 1].clone()).collect();
        let gold: Vec<usize> = golds
            .iter()
            .map(|&g| taxonomy.position(taxonomy.ancestor_at(taxonomy.leaves()[g], level)))
            .collect();
        let top: Vec<usize> = ranked.iter().map(|r| r[0]).collect();
        let classes = taxonomy.level_count(level);
        levels.push(LevelMetrics {
            level,
            classes,
            macro_f1: macro_f1(&top, &gold, classes, f1_classes)?,
            top1: topk_from_rankings(&ranked, &gold, 1)?,
            top5: topk_from_rankings(&ranked, &gold, 5)?,
            top10: topk_from_rankings(&ranked, &gold, 10)?,
        });
    }
    let preds: Vec<usize> = rankings.iter().map(|r| r[depth - 1][0]).collect();
    let to_nodes = |v: &[usize]| v.iter().map(|&p| taxonomy.leaves()[p]).collect::<Vec<_>>();
    let hierarchical = corpus_hierarchical_prf(taxonomy, &to_nodes(&preds), &to_nodes(golds))?;
    let support = error_vs_support(&preds, golds)?
        .into_iter()
        .map(|r| (taxonomy.code_str(taxonomy.leaves()[r.class]).to_string(), r))
        .collect();
    Ok(EvalReport { samples: golds.len(), f1_classes, levels, hierarchical, support })
}

impl EvalReport {
    /// Per-level table: `level,classes,macro_f1,top1,top5,top10`.
    pub fn level_table(&self) -> String {
        let mut out = String::from("level,classes,macro_f1,top1,top5,top10\n");
        for l in &self.levels {
            let _ = writeln!(out, "{},{},{:.3},{:.3},{:.3},{:.3}", l.level, l.classes, l.macro_f1, l.top1, l.top5, l.top10);
        }
        out
    }

    /// Leaf support table: `code,support,errors,error_rate`.
    pub fn support_table(&self) -> String {
        let mut out = String::from("code,support,errors,error_rate\n");
        for (code, r) in &self.support {
            let _ = writeln!(out, "{code},{},{},{:.4}", r.support, r.errors, r.error_rate);
        }
        out
    }
}
