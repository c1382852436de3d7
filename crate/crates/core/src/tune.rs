//! Hyper-parameter search with a tree-structured Parzen estimator over
//! k-fold cross-validation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

pub const STUDY_FORMAT: &str = "occ-study";
pub const STUDY_VERSION: u64 = 1;

/// Parameters accepted in a space but ignored by the native heads.
pub const INERT_PARAMS: &[&str] = &["attention_dropout"];

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("need at least {needed} samples for {needed}-fold cross-validation, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("study log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error("budget must be at least 1")]
    EmptyBudget,
}

/// A sampled configuration, keyed by parameter name.
pub type Config = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dimension {
    /// `low, low + step, …, high`.
    Quantized { low: f64, high: f64, step: f64 },
    LogUniform { low: f64, high: f64 },
    Uniform { low: f64, high: f64 },
}

fn round12(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}

impl Dimension {
    fn validate(&self) -> Result<(), String> {
        let (low, high) = self.bounds();
        if !(low.is_finite() && high.is_finite() && low < high) {
            return Err(format!("bounds [{low}, {high}] are not an increasing finite interval"));
        }
        match *self {
            Dimension::Quantized { step, .. } => {
                let n = (high - low) / step;
                if !(step > 0.0) || (n - n.round()).abs() > 1e-9 {
                    return Err(format!("step {step} does not divide [{low}, {high}]"));
                }
            }
            Dimension::LogUniform { .. } if low <= 0.0 => return Err("log-uniform bounds must be positive".into()),
            _ => {}
        }
        Ok(())
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Dimension::Quantized { low, high, .. } | Dimension::LogUniform { low, high } | Dimension::Uniform { low, high } => (low, high),
        }
    }

    fn grid_len(&self) -> Option<usize> {
        match *self {
            Dimension::Quantized { low, high, step } => Some(((high - low) / step).round() as usize + 1),
            _ => None,
        }
    }

    /// Internal coordinate interval the estimators work in.
    fn domain(&self) -> (f64, f64) {
        let (low, high) = self.bounds();
        match self {
            Dimension::LogUniform { .. } => (low.ln(), high.ln()),
            _ => (low, high),
        }
    }

    fn to_internal(&self, v: f64) -> f64 {
        match self {
            Dimension::LogUniform { .. } => v.ln(),
            _ => v,
        }
    }

    /// Maps an internal coordinate to a value inside bounds and on grid.
    fn from_internal(&self, u: f64) -> f64 {
        let (low, high) = self.bounds();
        match *self {
            Dimension::Quantized { step, .. } => {
                let n = self.grid_len().expect("quantized") - 1;
                let i = ((u - low) / step).round().clamp(0.0, n as f64);
                round12(low + i * step).clamp(low, high)
            }
            Dimension::LogUniform { .. } => u.exp().clamp(low, high),
            Dimension::Uniform { .. } => u.clamp(low, high),
        }
    }

    /// True when `v` is a value this dimension can produce.
    pub fn contains(&self, v: f64) -> bool {
        let (low, high) = self.bounds();
        if !(low..=high).contains(&v) {
            return false;
        }
        match *self {
            Dimension::Quantized { step, .. } => {
                let i = ((v - low) / step).round();
                round12(low + i * step) == v
            }
            _ => true,
        }
    }

    fn sample_uniform<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Dimension::Quantized { low, step, .. } => {
                let i = rng.gen_range(0..self.grid_len().expect("quantized"));
                round12(low + i as f64 * step)
            }
            _ => {
                let (a, b) = self.domain();
                self.from_internal(rng.gen_range(a..=b))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(flatten)]
    pub dimension: Dimension,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    #[serde(rename = "param")]
    pub params: Vec<ParamSpec>,
}

impl SearchSpace {
    /// Epochs in multiples of 5, hidden dropout in steps of 0.05, and
    /// log-uniform weight decay and learning rate.
    pub fn standard() -> Self {
        let p = |name: &str, dimension| ParamSpec { name: name.into(), dimension };
        SearchSpace {
            params: vec![
                p("epochs", Dimension::Quantized { low: 5.0, high: 100.0, step: 5.0 }),
                p("hidden_dropout", Dimension::Quantized { low: 0.1, high: 0.6, step: 0.05 }),
                p("weight_decay", Dimension::LogUniform { low: 1e-9, high: 1e-2 }),
                p("learning_rate", Dimension::LogUniform { low: 1e-6, high: 1e-1 }),
            ],
        }
    }

    /// Checks dimensions and names; returns warnings for inert parameters.
    pub fn validate(&self) -> Result<Vec<String>, TuneError> {
        if self.params.is_empty() {
            return Err(TuneError::InvalidSpace("no parameters".into()));
        }
        let mut warnings = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            p.dimension.validate().map_err(|m| TuneError::InvalidSpace(format!("{}: {m}", p.name)))?;
            if self.params[..i].iter().any(|q| q.name == p.name) {
                return Err(TuneError::InvalidSpace(format!("duplicate parameter `{}`", p.name)));
            }
            if INERT_PARAMS.contains(&p.name.as_str()) {
                warnings.push(format!("`{}` has no effect on the native heads and is ignored", p.name));
            }
        }
        Ok(warnings)
    }

    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Config {
        self.params.iter().map(|p| (p.name.clone(), p.dimension.sample_uniform(rng))).collect()
    }

    /// True when `config` has exactly this space's keys, each in bounds and on grid.
    pub fn admits(&self, config: &Config) -> bool {
        config.len() == self.params.len()
            && self.params.iter().all(|p| config.get(&p.name).is_some_and(|&v| p.dimension.contains(v)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpeSettings {
    /// Trials sampled uniformly before the estimator takes over.
    pub startup_trials: usize,
    /// Quantile of objectives forming the good set.
    pub gamma: f64,
    /// Candidates drawn from the good density per suggestion.
    pub candidates: usize,
}

impl Default for TpeSettings {
    fn default() -> Self {
        TpeSettings { startup_trials: 10, gamma: 0.25, candidates: 24 }
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Mixture of Gaussians truncated to `[low, high]`, one per observation plus
/// a wide prior component centred on the interval.
#[derive(Clone, Debug)]
struct Parzen {
    means: Vec<f64>,
    sigmas: Vec<f64>,
    low: f64,
    high: f64,
}

impl Parzen {
    fn fit(points: &[f64], low: f64, high: f64) -> Self {
        let width = high - low;
        let mut means: Vec<f64> = points.iter().map(|p| p.clamp(low, high)).collect();
        means.push(0.5 * (low + high));
        let mut order: Vec<usize> = (0..means.len()).collect();
        order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
        let floor = width / (means.len() as f64).min(100.0);
        let mut sigmas = vec![width; means.len()];
        for (r, &i) in order.iter().enumerate() {
            if i == means.len() - 1 {
                continue;
            }
            let left = if r == 0 { means[i] - low } else { means[i] - means[order[r - 1]] };
            let right = if r + 1 == order.len() { high - means[i] } else { means[order[r + 1]] - means[i] };
            sigmas[i] = left.max(right).clamp(floor, width);
        }
        Parzen { means, sigmas, low, high }
    }

    fn pdf(&self, x: f64) -> f64 {
        let k = self.means.len() as f64;
        self.means
            .iter()
            .zip(&self.sigmas)
            .map(|(&m, &s)| {
                let z = (x - m) / s;
                let mass = normal_cdf((self.high - m) / s) - normal_cdf((self.low - m) / s);
                (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt() * mass.max(1e-300))
            })
            .sum::<f64>()
            / k
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let i = rng.gen_range(0..self.means.len());
        let normal = Normal::new(self.means[i], self.sigmas[i]).expect("positive sigma");
        for _ in 0..1000 {
            let x = normal.sample(rng);
            if (self.low..=self.high).contains(&x) {
                return x;
            }
        }
        self.means[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub number: usize,
    pub config: Config,
    /// Mean fold accuracy; `None` for failed trials, which rank as −∞.
    pub objective: Option<f64>,
    pub fold_scores: Vec<f64>,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_time_s: f64,
}

impl TrialRecord {
    pub fn score(&self) -> f64 {
        self.objective.unwrap_or(f64::NEG_INFINITY)
    }
}

/// Next configuration to evaluate. Until `startup_trials` trials have
/// completed, samples uniformly; afterwards splits completed trials at the
/// `gamma` quantile and, per dimension, returns the candidate drawn from the
/// good density that maximizes good/rest density ratio.
pub fn suggest<R: Rng>(history: &[TrialRecord], space: &SearchSpace, settings: &TpeSettings, rng: &mut R) -> Config {
    let mut done: Vec<&TrialRecord> = history.iter().filter(|t| t.objective.is_some_and(f64::is_finite)).collect();
    if done.len() < settings.startup_trials.max(2) {
        return space.sample_uniform(rng);
    }
    done.sort_by(|a, b| b.score().total_cmp(&a.score()).then(a.number.cmp(&b.number)));
    let n_good = ((settings.gamma * done.len() as f64).ceil() as usize).clamp(1, done.len() - 1);
    let (good, rest) = done.split_at(n_good);
    space
        .params
        .iter()
        .map(|p| {
            let d = &p.dimension;
            let (a, b) = d.domain();
            let coords = |set: &[&TrialRecord]| -> Vec<f64> {
                set.iter().filter_map(|t| t.config.get(&p.name)).map(|&v| d.to_internal(v)).collect()
            };
            let l = Parzen::fit(&coords(good), a, b);
            let g = Parzen::fit(&coords(rest), a, b);
            let mut best = (f64::NEG_INFINITY, d.sample_uniform(rng));
            for _ in 0..settings.candidates.max(1) {
                let v = d.from_internal(l.sample(rng));
                let u = d.to_internal(v);
                let ratio = l.pdf(u).ln() - g.pdf(u).ln();
                if ratio > best.0 {
                    best = (ratio, v);
                }
            }
            (p.name.clone(), best.1)
        })
        .collect()
}

/// `k` disjoint folds of a seeded permutation of `0..n`; sizes differ by at most one.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, TuneError> {
    if k < 2 || n < k {
        return Err(TuneError::InsufficientData { needed: k.max(2), have: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k).map(|i| order[i * n / k..(i + 1) * n / k].to_vec()).collect())
}

/// Mean validation accuracy over `k` folds. `trainer(config, train, val)`
/// returns the validation accuracy of a model trained on `train`.
pub fn cross_validate<F>(config: &Config, n: usize, k: usize, seed: u64, mut trainer: F) -> Result<(f64, Vec<f64>), String>
where
    F: FnMut(&Config, &[usize], &[usize]) -> Result<f64, String>,
{
    let folds = kfold_indices(n, k, seed).map_err(|e| e.to_string())?;
    let mut scores = Vec::with_capacity(k);
    for (i, val) in folds.iter().enumerate() {
        let mut train: Vec<usize> = folds.iter().enumerate().filter(|(j, _)| *j != i).flat_map(|(_, f)| f.iter().copied()).collect();
        train.sort_unstable();
        let mut val = val.clone();
        val.sort_unstable();
        scores.push(trainer(config, &train, &val)?);
    }
    Ok((scores.iter().sum::<f64>() / k as f64, scores))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub history: Vec<TrialRecord>,
}

impl Study {
    /// Highest objective; ties keep the earliest trial.
    pub fn best(&self) -> Option<&TrialRecord> {
        self.history
            .iter()
            .filter(|t| t.objective.is_some())
            .fold(None, |best: Option<&TrialRecord>, t| match best {
                Some(b) if b.score() >= t.score() => Some(b),
                _ => Some(t),
            })
    }
}

fn trial_seed(seed: u64, number: usize) -> u64 {
    seed ^ (number as u64).wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Runs trials until the history holds `budget` of them. Each suggestion is
/// seeded from `(seed, trial number)` so a resumed study proposes what an
/// uninterrupted one would have. Objective errors mark the trial failed.
pub fn run_study<F, G>(
    space: &SearchSpace,
    settings: &TpeSettings,
    budget: usize,
    seed: u64,
    prior: Vec<TrialRecord>,
    mut objective: F,
    mut on_trial: G,
) -> Result<Study, TuneError>
where
    F: FnMut(&Config) -> Result<(f64, Vec<f64>), String>,
    G: FnMut(&TrialRecord),
{
    if budget == 0 {
        return Err(TuneError::EmptyBudget);
    }
    for w in space.validate()? {
        log::warn!("{w}");
    }
    let mut history = prior;
    while history.len() < budget {
        let number = history.len();
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, number));
        let config = suggest(&history, space, settings, &mut rng);
        let start = Instant::now();
        let result = objective(&config);
        let wall_time_s = start.elapsed().as_secs_f64();
        let record = match result {
            Ok((obj, fold_scores)) if obj.is_finite() => {
                TrialRecord { number, config, objective: Some(obj), fold_scores, status: TrialStatus::Complete, error: None, wall_time_s }
            }
            Ok((obj, fold_scores)) => TrialRecord {
                number,
                config,
                objective: None,
                fold_scores,
                status: TrialStatus::Failed,
                error: Some(format!("non-finite objective {obj}")),
                wall_time_s,
            },
            Err(e) => {
                log::warn!("trial {number} failed: {e}");
                TrialRecord { number, config, objective: None, fold_scores: Vec::new(), status: TrialStatus::Failed, error: Some(e), wall_time_s }
            }
        };
        on_trial(&record);
        history.push(record);
    }
    Ok(Study { history })
}

/// Header line of a study log.
pub fn study_log_header() -> String {
    serde_json::json!({ "format": STUDY_FORMAT, "version": STUDY_VERSION }).to_string()
}

pub fn study_log_line(record: &TrialRecord) -> String {
    serde_json::to_string(record).expect("trial records serialize")
}

/// Parses a study log: a format header then one trial per line, numbered consecutively.
pub fn parse_study_log(text: &str) -> Result<Vec<TrialRecord>, TuneError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let err = |line: usize, message: String| TuneError::Log { line: line + 1, message };
    match lines.next() {
        None => return Ok(Vec::new()),
        Some((i, header)) => {
            let v: serde_json::Value = serde_json::from_str(header).map_err(|e| err(i, e.to_string()))?;
            if v["format"] != STUDY_FORMAT {
                return Err(err(i, "missing occ-study format header".into()));
            }
            if v["version"] != STUDY_VERSION {
                return Err(err(i, format!("unsupported study log version {}", v["version"])));
            }
        }
    }
    let mut out: Vec<TrialRecord> = Vec::new();
    for (i, line) in lines {
        let rec: TrialRecord = serde_json::from_str(line).map_err(|e| err(i, e.to_string()))?;
        if rec.number != out.len() {
            return Err(err(i, format!("trial {} out of sequence (expected {})", rec.number, out.len())));
        }
        out.push(rec);
    }
    Ok(out)
}
