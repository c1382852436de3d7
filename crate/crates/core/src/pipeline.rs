//! Feature encoders, multi-head model bundles and their training and
//! prediction, including the prediction file format.

use crate::corpus::JobAd;
use crate::embed::{embed_hashed, vectorize_skills, EmbedError, EmbeddingStore, SkillVocab};
use crate::ensemble::{fuse, EnsembleError};
use crate::evalmetrics::level_rankings;
use crate::hierarchy::{
    combine_levels, default_level_weights, logical_prune, predict_levels, ChildModel, CombineMode, HierarchyError, LcpnRouter, LevelBank,
    RouteStep,
};
use crate::nnet::{Classifier, HeadArchitecture, HeadKind, NetError, Network, DEFAULT_SIMPLE_WIDTH};
use crate::scalar::{ranked_indices, Scalar};
use crate::taxonomy::{Scheme, Taxonomy, TaxonomyError};
use crate::textprep::{clean, CleanRuleSet, Field, SubwordVocab, Tokenizer, TruncationPolicy};
use crate::train::{train_model, Dataset, EpochRecord, TrainConfig, TrainError, TrainReport};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;
use thiserror::Error;

pub const MODEL_FORMAT: &str = "occ-model";
pub const MODEL_VERSION: u64 = 1;
pub const PREDICTION_FORMAT: &str = "occ-predictions";
pub const PREDICTION_VERSION: u64 = 1;
/// Ranked entries kept per level in prediction records.
pub const TOP_N: usize = 10;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("model was trained for {expected} taxonomy {expected_digest}, given {found} {found_digest}")]
    TaxonomyMismatch { expected: Scheme, expected_digest: String, found: Scheme, found_digest: String },
    #[error("model bundle has no {0} head")]
    MissingHead(String),
    #[error("no labelled training samples for {0}")]
    NoTrainingData(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

fn format_err(line: usize, message: impl Into<String>) -> PipelineError {
    PipelineError::Format { line, message: message.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerSpec {
    Hashed { buckets: u32 },
    WordPiece { vocab: Vec<String> },
}

/// How an ad becomes a fixed-size input vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    /// Clean, tokenize, truncate, then hash n-grams into `dim` buckets.
    Text { field: Field, clean: bool, tokenizer: TokenizerSpec, truncation: TruncationPolicy, dim: usize, max_order: usize },
    /// Multi-hot over a skill vocabulary.
    Skills { vocab: SkillVocab },
    /// Precomputed vectors looked up by ad id.
    Store { field: Field, provider: String, dim: usize },
}

impl EncoderSpec {
    pub fn hashed_text(field: Field, dim: usize, max_order: usize) -> Self {
        EncoderSpec::Text {
            field,
            clean: true,
            tokenizer: TokenizerSpec::Hashed { buckets: 1 << 20 },
            truncation: TruncationPolicy::default(),
            dim,
            max_order,
        }
    }

    /// Skill encoder over every skill listed in `ads`.
    pub fn skills_from(ads: &[JobAd]) -> Self {
        EncoderSpec::Skills { vocab: SkillVocab::build(ads.iter().map(|a| a.skills.as_slice())) }
    }

    pub fn field(&self) -> Field {
        match self {
            EncoderSpec::Text { field, .. } | EncoderSpec::Store { field, .. } => *field,
            EncoderSpec::Skills { .. } => Field::Skills,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            EncoderSpec::Text { dim, .. } | EncoderSpec::Store { dim, .. } => *dim,
            EncoderSpec::Skills { vocab } => vocab.len(),
        }
    }
}

pub struct Encoder {
    spec: EncoderSpec,
    tokenizer: Option<Tokenizer>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Result<Self, PipelineError> {
        let tokenizer = match &spec {
            EncoderSpec::Text { tokenizer, truncation, dim, max_order, .. } => {
                truncation.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
                if *dim == 0 || *max_order == 0 {
                    return Err(PipelineError::Config("embedding dim and n-gram order must be positive".into()));
                }
                Some(match tokenizer {
                    TokenizerSpec::Hashed { buckets } => Tokenizer::Hashed { buckets: *buckets },
                    TokenizerSpec::WordPiece { vocab } => {
                        Tokenizer::WordPiece(SubwordVocab::new(vocab.iter().cloned()).map_err(|e| PipelineError::Config(e.to_string()))?)
                    }
                })
            }
            EncoderSpec::Skills { vocab } if vocab.is_empty() => return Err(PipelineError::Config("empty skill vocabulary".into())),
            _ => None,
        };
        Ok(Encoder { spec, tokenizer })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Input vector of `ad`; `None` when the ad lists no skills for a skill encoder.
    pub fn encode(&self, ad: &JobAd, store: Option<&EmbeddingStore>) -> Result<Option<Vec<f64>>, PipelineError> {
        match &self.spec {
            EncoderSpec::Text { field, clean: do_clean, truncation, dim, max_order, .. } => {
                let raw = ad.text(*field);
                let text = if *do_clean {
                    let rules = if *field == Field::Title { CleanRuleSet::title() } else { CleanRuleSet::description() };
                    clean(&raw, &rules)
                } else {
                    raw
                };
                let seq = self.tokenizer.as_ref().expect("text encoder has a tokenizer").tokenize(&text, *field);
                Ok(Some(embed_hashed(&crate::textprep::truncate(&seq, truncation), *dim, *max_order)))
            }
            EncoderSpec::Skills { vocab } => {
                if ad.skills.is_empty() {
                    return Ok(None);
                }
                Ok(Some(vectorize_skills(&ad.skills, vocab).values))
            }
            EncoderSpec::Store { provider, dim, .. } => {
                let store = store.ok_or_else(|| PipelineError::Config(format!("encoder needs precomputed `{provider}` embeddings")))?;
                if store.provider() != provider || store.dim() != *dim {
                    return Err(PipelineError::Config(format!(
                        "embedding store is {}/{}d, model expects {provider}/{dim}d",
                        store.provider(),
                        store.dim()
                    )));
                }
                Ok(Some(store.lookup(&ad.id)?.values))
            }
        }
    }

    /// Encodes all ads in parallel, preserving order.
    pub fn encode_all<S: Scalar>(&self, ads: &[JobAd], store: Option<&EmbeddingStore>) -> Result<Vec<Option<Vec<S>>>, PipelineError> {
        ads.par_iter()
            .map(|ad| Ok(self.encode(ad, store)?.map(|v| v.into_iter().map(S::of).collect())))
            .collect()
    }
}

/// What a head predicts.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HeadRole {
    /// All nodes of one level; the leaf level doubles as the flat model.
    Level(usize),
    /// The children of one parent node.
    Parent(String),
}

impl fmt::Display for HeadRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadRole::Level(k) => write!(f, "level:{k}"),
            HeadRole::Parent(code) => write!(f, "parent:{code}"),
        }
    }
}

impl FromStr for HeadRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("level", k)) => k.parse().map(HeadRole::Level).map_err(|_| format!("bad level in head role `{s}`")),
            Some(("parent", code)) if !code.is_empty() => Ok(HeadRole::Parent(code.to_string())),
            _ => Err(format!("unknown head role `{s}`")),
        }
    }
}

impl Serialize for HeadRole {
    fn serialize<Ser: Serializer>(&self, s: Ser) -> Result<Ser::Ok, Ser::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HeadRole {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head<S> {
    pub role: HeadRole,
    /// Class codes in class-index order.
    pub classes: Vec<String>,
    pub model: Classifier<S>,
}

/// Heads trained on one feature against one taxonomy.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<S> {
    pub scheme: Scheme,
    pub taxonomy_sha256: String,
    pub encoder: EncoderSpec,
    /// Sorted by role.
    pub heads: Vec<Head<S>>,
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    scheme: Scheme,
    taxonomy_sha256: String,
    scalar: String,
    encoder: EncoderSpec,
    heads: Vec<HeadHeader>,
}

#[derive(Serialize, Deserialize)]
struct HeadHeader {
    role: HeadRole,
    classes: Vec<String>,
    arch: HeadArchitecture,
}

/// Scalar type name recorded in a model file's header.
pub fn bundle_scalar(text: &str) -> Result<String, PipelineError> {
    let header = text.lines().nth(1).ok_or_else(|| format_err(2, "missing header"))?;
    let v: serde_json::Value = serde_json::from_str(header).map_err(|e| format_err(2, e.to_string()))?;
    v["scalar"].as_str().map(str::to_string).ok_or_else(|| format_err(2, "header lacks `scalar`"))
}

/// Digest identifying a taxonomy by its canonical rendering.
pub fn taxonomy_digest(taxonomy: &Taxonomy) -> String {
    hex::encode(Sha256::digest(taxonomy.render().as_bytes()))
}

impl<S: Scalar> ModelBundle<S> {
    pub fn head(&self, role: &HeadRole) -> Option<&Head<S>> {
        self.heads.iter().find(|h| &h.role == role)
    }

    pub fn check_taxonomy(&self, taxonomy: &Taxonomy) -> Result<(), PipelineError> {
        let digest = taxonomy_digest(taxonomy);
        if self.scheme != taxonomy.scheme() || self.taxonomy_sha256 != digest {
            return Err(PipelineError::TaxonomyMismatch {
                expected: self.scheme,
                expected_digest: self.taxonomy_sha256.clone(),
                found: taxonomy.scheme(),
                found_digest: digest,
            });
        }
        Ok(())
    }

    /// Text form: a `occ-model v1` line, a JSON header, then one line of
    /// parameters per network in head order.
    pub fn to_text(&self) -> String {
        let header = BundleHeader {
            scheme: self.scheme,
            taxonomy_sha256: self.taxonomy_sha256.clone(),
            scalar: S::TYPE_NAME.to_string(),
            encoder: self.encoder.clone(),
            heads: self.heads.iter().map(|h| HeadHeader { role: h.role.clone(), classes: h.classes.clone(), arch: h.model.arch.clone() }).collect(),
        };
        let mut out = format!("{MODEL_FORMAT} v{MODEL_VERSION}\n{}\n", serde_json::to_string(&header).expect("header serializes"));
        for head in &self.heads {
            for net in &head.model.nets {
                let mut first = true;
                for p in net.params() {
                    if !first {
                        out.push(' ');
                    }
                    first = false;
                    let _ = write!(out, "{p}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut lines = text.lines();
        let tag = lines.next().ok_or_else(|| format_err(1, "empty model file"))?;
        let expected = format!("{MODEL_FORMAT} v{MODEL_VERSION}");
        if tag.trim() != expected {
            return Err(format_err(1, format!("expected `{expected}`, found `{}`", tag.trim())));
        }
        let header: BundleHeader = serde_json::from_str(lines.next().ok_or_else(|| format_err(2, "missing header"))?)
            .map_err(|e| format_err(2, e.to_string()))?;
        if header.scalar != S::TYPE_NAME {
            return Err(format_err(2, format!("model stores {} parameters, expected {}", header.scalar, S::TYPE_NAME)));
        }
        let mut line_no = 2;
        let mut heads = Vec::with_capacity(header.heads.len());
        for h in header.heads {
            h.arch.validate()?;
            if h.classes.len() != h.arch.num_classes {
                return Err(format_err(2, format!("head {} lists {} classes for {} outputs", h.role, h.classes.len(), h.arch.num_classes)));
            }
            let mut nets = Vec::with_capacity(h.arch.network_count());
            for _ in 0..h.arch.network_count() {
                line_no += 1;
                let line = lines.next().ok_or_else(|| format_err(line_no, "missing parameter line"))?;
                let params = line
                    .split_ascii_whitespace()
                    .map(|t| t.parse::<S>().map_err(|_| format_err(line_no, format!("bad parameter `{t}`"))))
                    .collect::<Result<Vec<S>, _>>()?;
                nets.push(Network::from_params(h.arch.layer_specs(), params).map_err(|e| format_err(line_no, e.to_string()))?);
            }
            heads.push(Head { role: h.role, classes: h.classes, model: Classifier { arch: h.arch, nets } });
        }
        if let Some(extra) = lines.find(|l| !l.trim().is_empty()) {
            return Err(format_err(line_no + 1, format!("trailing data `{}`", extra.chars().take(20).collect::<String>())));
        }
        Ok(ModelBundle { scheme: header.scheme, taxonomy_sha256: header.taxonomy_sha256, encoder: header.encoder, heads })
    }
}

/// Which heads to train.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    /// One head over level `k`; the deepest level is the flat classifier.
    Level(usize),
    /// One head per level.
    AllLevels,
    /// Level-1 root, a head per parent with several children, and the flat head.
    Lcpn,
}

impl TrainTarget {
    pub fn roles(&self, taxonomy: &Taxonomy) -> Result<Vec<HeadRole>, PipelineError> {
        let depth = taxonomy.depth();
        match self {
            TrainTarget::Level(k) if (1..=depth).contains(k) => Ok(vec![HeadRole::Level(*k)]),
            TrainTarget::Level(k) => Err(PipelineError::Config(format!("level {k} outside 1..={depth}"))),
            TrainTarget::AllLevels => Ok((1..=depth).map(HeadRole::Level).collect()),
            TrainTarget::Lcpn => {
                let mut roles = vec![HeadRole::Level(1)];
                for level in 1..depth {
                    for &n in taxonomy.level_nodes(level) {
                        if taxonomy.node(n).children.len() > 1 {
                            roles.push(HeadRole::Parent(taxonomy.code_str(n).to_string()));
                        }
                    }
                }
                if depth > 1 {
                    roles.push(HeadRole::Level(depth));
                }
                Ok(roles)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Hidden width of simple and one-vs-rest heads.
    pub width: usize,
    /// Hidden dropout of simple and one-vs-rest heads.
    pub dropout: f64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec { kind: HeadKind::Simple, width: DEFAULT_SIMPLE_WIDTH, dropout: 0.35 }
    }
}

/// Class list and per-sample target of a head; samples outside the head's
/// subtree get `None`.
fn head_targets(taxonomy: &Taxonomy, role: &HeadRole, leaves: &[Option<usize>]) -> Result<(Vec<String>, Vec<Option<usize>>), PipelineError> {
    match role {
        HeadRole::Level(k) => {
            let targets = leaves.iter().map(|l| l.map(|leaf| taxonomy.position(taxonomy.ancestor_at(leaf, *k)))).collect();
            Ok((taxonomy.level_codes(*k), targets))
        }
        HeadRole::Parent(code) => {
            let parent = taxonomy.lookup(code)?;
            let children = &taxonomy.node(parent).children;
            let child_level = taxonomy.node(parent).code.level() + 1;
            let classes = children.iter().map(|&c| taxonomy.code_str(c).to_string()).collect();
            let targets = leaves
                .iter()
                .map(|l| l.and_then(|leaf| children.iter().position(|&c| c == taxonomy.ancestor_at(leaf, child_level))))
                .collect();
            Ok((classes, targets))
        }
    }
}

/// Leaf node index of each ad's label for the taxonomy's scheme.
pub fn gold_leaves(taxonomy: &Taxonomy, ads: &[JobAd]) -> Vec<Option<usize>> {
    ads.iter()
        .map(|a| a.label(taxonomy.scheme()).and_then(|c| taxonomy.lookup(c).ok()).filter(|&i| taxonomy.is_leaf(i)))
        .collect()
}

fn dataset<S: Scalar>(inputs: &[Option<Vec<S>>], targets: &[Option<usize>]) -> Dataset<S> {
    let (x, y) = inputs
        .iter()
        .zip(targets)
        .filter_map(|(x, t)| Some((x.clone()?, (*t)?)))
        .unzip();
    Dataset::new(x, y)
}

fn role_seed(seed: u64, role: &HeadRole) -> u64 {
    let digest = Sha256::digest(role.to_string().as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Trains the heads of `target` and assembles a bundle. Heads train in
/// parallel; each head's seed derives from `config.seed` and its role, so
/// results do not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn train_bundle<S: Scalar>(
    taxonomy: &Taxonomy,
    train_ads: &[JobAd],
    val_ads: &[JobAd],
    encoder: EncoderSpec,
    target: &TrainTarget,
    head: &HeadSpec,
    config: &TrainConfig,
    store: Option<&EmbeddingStore>,
    progress: &(dyn Fn(&HeadRole, &EpochRecord) + Sync),
) -> Result<(ModelBundle<S>, Vec<(HeadRole, TrainReport)>), PipelineError> {
    let enc = Encoder::new(encoder)?;
    let train_x = enc.encode_all::<S>(train_ads, store)?;
    let val_x = enc.encode_all::<S>(val_ads, store)?;
    let train_leaves = gold_leaves(taxonomy, train_ads);
    let val_leaves = gold_leaves(taxonomy, val_ads);
    let missing = train_x.iter().filter(|x| x.is_none()).count();
    if missing > 0 {
        log::warn!("{missing} training ads lack the {} feature and are skipped", enc.spec().field().as_str());
    }
    let input_dim = enc.spec().input_dim();
    let roles = target.roles(taxonomy)?;
    let results: Vec<Option<(Head<S>, TrainReport)>> = roles
        .par_iter()
        .map(|role| {
            let (classes, train_t) = head_targets(taxonomy, role, &train_leaves)?;
            let (_, val_t) = head_targets(taxonomy, role, &val_leaves)?;
            let train = dataset(&train_x, &train_t);
            let val = dataset(&val_x, &val_t);
            if train.is_empty() {
                if matches!(role, HeadRole::Parent(_)) {
                    return Ok(None);
                }
                return Err(PipelineError::NoTrainingData(role.to_string()));
            }
            let arch = HeadArchitecture::of_kind(head.kind, input_dim, classes.len(), head.width, head.dropout);
            let cfg = TrainConfig { seed: role_seed(config.seed, role), ..config.clone() };
            let (model, report) = train_model(arch, &train, &val, &cfg, |r| progress(role, r))?;
            Ok(Some((Head { role: role.clone(), classes, model }, report)))
        })
        .collect::<Result<_, PipelineError>>()?;
    let skipped: Vec<String> = roles.iter().zip(&results).filter(|(_, r)| r.is_none()).map(|(role, _)| role.to_string()).collect();
    if !skipped.is_empty() {
        log::warn!(
            "{} parent heads have no training samples and route to the flat head (first: {})",
            skipped.len(),
            skipped[0]
        );
    }
    let mut heads = Vec::new();
    let mut reports = Vec::new();
    for (h, r) in results.into_iter().flatten() {
        reports.push((h.role.clone(), r));
        heads.push(h);
    }
    heads.sort_by(|a, b| a.role.cmp(&b.role));
    reports.sort_by(|a, b| a.0.cmp(&b.0));
    let bundle = ModelBundle { scheme: taxonomy.scheme(), taxonomy_sha256: taxonomy_digest(taxonomy), encoder: enc.spec, heads };
    Ok((bundle, reports))
}

/// Leaf-score post-processing options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostProcess {
    pub mode: CombineMode,
    /// Level weights for `weighted_avg`; defaults to `1..=depth`.
    pub weights: Option<Vec<f64>>,
    pub prune_levels: Vec<usize>,
    /// Route top-down with this confidence threshold.
    pub lcpn_threshold: Option<f64>,
}

impl Default for PostProcess {
    fn default() -> Self {
        PostProcess { mode: CombineMode::Leaf, weights: None, prune_levels: Vec::new(), lcpn_threshold: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub postprocess: String,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub pruned_levels: Vec<usize>,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub prune_fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub route: Option<Vec<RouteStep>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub missing_features: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeafPrediction {
    /// Distribution over leaf positions.
    pub scores: Vec<f64>,
    /// Leaf positions, best first.
    pub ranking: Vec<usize>,
    pub trace: Trace,
}

impl LeafPrediction {
    pub fn leaf(&self) -> usize {
        self.ranking[0]
    }
}

/// A bundle bound to its taxonomy and post-processing options.
pub struct Predictor<'a, S> {
    taxonomy: &'a Taxonomy,
    encoder: Encoder,
    leaf_head: Option<&'a Classifier<S>>,
    bank: Option<LevelBank<S>>,
    router: Option<LcpnRouter<S>>,
    post: PostProcess,
    weights: Vec<f64>,
}

impl<'a, S: Scalar> Predictor<'a, S> {
    pub fn new(taxonomy: &'a Taxonomy, bundle: &'a ModelBundle<S>, post: PostProcess) -> Result<Self, PipelineError> {
        bundle.check_taxonomy(taxonomy)?;
        let depth = taxonomy.depth();
        let leaf_head = bundle.head(&HeadRole::Level(depth)).map(|h| &h.model);
        let levels: Option<Vec<Classifier<S>>> = (1..=depth).map(|k| bundle.head(&HeadRole::Level(k)).map(|h| h.model.clone())).collect();
        let bank = levels.map(|m| LevelBank::new(m, taxonomy)).transpose()?;
        let needs_bank = post.mode != CombineMode::Leaf || !post.prune_levels.is_empty();
        if needs_bank && bank.is_none() {
            return Err(PipelineError::MissingHead(format!("per-level (post-processing `{}` needs level:1..level:{depth})", post.mode)));
        }
        if leaf_head.is_none() {
            return Err(PipelineError::MissingHead(format!("level:{depth}")));
        }
        let router = match post.lcpn_threshold {
            None => None,
            Some(t) => {
                let root = bundle.head(&HeadRole::Level(1)).ok_or_else(|| PipelineError::MissingHead("level:1".into()))?;
                let mut children = BTreeMap::new();
                for h in &bundle.heads {
                    if let HeadRole::Parent(code) = &h.role {
                        let parent = taxonomy.lookup(code)?;
                        children.insert(parent, ChildModel { children: taxonomy.node(parent).children.clone(), model: h.model.clone() });
                    }
                }
                Some(LcpnRouter::new(taxonomy, root.model.clone(), children, leaf_head.expect("checked").clone(), t)?)
            }
        };
        let weights = post.weights.clone().unwrap_or_else(|| default_level_weights(depth));
        Ok(Predictor { taxonomy, encoder: Encoder::new(bundle.encoder.clone())?, leaf_head, bank, router, post, weights })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn uses_routing(&self) -> bool {
        self.router.is_some()
    }

    /// Prediction from an encoded input; `None` yields the uniform distribution.
    pub fn predict_input(&self, x: Option<&[S]>) -> Result<LeafPrediction, PipelineError> {
        let leaves = self.taxonomy.leaves().len();
        let mut trace = Trace { postprocess: self.post.mode.to_string(), ..Trace::default() };
        let Some(x) = x else {
            trace.missing_features.push(self.encoder.spec().field().as_str().to_string());
            let scores = vec![1.0 / leaves as f64; leaves];
            return Ok(LeafPrediction { ranking: (0..leaves).collect(), scores, trace });
        };
        if let Some(router) = &self.router {
            let routed = router.predict(self.taxonomy, x)?;
            let scores: Vec<f64> = self.leaf_head.expect("checked").predict_proba(x)?.iter().map(|p| p.as_f64()).collect();
            let mut ranking = vec![routed.leaf];
            ranking.extend(ranked_indices(&scores).into_iter().filter(|&l| l != routed.leaf));
            trace.postprocess = "lcpn".into();
            trace.route = Some(routed.trace);
            return Ok(LeafPrediction { scores, ranking, trace });
        }
        let mut scores: Vec<f64> = match &self.bank {
            Some(bank) if self.post.mode != CombineMode::Leaf || !self.post.prune_levels.is_empty() => {
                let dists = predict_levels(bank, x)?;
                let combined = combine_levels(self.taxonomy, &dists, self.post.mode, &self.weights)?;
                if self.post.prune_levels.is_empty() {
                    combined
                } else {
                    let pruned = logical_prune(self.taxonomy, &dists, &combined, &self.post.prune_levels)?;
                    trace.pruned_levels = self.post.prune_levels.clone();
                    trace.prune_fallback = pruned.fallback;
                    pruned.scores
                }
            }
            _ => self.leaf_head.expect("checked").predict_proba(x)?.iter().map(|p| p.as_f64()).collect(),
        };
        if scores.len() != leaves {
            scores.resize(leaves, 0.0);
        }
        Ok(LeafPrediction { ranking: ranked_indices(&scores), scores, trace })
    }

    pub fn predict_ad(&self, ad: &JobAd, store: Option<&EmbeddingStore>) -> Result<LeafPrediction, PipelineError> {
        let x: Option<Vec<S>> = self.encoder.encode(ad, store)?.map(|v| v.into_iter().map(S::of).collect());
        self.predict_input(x.as_deref())
    }
}

/// Weighted fusion of member predictions for one ad.
pub fn ensemble_predict<S: Scalar>(
    members: &[(&Predictor<'_, S>, f64)],
    ad: &JobAd,
    store: Option<&EmbeddingStore>,
) -> Result<LeafPrediction, PipelineError> {
    let preds = members.iter().map(|(p, _)| p.predict_ad(ad, store)).collect::<Result<Vec<_>, _>>()?;
    let leaves = members.first().map(|(p, _)| p.taxonomy.leaves().len()).unwrap_or(0);
    let scores: Vec<Option<&[f64]>> = preds
        .iter()
        .map(|p| if p.trace.missing_features.is_empty() { Some(p.scores.as_slice()) } else { None })
        .collect();
    let weights: Vec<f64> = members.iter().map(|(_, w)| *w).collect();
    let fused = fuse(&scores, &weights, leaves)?;
    let mut missing = BTreeSet::new();
    for &i in &fused.missing {
        missing.extend(preds[i].trace.missing_features.iter().cloned());
    }
    let trace = Trace { postprocess: "ensemble".into(), missing_features: missing.into_iter().collect(), ..Trace::default() };
    Ok(LeafPrediction { ranking: ranked_indices(&fused.scores), scores: fused.scores, trace })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub leaf: String,
    /// Best leaves with their scores.
    pub top10: Vec<(String, f64)>,
    /// Best codes per level, keyed by level.
    pub levels: BTreeMap<usize, Vec<String>>,
    pub trace: Trace,
}

impl PredictionRecord {
    pub fn new(taxonomy: &Taxonomy, id: &str, p: &LeafPrediction) -> Self {
        let leaf_code = |pos: usize| taxonomy.code_str(taxonomy.leaves()[pos]).to_string();
        let levels = level_rankings(taxonomy, &p.ranking)
            .into_iter()
            .enumerate()
            .map(|(k, r)| {
                let codes = r.into_iter().take(TOP_N).map(|pos| taxonomy.code_str(taxonomy.level_nodes(k + 1)[pos]).to_string()).collect();
                (k + 1, codes)
            })
            .collect();
        PredictionRecord {
            id: id.to_string(),
            leaf: leaf_code(p.leaf()),
            top10: p.ranking.iter().take(TOP_N).map(|&l| (leaf_code(l), p.scores[l])).collect(),
            levels,
            trace: p.trace.clone(),
        }
    }

    /// Level rankings as positions, for evaluation.
    pub fn rankings(&self, taxonomy: &Taxonomy) -> Result<Vec<Vec<usize>>, PipelineError> {
        (1..=taxonomy.depth())
            .map(|k| {
                let codes = self.levels.get(&k).filter(|c| !c.is_empty()).ok_or_else(|| {
                    PipelineError::Config(format!("prediction {} has no level-{k} ranking", self.id))
                })?;
                codes.iter().map(|c| Ok(taxonomy.position(taxonomy.lookup(c)?))).collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionHeader {
    pub format: String,
    pub version: u64,
    pub scheme: Scheme,
    pub taxonomy_sha256: String,
}

impl PredictionHeader {
    pub fn new(taxonomy: &Taxonomy) -> Self {
        PredictionHeader {
            format: PREDICTION_FORMAT.into(),
            version: PREDICTION_VERSION,
            scheme: taxonomy.scheme(),
            taxonomy_sha256: taxonomy_digest(taxonomy),
        }
    }
}

pub fn write_predictions(header: &PredictionHeader, records: &[PredictionRecord]) -> String {
    let mut out = serde_json::to_string(header).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_predictions(text: &str) -> Result<(PredictionHeader, Vec<PredictionRecord>), PipelineError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| format_err(1, "empty prediction file"))?;
    let header: PredictionHeader = serde_json::from_str(first).map_err(|e| format_err(1, format!("bad header: {e}")))?;
    if header.format != PREDICTION_FORMAT || header.version != PREDICTION_VERSION {
        return Err(format_err(1, format!("expected {PREDICTION_FORMAT} v{PREDICTION_VERSION}, found {} v{}", header.format, header.version)));
    }
    let records = lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format_err(i + 1, e.to_string())))
        .collect::<Result<_, _>>()?;
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{keyword_ads, synthetic_taxonomy};

    fn quick() -> TrainConfig {
        TrainConfig { learning_rate: 0.05, epochs: 8, accumulation_steps: 1, ..TrainConfig::default() }
    }

    fn setup() -> (Taxonomy, Vec<JobAd>) {
        let t = synthetic_taxonomy(Scheme::Custom, &[2, 4, 8], 1).unwrap();
        let ads = keyword_ads(&t, 160, 2);
        (t, ads)
    }

    #[test]
    fn roles() {
        assert_eq!("parent:5.1".parse::<HeadRole>().unwrap(), HeadRole::Parent("5.1".into()));
        assert_eq!(HeadRole::Level(3).to_string(), "level:3");
        assert!("node:1".parse::<HeadRole>().is_err());
        let (t, _) = setup();
        let r = TrainTarget::Lcpn.roles(&t).unwrap();
        assert_eq!(r.first(), Some(&HeadRole::Level(1)));
        assert_eq!(r.last(), Some(&HeadRole::Level(3)));
        assert!(TrainTarget::Level(4).roles(&t).is_err());
    }

    #[test]
    fn bundle_round_trip_and_prediction() {
        let (t, ads) = setup();
        let (train, val) = ads.split_at(128);
        let head = HeadSpec { kind: HeadKind::Simple, width: 16, dropout: 0.1 };
        let (bundle, reports) = train_bundle::<f64>(
            &t,
            train,
            val,
            EncoderSpec::hashed_text(Field::Title, 128, 1),
            &TrainTarget::AllLevels,
            &head,
            &quick(),
            None,
            &|_, _| {},
        )
        .unwrap();
        assert_eq!(reports.len(), 3);
        let text = bundle.to_text();
        let back = ModelBundle::<f64>::parse(&text).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(back.to_text(), text);
        assert_eq!(bundle_scalar(&text).unwrap(), "f64");
        assert!(matches!(ModelBundle::<f32>::parse(&text), Err(PipelineError::Format { line: 2, .. })));

        let p = Predictor::new(&t, &back, PostProcess::default()).unwrap();
        let correct = val.iter().filter(|a| {
            let pred = p.predict_ad(a, None).unwrap();
            t.code_str(t.leaves()[pred.leaf()]) == a.label(Scheme::Custom).unwrap()
        });
        assert!(correct.count() as f64 / val.len() as f64 > 0.8);

        let joint = Predictor::new(&t, &back, PostProcess { mode: CombineMode::JointProb, prune_levels: vec![1], ..PostProcess::default() }).unwrap();
        let pred = joint.predict_ad(&val[0], None).unwrap();
        assert_eq!(pred.trace.pruned_levels, vec![1]);
        assert!((pred.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let rec = PredictionRecord::new(&t, &val[0].id, &pred);
        assert_eq!(rec.levels[&1].len(), 2);
        assert_eq!(rec.top10.len(), 8);
    }

    #[test]
    fn mismatched_taxonomy_is_rejected() {
        let (t, ads) = setup();
        let (bundle, _) = train_bundle::<f32>(
            &t,
            &ads,
            &[],
            EncoderSpec::hashed_text(Field::Title, 32, 1),
            &TrainTarget::Level(3),
            &HeadSpec { kind: HeadKind::Baseline, ..HeadSpec::default() },
            &TrainConfig { epochs: 1, ..quick() },
            None,
            &|_, _| {},
        )
        .unwrap();
        let other = synthetic_taxonomy(Scheme::Custom, &[2, 4, 8], 99).unwrap();
        assert!(matches!(Predictor::new(&other, &bundle, PostProcess::default()), Err(PipelineError::TaxonomyMismatch { .. })));
        assert!(matches!(
            Predictor::new(&t, &bundle, PostProcess { mode: CombineMode::JointProb, ..PostProcess::default() }),
            Err(PipelineError::MissingHead(_))
        ));
        assert!(ModelBundle::<f32>::parse(&bundle.to_text().replace("occ-model v1", "occ-model v2")).is_err());
    }

    #[test]
    fn missing_skills_are_uniform() {
        let (t, mut ads) = setup();
        let (bundle, _) = train_bundle::<f64>(
            &t,
            &ads,
            &[],
            EncoderSpec::skills_from(&ads),
            &TrainTarget::Level(3),
            &HeadSpec { kind: HeadKind::Baseline, ..HeadSpec::default() },
            &TrainConfig { epochs: 2, ..quick() },
            None,
            &|_, _| {},
        )
        .unwrap();
        ads[0].skills.clear();
        let p = Predictor::new(&t, &bundle, PostProcess::default()).unwrap();
        let pred = p.predict_ad(&ads[0], None).unwrap();
        assert_eq!(pred.trace.missing_features, vec!["skills".to_string()]);
        assert!(pred.scores.iter().all(|&s| (s - 0.125).abs() < 1e-15));
        let fused = ensemble_predict(&[(&p, 1.0)], &ads[0], None).unwrap();
        assert_eq!(fused.trace.missing_features, vec!["skills".to_string()]);
    }

    #[test]
    fn prediction_file_round_trip() {
        let (t, _) = setup();
        let pred = LeafPrediction { scores: vec![0.125; 8], ranking: (0..8).rev().collect(), trace: Trace::default() };
        let rec = PredictionRecord::new(&t, "x", &pred);
        let text = write_predictions(&PredictionHeader::new(&t), &[rec.clone()]);
        let (h, recs) = parse_predictions(&text).unwrap();
        assert_eq!(h.scheme, Scheme::Custom);
        assert_eq!(recs, vec![rec.clone()]);
        let r = rec.rankings(&t).unwrap();
        assert_eq!(r[2][0], 7);
        assert_eq!(r[0], vec![1, 0]);
    }
}
