//! Job-advertisement corpora: ingestion, per-scheme splits and length statistics.
//!
//! Corpus files hold one JSON object per line:
//!
//! ```text
//! {"id":"ad-1","title":"Cleaner/maid","description":"...","skills":["cleaning"],"labels":{"ons2020":"9233"}}
//! ```
//!
//! An optional first line `{"format":"occ-corpus","version":1}` pins the format.

use crate::taxonomy::{Scheme, Taxonomy, UNKNOWN_LABEL};
use crate::textprep::{Field, Tokenizer};
use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, HashSet};
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const FORMAT_TAG: &str = "occ-corpus";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("unsupported corpus format: {0}")]
    Version(String),
    #[error("no advertisements carry a known {0} label")]
    EmptyAfterFilter(Scheme),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

/// Gold label for one scheme.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Unknown,
    Code(String),
}

impl Label {
    pub fn code(&self) -> Option<&str> {
        match self {
            Label::Code(c) => Some(c),
            Label::Unknown => None,
        }
    }

    fn as_str(&self) -> &str {
        match self {
            Label::Code(c) => c,
            Label::Unknown => UNKNOWN_LABEL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobAd {
    pub id: String,
    pub title: String,
    pub description: String,
    pub skills: Vec<String>,
    pub labels: BTreeMap<Scheme, Label>,
}

impl JobAd {
    pub fn label(&self, scheme: Scheme) -> Option<&str> {
        self.labels.get(&scheme).and_then(Label::code)
    }

    /// Text of a field; skills are joined with `; `.
    pub fn text(&self, field: Field) -> String {
        match field {
            Field::Title => self.title.clone(),
            Field::Description => self.description.clone(),
            Field::Skills => self.skills.join("; "),
        }
    }

    pub fn to_json(&self) -> Value {
        let labels: serde_json::Map<String, Value> =
            self.labels.iter().map(|(s, l)| (s.as_str().to_string(), Value::String(l.as_str().to_string()))).collect();
        serde_json::json!({
            "id": self.id,
            "title": self.title,
            "description": self.description,
            "skills": self.skills,
            "labels": labels,
        })
    }
}

/// A record that could not be loaded, with its 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Reject {
    pub line: usize,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub ads: Vec<JobAd>,
    pub rejects: Vec<Reject>,
}

fn parse_record(value: &Value) -> Result<JobAd, (Option<String>, String)> {
    let obj = value.as_object().ok_or((None, "record is not an object".to_string()))?;
    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err((None, "field `id` must be a non-empty string".into())),
        None => return Err((None, "missing field `id`".into())),
    };
    let fail = |reason: String| (Some(id.clone()), reason);
    let text = |name: &str| -> Result<String, (Option<String>, String)> {
        match obj.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Null) | None => Err(fail(format!("missing field `{name}`"))),
            Some(_) => Err(fail(format!("field `{name}` must be a string"))),
        }
    };
    let title = text("title")?;
    let description = text("description")?;
    let skills = match obj.get("skills") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(|s| s.trim().to_string()).ok_or_else(|| fail("skills must be strings".into())))
            .filter(|r| r.as_ref().map_or(true, |s| !s.is_empty()))
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(fail("field `skills` must be an array".into())),
    };
    let mut labels = BTreeMap::new();
    match obj.get("labels") {
        None | Some(Value::Null) => {}
        Some(Value::Object(map)) => {
            for (k, v) in map {
                let scheme: Scheme = k.parse().map_err(|e: String| fail(e))?;
                let raw = match v {
                    Value::String(s) => s.trim().to_string(),
                    Value::Number(n) => n.to_string(),
                    _ => return Err(fail(format!("label for {scheme} must be a string"))),
                };
                let label = if raw == UNKNOWN_LABEL {
                    Label::Unknown
                } else if scheme.has_grammar() {
                    let code = crate::taxonomy::parse_code(&raw, scheme).map_err(|e| fail(e.to_string()))?;
                    if code.level() != crate::taxonomy::MAX_DEPTH {
                        return Err(fail(format!("{scheme} label `{raw}` is not a leaf code")));
                    }
                    Label::Code(code.as_str().to_string())
                } else if scheme.is_leaf_grammar(&raw) {
                    Label::Code(raw)
                } else {
                    return Err(fail(format!("bad {scheme} label `{raw}`")));
                };
                labels.insert(scheme, label);
            }
        }
        Some(_) => return Err(fail("field `labels` must be an object".into())),
    }
    Ok(JobAd { id, title, description, skills, labels })
}

impl Corpus {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    /// Parses corpus text. Malformed records go to `rejects`; only duplicate
    /// ids and format mismatches are fatal.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        let mut ids = HashSet::new();
        let mut first = true;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let value: Value = match serde_json::from_str(raw) {
                Ok(v) => v,
                Err(e) => {
                    corpus.rejects.push(Reject { line, id: None, reason: format!("invalid JSON: {e}") });
                    first = false;
                    continue;
                }
            };
            if first {
                first = false;
                if let Some(tag) = value.get("format") {
                    let version = value.get("version").and_then(Value::as_u64);
                    if tag.as_str() != Some(FORMAT_TAG) || version != Some(FORMAT_VERSION) {
                        return Err(CorpusError::Version(raw.trim().to_string()));
                    }
                    continue;
                }
            }
            match parse_record(&value) {
                Ok(ad) => {
                    if !ids.insert(ad.id.clone()) {
                        return Err(CorpusError::DuplicateId { line, id: ad.id });
                    }
                    corpus.ads.push(ad);
                }
                Err((id, reason)) => corpus.rejects.push(Reject { line, id, reason }),
            }
        }
        Ok(corpus)
    }

    /// Moves ads whose `scheme` label is not a leaf of `taxonomy` into the rejects.
    pub fn validate_labels(&mut self, taxonomy: &Taxonomy) {
        let scheme = taxonomy.scheme();
        let mut kept = Vec::with_capacity(self.ads.len());
        for ad in std::mem::take(&mut self.ads) {
            match ad.label(scheme) {
                Some(code) => match taxonomy.lookup(code) {
                    Ok(idx) if taxonomy.is_leaf(idx) => kept.push(ad),
                    Ok(_) => self.rejects.push(Reject { line: 0, id: Some(ad.id.clone()), reason: format!("label `{code}` is not a leaf") }),
                    Err(_) => self.rejects.push(Reject { line: 0, id: Some(ad.id.clone()), reason: format!("label `{code}` not in taxonomy") }),
                },
                None => kept.push(ad),
            }
        }
        self.ads = kept;
    }

    pub fn write(ads: &[JobAd], mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", serde_json::json!({"format": FORMAT_TAG, "version": FORMAT_VERSION}))?;
        for ad in ads {
            writeln!(out, "{}", ad.to_json())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
    pub scheme: Scheme,
}

impl SplitSpec {
    pub fn new(test_fraction: f64, seed: u64, scheme: Scheme) -> Self {
        SplitSpec { test_fraction, seed, scheme }
    }
}

/// Seeded, order-independent hash of an advertisement id.
pub fn id_hash(id: &str, seed: u64) -> u64 {
    let mut h = FnvHasher::with_key(0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    h.write(id.as_bytes());
    h.finish()
}

/// Partitions the ads with a known label for `spec.scheme` into `(train, test)`.
///
/// Eligible ads are ordered by seeded id hash; the first
/// `round(test_fraction × eligible)` form the test set. Both halves come
/// back sorted by id, so membership and order are independent of the input order.
pub fn split(ads: &[JobAd], spec: &SplitSpec) -> Result<(Vec<JobAd>, Vec<JobAd>), CorpusError> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(CorpusError::InvalidSplit(format!("test_fraction {} outside (0,1)", spec.test_fraction)));
    }
    let mut eligible: Vec<(u64, &JobAd)> =
        ads.iter().filter(|a| a.label(spec.scheme).is_some()).map(|a| (id_hash(&a.id, spec.seed), a)).collect();
    if eligible.is_empty() {
        return Err(CorpusError::EmptyAfterFilter(spec.scheme));
    }
    eligible.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let n_test = (spec.test_fraction * eligible.len() as f64).round() as usize;
    let mut test: Vec<JobAd> = eligible[..n_test].iter().map(|(_, a)| (*a).clone()).collect();
    let mut train: Vec<JobAd> = eligible[n_test..].iter().map(|(_, a)| (*a).clone()).collect();
    test.sort_by(|a, b| a.id.cmp(&b.id));
    train.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((train, test))
}

/// Token-length distribution of one field.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LengthStats {
    pub field: Field,
    pub bucket_width: usize,
    /// `(lower bound inclusive, count)` per bucket, covering 0 through the longest document.
    pub histogram: Vec<(usize, usize)>,
    pub lengths: Vec<usize>,
}

impl LengthStats {
    pub fn from_lengths(field: Field, lengths: Vec<usize>, bucket_width: usize) -> Self {
        let width = bucket_width.max(1);
        let max = lengths.iter().copied().max().unwrap_or(0);
        let mut histogram: Vec<(usize, usize)> = (0..=max / width).map(|b| (b * width, 0)).collect();
        for &l in &lengths {
            histogram[l / width].1 += 1;
        }
        LengthStats { field, bucket_width: width, histogram, lengths }
    }

    /// Fraction of documents strictly longer than `n` tokens; 0 for an empty corpus.
    pub fn fraction_over(&self, n: usize) -> f64 {
        if self.lengths.is_empty() {
            return 0.0;
        }
        self.lengths.iter().filter(|&&l| l > n).count() as f64 / self.lengths.len() as f64
    }

    pub fn mean(&self) -> f64 {
        if self.lengths.is_empty() {
            return 0.0;
        }
        self.lengths.iter().sum::<usize>() as f64 / self.lengths.len() as f64
    }

    pub fn max(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    /// Tab-separated table: `bucket_start  bucket_end  count`.
    pub fn to_table(&self) -> String {
        let mut out = String::from("bucket_start\tbucket_end\tcount\n");
        for &(lo, count) in &self.histogram {
            out.push_str(&format!("{lo}\t{}\t{count}\n", lo + self.bucket_width - 1));
        }
        out
    }
}

/// Untruncated token lengths of `field` over the ads.
pub fn token_length_stats(ads: &[JobAd], tokenizer: &Tokenizer, field: Field, bucket_width: usize) -> LengthStats {
    let lengths = ads.iter().map(|a| tokenizer.tokenize(&a.text(field), field).len()).collect();
    LengthStats::from_lengths(field, lengths, bucket_width)
}
