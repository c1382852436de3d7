//! Document vectors: hashed n-gram embeddings, precomputed stores, a remote
//! encoder client, and multi-hot skill vectors.

use crate::textprep::TokenSeq;
use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;
use thiserror::Error;

/// Hash keys for the bucket and sign hashes of the hashed embedder.
const BUCKET_SEED: u64 = 0x5f3e_0c21_9a7b_d4e1;
const SIGN_SEED: u64 = 0x2b99_7f10_c3d5_6a8f;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no embedding stored for `{0}`")]
    MissingEmbedding(String),
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("embedding store line {line}: {msg}")]
    Store { line: usize, msg: String },
    #[error("cannot access embedding store {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub provider: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn keyed_hash(key: u64, grams: &[u32]) -> u64 {
    let mut h = FnvHasher::with_key(key);
    for g in grams {
        h.write_u32(*g);
    }
    h.finish()
}

/// Signed feature hashing of all token n-grams up to order `max_order`,
/// followed by L2 normalization (a zero vector stays zero).
pub fn embed_hashed(seq: &TokenSeq, dim: usize, max_order: usize) -> Vec<f64> {
    let dim = dim.max(1);
    let mut v = vec![0.0; dim];
    for n in 1..=max_order.max(1) {
        for gram in seq.tokens.windows(n) {
            let bucket = (keyed_hash(BUCKET_SEED ^ n as u64, gram) % dim as u64) as usize;
            let sign = if keyed_hash(SIGN_SEED ^ n as u64, gram) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedEmbedder {
    pub dim: usize,
    pub max_order: usize,
}

impl HashedEmbedder {
    pub fn provider_id(&self) -> String {
        format!("hashed-d{}-n{}", self.dim, self.max_order)
    }

    pub fn embed(&self, seq: &TokenSeq) -> EmbeddingVector {
        EmbeddingVector { values: embed_hashed(seq, self.dim, self.max_order), provider: self.provider_id() }
    }
}

/// Precomputed vectors keyed by document id.
///
/// File layout: a header `dim=<d> provider=<id>` followed by
/// `id<TAB>v1,v2,...,vd` records.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    provider: String,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, provider: impl Into<String>) -> Self {
        EmbeddingStore { dim, provider: provider.into(), vectors: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| EmbedError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, EmbedError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(EmbedError::Store { line: 1, msg: "missing header".into() })?;
        let mut dim = None;
        let mut provider = None;
        for part in header.split_whitespace() {
            match part.split_once('=') {
                Some(("dim", d)) => dim = d.parse::<usize>().ok(),
                Some(("provider", p)) => provider = Some(p.to_string()),
                _ => {}
            }
        }
        let (Some(dim), Some(provider)) = (dim, provider) else {
            return Err(EmbedError::Store { line: 1, msg: "header must be `dim=<d> provider=<id>`".into() });
        };
        if dim == 0 {
            return Err(EmbedError::Store { line: 1, msg: "dim must be positive".into() });
        }
        let mut store = EmbeddingStore::new(dim, provider);
        for (i, line) in lines {
            let line_no = i + 1;
            let (id, values) = line
                .split_once('\t')
                .ok_or(EmbedError::Store { line: line_no, msg: "expected id<TAB>values".into() })?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| EmbedError::Store { line: line_no, msg: e.to_string() })?;
            if values.len() != dim {
                return Err(EmbedError::DimensionMismatch { line: line_no, expected: dim, found: values.len() });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(EmbedError::Store { line: line_no, msg: "non-finite value".into() });
            }
            store.vectors.insert(id.to_string(), values);
        }
        Ok(store)
    }

    pub fn lookup(&self, id: &str) -> Result<EmbeddingVector, EmbedError> {
        self.vectors
            .get(id)
            .map(|v| EmbeddingVector { values: v.clone(), provider: self.provider.clone() })
            .ok_or_else(|| EmbedError::MissingEmbedding(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vectors.contains_key(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, values: Vec<f64>) -> Result<(), EmbedError> {
        if values.len() != self.dim {
            return Err(EmbedError::DimensionMismatch { line: 0, expected: self.dim, found: values.len() });
        }
        self.vectors.insert(id.into(), values);
        Ok(())
    }

    pub fn write(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "dim={} provider={}", self.dim, self.provider)?;
        for (id, v) in &self.vectors {
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{id}\t{}", vals.join(","))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbedError> {
        let path = path.as_ref();
        let io = |source| EmbedError::Io { path: path.display().to_string(), source };
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        self.write(&mut file).map_err(io)?;
        file.flush().map_err(io)
    }
}

/// One request/response exchange with a remote encoder.
pub trait Transport: Send + Sync {
    /// Sends a JSON body and returns the response body. Errors returned here
    /// are treated as retryable.
    fn post(&self, body: &str) -> Result<String, TransportFailure>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    /// Connection failures, timeouts, server errors.
    Retryable(String),
    /// Client errors the server will repeat on retry.
    Fatal(String),
}

/// Plain-HTTP JSON transport.
pub struct HttpTransport {
    url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        HttpTransport { url: url.into(), agent }
    }
}

impl Transport for HttpTransport {
    fn post(&self, body: &str) -> Result<String, TransportFailure> {
        let resp = self.agent.post(&self.url).header("content-type", "application/json").send(body);
        match resp {
            Ok(mut r) => r.body_mut().read_to_string().map_err(|e| TransportFailure::Retryable(e.to_string())),
            Err(ureq::Error::StatusCode(code)) if code >= 500 || code == 429 => {
                Err(TransportFailure::Retryable(format!("HTTP {code}")))
            }
            Err(ureq::Error::StatusCode(code)) => Err(TransportFailure::Fatal(format!("HTTP {code}"))),
            Err(e) => Err(TransportFailure::Retryable(e.to_string())),
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Cache key for a text under a provider.
pub fn content_key(provider: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(provider.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

/// Client for an external encoder service with a content-addressed cache.
pub struct RemoteEmbedder {
    provider: String,
    transport: Box<dyn Transport>,
    cache: Mutex<Option<EmbeddingStore>>,
    max_retries: u32,
    backoff: Duration,
    calls: Mutex<u64>,
}

impl RemoteEmbedder {
    pub fn new(provider: impl Into<String>, transport: Box<dyn Transport>) -> Self {
        RemoteEmbedder {
            provider: provider.into(),
            transport,
            cache: Mutex::new(None),
            max_retries: 3,
            backoff: Duration::from_millis(200),
            calls: Mutex::new(0),
        }
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    /// Seeds the cache, e.g. from a store persisted by an earlier run.
    pub fn with_cache(self, store: EmbeddingStore) -> Self {
        *self.cache.lock().unwrap() = Some(store);
        self
    }

    pub fn provider_id(&self) -> &str {
        &self.provider
    }

    /// Number of remote requests issued so far.
    pub fn remote_calls(&self) -> u64 {
        *self.calls.lock().unwrap()
    }

    pub fn cache_snapshot(&self) -> Option<EmbeddingStore> {
        self.cache.lock().unwrap().clone()
    }

    /// Embeds a batch, one vector per input in input order. Cached texts are
    /// not re-sent; repeated texts within a batch are sent once.
    pub fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let keys: Vec<String> = texts.iter().map(|t| content_key(&self.provider, t)).collect();
        let mut pending: Vec<&str> = Vec::new();
        let mut pending_keys: HashMap<&str, usize> = HashMap::new();
        {
            let cache = self.cache.lock().unwrap();
            for (t, k) in texts.iter().zip(&keys) {
                let cached = cache.as_ref().is_some_and(|c| c.contains(k));
                if !cached && !pending_keys.contains_key(k.as_str()) {
                    pending_keys.insert(k.as_str(), pending.len());
                    pending.push(t);
                }
            }
        }
        if !pending.is_empty() {
            let vectors = self.request(&pending)?;
            let mut cache = self.cache.lock().unwrap();
            let store = cache.get_or_insert_with(|| EmbeddingStore::new(vectors[0].len(), self.provider.clone()));
            for (k, &i) in &pending_keys {
                store.insert(*k, vectors[i].clone()).map_err(|_| {
                    EmbedError::Protocol(format!("server returned dimension {} but cache holds {}", vectors[i].len(), store.dim()))
                })?;
            }
        }
        let cache = self.cache.lock().unwrap();
        let store = cache.as_ref().expect("cache populated");
        keys.iter().map(|k| store.lookup(k).map(|mut v| { v.provider = self.provider.clone(); v })).collect()
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let body = serde_json::to_string(&EmbedRequest { texts }).expect("request serializes");
        let mut attempt = 0;
        let raw = loop {
            *self.calls.lock().unwrap() += 1;
            match self.transport.post(&body) {
                Ok(r) => break r,
                Err(TransportFailure::Fatal(msg)) => return Err(EmbedError::Protocol(msg)),
                Err(TransportFailure::Retryable(msg)) => {
                    if attempt >= self.max_retries {
                        return Err(EmbedError::Transport(format!("{msg} (after {} attempts)", attempt + 1)));
                    }
                    std::thread::sleep(self.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
            }
        };
        let resp: EmbedResponse =
            serde_json::from_str(&raw).map_err(|e| EmbedError::Protocol(format!("malformed response: {e}")))?;
        if resp.vectors.len() != texts.len() {
            return Err(EmbedError::Protocol(format!("sent {} texts, received {} vectors", texts.len(), resp.vectors.len())));
        }
        let dim = resp.vectors[0].len();
        if dim == 0 || resp.vectors.iter().any(|v| v.len() != dim) {
            return Err(EmbedError::Protocol("vectors must be non-empty and of equal length".into()));
        }
        if resp.vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(EmbedError::Protocol("non-finite vector entry".into()));
        }
        Ok(resp.vectors)
    }
}

/// Skill index built from the training split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillVocab {
    skills: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

fn normalize_skill(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl SkillVocab {
    pub fn build<'a, I, S>(skill_lists: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut all: Vec<String> = skill_lists
            .into_iter()
            .flat_map(|l| l.iter().map(|s| normalize_skill(s.as_ref())))
            .filter(|s| !s.is_empty())
            .collect();
        all.sort();
        all.dedup();
        Self::from_sorted(all)
    }

    pub fn from_sorted(skills: Vec<String>) -> Self {
        let index = skills.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        SkillVocab { skills, index }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(self) -> Self {
        Self::from_sorted(self.skills)
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn index_of(&self, skill: &str) -> Option<usize> {
        self.index.get(&normalize_skill(skill)).copied()
    }

    pub fn skills(&self) -> &[String] {
        &self.skills
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkillVector {
    pub values: Vec<f64>,
    /// Skills not found in the vocabulary.
    pub out_of_vocab: usize,
}

pub fn vectorize_skills<S: AsRef<str>>(skills: &[S], vocab: &SkillVocab) -> SkillVector {
    let mut values = vec![0.0; vocab.len()];
    let mut out_of_vocab = 0;
    for s in skills {
        match vocab.index_of(s.as_ref()) {
            Some(i) => values[i] = 1.0,
            None => out_of_vocab += 1,
        }
    }
    SkillVector { values, out_of_vocab }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textprep::Field;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn seq(t: &[u32]) -> TokenSeq {
        TokenSeq::new(t.to_vec(), Field::Title)
    }

    #[test]
    fn hashed_basics() {
        assert!(embed_hashed(&seq(&[]), 16, 2).iter().all(|&x| x == 0.0));
        let a = embed_hashed(&seq(&[1, 2, 3]), 64, 2);
        assert_eq!(a, embed_hashed(&seq(&[1, 2, 3]), 64, 2));
        let norm: f64 = a.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn doubled_unigram_sequence_keeps_direction() {
        let base = [4u32, 9, 9, 17, 3];
        let doubled: Vec<u32> = base.iter().chain(base.iter()).copied().collect();
        let a = embed_hashed(&seq(&base), 32, 1);
        let b = embed_hashed(&seq(&doubled), 32, 1);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unigram_bag_semantics() {
        let a = embed_hashed(&seq(&[1, 2, 3, 4]), 32, 1);
        let b = embed_hashed(&seq(&[4, 2, 1, 3]), 32, 1);
        assert_eq!(a, b);
        let c = embed_hashed(&seq(&[4, 2, 1, 3]), 32, 2);
        assert_ne!(a, c);
    }

    #[test]
    fn store_lookup_and_errors() {
        let text = "dim=3 provider=test\nad1\t0.1,0.2,0.3\nad2\t1,2,3\n";
        let s = EmbeddingStore::parse(text).unwrap();
        assert_eq!(s.lookup("ad1").unwrap().values, vec![0.1, 0.2, 0.3]);
        assert!(matches!(s.lookup("nope"), Err(EmbedError::MissingEmbedding(_))));
        let short = format!("dim=768 provider=x\nad\t{}\n", vec!["0"; 512].join(","));
        assert!(matches!(
            EmbeddingStore::parse(&short),
            Err(EmbedError::DimensionMismatch { line: 2, expected: 768, found: 512 })
        ));
        assert!(EmbeddingStore::parse("nonsense\n").is_err());
        let mut buf = Vec::new();
        s.write(&mut buf).unwrap();
        assert_eq!(EmbeddingStore::parse(std::str::from_utf8(&buf).unwrap()).unwrap(), s);
    }

    struct Fake {
        calls: Arc<AtomicUsize>,
        fail_first: usize,
        truncate: bool,
    }

    impl Transport for Fake {
        fn post(&self, body: &str) -> Result<String, TransportFailure> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(TransportFailure::Retryable("connection reset".into()));
            }
            let req: serde_json::Value = serde_json::from_str(body).unwrap();
            let mut vectors: Vec<Vec<f64>> = req["texts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| vec![t.as_str().unwrap().len() as f64, 1.0])
                .collect();
            if self.truncate {
                vectors.pop();
            }
            Ok(serde_json::json!({ "vectors": vectors }).to_string())
        }
    }

    fn remote(fail_first: usize, truncate: bool) -> (RemoteEmbedder, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let fake = Fake { calls: calls.clone(), fail_first, truncate };
        (RemoteEmbedder::new("fake", Box::new(fake)).with_retries(2, Duration::from_millis(1)), calls)
    }

    #[test]
    fn remote_preserves_order_and_caches() {
        let (r, calls) = remote(0, false);
        let out = r.embed(&["ab", "abcd"]).unwrap();
        assert_eq!(out.iter().map(|v| v.values[0]).collect::<Vec<_>>(), vec![2.0, 4.0]);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        let again = r.embed(&["abcd"]).unwrap();
        assert_eq!(again[0].values[0], 4.0);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        let dup = r.embed(&["xyz", "xyz"]).unwrap();
        assert_eq!(dup.len(), 2);
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn remote_retries_then_gives_up() {
        let (r, calls) = remote(2, false);
        assert!(r.embed(&["a"]).is_ok());
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        let (r, _) = remote(10, false);
        assert!(matches!(r.embed(&["a"]), Err(EmbedError::Transport(_))));
    }

    #[test]
    fn short_response_is_protocol_error() {
        let (r, calls) = remote(0, true);
        assert!(matches!(r.embed(&["a", "b"]), Err(EmbedError::Protocol(_))));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn skill_vectors() {
        let lists: Vec<Vec<String>> = vec![vec!["Welding".into(), "cad".into()], vec!["forklift".into(), "a".into()]];
        let vocab = SkillVocab::build(lists.iter().map(Vec::as_slice));
        assert_eq!(vocab.skills(), ["a", "cad", "forklift", "welding"]);
        assert_eq!(vocab.index_of("welding"), Some(3));
        assert!(vectorize_skills::<&str>(&[], &vocab).values.iter().all(|&x| x == 0.0));
        let v = vectorize_skills(&["welding"], &vocab);
        assert_eq!(v.values, vec![0.0, 0.0, 0.0, 1.0]);
        let v = vectorize_skills(&["cad", "CAD", "juggling"], &vocab);
        assert_eq!(v.values.iter().sum::<f64>(), 1.0);
        assert_eq!(v.out_of_vocab, 1);
    }
}
