//! Text cleaning, subword tokenization and length truncation.

use fnv::FnvHasher;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::hash::Hasher;
use std::path::Path;
use std::sync::OnceLock;
use thiserror::Error;

/// A single cleaning rule. Rules run in declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanRule {
    /// `Cleaner/maid` becomes `cleaner maid`.
    SplitOrPhrases,
    /// Drops `(...)`, `[...]` and `{...}` spans.
    StripBracketed,
    /// Drops spans like `10hrs`, `16-20 hours per week`.
    StripHourRanges,
    /// Drops currency-anchored spans like `£9.20- £10.50 per hour`.
    StripSalaryRanges,
    /// Keeps only the text before the first hyphen or dash.
    TruncateAfterHyphen,
}

impl CleanRule {
    pub const ORDER: [CleanRule; 5] = [
        CleanRule::SplitOrPhrases,
        CleanRule::StripBracketed,
        CleanRule::StripHourRanges,
        CleanRule::StripSalaryRanges,
        CleanRule::TruncateAfterHyphen,
    ];
}

/// Set of enabled cleaning rules, always applied in [`CleanRule::ORDER`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanRuleSet {
    enabled: Vec<CleanRule>,
}

impl CleanRuleSet {
    pub fn none() -> Self {
        CleanRuleSet { enabled: Vec::new() }
    }

    /// Every rule; the configuration used for job titles.
    pub fn title() -> Self {
        CleanRuleSet { enabled: CleanRule::ORDER.to_vec() }
    }

    /// Every rule except hyphen truncation, which only makes sense on titles.
    pub fn description() -> Self {
        Self::title().without(CleanRule::TruncateAfterHyphen)
    }

    pub fn with(mut self, rule: CleanRule) -> Self {
        if !self.enabled.contains(&rule) {
            self.enabled.push(rule);
        }
        self
    }

    pub fn without(mut self, rule: CleanRule) -> Self {
        self.enabled.retain(|r| *r != rule);
        self
    }

    pub fn is_enabled(&self, rule: CleanRule) -> bool {
        self.enabled.contains(&rule)
    }

    pub fn rules(&self) -> impl Iterator<Item = CleanRule> + '_ {
        CleanRule::ORDER.into_iter().filter(|r| self.is_enabled(*r))
    }
}

struct Patterns {
    or_phrase: Regex,
    bracketed: Regex,
    hours: Regex,
    salary: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        or_phrase: Regex::new(r"\p{Alphabetic}+(?:\s*/\s*\p{Alphabetic}+)+").unwrap(),
        bracketed: Regex::new(r"\([^()]*\)|\[[^\[\]]*\]|\{[^{}]*\}").unwrap(),
        hours: Regex::new(
            r"(?i)\b\d+(?:\.\d+)?\s*(?:-\s*\d+(?:\.\d+)?\s*)?(?:hrs?|hours?)\b(?:\s+(?:per|a)\s+(?:week|day|month))?",
        )
        .unwrap(),
        salary: Regex::new(
            r"(?i)[£$€]\s*\d[\d,]*(?:\.\d+)?k?(?:\s*(?:-|to)\s*[£$€]?\s*\d[\d,]*(?:\.\d+)?k?)?(?:\s*(?:per|an|a|/)?\s*(?:hour|hr|annum|year|week|day|month)\b|\s*(?:ph|pa|p\.a\.)(?:\s|$))?",
        )
        .unwrap(),
    })
}

fn squash_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn apply_rule(text: &str, rule: CleanRule) -> String {
    let p = patterns();
    let out = match rule {
        CleanRule::SplitOrPhrases => p
            .or_phrase
            .replace_all(text, |c: &regex::Captures<'_>| {
                c[0].split('/').map(|w| w.trim().to_lowercase()).collect::<Vec<_>>().join(" ")
            })
            .into_owned(),
        CleanRule::StripBracketed => {
            // Nested brackets unwind from the inside out.
            let mut cur = text.to_string();
            loop {
                let next = p.bracketed.replace_all(&cur, " ").into_owned();
                if next == cur {
                    break cur;
                }
                cur = next;
            }
        }
        CleanRule::StripHourRanges => p.hours.replace_all(text, " ").into_owned(),
        CleanRule::StripSalaryRanges => p.salary.replace_all(text, " ").into_owned(),
        CleanRule::TruncateAfterHyphen => match text.find(['-', '–', '—']) {
            Some(pos) if !text[..pos].trim().is_empty() => text[..pos].to_string(),
            _ => text.to_string(),
        },
    };
    squash_whitespace(&out)
}

/// Applies the enabled rules in order.
///
/// Removing a span can expose a new match for an earlier rule (a bracket
/// sitting between two halves of an `a/b` phrase, say), so the rule pass is
/// repeated until the text stops changing. Every pass either shortens the
/// text, removes a `/` or lowercases a letter, so this terminates.
pub fn clean(text: &str, rules: &CleanRuleSet) -> String {
    let mut cur = squash_whitespace(text);
    loop {
        let next = rules.rules().fold(cur.clone(), |acc, r| apply_rule(&acc, r));
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

/// Which advertisement field a token sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Title,
    Description,
    Skills,
}

impl Field {
    pub fn as_str(self) -> &'static str {
        match self {
            Field::Title => "title",
            Field::Description => "description",
            Field::Skills => "skills",
        }
    }
}

impl std::str::FromStr for Field {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "title" => Ok(Field::Title),
            "description" => Ok(Field::Description),
            "skills" => Ok(Field::Skills),
            other => Err(format!("unknown field `{other}` (expected title, description or skills)")),
        }
    }
}

impl std::fmt::Display for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub field: Field,
}

impl TokenSeq {
    pub fn new(tokens: Vec<u32>, field: Field) -> Self {
        TokenSeq { tokens, field }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot read vocabulary {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: empty token")]
    EmptyToken { line: usize },
}

pub const CONTINUATION: &str = "##";
pub const UNK: &str = "[UNK]";
const MAX_WORD_CHARS: usize = 100;

/// WordPiece vocabulary: word-initial pieces and `##`-prefixed continuations.
#[derive(Clone, Debug)]
pub struct SubwordVocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    unk: u32,
    max_piece_chars: usize,
}

impl SubwordVocab {
    /// Builds a vocabulary; `[UNK]` is appended when absent. Duplicates keep the first id.
    pub fn new<I, T>(entries: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut tokens = Vec::new();
        let mut ids = HashMap::new();
        for (i, e) in entries.into_iter().enumerate() {
            let tok: String = e.into();
            let body = tok.strip_prefix(CONTINUATION).unwrap_or(&tok);
            if body.is_empty() {
                return Err(VocabError::EmptyToken { line: i + 1 });
            }
            if !ids.contains_key(&tok) {
                ids.insert(tok.clone(), tokens.len() as u32);
                tokens.push(tok);
            }
        }
        let unk = match ids.get(UNK) {
            Some(&id) => id,
            None => {
                ids.insert(UNK.to_string(), tokens.len() as u32);
                tokens.push(UNK.to_string());
                tokens.len() as u32 - 1
            }
        };
        let max_piece_chars = tokens
            .iter()
            .map(|t| t.strip_prefix(CONTINUATION).unwrap_or(t).chars().count())
            .max()
            .unwrap_or(1);
        Ok(SubwordVocab { tokens, ids, unk, max_piece_chars })
    }

    /// One token per line; blank lines are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| VocabError::Io { path: path.display().to_string(), source })?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn entries(&self) -> &[String] {
        &self.tokens
    }

    /// Characters of `alphabet` lacking a word-initial or continuation entry.
    pub fn missing_chars(&self, alphabet: impl IntoIterator<Item = char>) -> Vec<char> {
        alphabet
            .into_iter()
            .filter(|c| {
                let s = c.to_string();
                !self.ids.contains_key(&s) || !self.ids.contains_key(&format!("{CONTINUATION}{s}"))
            })
            .collect()
    }

    /// Greedy longest-match segmentation of one word; `None` when some
    /// position has no matching piece.
    fn segment_word(&self, word: &str) -> Option<Vec<u32>> {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        if chars.len() > MAX_WORD_CHARS {
            return None;
        }
        let byte_at = |ci: usize| chars.get(ci).map_or(word.len(), |&(b, _)| b);
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut key = String::new();
        while start < chars.len() {
            let longest = (chars.len() - start).min(self.max_piece_chars);
            let found = (1..=longest).rev().find_map(|n| {
                let sub = &word[byte_at(start)..byte_at(start + n)];
                key.clear();
                if start > 0 {
                    key.push_str(CONTINUATION);
                }
                key.push_str(sub);
                self.ids.get(key.as_str()).map(|&id| (id, n))
            });
            let (id, n) = found?;
            pieces.push(id);
            start += n;
        }
        Some(pieces)
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id);
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) => out.push_str(rest),
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}

/// Splits on whitespace and isolates punctuation characters as their own words.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace()) {
                if start < i {
                    words.push(&chunk[start..i]);
                }
                words.push(&chunk[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < chunk.len() {
            words.push(&chunk[start..]);
        }
    }
    words
}

/// Greedy longest-match subword tokenization; unmatched words become `[UNK]`.
pub fn tokenize(text: &str, vocab: &SubwordVocab, field: Field) -> TokenSeq {
    let mut tokens = Vec::new();
    for word in pre_tokenize(text) {
        match vocab.segment_word(word) {
            Some(p) => tokens.extend(p),
            None => tokens.push(vocab.unk_id()),
        }
    }
    TokenSeq { tokens, field }
}

/// Word-level fallback: each lowercased word hashes into one of `buckets` ids.
pub fn tokenize_hashed(text: &str, buckets: u32, field: Field) -> TokenSeq {
    let buckets = buckets.max(1);
    let tokens = pre_tokenize(text)
        .into_iter()
        .map(|w| {
            let mut h = FnvHasher::default();
            h.write(w.to_lowercase().as_bytes());
            (h.finish() % buckets as u64) as u32
        })
        .collect();
    TokenSeq { tokens, field }
}

/// Subword vocabulary or hashed word buckets.
#[derive(Clone, Debug)]
pub enum Tokenizer {
    WordPiece(SubwordVocab),
    Hashed { buckets: u32 },
}

impl Tokenizer {
    pub fn tokenize(&self, text: &str, field: Field) -> TokenSeq {
        match self {
            Tokenizer::WordPiece(v) => tokenize(text, v, field),
            Tokenizer::Hashed { buckets } => tokenize_hashed(text, *buckets, field),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruncationStrategy {
    Head,
    Tail,
    Mixed,
}

impl std::str::FromStr for TruncationStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "head" => Ok(TruncationStrategy::Head),
            "tail" => Ok(TruncationStrategy::Tail),
            "mixed" => Ok(TruncationStrategy::Mixed),
            other => Err(format!("unknown truncation strategy `{other}`")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid truncation policy: {0}")]
pub struct PolicyError(String);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub strategy: TruncationStrategy,
    pub max_len: usize,
    pub mixed_head_len: usize,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        TruncationPolicy { strategy: TruncationStrategy::Mixed, max_len: 512, mixed_head_len: 384 }
    }
}

impl TruncationPolicy {
    pub fn new(strategy: TruncationStrategy, max_len: usize, mixed_head_len: usize) -> Result<Self, PolicyError> {
        let p = TruncationPolicy { strategy, max_len, mixed_head_len };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.max_len == 0 {
            return Err(PolicyError("max_len must be positive".into()));
        }
        if self.strategy == TruncationStrategy::Mixed && !(0 < self.mixed_head_len && self.mixed_head_len < self.max_len) {
            return Err(PolicyError(format!(
                "mixed_head_len {} must lie strictly between 0 and max_len {}",
                self.mixed_head_len, self.max_len
            )));
        }
        Ok(())
    }
}

pub fn truncate(seq: &TokenSeq, policy: &TruncationPolicy) -> TokenSeq {
    let n = seq.tokens.len();
    let max = policy.max_len;
    if n <= max {
        return seq.clone();
    }
    let tokens = match policy.strategy {
        TruncationStrategy::Head => seq.tokens[..max].to_vec(),
        TruncationStrategy::Tail => seq.tokens[n - max..].to_vec(),
        TruncationStrategy::Mixed => {
            let head = policy.mixed_head_len;
            let tail = max - head;
            let mut t = Vec::with_capacity(max);
            t.extend_from_slice(&seq.tokens[..head]);
            t.extend_from_slice(&seq.tokens[n - tail..]);
            t
        }
    };
    TokenSeq { tokens, field: seq.field }
}
