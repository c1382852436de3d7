//! Occupation code grammars and the taxonomy tree.
//!
//! Two grammars are supported. UK ONS SOC codes are digit strings whose
//! length equals their level (`5`, `52`, `523`, `5235`). US O*NET codes use
//! the hyphenated `MM-MBBD` form whose prefixes `MM`, `MM-M`, `MM-MBB` and
//! `MM-MBBD` are the four levels. A third, grammar-free scheme (`custom`)
//! accepts any code token and takes levels from the taxonomy file; it is
//! used for synthetic and toy taxonomies.
//!
//! Taxonomy files carry explicit parent links:
//!
//! ```text
//! # format: occ-taxonomy v1
//! code,parent,level,title
//! 5,ROOT,1,Skilled trades occupations
//! 52,5,2,Skilled metal, electrical and electronic trades
//! ```

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// Deepest level any supported scheme defines.
pub const MAX_DEPTH: usize = 4;

/// Label value that marks an advertisement whose code is unknown.
pub const UNKNOWN_LABEL: &str = "0";

/// Parent marker for level-1 nodes in taxonomy files.
pub const ROOT_MARKER: &str = "ROOT";

const FORMAT_TAG: &str = "occ-taxonomy";
const FORMAT_VERSION: &str = "v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Ons2010,
    Ons2020,
    Onet2019,
    Custom,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Ons2010, Scheme::Ons2020, Scheme::Onet2019, Scheme::Custom];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Ons2010 => "ons2010",
            Scheme::Ons2020 => "ons2020",
            Scheme::Onet2019 => "onet2019",
            Scheme::Custom => "custom",
        }
    }

    fn is_ons(self) -> bool {
        matches!(self, Scheme::Ons2010 | Scheme::Ons2020)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ons2010" => Ok(Scheme::Ons2010),
            "ons2020" => Ok(Scheme::Ons2020),
            "onet2019" => Ok(Scheme::Onet2019),
            "custom" => Ok(Scheme::Custom),
            other => Err(format!("unknown scheme `{other}` (expected ons2010, ons2020, onet2019 or custom)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodeError {
    #[error("empty code")]
    Empty,
    #[error("malformed code `{raw}`: {reason}")]
    Malformed { raw: String, reason: String },
    #[error("code `{raw}` does not belong to scheme {scheme}: {reason}")]
    SchemeMismatch { raw: String, scheme: Scheme, reason: String },
    #[error("`0` is the unknown-label sentinel, not an occupation code")]
    UnknownSentinel,
    #[error("level of `{raw}` cannot be inferred without a taxonomy (custom scheme)")]
    LevelNotInferable { raw: String },
}

/// A validated occupation code in canonical form.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OccupationCode {
    scheme: Scheme,
    code: String,
    level: u8,
}

impl OccupationCode {
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn as_str(&self) -> &str {
        &self.code
    }

    pub fn level(&self) -> usize {
        self.level as usize
    }

    /// Prefix at `level` for grammar-based schemes. `None` for custom codes
    /// or when `level` exceeds the code's own level.
    pub fn grammar_prefix(&self, level: usize) -> Option<OccupationCode> {
        if level == 0 || level > self.level() {
            return None;
        }
        let len = match self.scheme {
            Scheme::Ons2010 | Scheme::Ons2020 => level,
            Scheme::Onet2019 => [2, 4, 6, 7][level - 1],
            Scheme::Custom => return None,
        };
        Some(OccupationCode { scheme: self.scheme, code: self.code[..len].to_string(), level: level as u8 })
    }

    /// O*NET component split `(major, minor, broad, detailed)`; absent parts are empty.
    pub fn onet_parts(&self) -> Option<(&str, &str, &str, &str)> {
        if self.scheme != Scheme::Onet2019 {
            return None;
        }
        let c = self.code.as_str();
        let get = |a: usize, b: usize| if c.len() >= b { &c[a..b] } else { "" };
        Some((get(0, 2), get(3, 4), get(4, 6), get(6, 7)))
    }
}

impl fmt::Display for OccupationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code)
    }
}

fn malformed(raw: &str, reason: impl Into<String>) -> CodeError {
    CodeError::Malformed { raw: raw.to_string(), reason: reason.into() }
}

fn mismatch(raw: &str, scheme: Scheme, reason: impl Into<String>) -> CodeError {
    CodeError::SchemeMismatch { raw: raw.to_string(), scheme, reason: reason.into() }
}

fn validate_custom_token(raw: &str) -> Result<(), CodeError> {
    if raw.chars().any(|c| c.is_whitespace() || c == ',') {
        return Err(malformed(raw, "custom codes may not contain whitespace or commas"));
    }
    if raw == ROOT_MARKER {
        return Err(malformed(raw, "ROOT is reserved"));
    }
    Ok(())
}

/// Parses a code in a grammar-based scheme and infers its level.
///
/// O*NET inputs may carry a trailing `.00`-style suffix, which is dropped.
/// Custom-scheme codes have no grammar; use [`Taxonomy::code`] for those.
pub fn parse_code(raw: &str, scheme: Scheme) -> Result<OccupationCode, CodeError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Err(CodeError::Empty);
    }
    if raw == UNKNOWN_LABEL {
        return Err(CodeError::UnknownSentinel);
    }
    match scheme {
        Scheme::Ons2010 | Scheme::Ons2020 => {
            if raw.contains('-') {
                return Err(mismatch(raw, scheme, "hyphenated codes belong to O*NET"));
            }
            if !raw.bytes().all(|b| b.is_ascii_digit()) {
                return Err(malformed(raw, "ONS codes contain digits only"));
            }
            if raw.len() > MAX_DEPTH {
                return Err(malformed(raw, format!("ONS codes have at most 4 digits, got {}", raw.len())));
            }
            Ok(OccupationCode { scheme, code: raw.to_string(), level: raw.len() as u8 })
        }
        Scheme::Onet2019 => parse_onet(raw),
        Scheme::Custom => {
            validate_custom_token(raw)?;
            Err(CodeError::LevelNotInferable { raw: raw.to_string() })
        }
    }
}

fn parse_onet(raw: &str) -> Result<OccupationCode, CodeError> {
    let scheme = Scheme::Onet2019;
    let mut body = raw;
    if let Some((head, suffix)) = raw.split_once('.') {
        if suffix.is_empty() || !suffix.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed(raw, "detailed suffix must be digits, e.g. `.00`"));
        }
        body = head;
        if body.len() != 7 {
            return Err(malformed(raw, "a dotted suffix is only valid on a full MM-MBBD code"));
        }
    }
    if body.len() == 2 {
        if !body.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed(raw, "major group is two digits"));
        }
        return Ok(OccupationCode { scheme, code: body.to_string(), level: 1 });
    }
    if !body.contains('-') {
        if body.bytes().all(|b| b.is_ascii_digit()) {
            return Err(mismatch(raw, scheme, "O*NET codes longer than the major group need a hyphen"));
        }
        return Err(malformed(raw, "expected MM-MBBD"));
    }
    let bytes = body.as_bytes();
    if bytes.len() < 4 || bytes[2] != b'-' {
        return Err(malformed(raw, "expected MM-MBBD with the hyphen after two digits"));
    }
    let digits_ok = bytes[..2].iter().chain(&bytes[3..]).all(|b| b.is_ascii_digit());
    if !digits_ok {
        return Err(malformed(raw, "O*NET codes contain digits and one hyphen"));
    }
    let level = match bytes.len() {
        4 => 2,
        6 => 3,
        7 => 4,
        n => return Err(malformed(raw, format!("unexpected length {n} for MM-MBBD prefixes"))),
    };
    Ok(OccupationCode { scheme, code: body.to_string(), level })
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("cannot read taxonomy {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing header line `code,parent,level,title`")]
    MissingHeader,
    #[error("unsupported taxonomy format `{found}`")]
    Version { found: String },
    #[error("line {line}: duplicate code `{code}`")]
    DuplicateCode { line: usize, code: String },
    #[error("line {line}: node `{code}` names missing parent `{parent}`")]
    OrphanNode { line: usize, code: String, parent: String },
    #[error("line {line}: node `{code}` at level {level} has parent at level {parent_level}")]
    LevelGap { line: usize, code: String, level: usize, parent_level: usize },
    #[error("line {line}: {source}")]
    Code { line: usize, source: CodeError },
    #[error("node `{code}` at level {level} has no children but the taxonomy is {depth} levels deep")]
    IncompleteBranch { code: String, level: usize, depth: usize },
    #[error("taxonomy has no nodes")]
    Empty,
    #[error("unknown code `{0}`")]
    UnknownCode(String),
}

#[derive(Clone, Debug)]
pub struct Node {
    pub code: OccupationCode,
    pub title: String,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// One row of a taxonomy file, before linking.
#[derive(Clone, Debug)]
pub struct NodeRow {
    pub line: usize,
    pub code: String,
    pub parent: String,
    pub level: usize,
    pub title: String,
}

/// Rooted occupation tree. Immutable once built.
///
/// Nodes are addressed by dense indices; each level keeps its node indices
/// sorted by code so positions within a level double as class indices.
#[derive(Clone, Debug)]
pub struct Taxonomy {
    scheme: Scheme,
    nodes: Vec<Node>,
    by_code: HashMap<String, usize>,
    levels: Vec<Vec<usize>>,
    position: Vec<usize>,
}

impl Taxonomy {
    pub fn load(path: impl AsRef<Path>, scheme: Scheme) -> Result<Self, TaxonomyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| TaxonomyError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text, scheme)
    }

    pub fn parse(text: &str, scheme: Scheme) -> Result<Self, TaxonomyError> {
        let mut rows = Vec::new();
        let mut seen_header = false;
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw_line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(comment) = trimmed.strip_prefix('#') {
                check_format_comment(comment)?;
                continue;
            }
            if !seen_header {
                let header: Vec<String> = trimmed.splitn(4, ',').map(|s| s.trim().to_ascii_lowercase()).collect();
                if header.first().map(String::as_str) != Some("code") || header.len() < 3 {
                    return Err(TaxonomyError::MissingHeader);
                }
                seen_header = true;
                continue;
            }
            let fields: Vec<&str> = trimmed.splitn(4, ',').collect();
            if fields.len() < 3 {
                return Err(TaxonomyError::Parse { line, msg: "expected code,parent,level,title".into() });
            }
            let level: usize = fields[2]
                .trim()
                .parse()
                .map_err(|_| TaxonomyError::Parse { line, msg: format!("bad level `{}`", fields[2].trim()) })?;
            if level == 0 || level > MAX_DEPTH {
                return Err(TaxonomyError::Parse { line, msg: format!("level {level} outside 1..=4") });
            }
            rows.push(NodeRow {
                line,
                code: fields[0].trim().to_string(),
                parent: fields[1].trim().to_string(),
                level,
                title: fields.get(3).map(|t| t.trim().to_string()).unwrap_or_default(),
            });
        }
        if !seen_header {
            return Err(TaxonomyError::MissingHeader);
        }
        Self::from_rows(scheme, rows)
    }

    /// Builds and validates a taxonomy from unlinked rows.
    pub fn from_rows(scheme: Scheme, rows: Vec<NodeRow>) -> Result<Self, TaxonomyError> {
        if rows.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        let mut nodes = Vec::with_capacity(rows.len());
        let mut by_code = HashMap::with_capacity(rows.len());
        for row in &rows {
            let code = canonical_node_code(&row.code, row.level, scheme)
                .map_err(|source| TaxonomyError::Code { line: row.line, source })?;
            if by_code.insert(code.as_str().to_string(), nodes.len()).is_some() {
                return Err(TaxonomyError::DuplicateCode { line: row.line, code: code.as_str().to_string() });
            }
            nodes.push(Node { code, title: row.title.clone(), parent: None, children: Vec::new() });
        }
        for (idx, row) in rows.iter().enumerate() {
            if row.parent.eq_ignore_ascii_case(ROOT_MARKER) {
                if row.level != 1 {
                    return Err(TaxonomyError::LevelGap { line: row.line, code: row.code.clone(), level: row.level, parent_level: 0 });
                }
                continue;
            }
            let parent_key = match scheme {
                Scheme::Custom => row.parent.clone(),
                _ => parse_code(&row.parent, scheme).map(|c| c.code).unwrap_or_else(|_| row.parent.clone()),
            };
            let parent = *by_code.get(&parent_key).ok_or_else(|| TaxonomyError::OrphanNode {
                line: row.line,
                code: row.code.clone(),
                parent: row.parent.clone(),
            })?;
            let parent_level = nodes[parent].code.level();
            if parent_level + 1 != row.level {
                return Err(TaxonomyError::LevelGap { line: row.line, code: row.code.clone(), level: row.level, parent_level });
            }
            nodes[idx].parent = Some(parent);
            nodes[parent].children.push(idx);
        }
        let depth = nodes.iter().map(|n| n.code.level()).max().unwrap_or(0);
        let mut levels = vec![Vec::new(); depth];
        for (idx, n) in nodes.iter().enumerate() {
            levels[n.code.level() - 1].push(idx);
        }
        for list in &mut levels {
            list.sort_by(|&a, &b| nodes[a].code.as_str().cmp(nodes[b].code.as_str()));
        }
        let child_order: Vec<Vec<usize>> = nodes
            .iter()
            .map(|n| {
                let mut c = n.children.clone();
                c.sort_by(|&a, &b| nodes[a].code.as_str().cmp(nodes[b].code.as_str()));
                c
            })
            .collect();
        for (n, c) in nodes.iter_mut().zip(child_order) {
            n.children = c;
        }
        for n in &nodes {
            if n.code.level() < depth && n.children.is_empty() {
                return Err(TaxonomyError::IncompleteBranch { code: n.code.as_str().to_string(), level: n.code.level(), depth });
            }
        }
        let mut position = vec![0; nodes.len()];
        for list in &levels {
            for (pos, &idx) in list.iter().enumerate() {
                position[idx] = pos;
            }
        }
        Ok(Taxonomy { scheme, nodes, by_code, levels, position })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Number of levels; leaves live at this level.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    pub fn code_str(&self, idx: usize) -> &str {
        self.nodes[idx].code.as_str()
    }

    /// Node indices at `level` (1-based), sorted by code.
    pub fn level_nodes(&self, level: usize) -> &[usize] {
        &self.levels[level - 1]
    }

    pub fn level_count(&self, level: usize) -> usize {
        self.levels.get(level.wrapping_sub(1)).map_or(0, Vec::len)
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    pub fn level_codes(&self, level: usize) -> Vec<String> {
        self.level_nodes(level).iter().map(|&i| self.code_str(i).to_string()).collect()
    }

    pub fn leaves(&self) -> &[usize] {
        self.levels.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_leaf(&self, idx: usize) -> bool {
        self.nodes[idx].code.level() == self.depth()
    }

    /// Position of a node within its level's sorted list.
    pub fn position(&self, idx: usize) -> usize {
        self.position[idx]
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.by_code.get(code).copied()
    }

    /// Resolves a raw code (normalizing scheme grammar) to a node index.
    pub fn lookup(&self, raw: &str) -> Result<usize, TaxonomyError> {
        let raw = raw.trim();
        let key = match self.scheme {
            Scheme::Custom => raw.to_string(),
            s => parse_code(raw, s).map(|c| c.code).unwrap_or_else(|_| raw.to_string()),
        };
        self.index_of(&key).ok_or_else(|| TaxonomyError::UnknownCode(raw.to_string()))
    }

    /// Parses `raw` and confirms the code exists in this taxonomy.
    pub fn code(&self, raw: &str) -> Result<OccupationCode, TaxonomyError> {
        Ok(self.nodes[self.lookup(raw)?].code.clone())
    }

    /// Ancestor indices from level 1 down to and including `idx`.
    pub fn ancestor_indices(&self, idx: usize) -> Vec<usize> {
        let mut path = Vec::with_capacity(MAX_DEPTH);
        let mut cur = Some(idx);
        while let Some(i) = cur {
            path.push(i);
            cur = self.nodes[i].parent;
        }
        path.reverse();
        path
    }

    /// Ancestor of `idx` at `level`; `idx` itself when `level` is its own level.
    pub fn ancestor_at(&self, idx: usize, level: usize) -> usize {
        let mut cur = idx;
        while self.nodes[cur].code.level() > level {
            cur = self.nodes[cur].parent.expect("non-root node has a parent");
        }
        cur
    }

    /// Ordered ancestor codes (level 1 .. level of `code`), ending with the code itself.
    pub fn ancestors(&self, code: &str) -> Result<Vec<OccupationCode>, TaxonomyError> {
        let idx = self.lookup(code)?;
        Ok(self.ancestor_indices(idx).into_iter().map(|i| self.nodes[i].code.clone()).collect())
    }

    /// True iff `codes` starts at level 1 and each code is the parent of the next.
    pub fn is_consistent_path<S: AsRef<str>>(&self, codes: &[S]) -> bool {
        let mut prev: Option<usize> = None;
        for raw in codes {
            let Ok(idx) = self.lookup(raw.as_ref()) else {
                return false;
            };
            if self.nodes[idx].parent != prev {
                return false;
            }
            prev = Some(idx);
        }
        !codes.is_empty()
    }

    /// Serializes the taxonomy in its file format.
    pub fn render(&self) -> String {
        let mut out = format!("# format: {FORMAT_TAG} {FORMAT_VERSION}\ncode,parent,level,title\n");
        for list in &self.levels {
            for &idx in list {
                let n = &self.nodes[idx];
                let parent = n.parent.map_or(ROOT_MARKER, |p| self.code_str(p));
                out.push_str(&format!("{},{},{},{}\n", n.code, parent, n.code.level(), n.title));
            }
        }
        out
    }
}

fn canonical_node_code(raw: &str, level: usize, scheme: Scheme) -> Result<OccupationCode, CodeError> {
    match scheme {
        Scheme::Custom => {
            let raw = raw.trim();
            if raw.is_empty() {
                return Err(CodeError::Empty);
            }
            if raw == UNKNOWN_LABEL {
                return Err(CodeError::UnknownSentinel);
            }
            validate_custom_token(raw)?;
            Ok(OccupationCode { scheme, code: raw.to_string(), level: level as u8 })
        }
        _ => {
            let code = parse_code(raw, scheme)?;
            if code.level() != level {
                return Err(malformed(raw, format!("declared level {level} but the code grammar gives level {}", code.level())));
            }
            Ok(code)
        }
    }
}

fn check_format_comment(comment: &str) -> Result<(), TaxonomyError> {
    let Some(rest) = comment.trim().strip_prefix("format:") else {
        return Ok(());
    };
    let mut parts = rest.split_whitespace();
    match (parts.next(), parts.next()) {
        (Some(FORMAT_TAG), Some(FORMAT_VERSION)) => Ok(()),
        _ => Err(TaxonomyError::Version { found: rest.trim().to_string() }),
    }
}

impl Scheme {
    /// True when `code` is a syntactically valid leaf code of this scheme.
    pub fn is_leaf_grammar(self, raw: &str) -> bool {
        match self {
            Scheme::Custom => !raw.trim().is_empty() && validate_custom_token(raw.trim()).is_ok(),
            s => parse_code(raw, s).map(|c| c.level() == MAX_DEPTH).unwrap_or(false),
        }
    }

    pub fn has_grammar(self) -> bool {
        self.is_ons() || self == Scheme::Onet2019
    }
}
