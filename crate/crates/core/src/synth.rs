//! Synthetic taxonomies and keyword-labelled job ads for tests and demos.
//!
//! Node keywords are made-up words, so nothing here resembles real
//! occupation data.

use crate::corpus::{JobAd, Label};
use crate::taxonomy::{NodeRow, Scheme, Taxonomy, TaxonomyError, ROOT_MARKER};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("level sizes {0:?} must be positive and non-decreasing")]
    BadShape(Vec<usize>),
    #[error("scheme {0} cannot encode this shape: {1}")]
    Unsupported(Scheme, String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

const SYLLABLES: [&str; 20] = ["ba", "ko", "ri", "ma", "te", "lu", "si", "no", "pa", "ve", "do", "gu", "fe", "ho", "ji", "ze", "wa", "ty", "qu", "xo"];

const FILLER: [&str; 24] = [
    "senior", "junior", "lead", "assistant", "trainee", "experienced", "full", "time", "part", "contract", "temporary", "permanent",
    "urgent", "local", "remote", "night", "day", "shift", "team", "role", "immediate", "start", "flexible", "hours",
];

const GENERIC_SKILLS: [&str; 8] =
    ["communication", "teamwork", "customer service", "office software", "time management", "problem solving", "attention to detail", "driving licence"];

/// Distinct three-syllable words, one per requested index, in seeded order.
fn keywords(count: usize, seed: u64) -> Vec<String> {
    let space = SYLLABLES.len().pow(3);
    assert!(count <= space, "at most {space} synthetic keywords");
    let mut ids: Vec<usize> = (0..space).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids[..count]
        .iter()
        .map(|&i| {
            let n = SYLLABLES.len();
            format!("{}{}{}", SYLLABLES[i / (n * n)], SYLLABLES[(i / n) % n], SYLLABLES[i % n])
        })
        .collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next().map(|f| f.to_uppercase().collect::<String>() + c.as_str()).unwrap_or_default()
}

/// A taxonomy with `level_counts[k]` nodes at level `k + 1`. Children are
/// spread as evenly as possible; the parents receiving one extra child are
/// chosen by `seed`. ONS schemes use digit codes (at most nine children per
/// node); the custom scheme uses dotted codes such as `3.1.2`.
pub fn synthetic_taxonomy(scheme: Scheme, level_counts: &[usize], seed: u64) -> Result<Taxonomy, SynthError> {
    if level_counts.is_empty() || level_counts.len() > 4 || level_counts[0] == 0 || level_counts.windows(2).any(|w| w[1] < w[0]) {
        return Err(SynthError::BadShape(level_counts.to_vec()));
    }
    let digits = match scheme {
        Scheme::Ons2010 | Scheme::Ons2020 => {
            if level_counts.len() != 4 {
                return Err(SynthError::Unsupported(scheme, "ONS codes have four levels".into()));
            }
            true
        }
        Scheme::Custom => false,
        Scheme::Onet2019 => return Err(SynthError::Unsupported(scheme, "no synthetic O*NET generator".into())),
    };
    let total: usize = level_counts.iter().sum();
    let words = keywords(total, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut rows = Vec::with_capacity(total);
    let mut word = words.iter();
    let mut push = |code: String, parent: String, level: usize, rows: &mut Vec<NodeRow>| {
        let kw = word.next().expect("enough keywords");
        rows.push(NodeRow { line: rows.len() + 3, code: code.clone(), parent, level, title: format!("{} workers", capitalize(kw)) });
        code
    };
    let mut parents: Vec<String> = Vec::new();
    for i in 0..level_counts[0] {
        if digits && i >= 9 {
            return Err(SynthError::Unsupported(scheme, "more than nine major groups".into()));
        }
        parents.push(push((i + 1).to_string(), ROOT_MARKER.into(), 1, &mut rows));
    }
    for (k, &count) in level_counts.iter().enumerate().skip(1) {
        let base = count / parents.len();
        let mut extra: Vec<usize> = (0..parents.len()).collect();
        extra.shuffle(&mut rng);
        let extra: Vec<bool> = {
            let mut flags = vec![false; parents.len()];
            extra[..count % parents.len()].iter().for_each(|&i| flags[i] = true);
            flags
        };
        let mut next = Vec::with_capacity(count);
        for (p, parent) in parents.iter().enumerate() {
            let n = base + usize::from(extra[p]);
            if digits && n > 9 {
                return Err(SynthError::Unsupported(scheme, format!("{n} children under {parent}")));
            }
            for c in 0..n {
                let code = if digits { format!("{parent}{}", c + 1) } else { format!("{parent}.{}", c + 1) };
                next.push(push(code, parent.clone(), k + 1, &mut rows));
            }
        }
        parents = next;
    }
    Ok(Taxonomy::from_rows(scheme, rows)?)
}

/// Keyword of a node, recovered from its synthetic title.
pub fn node_keyword(taxonomy: &Taxonomy, idx: usize) -> String {
    taxonomy.node(idx).title.split_whitespace().next().unwrap_or_default().to_lowercase()
}

/// Between `lo` and `hi - 1` filler words.
fn filler<R: Rng>(rng: &mut R, lo: usize, hi: usize) -> Vec<&'static str> {
    let n = rng.gen_range(lo..hi);
    (0..n).map(|_| FILLER[rng.gen_range(0..FILLER.len())]).collect()
}

fn labelled(id: String, title: String, description: String, skills: Vec<String>, scheme: Scheme, code: &str) -> JobAd {
    let mut labels = BTreeMap::new();
    labels.insert(scheme, Label::Code(code.to_string()));
    JobAd { id, title, description, skills, labels }
}

/// Leaf for ad `i`: every leaf once, then uniformly at random.
fn pick_leaf<R: Rng>(taxonomy: &Taxonomy, i: usize, rng: &mut R) -> usize {
    let leaves = taxonomy.leaves();
    if i < leaves.len() {
        leaves[i]
    } else {
        leaves[rng.gen_range(0..leaves.len())]
    }
}

/// Ads whose title carries the leaf keyword among filler words. The
/// description mentions the ancestors' keywords and the skills list a
/// leaf-specific skill plus generic ones.
pub fn keyword_ads(taxonomy: &Taxonomy, n: usize, seed: u64) -> Vec<JobAd> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let leaf = pick_leaf(taxonomy, i, &mut rng);
            let kw = node_keyword(taxonomy, leaf);
            let mut title: Vec<String> = filler(&mut rng, 0, 3).iter().map(|w| capitalize(w)).collect();
            title.push(capitalize(&kw));
            title.extend(filler(&mut rng, 0, 3).iter().map(|w| capitalize(w)));
            let mut description = Vec::new();
            for a in taxonomy.ancestor_indices(leaf) {
                let mut s: Vec<String> = filler(&mut rng, 4, 10).iter().map(|w| w.to_string()).collect();
                s.push(node_keyword(taxonomy, a));
                s.shuffle(&mut rng);
                description.push(format!("{}.", s.join(" ")));
            }
            let mut skills = vec![format!("{kw} operation")];
            for _ in 0..rng.gen_range(0..3) {
                skills.push(GENERIC_SKILLS[rng.gen_range(0..GENERIC_SKILLS.len())].to_string());
            }
            labelled(format!("ad{i:05}"), title.join(" "), description.join(" "), skills, taxonomy.scheme(), taxonomy.code_str(leaf))
        })
        .collect()
}

/// Ads whose title names only the level-1 group and whose single skill
/// names only the leaf's position among that group's leaves, so neither
/// field alone identifies the leaf.
pub fn complementary_ads(taxonomy: &Taxonomy, n: usize, seed: u64) -> Vec<JobAd> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skill_words = keywords(64, seed ^ 0x5eed);
    (0..n)
        .map(|i| {
            let leaf = pick_leaf(taxonomy, i, &mut rng);
            let group = taxonomy.ancestor_at(leaf, 1);
            let j = taxonomy.leaves().iter().filter(|&&l| taxonomy.ancestor_at(l, 1) == group).position(|&l| l == leaf).expect("leaf in group");
            let mut title: Vec<String> = filler(&mut rng, 0, 3).iter().map(|w| capitalize(w)).collect();
            title.push(capitalize(&node_keyword(taxonomy, group)));
            title.extend(filler(&mut rng, 0, 3).iter().map(|w| capitalize(w)));
            let description = format!("{}.", filler(&mut rng, 12, 13).join(" "));
            let skills = vec![format!("{} technique", skill_words[j])];
            labelled(format!("ad{i:05}"), title.join(" "), description, skills, taxonomy.scheme(), taxonomy.code_str(leaf))
        })
        .collect()
}
