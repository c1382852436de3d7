//! Writes the synthetic taxonomy and corpus bundled with the CLI.
//!
//! `cargo run -p occlass-core --example synth_data -- <out dir>`

use occlass_core::corpus::Corpus;
use occlass_core::synth::{keyword_ads, synthetic_taxonomy};
use occlass_core::taxonomy::{NodeRow, Scheme, Taxonomy, ROOT_MARKER};
use std::collections::BTreeSet;
use std::path::PathBuf;

/// Leaves the bundled corpus is labelled with.
const CORPUS_LEAVES: usize = 20;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/cli/data".into()));
    std::fs::create_dir_all(&out)?;
    // Level sizes of ONS SOC 2020.
    let full = synthetic_taxonomy(Scheme::Ons2020, &[9, 31, 122, 412], 2020)?;
    std::fs::write(out.join("ons2020_synthetic.csv"), full.render())?;

    // The corpus covers the first leaves only, so evaluating against the
    // full file exercises classes that never occur.
    let mut keep = BTreeSet::new();
    for &leaf in &full.leaves()[..CORPUS_LEAVES] {
        keep.extend(full.ancestor_indices(leaf));
        keep.insert(leaf);
    }
    let rows = keep
        .iter()
        .map(|&i| {
            let n = full.node(i);
            NodeRow {
                line: 0,
                code: n.code.as_str().to_string(),
                parent: n.parent.map_or(ROOT_MARKER.to_string(), |p| full.code_str(p).to_string()),
                level: n.code.level(),
                title: n.title.clone(),
            }
        })
        .collect();
    let slice = Taxonomy::from_rows(Scheme::Ons2020, rows)?;
    let ads = keyword_ads(&slice, 200, 7);
    let mut buf = Vec::new();
    Corpus::write(&ads, &mut buf)?;
    std::fs::write(out.join("ads200.jsonl"), buf)?;
    println!("{} leaves in the taxonomy, {} ads over {} leaves", full.leaves().len(), ads.len(), slice.leaves().len());
    Ok(())
}
