use super::{guard_outputs, load_ads, load_taxonomy, require_files, resolve, to_json_pretty, write_file, Context, TAXONOMY_FILE, TEST_FILE};
use crate::error::{pipeline_error, CliError, Result};
use clap::{Args, ValueEnum};
use occlass_core::evalmetrics::{confusion, evaluate, F1Classes};
use occlass_core::pipeline::{parse_predictions, taxonomy_digest};
use serde::Serialize;
use std::collections::HashMap;
use std::path::PathBuf;

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    /// Every class of the level, unseen classes scoring 0.
    All,
    /// Classes among predictions or gold labels.
    Present,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Prediction file written by `predict` or `ensemble`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Directory written by `ingest`; its test split is the gold standard.
    #[arg(long, conflicts_with = "gold")]
    pub data: Option<PathBuf>,
    /// Gold corpus.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub f1_classes: F1Mode,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Snapshot {
    f1_classes: F1Mode,
}

pub fn run(ctx: &Context, a: &EvaluateArgs) -> Result<()> {
    let gold_path = resolve(a.gold.as_deref(), a.data.as_deref(), TEST_FILE, "--gold")?;
    let tax_path = resolve(a.taxonomy.as_deref(), a.data.as_deref(), TAXONOMY_FILE, "--taxonomy")?;
    require_files(&[(&a.predictions, "--predictions"), (&gold_path, "--gold"), (&tax_path, "--taxonomy")])?;
    let taxonomy = load_taxonomy(&tax_path, ctx.scheme)?;
    let depth = taxonomy.depth();
    let mut outputs: Vec<PathBuf> = ["report.json", "levels.csv", "support.csv", "evaluate.manifest.json"].iter().map(|n| a.out.join(n)).collect();
    outputs.extend((1..=depth).map(|k| a.out.join(format!("confusion_level{k}.csv"))));
    guard_outputs(&outputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(), &[&a.predictions, &gold_path, &tax_path])?;

    let mut manifest = ctx.manifest("evaluate", &Snapshot { f1_classes: a.f1_classes })?;
    for p in [&a.predictions, &gold_path, &tax_path] {
        manifest.input(p)?;
    }
    let text = std::fs::read_to_string(&a.predictions).map_err(|e| CliError::io(&a.predictions, e))?;
    let (header, records) = parse_predictions(&text).map_err(|e| pipeline_error(&a.predictions, e))?;
    if header.scheme != taxonomy.scheme() || header.taxonomy_sha256 != taxonomy_digest(&taxonomy) {
        return Err(CliError::data(&a.predictions, Some(1), format!("predictions were made against a different {} taxonomy", header.scheme)));
    }
    let gold: HashMap<String, usize> = load_ads(&gold_path)?
        .into_iter()
        .filter_map(|ad| {
            let code = ad.label(taxonomy.scheme())?;
            let idx = taxonomy.lookup(code).ok().filter(|&i| taxonomy.is_leaf(i))?;
            Some((ad.id, taxonomy.position(idx)))
        })
        .collect();

    let mut rankings = Vec::with_capacity(records.len());
    let mut golds = Vec::with_capacity(records.len());
    let mut unlabelled = 0usize;
    for (i, r) in records.iter().enumerate() {
        let Some(&g) = gold.get(&r.id) else {
            unlabelled += 1;
            continue;
        };
        rankings.push(r.rankings(&taxonomy).map_err(|e| CliError::data(&a.predictions, Some(i + 2), e))?);
        golds.push(g);
    }
    if unlabelled > 0 {
        log::warn!("{unlabelled} predictions have no gold label and are not scored");
    }
    let f1 = match a.f1_classes {
        F1Mode::All => F1Classes::All,
        F1Mode::Present => F1Classes::Present,
    };
    let report = evaluate(&taxonomy, &rankings, &golds, f1).map_err(|e| CliError::data(&a.predictions, None, e))?;
    let leaf_preds: Vec<usize> = rankings.iter().map(|r| r[depth - 1][0]).collect();
    write_file(&outputs[0], &to_json_pretty(&report))?;
    write_file(&outputs[1], &report.level_table())?;
    write_file(&outputs[2], &report.support_table())?;
    for k in 1..=depth {
        let m = confusion(&taxonomy, &leaf_preds, &golds, k).map_err(|e| CliError::data(&a.predictions, None, e))?;
        write_file(&outputs[3 + k], &m.to_csv())?;
    }
    for (i, o) in outputs.iter().enumerate() {
        if i != 3 {
            manifest.output(o);
        }
    }
    manifest.finish(&outputs[3])?;
    super::emit(&report.level_table());
    Ok(())
}
