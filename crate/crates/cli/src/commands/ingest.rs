use super::{guard_outputs, load_taxonomy, require_files, to_json_pretty, write_file, Context, REJECTS_FILE, TAXONOMY_FILE, TEST_FILE, TRAIN_FILE};
use crate::error::{corpus_error, CliError, Result};
use clap::Args;
use occlass_core::corpus::{split, Corpus, SplitSpec};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Corpus of job advertisements (JSON lines).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Taxonomy file (`code,parent,level,title`).
    #[arg(long)]
    pub taxonomy: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Share of labelled ads held out for testing.
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    train: usize,
    test: usize,
    rejected: usize,
    unlabelled: usize,
}

pub fn run(ctx: &Context, a: &IngestArgs) -> Result<()> {
    require_files(&[(&a.corpus, "--corpus"), (&a.taxonomy, "--taxonomy")])?;
    let test_fraction = a.test_fraction.unwrap_or(ctx.config.split.test_fraction);
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CliError::usage("--test-fraction", "must lie strictly between 0 and 1"));
    }
    let outputs: Vec<PathBuf> = [TRAIN_FILE, TEST_FILE, REJECTS_FILE, TAXONOMY_FILE].iter().map(|n| a.out.join(n)).collect();
    guard_outputs(&outputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(), &[&a.corpus, &a.taxonomy])?;

    let spec = SplitSpec::new(test_fraction, ctx.seed, ctx.scheme);
    let mut manifest = ctx.manifest("ingest", &spec)?;
    manifest.input(&a.corpus)?;
    manifest.input(&a.taxonomy)?;

    let taxonomy = load_taxonomy(&a.taxonomy, ctx.scheme)?;
    let mut corpus = Corpus::load(&a.corpus).map_err(|e| corpus_error(&a.corpus, e))?;
    corpus.validate_labels(&taxonomy);
    let unlabelled = corpus.ads.iter().filter(|ad| ad.label(ctx.scheme).is_none()).count();
    let (train, test) = split(&corpus.ads, &spec).map_err(|e| corpus_error(&a.corpus, e))?;

    let mut buf = Vec::new();
    Corpus::write(&train, &mut buf).map_err(|e| CliError::io(&outputs[0], e))?;
    write_file(&outputs[0], &String::from_utf8(buf).expect("utf-8"))?;
    let mut buf = Vec::new();
    Corpus::write(&test, &mut buf).map_err(|e| CliError::io(&outputs[1], e))?;
    write_file(&outputs[1], &String::from_utf8(buf).expect("utf-8"))?;
    let rejects: String = corpus.rejects.iter().map(|r| serde_json::to_string(r).expect("reject serializes") + "\n").collect();
    write_file(&outputs[2], &rejects)?;
    write_file(&outputs[3], &taxonomy.render())?;
    for o in &outputs {
        manifest.output(o);
    }
    manifest.finish(&a.out.join("ingest.manifest.json"))?;

    let summary = Summary { train: train.len(), test: test.len(), rejected: corpus.rejects.len(), unlabelled };
    super::emit(&to_json_pretty(&summary));
    Ok(())
}
