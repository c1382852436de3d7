use super::{require_files, resolve, Context, TRAIN_FILE};
use crate::error::{CliError, Result};
use clap::Args;
use occlass_core::corpus::token_length_stats;
use occlass_core::textprep::{clean, CleanRuleSet, Field, SubwordVocab, Tokenizer};
use std::path::PathBuf;

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Corpus file, or a directory written by `ingest` (uses its training split).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "description")]
    pub field: Field,
    /// Histogram bucket width in tokens.
    #[arg(long, default_value_t = 64)]
    pub bucket: usize,
    /// Subword vocabulary, one entry per line; hashed words otherwise.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

pub fn run(ctx: &Context, a: &StatsArgs) -> Result<()> {
    if a.bucket == 0 {
        return Err(CliError::usage("--bucket", "must be positive"));
    }
    let path = if a.data.is_dir() { resolve(None, Some(&a.data), TRAIN_FILE, "--data")? } else { a.data.clone() };
    require_files(&[(&path, "--data")])?;
    let tokenizer = match &a.vocab {
        Some(p) => Tokenizer::WordPiece(SubwordVocab::load(p).map_err(|e| CliError::data(p, None, e))?),
        None => Tokenizer::Hashed { buckets: ctx.config.encoder.buckets },
    };
    let mut ads = super::load_ads(&path)?;
    if ctx.config.encoder.clean {
        let rules = match a.field {
            Field::Title => CleanRuleSet::title(),
            _ => CleanRuleSet::description(),
        };
        for ad in &mut ads {
            ad.title = clean(&ad.title, &rules);
            ad.description = clean(&ad.description, &rules);
        }
    }
    let stats = token_length_stats(&ads, &tokenizer, a.field, a.bucket);
    let max_len = ctx.config.encoder.max_len;
    let mut out = stats.to_table();
    out += &format!("documents,{}\nmean_tokens,{:.2}\nmax_tokens,{}\n", ads.len(), stats.mean(), stats.max());
    out += &format!("over_{max_len},{:.4}\n", stats.fraction_over(max_len));
    super::emit(&out);
    Ok(())
}
