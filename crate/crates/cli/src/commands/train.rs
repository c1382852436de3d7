use super::{guard_outputs, load_ads, load_store, load_taxonomy, require_files, resolve, to_json_pretty, write_file, Context, TAXONOMY_FILE, TRAIN_FILE};
use crate::error::{corpus_error, pipeline_error, CliError, Result};
use crate::manifest::RunManifest;
use clap::{ArgGroup, Args, ValueEnum};
use occlass_core::corpus::{split, JobAd, SplitSpec};
use occlass_core::embed::EmbeddingStore;
use occlass_core::nnet::HeadKind;
use occlass_core::pipeline::{train_bundle, EncoderSpec, HeadRole, HeadSpec, TokenizerSpec, TrainTarget};
use occlass_core::taxonomy::Taxonomy;
use occlass_core::textprep::{Field, SubwordVocab};
use occlass_core::train::{TrainConfig, TrainReport};
use occlass_core::Scalar;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Mixed into the seed of the validation split so it differs from the test split.
const VAL_SPLIT_SALT: u64 = 0x76a1_5eed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug, Clone)]
pub struct EncoderArgs {
    /// Which advertisement field feeds the model.
    #[arg(long, default_value = "title")]
    pub feature: Field,
    /// Precomputed embeddings keyed by ad id; replaces the hashed text encoder.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Subword vocabulary, one entry per line; hashed words otherwise.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Hashed embedding width.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Args, Debug, Clone)]
#[command(group(ArgGroup::new("target").required(true).args(["level", "flat", "all_levels", "lcpn"])))]
pub struct TargetArgs {
    /// Train one head over level K.
    #[arg(long)]
    pub level: Option<usize>,
    /// Train the flat leaf classifier.
    #[arg(long)]
    pub flat: bool,
    /// Train one head per level.
    #[arg(long)]
    pub all_levels: bool,
    /// Train per-parent heads for top-down routing, plus the flat fallback.
    #[arg(long)]
    pub lcpn: bool,
}

impl TargetArgs {
    pub fn target(&self, depth: usize) -> TrainTarget {
        if self.flat {
            TrainTarget::Level(depth)
        } else if self.all_levels {
            TrainTarget::AllLevels
        } else if self.lcpn {
            TrainTarget::Lcpn
        } else {
            TrainTarget::Level(self.level.unwrap_or(depth))
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct HyperArgs {
    /// Head architecture: baseline, simple, ovr or skillnet.
    #[arg(long)]
    pub arch: Option<HeadKind>,
    /// Maximum training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Peak learning rate of the cosine schedule.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Mini-batches averaged per optimizer step.
    #[arg(long)]
    pub accumulation_steps: Option<usize>,
    /// Epochs without a validation gain before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
}

impl HyperArgs {
    pub fn apply(&self, train: &mut TrainConfig, head: &mut HeadSpec) {
        if let Some(k) = self.arch {
            head.kind = k;
        }
        if let Some(v) = self.epochs {
            train.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            train.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = self.accumulation_steps {
            train.accumulation_steps = v;
        }
        if let Some(v) = self.patience {
            train.patience = v;
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by `ingest`.
    #[arg(long)]
    pub data: PathBuf,
    /// Taxonomy file; defaults to the one in the data directory.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[command(flatten)]
    pub target: TargetArgs,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
    /// Model file to write; the report and manifest go next to it.
    #[arg(long)]
    pub out: PathBuf,
}

/// Encoder for `feature`, built from the settings and the training ads.
pub fn encoder_spec(ctx: &Context, a: &EncoderArgs, train_ads: &[JobAd], store: Option<&EmbeddingStore>) -> Result<EncoderSpec> {
    if let Some(store) = store {
        return Ok(EncoderSpec::Store { field: a.feature, provider: store.provider().to_string(), dim: store.dim() });
    }
    if a.feature == Field::Skills {
        if a.vocab.is_some() {
            return Err(CliError::usage("--vocab", "the skills feature uses its own vocabulary"));
        }
        return Ok(EncoderSpec::skills_from(train_ads));
    }
    let e = &ctx.config.encoder;
    let dim = a.dim.unwrap_or(e.dim);
    if dim == 0 {
        return Err(CliError::usage("--dim", "must be positive"));
    }
    let tokenizer = match &a.vocab {
        Some(p) => TokenizerSpec::WordPiece { vocab: SubwordVocab::load(p).map_err(|e| CliError::data(p, None, e))?.entries().to_vec() },
        None => TokenizerSpec::Hashed { buckets: e.buckets },
    };
    Ok(EncoderSpec::Text { field: a.feature, clean: e.clean, tokenizer, truncation: ctx.config.truncation()?, dim, max_order: e.ngram })
}

/// Splits the training ads into fitting and early-stopping sets.
pub fn validation_split(ctx: &Context, ads: Vec<JobAd>, path: &Path) -> Result<(Vec<JobAd>, Vec<JobAd>)> {
    let f = ctx.config.split.val_fraction;
    if f == 0.0 {
        return Ok((ads, Vec::new()));
    }
    let spec = SplitSpec::new(f, ctx.seed ^ VAL_SPLIT_SALT, ctx.scheme);
    split(&ads, &spec).map_err(|e| corpus_error(path, e))
}

#[derive(Serialize)]
struct HeadReport<'a> {
    role: String,
    report: &'a TrainReport,
}

#[derive(Serialize)]
struct Report<'a> {
    target: &'a TrainTarget,
    feature: Field,
    precision: Precision,
    train_samples: usize,
    val_samples: usize,
    heads: Vec<HeadReport<'a>>,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    config: &'a crate::config::FileConfig,
    target: &'a TrainTarget,
    feature: Field,
    precision: Precision,
}

#[allow(clippy::too_many_arguments)]
fn fit<S: Scalar>(
    taxonomy: &Taxonomy,
    fit: &[JobAd],
    val: &[JobAd],
    encoder: EncoderSpec,
    target: &TrainTarget,
    head: &HeadSpec,
    cfg: &TrainConfig,
    store: Option<&EmbeddingStore>,
    data: &Path,
) -> Result<(String, Vec<(HeadRole, TrainReport)>)> {
    let progress = |role: &HeadRole, r: &occlass_core::train::EpochRecord| log::info!("{role} {}", r.log_line());
    let (bundle, reports) = train_bundle::<S>(taxonomy, fit, val, encoder, target, head, cfg, store, &progress).map_err(|e| pipeline_error(data, e))?;
    Ok((bundle.to_text(), reports))
}

pub fn run(ctx: &Context, a: &TrainArgs) -> Result<()> {
    let train_path = resolve(None, Some(&a.data), TRAIN_FILE, "--data")?;
    let tax_path = resolve(a.taxonomy.as_deref(), Some(&a.data), TAXONOMY_FILE, "--taxonomy")?;
    require_files(&[(&train_path, "--data"), (&tax_path, "--taxonomy")])?;
    if let Some(p) = &a.encoder.embeddings {
        require_files(&[(p, "--embeddings")])?;
    }
    if let Some(p) = &a.encoder.vocab {
        require_files(&[(p, "--vocab")])?;
    }
    let mut train_cfg = ctx.config.train.clone();
    let mut head = ctx.config.head.clone();
    a.hyper.apply(&mut train_cfg, &mut head);
    train_cfg.validate().map_err(|e| CliError::usage("--config", e))?;

    let taxonomy = load_taxonomy(&tax_path, ctx.scheme)?;
    let target = a.target.target(taxonomy.depth());
    target.roles(&taxonomy).map_err(|e| CliError::usage("--level", e))?;
    let report_path = sibling(&a.out, ".report.json");
    let manifest_path = RunManifest::path_for(&a.out);
    let mut inputs: Vec<&Path> = vec![&train_path, &tax_path];
    inputs.extend(a.encoder.embeddings.as_deref());
    inputs.extend(a.encoder.vocab.as_deref());
    guard_outputs(&[&a.out, &report_path, &manifest_path], &inputs)?;

    let config_snapshot = crate::config::FileConfig { train: train_cfg.clone(), head: head.clone(), ..ctx.config.clone() };
    let mut manifest = ctx.manifest("train", &Snapshot { config: &config_snapshot, target: &target, feature: a.encoder.feature, precision: a.precision })?;
    for p in &inputs {
        manifest.input(p)?;
    }

    let store = load_store(a.encoder.embeddings.as_deref())?;
    let ads = load_ads(&train_path)?;
    let (fit_ads, val_ads) = validation_split(ctx, ads, &train_path)?;
    let encoder = encoder_spec(ctx, &a.encoder, &fit_ads, store.as_ref())?;
    let (text, reports) = match a.precision {
        Precision::F32 => fit::<f32>(&taxonomy, &fit_ads, &val_ads, encoder, &target, &head, &train_cfg, store.as_ref(), &a.data)?,
        Precision::F64 => fit::<f64>(&taxonomy, &fit_ads, &val_ads, encoder, &target, &head, &train_cfg, store.as_ref(), &a.data)?,
    };
    let report = Report {
        target: &target,
        feature: a.encoder.feature,
        precision: a.precision,
        train_samples: fit_ads.len(),
        val_samples: val_ads.len(),
        heads: reports.iter().map(|(role, report)| HeadReport { role: role.to_string(), report }).collect(),
    };
    write_file(&a.out, &text)?;
    write_file(&report_path, &to_json_pretty(&report))?;
    manifest.output(&a.out);
    manifest.output(&report_path);
    manifest.finish(&manifest_path)
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}
