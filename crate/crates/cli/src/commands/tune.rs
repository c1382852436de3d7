use super::train::{encoder_spec, EncoderArgs, HyperArgs, Precision};
use super::{guard_outputs, load_ads, load_taxonomy, require_files, resolve, to_json_pretty, write_file, Context, TAXONOMY_FILE, TRAIN_FILE};
use crate::config::FileConfig;
use crate::error::{pipeline_error, CliError, Kind, Result};
use crate::manifest::RunManifest;
use clap::{ArgGroup, Args};
use occlass_core::nnet::HeadArchitecture;
use occlass_core::pipeline::{gold_leaves, Encoder, HeadSpec};
use occlass_core::train::{train_model, Dataset, TrainConfig};
use occlass_core::tune::{cross_validate, parse_study_log, run_study, study_log_header, study_log_line, Config, SearchSpace, TuneError, INERT_PARAMS};
use occlass_core::Scalar;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Parameters a search space may name.
pub const TUNABLE: [&str; 9] =
    ["learning_rate", "weight_decay", "epochs", "hidden_dropout", "batch_size", "accumulation_steps", "clip_norm", "patience", "width"];

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("tune_target").args(["level", "flat"])))]
pub struct TuneArgs {
    /// Directory written by `ingest`; tuning uses its training split only.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Tune the head over level K (default: the leaf level).
    #[arg(long)]
    pub level: Option<usize>,
    #[arg(long)]
    pub flat: bool,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
    /// Search space TOML (`[[param]]` tables); the standard grid otherwise.
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Total trials, counting those already in the study log.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Append-only study log; an existing log is resumed.
    #[arg(long)]
    pub study: PathBuf,
    /// Config file with the best trial applied.
    #[arg(long)]
    pub out: PathBuf,
}

/// Applies a sampled configuration to the training and head settings.
pub fn apply(config: &Config, train: &mut TrainConfig, head: &mut HeadSpec) {
    for (name, &v) in config {
        match name.as_str() {
            "learning_rate" => train.learning_rate = v,
            "weight_decay" => train.weight_decay = v,
            "epochs" => train.epochs = v.round() as usize,
            "hidden_dropout" => head.dropout = v,
            "batch_size" => train.batch_size = v.round() as usize,
            "accumulation_steps" => train.accumulation_steps = v.round() as usize,
            "clip_norm" => train.clip_norm = v,
            "patience" => train.patience = v.round() as usize,
            "width" => head.width = v.round() as usize,
            _ => {}
        }
    }
}

pub fn load_space(path: Option<&Path>) -> Result<SearchSpace> {
    let space = match path {
        None => SearchSpace::standard(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            toml::from_str(&text).map_err(|e| crate::config::toml_error(p, &text, e))?
        }
    };
    let flag = "--space";
    for w in space.validate().map_err(|e| CliError::usage(flag, e))? {
        log::warn!("{w}");
    }
    for p in &space.params {
        if !TUNABLE.contains(&p.name.as_str()) && !INERT_PARAMS.contains(&p.name.as_str()) {
            return Err(CliError::usage(flag, format!("unknown parameter `{}` (known: {})", p.name, TUNABLE.join(", "))));
        }
    }
    Ok(space)
}

#[derive(Serialize)]
struct Snapshot<'a> {
    config: &'a FileConfig,
    space: &'a SearchSpace,
    level: usize,
    budget: usize,
    folds: usize,
    precision: Precision,
}

struct Job<'a> {
    ctx: &'a Context,
    space: &'a SearchSpace,
    base: &'a FileConfig,
    budget: usize,
    folds: usize,
    classes: usize,
    log: &'a Path,
}

fn search<S: Scalar>(job: &Job<'_>, inputs: Vec<Option<Vec<f64>>>, targets: Vec<Option<usize>>, prior: Vec<occlass_core::tune::TrialRecord>) -> Result<occlass_core::tune::Study> {
    let (x, y): (Vec<Vec<S>>, Vec<usize>) = inputs
        .into_iter()
        .zip(targets)
        .filter_map(|(x, t)| Some((x?.into_iter().map(S::of).collect(), t?)))
        .unzip();
    let data = Dataset::new(x, y);
    let input_dim = data.inputs.first().map_or(0, Vec::len);
    let fresh = prior.is_empty();
    let mut log = std::fs::OpenOptions::new().create(true).append(true).open(job.log).map_err(|e| CliError::io(job.log, e))?;
    if fresh {
        writeln!(log, "{}", study_log_header()).map_err(|e| CliError::io(job.log, e))?;
    }
    let mut log_error = None;
    let objective = |config: &Config| {
        let mut train = job.base.train.clone();
        let mut head = job.base.head.clone();
        apply(config, &mut train, &mut head);
        train.validate().map_err(|e| e.to_string())?;
        cross_validate(config, data.len(), job.folds, job.ctx.seed, |_, tr, va| {
            let arch = HeadArchitecture::of_kind(head.kind, input_dim, job.classes, head.width, head.dropout);
            let (_, report) = train_model(arch, &data.subset(tr), &data.subset(va), &train, |_| {}).map_err(|e| e.to_string())?;
            Ok(report.best_val_accuracy.unwrap_or(0.0))
        })
    };
    let on_trial = |t: &occlass_core::tune::TrialRecord| {
        log::info!("trial {} objective {:?} config {:?}", t.number, t.objective, t.config);
        if let Err(e) = writeln!(log, "{}", study_log_line(t)).and_then(|_| log.flush()) {
            log_error.get_or_insert(e);
        }
    };
    let study = run_study(job.space, &job.base.tune.tpe, job.budget, job.ctx.seed, prior, objective, on_trial).map_err(|e| match e {
        TuneError::InsufficientData { .. } => CliError::usage("--folds", e),
        _ => CliError::usage("--budget", e),
    })?;
    if let Some(e) = log_error {
        return Err(CliError::io(job.log, e));
    }
    Ok(study)
}

#[derive(Serialize)]
struct Summary<'a> {
    trials: usize,
    best_trial: usize,
    best_objective: f64,
    best_config: &'a Config,
}

pub fn run(ctx: &Context, a: &TuneArgs) -> Result<()> {
    let train_path = resolve(None, Some(&a.data), TRAIN_FILE, "--data")?;
    let tax_path = resolve(a.taxonomy.as_deref(), Some(&a.data), TAXONOMY_FILE, "--taxonomy")?;
    require_files(&[(&train_path, "--data"), (&tax_path, "--taxonomy")])?;
    if a.encoder.embeddings.is_some() {
        return Err(CliError::usage("--embeddings", "tuning supports the text and skill encoders only"));
    }
    let space = load_space(a.space.as_deref())?;
    let budget = a.budget.unwrap_or(ctx.config.tune.budget);
    let folds = a.folds.unwrap_or(ctx.config.tune.folds);
    if folds < 2 {
        return Err(CliError::usage("--folds", "need at least 2 folds"));
    }
    let mut base = ctx.config.clone();
    a.hyper.apply(&mut base.train, &mut base.head);
    base.train.validate().map_err(|e| CliError::usage("--config", e))?;

    let taxonomy = load_taxonomy(&tax_path, ctx.scheme)?;
    let depth = taxonomy.depth();
    let level = if a.flat { depth } else { a.level.unwrap_or(depth) };
    if !(1..=depth).contains(&level) {
        return Err(CliError::usage("--level", format!("level {level} outside 1..={depth}")));
    }
    let manifest_path = RunManifest::path_for(&a.out);
    guard_outputs(&[&a.out, &manifest_path, &a.study], &[&train_path, &tax_path])?;
    let prior = if a.study.is_file() {
        let text = std::fs::read_to_string(&a.study).map_err(|e| CliError::io(&a.study, e))?;
        let prior = parse_study_log(&text).map_err(|e| match e {
            TuneError::Log { line, .. } => CliError::data(&a.study, Some(line), e),
            _ => CliError::data(&a.study, None, e),
        })?;
        if let Some(t) = prior.iter().find(|t| !space.admits(&t.config)) {
            return Err(CliError::data(&a.study, None, format!("trial {} lies outside the search space", t.number)));
        }
        log::info!("resuming study with {} trials", prior.len());
        prior
    } else {
        Vec::new()
    };

    let mut manifest = ctx.manifest("tune", &Snapshot { config: &base, space: &space, level, budget, folds, precision: a.precision })?;
    manifest.input(&train_path)?;
    manifest.input(&tax_path)?;
    if let Some(p) = &a.space {
        manifest.input(p)?;
    }

    let ads = load_ads(&train_path)?;
    let spec = encoder_spec(ctx, &a.encoder, &ads, None)?;
    let encoder = Encoder::new(spec).map_err(|e| pipeline_error(&train_path, e))?;
    let inputs = encoder.encode_all::<f64>(&ads, None).map_err(|e| pipeline_error(&train_path, e))?;
    let targets = gold_leaves(&taxonomy, &ads)
        .into_iter()
        .map(|l| l.map(|leaf| taxonomy.position(taxonomy.ancestor_at(leaf, level))))
        .collect();
    let job = Job { ctx, space: &space, base: &base, budget, folds, classes: taxonomy.level_count(level), log: &a.study };
    let study = match a.precision {
        Precision::F32 => search::<f32>(&job, inputs, targets, prior)?,
        Precision::F64 => search::<f64>(&job, inputs, targets, prior)?,
    };
    let best = study.best().ok_or_else(|| CliError::new(Kind::Model, "every trial failed"))?;
    let mut tuned = base.clone();
    apply(&best.config, &mut tuned.train, &mut tuned.head);
    let text = toml::to_string(&tuned).map_err(|e| CliError::new(Kind::Model, e))?;
    write_file(&a.out, &text)?;
    manifest.output(&a.out);
    manifest.output(&a.study);
    manifest.finish(&manifest_path)?;
    let summary = Summary { trials: study.history.len(), best_trial: best.number, best_objective: best.score(), best_config: &best.config };
    super::emit(&to_json_pretty(&summary));
    Ok(())
}
