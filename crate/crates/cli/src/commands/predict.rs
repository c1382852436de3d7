use super::{guard_outputs, load_ads, load_store, load_taxonomy, parse_list, require_files, resolve, write_file, Context, TAXONOMY_FILE, TEST_FILE};
use crate::error::{pipeline_error, CliError, Result};
use crate::manifest::RunManifest;
use clap::Args;
use occlass_core::corpus::JobAd;
use occlass_core::embed::EmbeddingStore;
use occlass_core::ensemble::validate_weights;
use occlass_core::hierarchy::CombineMode;
use occlass_core::pipeline::{bundle_scalar, ensemble_predict, write_predictions, ModelBundle, PostProcess, PredictionHeader, PredictionRecord, Predictor};
use occlass_core::taxonomy::Taxonomy;
use occlass_core::Scalar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// Directory written by `ingest`; predicts its test split.
    #[arg(long, conflicts_with = "input")]
    pub data: Option<PathBuf>,
    /// Corpus to predict.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Taxonomy file; defaults to the one in the data directory.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Precomputed embeddings for models trained on them.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Prediction file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Model file; repeat for a weighted ensemble.
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    /// Ensemble weights, comma separated (default: uniform).
    #[arg(long)]
    pub weights: Option<String>,
    #[command(flatten)]
    pub io: InputArgs,
    /// none, total_avg, weighted_avg or joint_prob.
    #[arg(long)]
    pub postprocess: Option<CombineMode>,
    /// Level weights for weighted_avg, comma separated.
    #[arg(long)]
    pub level_weights: Option<String>,
    /// Levels whose decisions prune inconsistent leaves, comma separated.
    #[arg(long)]
    pub prune_levels: Option<String>,
    /// Route top-down and fall back to the flat head below this confidence.
    #[arg(long)]
    pub lcpn_threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    /// TOML file listing `[[member]]` tables with `model`, `weight` and optional `postprocess`.
    #[arg(long)]
    pub spec: PathBuf,
    #[command(flatten)]
    pub io: InputArgs,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub model: PathBuf,
    #[serde(default = "unit_weight")]
    pub weight: f64,
    #[serde(default)]
    pub postprocess: PostProcess,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    #[serde(rename = "member")]
    pub members: Vec<MemberSpec>,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    members: &'a [MemberSpec],
}

fn predict_all<S: Scalar>(taxonomy: &Taxonomy, members: &[(MemberSpec, String)], ads: &[JobAd], store: Option<&EmbeddingStore>) -> Result<Vec<PredictionRecord>> {
    let bundles = members
        .iter()
        .map(|(m, text)| {
            let b = ModelBundle::<S>::parse(text).map_err(|e| pipeline_error(&m.model, e))?;
            b.check_taxonomy(taxonomy).map_err(|e| pipeline_error(&m.model, e))?;
            Ok(b)
        })
        .collect::<Result<Vec<_>>>()?;
    let predictors = members
        .iter()
        .zip(&bundles)
        .map(|((m, _), b)| Ok((Predictor::new(taxonomy, b, m.postprocess.clone()).map_err(|e| pipeline_error(&m.model, e))?, m.weight)))
        .collect::<Result<Vec<_>>>()?;
    if predictors.len() > 1 && predictors.iter().any(|(p, _)| p.uses_routing()) {
        log::warn!("top-down routing yields a single leaf; ensemble members fuse its one-hot scores");
    }
    let members: Vec<(&Predictor<'_, S>, f64)> = predictors.iter().map(|(p, w)| (p, *w)).collect();
    ads.par_iter()
        .map(|ad| {
            let pred = if members.len() == 1 { members[0].0.predict_ad(ad, store) } else { ensemble_predict(&members, ad, store) };
            pred.map(|p| PredictionRecord::new(taxonomy, &ad.id, &p)).map_err(|e| CliError::model(format!("ad {}: {e}", ad.id)))
        })
        .collect()
}

fn execute(ctx: &Context, members: Vec<MemberSpec>, io: &InputArgs, extra_inputs: &[&Path]) -> Result<()> {
    let input = resolve(io.input.as_deref(), io.data.as_deref(), TEST_FILE, "--input")?;
    let tax_path = resolve(io.taxonomy.as_deref(), io.data.as_deref(), TAXONOMY_FILE, "--taxonomy")?;
    require_files(&[(&input, "--input"), (&tax_path, "--taxonomy")])?;
    for m in &members {
        require_files(&[(&m.model, "--model")])?;
    }
    if let Some(p) = &io.embeddings {
        require_files(&[(p, "--embeddings")])?;
    }
    let weights: Vec<f64> = members.iter().map(|m| m.weight).collect();
    validate_weights(&weights).map_err(|e| CliError::usage("--weights", e))?;
    let manifest_path = RunManifest::path_for(&io.out);
    let mut inputs: Vec<&Path> = vec![&input, &tax_path];
    inputs.extend(members.iter().map(|m| m.model.as_path()));
    inputs.extend(io.embeddings.as_deref());
    inputs.extend_from_slice(extra_inputs);
    guard_outputs(&[&io.out, &manifest_path], &inputs)?;

    let mut manifest = ctx.manifest("predict", &Snapshot { members: &members })?;
    for p in &inputs {
        manifest.input(p)?;
    }
    let taxonomy = load_taxonomy(&tax_path, ctx.scheme)?;
    let store = load_store(io.embeddings.as_deref())?;
    let ads = load_ads(&input)?;
    let mut loaded = Vec::with_capacity(members.len());
    for m in members {
        let text = std::fs::read_to_string(&m.model).map_err(|e| CliError::io(&m.model, e))?;
        loaded.push((m, text));
    }
    let scalars = loaded
        .iter()
        .map(|(m, t)| bundle_scalar(t).map_err(|e| pipeline_error(&m.model, e)))
        .collect::<Result<Vec<_>>>()?;
    if scalars.iter().any(|s| s != &scalars[0]) {
        return Err(CliError::model(format!("ensemble members mix scalar types: {}", scalars.join(", "))));
    }
    let records = match scalars[0].as_str() {
        "f32" => predict_all::<f32>(&taxonomy, &loaded, &ads, store.as_ref())?,
        "f64" => predict_all::<f64>(&taxonomy, &loaded, &ads, store.as_ref())?,
        other => return Err(CliError::data(&loaded[0].0.model, Some(2), format!("unsupported scalar type `{other}`"))),
    };
    write_file(&io.out, &write_predictions(&PredictionHeader::new(&taxonomy), &records))?;
    manifest.output(&io.out);
    manifest.finish(&manifest_path)
}

pub fn run(ctx: &Context, a: &PredictArgs) -> Result<()> {
    let mut post = ctx.config.postprocess.clone();
    if let Some(m) = a.postprocess {
        post.mode = m;
    }
    if let Some(w) = &a.level_weights {
        post.weights = Some(parse_list(w, "--level-weights")?);
    }
    if let Some(p) = &a.prune_levels {
        post.prune_levels = parse_list(p, "--prune-levels")?;
    }
    if let Some(t) = a.lcpn_threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::usage("--lcpn-threshold", "must lie in [0, 1]"));
        }
        post.lcpn_threshold = Some(t);
    }
    let weights = match &a.weights {
        Some(w) => parse_list::<f64>(w, "--weights")?,
        None => vec![1.0 / a.model.len() as f64; a.model.len()],
    };
    if weights.len() != a.model.len() {
        return Err(CliError::usage("--weights", format!("{} weights for {} models", weights.len(), a.model.len())));
    }
    let members = a
        .model
        .iter()
        .zip(weights)
        .map(|(model, weight)| MemberSpec { model: model.clone(), weight, postprocess: post.clone() })
        .collect();
    execute(ctx, members, &a.io, &[])
}

pub fn run_ensemble(ctx: &Context, a: &EnsembleArgs) -> Result<()> {
    require_files(&[(&a.spec, "--spec")])?;
    let text = std::fs::read_to_string(&a.spec).map_err(|e| CliError::io(&a.spec, e))?;
    let mut spec: EnsembleSpec = toml::from_str(&text).map_err(|e| crate::config::toml_error(&a.spec, &text, e))?;
    if spec.members.is_empty() {
        return Err(CliError::data(&a.spec, None, "no [[member]] tables"));
    }
    // Model paths are relative to the spec file.
    let base = a.spec.parent().unwrap_or(Path::new(""));
    for m in &mut spec.members {
        if m.model.is_relative() {
            m.model = base.join(&m.model);
        }
    }
    execute(ctx, spec.members, &a.io, &[&a.spec])
}
