pub mod evaluate;
pub mod ingest;
pub mod predict;
pub mod stats;
pub mod train;
pub mod tune;

use crate::config::FileConfig;
use crate::error::{corpus_error, taxonomy_error, CliError, Result};
use crate::manifest::RunManifest;
use crate::GlobalArgs;
use occlass_core::corpus::{Corpus, JobAd};
use occlass_core::embed::EmbeddingStore;
use occlass_core::taxonomy::{Scheme, Taxonomy};
use serde::Serialize;
use std::path::{Path, PathBuf};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const REJECTS_FILE: &str = "rejects.jsonl";
pub const TAXONOMY_FILE: &str = "taxonomy.csv";

pub struct Context {
    pub seed: u64,
    pub threads: usize,
    pub scheme: Scheme,
    pub config: FileConfig,
    pub config_path: Option<PathBuf>,
}

impl Context {
    pub fn new(g: &GlobalArgs) -> Result<Self> {
        let mut config = FileConfig::load(g.config.as_deref())?;
        let seed = g.seed.unwrap_or(config.train.seed);
        config.train.seed = seed;
        Ok(Context {
            seed,
            threads: g.threads.unwrap_or_else(rayon::current_num_threads),
            scheme: g.scheme,
            config,
            config_path: g.config.clone(),
        })
    }

    /// Manifest seeded with the run settings and the config file digest.
    pub fn manifest(&self, command: &str, snapshot: &impl Serialize) -> Result<RunManifest> {
        let mut m = RunManifest::start(command, self.seed, self.threads, snapshot);
        if let Some(p) = &self.config_path {
            m.input(p)?;
        }
        Ok(m)
    }
}

pub fn load_taxonomy(path: &Path, scheme: Scheme) -> Result<Taxonomy> {
    Taxonomy::load(path, scheme).map_err(|e| taxonomy_error(path, e))
}

/// Loads a corpus; malformed records are logged and skipped.
pub fn load_ads(path: &Path) -> Result<Vec<JobAd>> {
    let corpus = Corpus::load(path).map_err(|e| corpus_error(path, e))?;
    for r in &corpus.rejects {
        log::warn!("{}:{}: skipped record: {}", path.display(), r.line, r.reason);
    }
    Ok(corpus.ads)
}

pub fn load_store(path: Option<&Path>) -> Result<Option<EmbeddingStore>> {
    path.map(|p| EmbeddingStore::load(p).map_err(|e| CliError::data(p, None, e))).transpose()
}

/// `file` itself, or `dir/name` when only a data directory is given.
pub fn resolve(file: Option<&Path>, dir: Option<&Path>, name: &str, flag: &str) -> Result<PathBuf> {
    match (file, dir) {
        (Some(f), _) => Ok(f.to_path_buf()),
        (None, Some(d)) => Ok(d.join(name)),
        (None, None) => Err(CliError::usage(flag, format!("required unless --data names a directory containing {name}"))),
    }
}

/// Paths that must exist before any work starts.
pub fn require_files(paths: &[(&Path, &str)]) -> Result<()> {
    for (p, flag) in paths {
        if !p.is_file() {
            return Err(CliError::usage(flag, format!("no such file: {}", p.display())));
        }
    }
    Ok(())
}

/// Refuses to write over any input.
pub fn guard_outputs(outputs: &[&Path], inputs: &[&Path]) -> Result<()> {
    for o in outputs {
        let Ok(out) = o.canonicalize() else { continue };
        for i in inputs {
            if i.canonicalize().is_ok_and(|c| c == out) {
                return Err(CliError::usage("--out", format!("{} would overwrite an input", o.display())));
            }
        }
    }
    Ok(())
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes to stdout; a closed pipe is not an error.
pub fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

pub fn to_json_pretty(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Parses `1,2,3` style lists.
pub fn parse_list<T: std::str::FromStr>(raw: &str, flag: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<T>().map_err(|e| CliError::usage(flag, format!("`{}`: {e}", s.trim()))))
        .collect()
}
