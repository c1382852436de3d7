use occlass_core::corpus::CorpusError;
use occlass_core::pipeline::PipelineError;
use occlass_core::taxonomy::TaxonomyError;
use serde::Serialize;
use std::fmt::Display;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Usage,
    Data,
    Io,
    Model,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::Data => 3,
            Kind::Io => 4,
            Kind::Model => 5,
        }
    }
}

/// Reported on stderr as one JSON object per line.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub error: Kind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn new(kind: Kind, message: impl Display) -> Self {
        CliError { error: kind, flag: None, file: None, line: None, message: message.to_string() }
    }

    pub fn usage(flag: &str, message: impl Display) -> Self {
        CliError { flag: Some(flag.to_string()), ..Self::new(Kind::Usage, message) }
    }

    pub fn io(path: &Path, err: impl Display) -> Self {
        CliError { file: Some(path.display().to_string()), ..Self::new(Kind::Io, err) }
    }

    pub fn data(path: &Path, line: Option<usize>, message: impl Display) -> Self {
        CliError { file: Some(path.display().to_string()), line, ..Self::new(Kind::Data, message) }
    }

    pub fn model(message: impl Display) -> Self {
        Self::new(Kind::Model, message)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

pub fn taxonomy_error(path: &Path, e: TaxonomyError) -> CliError {
    let line = match &e {
        TaxonomyError::Parse { line, .. }
        | TaxonomyError::DuplicateCode { line, .. }
        | TaxonomyError::OrphanNode { line, .. }
        | TaxonomyError::LevelGap { line, .. }
        | TaxonomyError::Code { line, .. } => Some(*line),
        TaxonomyError::Io { source, .. } => return CliError::io(path, source),
        _ => None,
    };
    CliError::data(path, line, e)
}

pub fn corpus_error(path: &Path, e: CorpusError) -> CliError {
    match &e {
        CorpusError::DuplicateId { line, .. } => CliError::data(path, Some(*line), e),
        CorpusError::Io { source, .. } => CliError::io(path, source),
        _ => CliError::data(path, None, e),
    }
}

pub fn pipeline_error(path: &Path, e: PipelineError) -> CliError {
    match &e {
        PipelineError::Format { line, .. } => CliError::data(path, Some(*line), e),
        PipelineError::TaxonomyMismatch { .. } | PipelineError::Taxonomy(_) => CliError::data(path, None, e),
        _ => CliError::model(e),
    }
}
