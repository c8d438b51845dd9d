use std::path::PathBuf;

use thiserror::Error;
use zsrec_core::config::ConfigError;
use zsrec_core::corpus::CorpusError;
use zsrec_core::evalkit::EvalError;
use zsrec_core::model::ModelError;
use zsrec_core::patterns::PatternError;
use zsrec_core::pipeline::PipelineError;
use zsrec_core::semstore::SemStoreError;
use zsrec_core::trainer::TrainError;

/// Process exit codes.
pub mod code {
    pub const GENERIC: u8 = 1;
    pub const PARSE: u8 = 2;
    pub const EMPTY: u8 = 3;
    pub const IO: u8 = 4;
    pub const DOMAIN_OVERLAP: u8 = 5;
    pub const VALIDATION: u8 = 6;
    pub const DIVERGENCE: u8 = 7;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    SemStore(#[from] SemStoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Corpus(e) => e.into(),
            PipelineError::SemStore(e) => e.into(),
            PipelineError::Model(e) => e.into(),
            PipelineError::Train(e) => e.into(),
            PipelineError::Eval(e) => e.into(),
            PipelineError::Pattern(e) => e.into(),
            PipelineError::Config(e) => e.into(),
        }
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(ConfigError::Io { .. }) => code::IO,
            CliError::Config(_) | CliError::Usage(_) => code::PARSE,
            CliError::Corpus(e) => corpus_code(e),
            CliError::SemStore(SemStoreError::Io { .. }) => code::IO,
            CliError::SemStore(_) => code::VALIDATION,
            CliError::Model(e) => model_code(e),
            CliError::Train(e) => match e {
                TrainError::Divergence { .. } | TrainError::NonFiniteGradient(_) => code::DIVERGENCE,
                TrainError::Config(_) => code::PARSE,
                TrainError::NoTrainableUsers => code::EMPTY,
                TrainError::Model(e) => model_code(e),
                TrainError::Pattern(e) => pattern_code(e),
                TrainError::Eval(e) => eval_code(e),
                TrainError::Objective(_) => code::GENERIC,
            },
            CliError::Eval(e) => eval_code(e),
            CliError::Pattern(e) => pattern_code(e),
            CliError::Io { .. } => code::IO,
        }
    }
}

fn corpus_code(e: &CorpusError) -> u8 {
    match e {
        CorpusError::Io { .. } => code::IO,
        CorpusError::Parse { .. } | CorpusError::Config(_) | CorpusError::UnknownDomain(_) => code::PARSE,
        CorpusError::Empty => code::EMPTY,
        CorpusError::Invalid(_) => code::VALIDATION,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Io { .. } => code::IO,
        ModelError::InvalidSpec(_) => code::PARSE,
        ModelError::BadMagic | ModelError::UnsupportedVersion(_) | ModelError::Crc { .. } | ModelError::Format(_) => {
            code::VALIDATION
        }
        ModelError::DimMismatch { .. } => code::VALIDATION,
        ModelError::EmptyHistory => code::EMPTY,
        ModelError::NonFinite(_) => code::DIVERGENCE,
    }
}

fn pattern_code(e: &PatternError) -> u8 {
    match e {
        PatternError::Io { .. } => code::IO,
        PatternError::InvalidK | PatternError::TooFewPoints { .. } => code::PARSE,
        _ => code::VALIDATION,
    }
}

fn eval_code(e: &EvalError) -> u8 {
    match e {
        EvalError::DomainOverlap(_) => code::DOMAIN_OVERLAP,
        EvalError::InsufficientNegatives { .. } | EvalError::NoUsers => code::EMPTY,
        EvalError::Config(_) => code::PARSE,
        EvalError::Model(e) => model_code(e),
        EvalError::Pattern(e) => pattern_code(e),
        EvalError::Io { .. } => code::IO,
    }
}
