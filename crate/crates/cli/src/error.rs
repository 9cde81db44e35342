use navkit_annotate::AnnotateError;
use navkit_core::dataset::DatasetError;
use navkit_core::eval::EvalError;
use navkit_core::model::BackendError;
use navkit_core::pipeline::PipelineError;
use thiserror::Error;

pub const EXIT_IO: i32 = 1;
pub const EXIT_DATASET: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Dataset(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Dataset(_) => EXIT_DATASET,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn dataset(msg: impl Into<String>) -> Self {
        CliError::Dataset(msg.into())
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        // an unreadable input file is still an input problem
        CliError::Dataset(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Backend(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Dataset(d) => d.into(),
            EvalError::Backend { .. } => CliError::Backend(e.to_string()),
            EvalError::Config(_) => CliError::Config(e.to_string()),
            EvalError::EmptyDataset => CliError::Dataset(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Dataset(e.to_string()),
        }
    }
}

impl From<AnnotateError> for CliError {
    fn from(e: AnnotateError) -> Self {
        match e {
            AnnotateError::Io { .. } => CliError::Io(e.to_string()),
            AnnotateError::BatchMismatch { .. } | AnnotateError::InvalidRequest(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Dataset(e.to_string()),
        }
    }
}
