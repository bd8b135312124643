use crystvox_core::ingest::IngestError;
use crystvox_core::io::FormatError;
use crystvox_core::lattice::LatticeError;
use crystvox_core::metrics::MetricsError;
use crystvox_core::voxelizer::VoxelError;
use crystvox_models::ModelError;
use crystvox_tensor::TensorError;
use serde_json::json;

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    /// One-line JSON error record for stderr.
    pub fn record(&self, command: &str) -> String {
        json!({
            "error": {
                "kind": self.kind(),
                "code": self.exit_code(),
                "command": command,
                "message": self.to_string(),
            }
        })
        .to_string()
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("json: {e}"))
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_errors!(IngestError, FormatError, LatticeError, VoxelError, MetricsError);

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            ModelError::NonFiniteLoss { .. } | ModelError::NonPositiveAlpha(_) => CliError::Numeric(e.to_string()),
            ModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            ModelError::UntrainedModel | ModelError::InvalidInput(_) => CliError::Data(e.to_string()),
        }
    }
}
