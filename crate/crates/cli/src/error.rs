use perceptscore_core::evaluators::EvalError;
use perceptscore_core::estimation::EstimationError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing {file}: run {command} first")]
    MissingPrerequisite { file: String, command: &'static str },
    #[error("evaluator failure: {0}")]
    Evaluator(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingPrerequisite { .. } => 3,
            CliError::Evaluator(_) => 4,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<perceptscore_core::Error> for CliError {
    fn from(e: perceptscore_core::Error) -> Self {
        match e {
            perceptscore_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Evaluator(e.to_string())
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::Evaluator { source, .. } => CliError::Evaluator(source.to_string()),
            EstimationError::Core(c) => c.into(),
            other => CliError::Failed(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
