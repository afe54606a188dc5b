use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{kind} format error at byte {offset}: {reason}")]
    Format {
        kind: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("numeric model error: {0}")]
    NumericModel(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("degenerate glare spread function: {0}")]
    DegenerateGsf(String),

    #[error("empty band mask: {0}")]
    EmptyMask(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn format(kind: &'static str, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            offset,
            reason: reason.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format { .. } => 3,
            Error::Io(_) => 4,
            Error::Dimension(_) | Error::Input(_) => 5,
            Error::NumericModel(_) | Error::Calibration(_) => 6,
            Error::DegenerateGsf(_) | Error::EmptyMask(_) => 7,
            Error::UndefinedMetric(_) => 8,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
