use thiserror::Error;

/// Errors surfaced by cohort ingestion, time-scale expansion, model fitting,
/// imputation, smoothing, bootstrap and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{row}: {msg}")]
    Parse { file: String, row: usize, msg: String },

    #[error("duplicate subject id `{id}` ({file}:{row})")]
    DuplicateSubject { id: String, file: String, row: usize },

    #[error("{file}:{row}: unknown subject id `{id}`")]
    UnknownSubject { id: String, file: String, row: usize },

    #[error("unknown covariate `{name}`{context}")]
    UnknownCovariate { name: String, context: String },

    #[error("subject `{id}`: {msg}")]
    InvalidSubject { id: String, msg: String },

    #[error("LOCF: {0}")]
    Locf(String),

    #[error("covariate `{name}`: t={t} precedes the first measurement at {first}")]
    BeforeFirstMeasurement { name: String, t: f64, first: f64 },

    #[error("subject `{id}` is censored and has no imputed survival time: decedents-only or impute first")]
    MissingTtd { id: String },

    #[error("subject `{id}`: imputed survival time {imputed} is below observed follow-up {followup}")]
    ImputedBelowFollowup { id: String, imputed: f64, followup: f64 },

    #[error("subject `{id}`: time-to-death {ttd} exceeds ttd_max {ttd_max}")]
    TtdExceedsMax { id: String, ttd: f64, ttd_max: f64 },

    #[error("subject `{id}`: outcome event at time 0 has no preceding risk time")]
    EventAtOrigin { id: String },

    #[error("subject `{id}`: duplicate event time {time}")]
    DuplicateEventTime { id: String, time: f64 },

    #[error("event at time {time} has an empty risk set; the interval expansion is inconsistent")]
    EmptyRiskSet { time: f64 },

    #[error("covariate `{name}` is constant across all risk intervals")]
    ConstantCovariate { name: String },

    #[error("model did not converge: {0}")]
    NotConverged(String),

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("all observations are censored; nothing to regress on")]
    AllCensored,

    #[error("need at least 2 uncensored observations, found {0}")]
    TooFewUncensored(usize),

    #[error("censoring fraction {fraction:.3} exceeds 0.40; refusing without an explicit override")]
    CensoringRefused { fraction: f64 },

    #[error("stratum `{0}` contains no data")]
    EmptyStratum(String),

    #[error("degenerate simulation config: {0}")]
    DegenerateSim(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Coarse category used by front-ends to pick an exit code.
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            Io { .. } => ErrorCategory::Io,
            NotConverged(_) | Numerical(_) | RankDeficient => ErrorCategory::Numerical,
            _ => ErrorCategory::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Numerical,
    Io,
}

impl ErrorCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCategory::Validation => "validation",
            ErrorCategory::Numerical => "numerical",
            ErrorCategory::Io => "io",
        }
    }
}
