use thiserror::Error;

/// Failure classes shared by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("memory exceeded: A_max={a_max}, S_max={s_max} leaves {t_max:.1} KV tokens")]
    MemoryExceeded {
        a_max: usize,
        s_max: u32,
        t_max: f64,
    },

    #[error("starvation: {0}")]
    Starvation(String),

    #[error("fit failure: {0}")]
    FitFailure(String),

    #[error("no feasible point: every swept configuration starves")]
    NoFeasiblePoint,

    #[error("invariant violated at t={clock:.3}s: {detail}")]
    InvariantViolation { clock: f64, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
