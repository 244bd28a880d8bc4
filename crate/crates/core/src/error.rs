use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular Euler configuration: pitch {0} rad is within 1e-3 of ±π/2")]
    SingularEuler(f64),

    #[error("barrier evaluation needs at least one neighbor or obstacle")]
    EmptyEnvironment,

    #[error("neighbor estimate {neighbor} covers {got} steps, need {need}")]
    ShortEstimate {
        neighbor: usize,
        got: usize,
        need: usize,
    },

    #[error("no plan from neighbor {0} in buffer (bootstrap missing?)")]
    MissingNeighbor(usize),

    #[error("lennard-jones distance must be positive, got {0}")]
    NonPositiveDistance(f64),

    #[error("no path from {start:?} to {goal:?}")]
    NoPath { start: [f64; 2], goal: [f64; 2] },

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("obstacle placement failed after {0} rejection samples")]
    Placement(usize),

    #[error("invalid config value at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
