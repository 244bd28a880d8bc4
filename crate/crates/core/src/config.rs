//! On-disk run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{make_random_scenario, BenchmarkParams, RandomScenarioParams, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    Error,
    #[default]
    Warn,
    Info,
    Debug,
    Trace,
}

impl Verbosity {
    pub fn as_filter(&self) -> &'static str {
        match self {
            Verbosity::Error => "error",
            Verbosity::Warn => "warn",
            Verbosity::Info => "info",
            Verbosity::Debug => "debug",
            Verbosity::Trace => "trace",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputParams {
    pub dir: PathBuf,
    pub verbosity: Verbosity,
}

impl Default for OutputParams {
    fn default() -> Self {
        OutputParams {
            dir: PathBuf::from("out"),
            verbosity: Verbosity::Warn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub output: OutputParams,
    /// When present, `run` builds a randomized course from the seed and
    /// takes every other setting from `scenario`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random: Option<RandomScenarioParams>,
    pub benchmark: BenchmarkParams,
    pub scenario: ScenarioConfig,
}

impl RunConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfigFile = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.output.dir.as_os_str().is_empty() {
            return Err(Error::config("output.dir", "must not be empty"));
        }
        if let Some(r) = &self.random {
            r.validate("random")?;
        }
        self.benchmark.validate("benchmark")?;
        prefixed("scenario", self.scenario.validate())
    }

    /// The scenario `run` executes for `seed`.
    pub fn scenario_for(&self, seed: u64) -> Result<ScenarioConfig> {
        match &self.random {
            Some(r) => make_random_scenario(seed, r, &self.scenario),
            None => {
                let mut s = self.scenario.clone();
                s.seed = seed;
                Ok(s)
            }
        }
    }
}

fn prefixed(prefix: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { key, msg } => Error::Config {
            key: format!("{prefix}.{key}"),
            msg,
        },
        other => other,
    })
}
