//! TOML experiment manifests.
//!
//! ```toml
//! format_version = 1
//! output_dir = "runs/c6"
//!
//! [experiment]
//! rounds = 5000
//! seeds = [1, 2, 3]
//!
//! [experiment.policy]
//! kind = "extended-ts"
//! t0 = 200
//! forced_pulls_per_arm = 2
//!
//! [experiment.scenario]
//! mode = "gaussian-bandit"
//! environment = { kind = "grid-c6" }
//! ```
//!
//! Unknown keys are rejected, and the error names the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "VFLSIM_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub experiment: ExperimentConfig,
}

impl ExperimentManifest {
    pub fn new(experiment: ExperimentConfig) -> Self {
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            output_dir: None,
            experiment,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "format_version {} is not supported (expected {MANIFEST_FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The manifest's directory, else `$VFLSIM_OUT_DIR`, else `vflsim-out`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(default_output_dir)
    }
}

pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("vflsim-out"))
}
