use std::path::{Path, PathBuf};

use inmass_core::reconstruct::Borrow;
use inmass_core::wls::{Meat, RegressionModel};
use inmass_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Declarative pipeline configuration; keys mirror the CLI flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub target_ipd: PathBuf,
    pub summaries: PathBuf,
    /// Trial id of the target rows when the IPD file has no `source` column.
    #[serde(default)]
    pub target_id: Option<String>,
    /// Summary trials to leave out of the meta-analysis.
    #[serde(default)]
    pub exclude: Vec<String>,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub borrow: Borrow,
    #[serde(default = "default_features")]
    pub features: String,
    #[serde(default)]
    pub meat: Meat,
    #[serde(default)]
    pub model: RegressionModel,
    #[serde(default)]
    pub meta_interaction: bool,
    #[serde(default)]
    pub pin_target_weights: bool,
    #[serde(default)]
    pub ridge: Option<f64>,
}

fn default_out() -> PathBuf {
    PathBuf::from("inmass-out")
}

fn default_features() -> String {
    "intercept,x1,x1^2".to_string()
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads a config file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.target_ipd, &mut cfg.summaries, &mut cfg.out] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks that every input exists before anything runs.
    pub fn check_inputs(&self) -> Result<()> {
        for (what, p) in [("target_ipd", &self.target_ipd), ("summaries", &self.summaries)] {
            if !p.is_file() {
                return Err(Error::Config(format!("{what} `{}` does not exist", p.display())));
            }
        }
        if let Some(r) = self.ridge {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("ridge must be positive, got {r}")));
            }
        }
        Ok(())
    }
}
