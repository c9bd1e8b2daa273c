//! Run configuration: model topology, training schedule and the SNR
//! experiment settings, read from one JSON document. Unknown keys anywhere
//! are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "defaults::k_list")]
    pub k_list: Vec<usize>,
    #[serde(default = "defaults::q")]
    pub q: usize,
    /// Number of training points the SNR is averaged over.
    #[serde(default = "defaults::points")]
    pub points: usize,
    #[serde(default = "defaults::m")]
    pub m: usize,
    #[serde(default = "defaults::m_list")]
    pub m_list: Vec<usize>,
    /// K held fixed during the M sweep.
    #[serde(default = "defaults::m_sweep_k")]
    pub m_sweep_k: usize,
    #[serde(default = "defaults::hist_k")]
    pub hist_k: Vec<usize>,
    #[serde(default = "defaults::bins")]
    pub bins: usize,
    #[serde(default = "defaults::test_samples")]
    pub test_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::reg_slope_band")]
    pub reg_slope_band: [f64; 2],
    #[serde(default = "defaults::dreg_slope_band")]
    pub dreg_slope_band: [f64; 2],
    #[serde(default = "defaults::m_slope_band")]
    pub m_slope_band: [f64; 2],
}

mod defaults {
    pub fn k_list() -> Vec<usize> {
        vec![1, 10, 100, 1000]
    }
    pub fn q() -> usize {
        1000
    }
    pub fn points() -> usize {
        10
    }
    pub fn m() -> usize {
        1
    }
    pub fn m_list() -> Vec<usize> {
        vec![1, 4, 16, 64]
    }
    pub fn m_sweep_k() -> usize {
        10
    }
    pub fn hist_k() -> Vec<usize> {
        vec![1, 10, 100]
    }
    pub fn bins() -> usize {
        50
    }
    pub fn test_samples() -> usize {
        10_000
    }
    pub fn reg_slope_band() -> [f64; 2] {
        [-0.8, -0.2]
    }
    pub fn dreg_slope_band() -> [f64; 2] {
        [0.2, 0.8]
    }
    pub fn m_slope_band() -> [f64; 2] {
        [0.3, 0.7]
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            k_list: defaults::k_list(),
            q: defaults::q(),
            points: defaults::points(),
            m: defaults::m(),
            m_list: defaults::m_list(),
            m_sweep_k: defaults::m_sweep_k(),
            hist_k: defaults::hist_k(),
            bins: defaults::bins(),
            test_samples: defaults::test_samples(),
            seed: 0,
            reg_slope_band: defaults::reg_slope_band(),
            dreg_slope_band: defaults::dreg_slope_band(),
            m_slope_band: defaults::m_slope_band(),
        }
    }
}

fn ascending(name: &str, list: &[usize]) -> Result<()> {
    if list.is_empty() || list[0] == 0 || list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(format!(
            "{name} must be non-empty, positive and strictly ascending: {list:?}"
        )));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        ascending("k_list", &self.k_list)?;
        ascending("m_list", &self.m_list)?;
        ascending("hist_k", &self.hist_k)?;
        if self.q < 2 {
            return Err(Error::InvalidParameter(format!("q must be at least 2, got {}", self.q)));
        }
        if self.points == 0 || self.m == 0 || self.m_sweep_k == 0 || self.bins == 0 || self.test_samples == 0 {
            return Err(Error::InvalidParameter("points, m, m_sweep_k, bins and test_samples must be positive".into()));
        }
        for (name, [lo, hi]) in [
            ("reg_slope_band", self.reg_slope_band),
            ("dreg_slope_band", self.dreg_slope_band),
            ("m_slope_band", self.m_slope_band),
        ] {
            if !(lo < hi) {
                return Err(Error::InvalidParameter(format!("{name} must satisfy lo < hi, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// Parses and validates; every failure is reported as a schema error.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        cfg.validate().map_err(|e| Error::Schema(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        RunConfig::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.experiment.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
