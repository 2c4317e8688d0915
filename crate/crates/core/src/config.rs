//! TOML configuration covering every stage of the pipeline.
//!
//! ```toml
//! radius_mode = "radius"
//!
//! [scoring]
//! iterations = 10
//! tol = 1e-4
//! spacing = [1.0, 1.0, 1.0]
//! pad = 8.0
//!
//! [nodule_scoring]
//! alpha = 0.7
//! kernel_bandwidth_mm = 20.0
//!
//! [merging]
//! q = 0.5
//! threshold = 0.1
//!
//! [evaluation]
//! spacing = [2.0, 2.0, 2.0]
//!
//! [synthetic]
//! scenario = "B2"
//! n_images = 20
//! seed = 0
//! ```
//!
//! Every key is optional; missing keys take their defaults and unknown keys
//! are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::RadiusMode;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::merging::{CleanConfig, MergeConfig};
use crate::nodule_scoring::NoduleScoringConfig;
use crate::scoring::{RasterConfig, ScoringConfig};
use crate::synthetic::{NoiseConfig, Scenario, TruthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    pub iterations: usize,
    pub tol: f64,
    pub initial_score: f64,
    pub spacing: Vec3,
    pub pad: f64,
}

impl Default for ScoringSection {
    fn default() -> Self {
        ScoringSection::from(ScoringConfig::default())
    }
}

impl From<ScoringConfig> for ScoringSection {
    fn from(c: ScoringConfig) -> Self {
        ScoringSection {
            iterations: c.iterations,
            tol: c.tol,
            initial_score: c.initial_score,
            spacing: c.raster.spacing,
            pad: c.raster.pad,
        }
    }
}

impl From<ScoringSection> for ScoringConfig {
    fn from(s: ScoringSection) -> Self {
        ScoringConfig {
            iterations: s.iterations,
            tol: s.tol,
            initial_score: s.initial_score,
            raster: RasterConfig {
                spacing: s.spacing,
                pad: s.pad,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub spacing: Vec3,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { spacing: [2.0; 3] }
    }
}

/// Benchmark generation. The noise fields left unset follow the scenario's
/// noise setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub scenario: Scenario,
    pub n_images: usize,
    pub seed: u64,
    pub volume_mm: Vec3,
    pub nodules_per_image: (usize, usize),
    pub diameter_mm: (f64, f64),
    pub false_count_max: u32,
    pub false_center_cov: Vec3,
    pub false_diameter_range: (f64, f64),
    pub loc_cov: Option<Vec3>,
    pub diam_sigma: Option<f64>,
    pub keep_prob: Option<f64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let truth = TruthConfig::default();
        let noise = NoiseConfig::default();
        SyntheticConfig {
            scenario: Scenario::A1,
            n_images: truth.n_images,
            seed: 0,
            volume_mm: truth.volume_mm,
            nodules_per_image: truth.nodules_per_image,
            diameter_mm: truth.diameter_mm,
            false_count_max: noise.false_count_max,
            false_center_cov: noise.false_center_cov,
            false_diameter_range: noise.false_diameter_range,
            loc_cov: None,
            diam_sigma: None,
            keep_prob: None,
        }
    }
}

impl SyntheticConfig {
    pub fn truth(&self) -> TruthConfig {
        TruthConfig {
            n_images: self.n_images,
            volume_mm: self.volume_mm,
            nodules_per_image: self.nodules_per_image,
            diameter_mm: self.diameter_mm,
            seed: self.seed,
        }
    }

    pub fn noise(&self, scenario: Scenario) -> NoiseConfig {
        let base = NoiseConfig::setting(scenario.setting(), self.seed);
        NoiseConfig {
            false_count_max: self.false_count_max,
            false_center_cov: self.false_center_cov,
            false_diameter_range: self.false_diameter_range,
            loc_cov: self.loc_cov.unwrap_or(base.loc_cov),
            diam_sigma: self.diam_sigma.unwrap_or(base.diam_sigma),
            keep_prob: self.keep_prob.unwrap_or(base.keep_prob),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub radius_mode: RadiusMode,
    pub scoring: ScoringSection,
    pub nodule_scoring: NoduleScoringConfig,
    pub merging: MergeConfig,
    pub evaluation: EvaluationConfig,
    pub synthetic: SyntheticConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn clean_config(&self) -> CleanConfig {
        CleanConfig {
            scoring: self.scoring.into(),
            nodule_scoring: self.nodule_scoring,
            merging: self.merging,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ScoringConfig::from(self.scoring).validate()?;
        self.nodule_scoring.validate()?;
        self.merging.validate()?;
        if self.evaluation.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("evaluation.spacing must be positive".into()));
        }
        self.synthetic.noise(self.synthetic.scenario).validate()
    }
}
