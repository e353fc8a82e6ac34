//! TOML run configuration. Every section is optional; missing keys take their defaults.

use std::fs;
use std::path::Path;

use deepssm_core::downstream::{ClassifierConfig, SUBSPACE_FRACTION};
use deepssm_core::networks::TrainConfig;
use deepssm_core::synthbench::SyntheticFamily;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthConfig,
    pub augment: AugmentSection,
    pub train: TrainConfig,
    pub infer: InferSection,
    pub severity: SeveritySection,
    pub analyze: AnalyzeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Total samples; the last `test_count` go to the test split.
    pub count: usize,
    pub test_count: usize,
    pub family: SyntheticFamily,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { count: 70, test_count: 10, family: SyntheticFamily::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    /// Number of generated pairs.
    pub count: usize,
    /// Integer factor applied to every output volume (1 keeps the resolution).
    pub downsample: usize,
    /// Also write the input pairs to the output dataset.
    pub include_originals: bool,
    /// TPS regularization; unset uses the per-shape default.
    pub lambda: Option<f64>,
    pub seed: u64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self { count: 500, downsample: 1, include_originals: true, lambda: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    /// Repetitions of the single-thread timing measurement.
    pub timing_repeats: usize,
}

impl Default for InferSection {
    fn default() -> Self {
        Self { timing_repeats: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeveritySection {
    pub subspace_fraction: f64,
    /// Neighbours used to estimate normals on the mean shape.
    pub normal_neighbors: usize,
}

impl Default for SeveritySection {
    fn default() -> Self {
        Self { subspace_fraction: SUBSPACE_FRACTION, normal_neighbors: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub swim_steps: usize,
    /// Descriptor dimensions kept for classification.
    pub trim: usize,
    pub classifier: ClassifierConfig,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self { swim_steps: 5, trim: 10, classifier: ClassifierConfig::default() }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
    }

    /// Applies a command-line seed to every stage.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.synth.family.seed = s;
            self.augment.seed = s;
            self.train.seed = s;
            self.analyze.classifier.seed = s;
        }
        self
    }
}
