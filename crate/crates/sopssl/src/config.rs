//! The JSON run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sopssl_core::data::{validate_spec, SyntheticSpec};
use sopssl_core::model::{ClassifierConfig, FeatureExtractorConfig, ModelConfig};
use sopssl_core::sop::SopConfig;
use sopssl_core::train::{check_lambda_grid, check_rates, Mode, TrainConfig};

use crate::error::{CliError, CliResult};

pub const RESOLVED_CONFIG: &str = "resolved-config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambda_grid: Vec<f64>,
    pub label_rates: Vec<f64>,
    /// Worker threads; `None` uses one per core.
    pub threads: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambda_grid: vec![0.025, 0.05, 0.1, 0.2, 0.5, 1.0],
            label_rates: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub d_list: Vec<usize>,
    pub iterations: usize,
    /// Random SPD instances per dimension.
    pub instances: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            d_list: vec![4, 8, 16, 32],
            iterations: 5,
            instances: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Labeled and unlabeled samples in the probe batches.
    pub batch: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            batch: 2,
            lambda: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub extractor: FeatureExtractorConfig,
    pub sop: SopConfig,
    pub classifier: ClassifierConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            extractor: FeatureExtractorConfig::default(),
            sop: SopConfig::default(),
            classifier: ClassifierConfig::default(),
            sweep: SweepConfig::default(),
            bench: BenchConfig::default(),
            gradcheck: GradcheckConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Command-line values that replace config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub data_seed: Option<u64>,
    pub mode: Option<Mode>,
    pub lambda: Option<f64>,
    pub iterations: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::json(origin, &e))
    }

    /// Reads `path`, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_json(&text, p)
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(seed) = o.data_seed {
            self.data.seed = seed;
        }
        if let Some(mode) = o.mode {
            self.train.mode = mode;
        }
        if let Some(lambda) = o.lambda {
            self.train.lambda = lambda;
        }
        if let Some(n) = o.iterations {
            self.train.iterations = n;
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            extractor: self.extractor.clone(),
            sop: self.sop,
            classifier: self.classifier,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        validate_spec(&self.data)?;
        self.train.validate()?;
        self.extractor.validate()?;
        self.sop.validate()?;
        let image = [self.data.channels, self.data.height, self.data.width];
        if image != self.extractor.input {
            return Err(CliError::config(format!(
                "extractor input {:?} does not match data images {:?}",
                self.extractor.input, image
            )));
        }
        if !self.sweep.lambda_grid.is_empty() {
            check_lambda_grid(&self.sweep.lambda_grid)?;
        }
        if !self.sweep.label_rates.is_empty() {
            check_rates(&self.sweep.label_rates)?;
        }
        if self.sweep.threads == Some(0) {
            return Err(CliError::config("sweep.threads must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Writes the fully resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_json()).map_err(|e| CliError::io(path, e))
    }
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}
