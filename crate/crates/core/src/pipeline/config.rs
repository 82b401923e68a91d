use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::AssignConfig;
use crate::clustering::KMeansConfig;
use crate::error::{Error, Result};
use crate::imputers::{ImputerFactory, ImputerRegistry};
use crate::ingest::{IngestSpec, SyntheticSpec};
use crate::masksearch::MaskSearchConfig;
use crate::seed::RunSeed;
use crate::types::PacConfig;

/// Everything a run depends on. Exactly one of `input` and `synthetic`
/// names the data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub w: usize,
    /// Z-score each window before clustering and training.
    pub normalize: bool,
    pub input: Option<IngestSpec>,
    pub synthetic: Option<SyntheticSpec>,
    pub k_min: usize,
    pub k_max: usize,
    pub kmeans: KMeansConfig,
    pub assign: AssignConfig,
    pub pac: PacConfig,
    pub mask_search: MaskSearchConfig,
    /// Imputer spec such as `linear`, `knn:5` or `bridge:<command>`.
    pub imputer: String,
    /// Windows per impute request sent to a bridged imputer.
    pub bridge_batch: usize,
    /// Also train a single pooled model for comparison.
    pub baseline: bool,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            w: 96,
            normalize: true,
            input: None,
            synthetic: None,
            k_min: 2,
            k_max: 16,
            kmeans: KMeansConfig::default(),
            assign: AssignConfig::default(),
            pac: PacConfig::default(),
            mask_search: MaskSearchConfig::default(),
            imputer: "linear".into(),
            bridge_batch: 256,
            baseline: true,
            out_dir: PathBuf::from("dimsum-out"),
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w < 2 {
            return Err(Error::InvalidConfig(format!(
                "window length {} must be >= 2",
                self.w
            )));
        }
        match (&self.input, &self.synthetic) {
            (Some(spec), None) => spec.validate()?,
            (None, Some(spec)) => {
                spec.validate()?;
                if spec.w != self.w {
                    return Err(Error::InvalidConfig(format!(
                        "synthetic.w = {} differs from w = {}",
                        spec.w, self.w
                    )));
                }
            }
            (None, None) => {
                return Err(Error::InvalidConfig(
                    "no input configured; set `input` or `synthetic`".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig(
                    "set only one of `input` and `synthetic`".into(),
                ))
            }
        }
        if self.k_min < 1 || self.k_min > self.k_max {
            return Err(Error::InvalidConfig(format!(
                "k range [{}, {}] is empty",
                self.k_min, self.k_max
            )));
        }
        if self.bridge_batch == 0 {
            return Err(Error::InvalidConfig("bridge_batch must be >= 1".into()));
        }
        self.assign.validate()?;
        self.pac.validate()?;
        self.mask_search.validate()
    }

    pub fn run_seed(&self) -> RunSeed {
        RunSeed(self.seed)
    }

    /// The config with run-local settings (output directory, thread count)
    /// cleared. This is what artifacts record and what the hash covers.
    pub fn canonical(&self) -> RunConfig {
        RunConfig {
            out_dir: PathBuf::new(),
            threads: None,
            ..self.clone()
        }
    }

    /// SHA-256 over the canonical config serialized as JSON with sorted keys.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self.canonical()).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn registry(&self) -> ImputerRegistry {
        ImputerRegistry::builtin_with_bridge_batch(self.bridge_batch)
    }

    pub fn factory(&self) -> Result<ImputerFactory> {
        self.registry().factory(&self.imputer)
    }
}
