//! Run configuration: one JSON document drives every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ggufx::GgufTypeMap;
use crate::rlenv::EnvConfig;
use crate::sacagent::TrainConfig;
use crate::tinylm::TinyModelSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_calibration: usize,
    pub n_evaluation: usize,
    pub seq_len: usize,
    pub zipf_exponent: f64,
    /// Calibration sequences used for activation statistics.
    pub calibration_sequences: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_calibration: 32,
            n_evaluation: 16,
            seq_len: 64,
            zipf_exponent: 1.1,
            calibration_sequences: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed; every random stream (model weights included) derives
    /// from it.
    pub seed: u64,
    /// Architecture of the generated model. Its `seed` field is replaced
    /// by the global seed.
    pub model: TinyModelSpec,
    /// Load this model file instead of generating one.
    pub model_path: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub env: EnvConfig,
    pub train: TrainConfig,
    /// Layer indices the policy allocates; `None` means every layer.
    pub layers: Option<Vec<usize>>,
    pub type_map: GgufTypeMap,
    /// Policy checkpoint interval in episodes (0: only the final policy).
    pub checkpoint_every: usize,
    /// Output directory; not part of the config hash.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: TinyModelSpec::default(),
            model_path: None,
            corpus: CorpusConfig::default(),
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            layers: None,
            type_map: GgufTypeMap::default(),
            checkpoint_every: 50,
            out_dir: PathBuf::from("rampkit-out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.env.validate()?;
        self.train.sac.validate()?;
        self.type_map.validate().map_err(|e| Error::Config(e.to_string()))?;
        for &b in self.env.palette.bits() {
            self.type_map.map_bits(b).map_err(|e| Error::Config(e.to_string()))?;
        }
        let c = &self.corpus;
        if c.n_calibration == 0 || c.n_evaluation == 0 || c.calibration_sequences == 0 {
            return Err(Error::Config("corpus splits and calibration_sequences must be positive".into()));
        }
        if c.seq_len < 2 || c.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len must lie in [2, max_seq_len = {}]",
                self.model.max_seq_len
            )));
        }
        if !(c.zipf_exponent.is_finite() && c.zipf_exponent > 0.0) {
            return Err(Error::Config("zipf_exponent must be positive".into()));
        }
        if let Some(layers) = &self.layers {
            let n = self.model.n_layers();
            if layers.is_empty() || layers.iter().any(|&l| l >= n) {
                return Err(Error::Config(format!("layers must be non-empty indices below {n}")));
            }
            let mut seen = layers.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != layers.len() {
                return Err(Error::Config("layers contains duplicates".into()));
            }
        }
        Ok(())
    }

    /// Model spec with the global seed applied.
    pub fn model_spec(&self) -> TinyModelSpec {
        TinyModelSpec {
            seed: self.seed,
            ..self.model
        }
    }

    /// Hex SHA-256 prefix of the canonical config (output directory
    /// excluded), embedded in every artifact.
    pub fn hash(&self) -> Result<String> {
        let mut canon = self.clone();
        canon.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canon)?;
        let digest = Sha256::digest(&bytes);
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}
