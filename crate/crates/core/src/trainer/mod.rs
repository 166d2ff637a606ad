//! Adam with Noam decay over the summed peer objective, checkpoints and
//! per-epoch telemetry.

mod checkpoint;
mod optim;
mod train;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{ModelShape, DEFAULT_D, DEFAULT_D_HIDDEN, DEFAULT_HEADS, DEFAULT_LAYERS};
use crate::error::{HailError, Result};
use crate::eval::{EvalConfig, NegativeSampling, DEFAULT_NEGATIVES};
use crate::losses::{DistillMode, ObjectiveConfig, TruncationRule};
use crate::masking::{DEFAULT_BATCH_SIZE, DEFAULT_DUPLICATION, DEFAULT_MASK_RATIO};

pub use checkpoint::{data_hash, load_checkpoint, save_checkpoint, Checkpoint, EarlyStopping, EpochProgress, FORMAT_VERSION};
pub use optim::{noam_learning_rate, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{train, train_step, EpochMetrics, RunStatus, Trainer};

pub const DEFAULT_WARMUP: u64 = 4000;
pub const DEFAULT_PATIENCE: usize = 5;
pub const DEFAULT_EPOCHS: usize = 50;

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub peers: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub d: usize,
    pub d_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mask_ratio: f64,
    pub duplication: usize,
    pub epochs: usize,
    pub warmup_steps: u64,
    pub seed: u64,
    pub distill_mode: DistillMode,
    pub truncation_rule: TruncationRule,
    pub layer_norm: bool,
    /// Epochs without a valid HR@1 improvement before stopping; 0 disables.
    pub patience: usize,
    /// Peer evaluated after each epoch.
    pub peer_index: usize,
    pub eval_negatives: usize,
    pub negative_sampling: NegativeSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            beta: 0.0,
            peers: 2,
            batch_size: DEFAULT_BATCH_SIZE,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            d: DEFAULT_D,
            d_hidden: DEFAULT_D_HIDDEN,
            layers: DEFAULT_LAYERS,
            heads: DEFAULT_HEADS,
            mask_ratio: DEFAULT_MASK_RATIO,
            duplication: DEFAULT_DUPLICATION,
            epochs: DEFAULT_EPOCHS,
            warmup_steps: DEFAULT_WARMUP,
            seed: 0,
            distill_mode: DistillMode::Med,
            truncation_rule: TruncationRule::Any,
            layer_norm: false,
            patience: DEFAULT_PATIENCE,
            peer_index: 0,
            eval_negatives: DEFAULT_NEGATIVES,
            negative_sampling: NegativeSampling::Uniform,
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> HailError {
    HailError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err("alpha", format!("{} is outside [0, 1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(config_err("beta", format!("{} is outside [0, 1)", self.beta)));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(config_err("mask_ratio", format!("{} is outside (0, 1)", self.mask_ratio)));
        }
        let positive = [
            ("peers", self.peers),
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
            ("d", self.d),
            ("d_hidden", self.d_hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("duplication", self.duplication),
            ("eval_negatives", self.eval_negatives),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(config_err(key, "must be at least 1"));
            }
        }
        if self.peers < 2 {
            return Err(config_err("peers", format!("{} is below the minimum of 2", self.peers)));
        }
        if self.max_len < 2 {
            return Err(config_err("max_len", "must be at least 2"));
        }
        if self.d % self.heads != 0 {
            return Err(config_err("heads", format!("{} does not divide d = {}", self.heads, self.d)));
        }
        if self.warmup_steps == 0 {
            return Err(config_err("warmup_steps", "must be at least 1"));
        }
        if self.peer_index >= self.peers {
            return Err(config_err(
                "peer_index",
                format!("{} is outside [0, {}]", self.peer_index, self.peers - 1),
            ));
        }
        Ok(())
    }

    pub fn shape(&self, vocab_rows: usize) -> ModelShape {
        ModelShape {
            vocab_rows,
            max_len: self.max_len,
            d: self.d,
            d_hidden: self.d_hidden,
            layers: self.layers,
            heads: self.heads,
            peers: self.peers,
            layer_norm: self.layer_norm,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            alpha: self.alpha,
            beta: self.beta,
            mode: self.distill_mode,
            rule: self.truncation_rule,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            negatives: self.eval_negatives,
            sampling: self.negative_sampling,
            seed: self.seed,
            max_len: self.max_len,
            batch_size: self.batch_size,
        }
    }

    /// SHA-256 over the fields that shape the parameter trajectory. The epoch
    /// budget and patience are left out so a run can be extended on resume.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        c.patience = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
