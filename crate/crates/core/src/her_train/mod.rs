//! Hint-related example retriever training.
//!
//! Hints attribute knowledge to specific retrieved examples; those attributions
//! become (query, positive, negative) triplets, and a projection head over the
//! frozen base embeddings is trained on them with an InfoNCE objective whose
//! negative pool is every hard negative in the batch.

mod adam;
mod checkpoint;
mod loss;
pub mod synthetic;
mod trainer;
mod triplets;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::EmbedError;
use crate::util::sha256_hex;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{history_path, read_checkpoint, write_checkpoint, Checkpoint, TrainingHistory};
pub use loss::{info_nce_loss, loss_and_gradient, loss_gradient, EmbeddedTriplet};
pub use trainer::{evaluate_retriever, split_validation, train, EpochRecord, RetrieverMetrics, TrainOutcome};
pub use triplets::{
    build_triplets, read_triplets, select_triplet, triplets_from_hints, write_triplets, SkipReason,
    SkipRecord, Triplet, TripletBuild,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("batch has {got} triplets, expected {expected}")]
    BatchSize { expected: usize, got: usize },
    #[error("degenerate projection: {0}")]
    Degenerate(#[from] EmbedError),
    #[error("non-finite gradient at entry {index} (value {value}) on step {step}")]
    NonFiniteGradient { index: usize, value: f64, step: u64 },
    #[error("shape mismatch: weights {weights}, gradient {grad}, moments {moments}")]
    Shape {
        weights: usize,
        grad: usize,
        moments: usize,
    },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

fn default_batch_size() -> usize {
    32
}
fn default_learning_rate() -> f64 {
    1e-5
}
fn default_epochs() -> usize {
    5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_tau_pos() -> f64 {
    0.5
}
fn default_tau_neg() -> f64 {
    0.1
}
fn default_validation_fraction() -> f64 {
    0.1
}
fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_tau_pos")]
    pub tau_pos: f64,
    #[serde(default = "default_tau_neg")]
    pub tau_neg: f64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            seed: 0,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            tau_pos: default_tau_pos(),
            tau_neg: default_tau_neg(),
            validation_fraction: default_validation_fraction(),
            temperature: default_temperature(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(0.0 <= self.tau_neg && self.tau_neg < self.tau_pos && self.tau_pos <= 1.0) {
            return bad("thresholds must satisfy 0 <= tau_neg < tau_pos <= 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable"))
    }
}
