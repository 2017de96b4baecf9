//! Resolved run configuration shared by the CLI subcommands.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{EalignError, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// supervised training on the seed pairs only
    Basic,
    /// incremental semi-supervised bootstrapping
    Semi,
    /// basic training plus literal-similarity score fusion at evaluation
    Lit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dim: usize,
    pub depth: usize,
    pub tau: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub rng_seed: u64,
    pub mode: Mode,
    pub data_dir: Option<PathBuf>,
    pub literal_emb: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub ks: Vec<usize>,
    pub train_ratio: f64,
    pub dev_ratio: f64,
    pub max_semi_iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dim: 300,
            depth: 2,
            tau: 1.0,
            epsilon: 0.05,
            batch_size: 512,
            dropout: 0.3,
            learning_rate: 0.005,
            patience: 3,
            max_epochs: 50,
            rng_seed: 0,
            mode: Mode::Basic,
            data_dir: None,
            literal_emb: None,
            out_dir: PathBuf::from("out"),
            ks: vec![1, 5, 10],
            train_ratio: 0.3,
            dev_ratio: 0.03,
            max_semi_iterations: 20,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.depth == 0 {
            return Err(EalignError::Invalid("dim and depth must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EalignError::Invalid("dropout must be in [0, 1)".into()));
        }
        if self.tau <= 0.0 {
            return Err(EalignError::Invalid("tau must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(EalignError::Invalid("batch size must be positive".into()));
        }
        if self.mode == Mode::Lit && self.literal_emb.is_none() {
            return Err(EalignError::Invalid(
                "lit mode requires --literal-emb".into(),
            ));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            dim: self.dim,
            depth: self.depth,
            tau: self.tau,
            batch_size: self.batch_size,
            dropout: self.dropout,
            learning_rate: self.learning_rate,
            patience: self.patience,
            max_epochs: self.max_epochs,
            rng_seed: self.rng_seed,
        }
    }
}
