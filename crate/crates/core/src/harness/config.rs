//! Resolved run configuration, written next to every command's outputs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::answer::{ModelConfig, TrainConfig};
use crate::autodiff::optim::AdamWConfig;
use crate::builder::BuildConfig;
use crate::error::{Error, Result};
use crate::knowledge::DeterministicEmbedder;

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPaths {
    pub triples: PathBuf,
    pub regions: PathBuf,
    pub features: PathBuf,
    pub examples: PathBuf,
    /// Held-out examples evaluated after every training epoch.
    pub eval_examples: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for RunPaths {
    fn default() -> Self {
        Self {
            triples: "triples.tsv".into(),
            regions: "regions.json".into(),
            features: "features.bin".into(),
            examples: "examples.jsonl".into(),
            eval_examples: None,
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub paths: RunPaths,
    /// Embeds text with a hash embedder instead of looking up `text:` keys.
    pub text_embedder: Option<DeterministicEmbedder>,
    pub model: ModelConfig,
    pub build: BuildConfig,
    pub epochs: usize,
    pub warmup: usize,
    /// Base learning rates: encoder side, then GNN side.
    pub lrs: Vec<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub shuffle: bool,
    /// Train and evaluate the rationale task when examples carry one.
    pub joint: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            seed: 0,
            threads: 1,
            paths: RunPaths::default(),
            text_embedder: None,
            model: ModelConfig::default(),
            build: BuildConfig::default(),
            epochs: 50,
            warmup: 15,
            lrs: adam.lrs,
            weight_decay: adam.weight_decay,
            batch_size: 1,
            shuffle: true,
            joint: true,
        }
    }
}

impl RunConfig {
    pub fn check(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::invalid("threads must be at least 1"));
        }
        if self.lrs.len() != 2 {
            return Err(Error::invalid(format!(
                "expected 2 learning rates, got {}",
                self.lrs.len()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.epochs > 0 && (self.warmup == 0 || self.warmup > self.epochs) {
            return Err(Error::invalid(format!(
                "warmup {} must be in 1..={}",
                self.warmup, self.epochs
            )));
        }
        self.model.gnn.check()
    }

    /// Builder settings with feature widths pinned to the model's.
    pub fn build_config(&self) -> BuildConfig {
        BuildConfig {
            widths: Some(self.model.gnn.widths),
            ..self.build.clone()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lrs: self.lrs.clone(),
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            shuffle: self.shuffle,
            seed: self.seed,
            joint: self.joint,
        }
    }
}
