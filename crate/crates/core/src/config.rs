//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are an error so
//! typos do not silently fall back to defaults.

use std::path::Path;
use std::str::FromStr;

use crate::backbone::{BackboneConfig, ScaleModel};
use crate::error::{Error, Result};
use crate::partition::{PartitionConfig, DEFAULT_VOXEL_SIZES};
use crate::spatial::SearchStrategy;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub voxel_sizes: Vec<f64>,
    pub backbone: BackboneConfig,
    pub k_fuse: usize,
    pub fusion: bool,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            voxel_sizes: DEFAULT_VOXEL_SIZES.to_vec(),
            backbone: BackboneConfig::default(),
            k_fuse: 8,
            fusion: true,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value {raw:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, val) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
            let (key, val) = (key.trim(), val.trim());
            cfg.set(line, key, val)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, line: usize, key: &str, val: &str) -> Result<()> {
        match key {
            "voxel_sizes" => {
                self.voxel_sizes = val
                    .split(',')
                    .map(|s| value(line, key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "feature_dim" => self.backbone.feature_dim = value(line, key, val)?,
            "attention_neighbors" => self.backbone.attention_neighbors = value(line, key, val)?,
            "encoder_stages" => self.backbone.encoder_stages = value(line, key, val)?,
            "downsample_factor" => self.backbone.downsample_factor = value(line, key, val)?,
            "interp_neighbors" => self.backbone.interp_neighbors = value(line, key, val)?,
            "num_classes" => self.backbone.num_classes = value(line, key, val)?,
            "search" => {
                self.backbone.search = val
                    .parse::<SearchStrategy>()
                    .map_err(|_| Error::Config(format!("line {line}: unknown search {val:?}")))?
            }
            "k_fuse" => self.k_fuse = value(line, key, val)?,
            "fusion" => self.fusion = value(line, key, val)?,
            "epochs" => self.train.epochs = value(line, key, val)?,
            "batch_size" => self.train.batch_size = value(line, key, val)?,
            "learning_rate" => self.train.learning_rate = value(line, key, val)?,
            "momentum" => self.train.momentum = value(line, key, val)?,
            "max_grad_norm" => {
                self.train.max_grad_norm = match val {
                    "none" => None,
                    v => Some(value(line, key, v)?),
                }
            }
            "seed" => {
                self.seed = value(line, key, val)?;
                self.train.rng_seed = self.seed;
            }
            other => return Err(Error::Config(format!("line {line}: unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.partition_config()?;
        self.backbone.validate()?;
        if self.k_fuse == 0 {
            return Err(Error::Config("k_fuse must be at least 1".into()));
        }
        self.train.validate()
    }

    pub fn partition_config(&self) -> Result<PartitionConfig> {
        PartitionConfig::new(self.voxel_sizes.clone(), self.seed)
    }

    /// Fresh, untrained models for every scale. Scale 1 never fuses.
    pub fn build_models(&self) -> Result<Vec<ScaleModel>> {
        self.voxel_sizes
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                ScaleModel::new(
                    i + 1,
                    v,
                    self.backbone.clone(),
                    self.k_fuse,
                    self.fusion && i > 0,
                    self.seed,
                )
            })
            .collect()
    }
}
