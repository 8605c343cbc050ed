//! Experiment configuration: one flat JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::Stage1Config;
use crate::error::{IerError, Result};
use crate::evaluate::EvalConfig;
use crate::identifier::IdentifierConfig;
use crate::referrer::{ReferrerConfig, Stage2Config, ThresholdMode};
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Scene stream; datasets that share `seed` but not `data_seed` come
    /// from the same class table.
    pub data_seed: u64,

    pub k_true: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub c_in: usize,
    pub a_in: usize,
    pub noise: f64,
    pub volume_ratio_max: f64,
    pub box_min: usize,
    pub box_max: usize,
    pub n_single: usize,
    pub n_unconstrained: usize,

    /// Shared embedding width.
    pub embed_dim: usize,
    /// Width of the first audio projection.
    pub mid_dim: usize,
    /// Number of pseudo-classes.
    pub k: usize,
    pub kmeans_iters: usize,

    pub batch: usize,
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub identifier_epochs: usize,
    pub identifier_lr: f64,
    /// Update the audio projections while training the distinguishing steps.
    pub identifier_train_audio: bool,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,

    /// 1 constant, 2 batch-max ratio, 3 item-max ratio, 4 GAP weight, 5 batch mean.
    pub threshold_mode: u8,
    /// Constant for mode 1, ratio for modes 2 and 3.
    pub threshold_value: f64,
    pub silent_filter: bool,
    pub offscreen_filter: bool,

    pub zeta: f64,
    pub binarize_ratio: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        ExperimentConfig {
            seed: 0,
            data_seed: 0,
            k_true: world.k_true,
            grid_h: world.grid_h,
            grid_w: world.grid_w,
            c_in: world.c_in,
            a_in: world.a_in,
            noise: world.noise,
            volume_ratio_max: world.volume_ratio_max,
            box_min: world.box_min,
            box_max: world.box_max,
            n_single: 400,
            n_unconstrained: 200,
            embed_dim: 128,
            mid_dim: 64,
            k: 2 * world.k_true + 3,
            kmeans_iters: 100,
            batch: 32,
            stage1_epochs: 30,
            stage1_lr: 1e-2,
            identifier_epochs: 30,
            identifier_lr: 3e-3,
            identifier_train_audio: false,
            stage2_epochs: 10,
            stage2_lr: 1e-3,
            threshold_mode: 5,
            threshold_value: 0.5,
            silent_filter: true,
            offscreen_filter: true,
            zeta: 0.5,
            binarize_ratio: 0.5,
        }
    }
}

/// Offsets that derive independent streams from the experiment seed.
mod stream {
    pub const TABLE: u64 = 0;
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const STAGE1: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const IDENTIFIER: u64 = 5;
    pub const STAGE2: u64 = 6;
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| IerError::config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| IerError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).into()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("k_true", self.k_true),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("c_in", self.c_in),
            ("a_in", self.a_in),
            ("box_min", self.box_min),
            ("box_max", self.box_max),
            ("n_single", self.n_single),
            ("n_unconstrained", self.n_unconstrained),
            ("embed_dim", self.embed_dim),
            ("mid_dim", self.mid_dim),
            ("kmeans_iters", self.kmeans_iters),
            ("batch", self.batch),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(IerError::config(format!("{name} must be positive")));
        }
        if self.k < 2 {
            return Err(IerError::config("k must be at least 2"));
        }
        if self.k > self.n_single {
            return Err(IerError::config("k cannot exceed the number of single-source scenes"));
        }
        for (name, lr) in [
            ("stage1_lr", self.stage1_lr),
            ("identifier_lr", self.identifier_lr),
            ("stage2_lr", self.stage2_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(IerError::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.zeta) || !(self.binarize_ratio > 0.0 && self.binarize_ratio <= 1.0) {
            return Err(IerError::config("zeta must lie in [0, 1] and binarize_ratio in (0, 1]"));
        }
        if !self.threshold_value.is_finite() {
            return Err(IerError::config("threshold_value must be finite"));
        }
        ThresholdMode::from_index(self.threshold_mode, self.threshold_value)?;
        self.world().validate()
    }

    fn stream(&self, offset: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(offset)
    }

    pub fn table_seed(&self) -> u64 {
        self.stream(stream::TABLE)
    }

    pub fn scene_seed(&self) -> u64 {
        self.stream(stream::DATA)
            .wrapping_add(self.data_seed.wrapping_mul(0xD1B5_4A32_D192_ED03))
    }

    pub fn init_seed(&self) -> u64 {
        self.stream(stream::INIT)
    }

    pub fn kmeans_seed(&self) -> u64 {
        self.stream(stream::KMEANS)
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            k_true: self.k_true,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            c_in: self.c_in,
            a_in: self.a_in,
            noise: self.noise,
            volume_ratio_max: self.volume_ratio_max,
            box_min: self.box_min,
            box_max: self.box_max,
        }
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            epochs: self.stage1_epochs,
            batch: self.batch,
            lr: self.stage1_lr,
            seed: self.stream(stream::STAGE1),
        }
    }

    pub fn identifier(&self) -> IdentifierConfig {
        IdentifierConfig {
            epochs: self.identifier_epochs,
            batch: self.batch,
            lr: self.identifier_lr,
            seed: self.stream(stream::IDENTIFIER),
            train_audio: self.identifier_train_audio,
            use_mixtures: true,
        }
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config {
            epochs: self.stage2_epochs,
            batch: self.batch,
            lr: self.stage2_lr,
            seed: self.stream(stream::STAGE2),
        }
    }

    pub fn referrer(&self) -> Result<ReferrerConfig> {
        Ok(ReferrerConfig {
            threshold: ThresholdMode::from_index(self.threshold_mode, self.threshold_value)?,
            silent_filter: self.silent_filter,
            offscreen_filter: self.offscreen_filter,
        })
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            batch: self.batch,
            zeta: self.zeta,
            binarize_ratio: self.binarize_ratio,
            disable_steps: false,
        }
    }
}
