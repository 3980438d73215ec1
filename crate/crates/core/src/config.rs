//! Run configuration: model dimensions and the training config consumed by
//! `train-diffusion`, `cache-priors`, `train-ais`, and `ablate`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// C_e: backbone / ROI feature channels.
    pub feature_channels: usize,
    /// H_r = W_r: pooled ROI side; mask logits are twice this.
    pub roi_size: usize,
    /// R_img: diffusion condition crop side.
    pub crop_size: usize,
    /// Diffusion working resolution (attention at this and half this).
    pub diffusion_resolution: usize,
    /// UNet base channel count (doubled at the low resolution).
    pub unet_channels: usize,
    /// d_tok: condition token width.
    pub token_dim: usize,
    /// Training timesteps of the noise schedule.
    pub t_train: usize,
    /// R: common attention aggregation resolution.
    pub prior_resolution: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_channels: 64,
            roi_size: 14,
            crop_size: 32,
            diffusion_resolution: 16,
            unet_channels: 32,
            token_dim: 32,
            t_train: 200,
            prior_resolution: 16,
        }
    }
}

impl ModelConfig {
    pub fn mask_size(&self) -> usize {
        2 * self.roi_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.feature_channels,
            self.roi_size,
            self.crop_size,
            self.diffusion_resolution,
            self.unet_channels,
            self.token_dim,
            self.t_train,
            self.prior_resolution,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(CoreError::Config("model dimensions must be positive".into()));
        }
        if self.crop_size % 4 != 0 {
            return Err(CoreError::Config("crop_size must be a multiple of 4".into()));
        }
        if self.diffusion_resolution % 2 != 0 {
            return Err(CoreError::Config(
                "diffusion_resolution must be even".into(),
            ));
        }
        if self.feature_channels % 2 != 0 || self.unet_channels % 2 != 0 {
            return Err(CoreError::Config("channel counts must be even".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// SGD momentum coefficient.
    pub momentum: f64,
    pub tau_exponent: u32,
    pub t_sample: usize,
    pub train_dataset: PathBuf,
    pub val_dataset: Option<PathBuf>,
    /// Required by `cache-priors` / `train-ais` / `eval`.
    pub diffusion_checkpoint: Option<PathBuf>,
    /// Cache directory for per-ROI shape priors.
    pub prior_cache: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Checkpoint and metrics-log cadence, in iterations.
    pub checkpoint_interval: usize,
    /// Max box-edge jitter fraction during AIS training (0 disables).
    pub box_jitter: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2.5e-3,
            batch_size: 1,
            iterations: 1000,
            seed: 0,
            momentum: 0.9,
            tau_exponent: 4,
            t_sample: 10,
            train_dataset: PathBuf::from("data/train"),
            val_dataset: None,
            diffusion_checkpoint: None,
            prior_cache: None,
            out_dir: PathBuf::from("out"),
            checkpoint_interval: 1000,
            box_jitter: 0.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(CoreError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.checkpoint_interval == 0 {
            return Err(CoreError::Config(
                "batch_size, iterations, checkpoint_interval must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::Config("momentum must be in [0,1)".into()));
        }
        if self.t_sample == 0 || self.t_sample > self.model.t_train {
            return Err(CoreError::Config(format!(
                "t_sample must be in [1, t_train={}]",
                self.model.t_train
            )));
        }
        if !(0.0..=0.5).contains(&self.box_jitter) {
            return Err(CoreError::Config("box_jitter must be in [0, 0.5]".into()));
        }
        self.model.validate()
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| CoreError::Json {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }
}
