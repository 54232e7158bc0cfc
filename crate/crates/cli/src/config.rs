//! Flat TOML run configuration for `train` (and defaults for `sample`/`eval`).

use std::path::{Path, PathBuf};

use canvasmar::generation::{AugmentConfig, GuidanceScales};
use canvasmar::model::ModelConfig;
use canvasmar::numerics::AdamConfig;
use canvasmar::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,

    /// desk, small or tiny
    pub preset: String,
    pub group_size: usize,
    pub use_canvas: bool,
    pub canvas_grad_to_temporal: bool,
    pub canvas_loss_weight: f64,
    /// Flow head integration steps at sampling time.
    pub flow_steps: Option<usize>,

    pub batch_size: usize,
    pub clip_len: usize,
    pub steps: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    /// 0 disables clipping.
    pub grad_clip: f64,
    pub checkpoint_every: u64,
    /// Omitted: drawn from entropy and logged.
    pub seed: Option<u64>,
    /// Start from a next-frame checkpoint, expanding it to `group_size`.
    pub init_from: Option<PathBuf>,

    pub sample_steps: usize,
    pub w_s: f64,
    pub w_t: f64,
    pub r: f64,
    pub r_prime: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            preset: "desk".into(),
            group_size: 1,
            use_canvas: true,
            canvas_grad_to_temporal: true,
            canvas_loss_weight: 1.0,
            flow_steps: None,
            batch_size: 8,
            clip_len: 8,
            steps: 1000,
            lr: 1e-3,
            warmup_steps: 200,
            grad_clip: 1.0,
            checkpoint_every: 100,
            seed: None,
            init_from: None,
            sample_steps: 6,
            w_s: 2.5,
            w_t: 1.1,
            r: 0.4,
            r_prime: 0.4,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let mut m = ModelConfig::preset(&self.preset).map_err(usage)?.with_group(self.group_size);
        m.use_canvas = self.use_canvas;
        m.canvas_grad_to_temporal = self.canvas_grad_to_temporal;
        m.canvas_loss_weight = self.canvas_loss_weight;
        if let Some(s) = self.flow_steps {
            m.flow.steps = s;
        }
        m.validate().map_err(usage)?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let m = self.model_config()?;
        if self.batch_size == 0 || self.clip_len < 2 || self.checkpoint_every == 0 {
            return Err(CliError::Usage(
                "batch_size and checkpoint_every must be positive and clip_len at least 2".into(),
            ));
        }
        if self.clip_len - 1 > m.max_frames || self.clip_len <= self.group_size {
            return Err(CliError::Usage(format!(
                "clip_len {} must exceed group_size {} and fit max_frames {}",
                self.clip_len, self.group_size, m.max_frames
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.grad_clip >= 0.0) || !(self.canvas_loss_weight >= 0.0) {
            return Err(CliError::Usage("lr must be positive; grad_clip and canvas_loss_weight non-negative".into()));
        }
        if self.sample_steps == 0 || self.sample_steps > m.num_tokens() {
            return Err(CliError::Usage(format!("sample_steps must lie in 1..={}", m.num_tokens())));
        }
        self.guidance()?;
        self.augment()?;
        Ok(())
    }

    pub fn guidance(&self) -> Result<GuidanceScales, CliError> {
        GuidanceScales::new(self.w_s, self.w_t).map_err(usage)
    }

    pub fn augment(&self) -> Result<AugmentConfig, CliError> {
        AugmentConfig::inference(self.r, self.r_prime).map_err(usage)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            clip_len: self.clip_len,
            steps: self.steps,
            adam: AdamConfig {
                lr: self.lr,
                warmup_steps: self.warmup_steps,
                ..AdamConfig::default()
            },
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            seed,
        }
    }
}

fn usage(e: canvasmar::Error) -> CliError {
    CliError::Usage(e.to_string())
}
