use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::PatchLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetConfig {
    pub dim: usize,
    pub layers: usize,
    pub patch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub dim: usize,
    pub layers: usize,
    pub steps: usize,
}

/// Architecture of the four networks plus the frame geometry they share.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub temporal: SubnetConfig,
    pub canvas: SubnetConfig,
    pub spatial: SubnetConfig,
    /// Leading spatial layers that see only context and clean tokens.
    pub encoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub flow: FlowConfig,
    /// Frames predicted per temporal step (number of canvas heads).
    pub group_size: usize,
    /// A cross-frame attention layer follows every this many decoder layers
    /// when `group_size > 1`.
    pub group_temporal_every: usize,
    pub max_frames: usize,
    /// `false` builds the uniform-mask baseline with no Canvas ViT.
    pub use_canvas: bool,
    /// Whether the canvas loss trains the temporal network through zt.
    pub canvas_grad_to_temporal: bool,
    pub canvas_loss_weight: f64,
}

impl ModelConfig {
    pub const PRESETS: [&'static str; 3] = ["desk", "small", "tiny"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "small" => Ok(Self::small()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::InvalidConfig(format!(
                "unknown model preset `{other}` (expected one of {:?})",
                Self::PRESETS
            ))),
        }
    }

    /// 32x32 grayscale, 4x4 patches, d=128.
    pub fn desk() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            patch: 4,
            temporal: SubnetConfig {
                dim: 128,
                layers: 2,
                patch: 4,
            },
            canvas: SubnetConfig {
                dim: 128,
                layers: 1,
                patch: 4,
            },
            spatial: SubnetConfig {
                dim: 128,
                layers: 2,
                patch: 4,
            },
            encoder_depth: 1,
            heads: 4,
            mlp_ratio: 4,
            flow: FlowConfig {
                dim: 256,
                layers: 2,
                steps: 30,
            },
            group_size: 1,
            group_temporal_every: 1,
            max_frames: 32,
            use_canvas: true,
            canvas_grad_to_temporal: true,
            canvas_loss_weight: 1.0,
        }
    }

    /// 16x16 frames with 16 tokens; small enough for unit tests and
    /// quick ablations.
    pub fn small() -> Self {
        let sub = |layers| SubnetConfig {
            dim: 64,
            layers,
            patch: 4,
        };
        Self {
            height: 16,
            width: 16,
            temporal: sub(2),
            canvas: sub(1),
            spatial: sub(2),
            flow: FlowConfig {
                dim: 128,
                layers: 2,
                steps: 30,
            },
            ..Self::desk()
        }
    }

    /// 8x8 frames, 4 tokens, d=16. For tests that only need shapes and
    /// algebraic properties.
    pub fn tiny() -> Self {
        let sub = |layers| SubnetConfig {
            dim: 16,
            layers,
            patch: 4,
        };
        Self {
            height: 8,
            width: 8,
            temporal: sub(2),
            canvas: sub(1),
            spatial: sub(2),
            heads: 2,
            mlp_ratio: 2,
            flow: FlowConfig {
                dim: 32,
                layers: 2,
                steps: 8,
            },
            max_frames: 16,
            ..Self::desk()
        }
    }

    pub fn with_group(mut self, g: usize) -> Self {
        self.group_size = g;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        PatchLayout::new(self.height, self.width, self.channels, self.patch)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for (name, s) in [
            ("temporal", &self.temporal),
            ("canvas", &self.canvas),
            ("spatial", &self.spatial),
        ] {
            if s.patch != self.patch {
                return bad(format!("{name}.patch {} differs from patch {}", s.patch, self.patch));
            }
            if s.dim != self.temporal.dim {
                return bad(format!(
                    "{name}.dim {} differs from temporal.dim {}; subnets exchange n x d embeddings",
                    s.dim, self.temporal.dim
                ));
            }
            if s.layers == 0 && name != "canvas" {
                return bad(format!("{name}.layers must be at least 1"));
            }
        }
        let d = self.temporal.dim;
        if self.heads == 0 || d % self.heads != 0 {
            return bad(format!("dim {d} not divisible by heads {}", self.heads));
        }
        if d % 2 != 0 {
            return bad(format!("dim {d} must be even"));
        }
        if self.encoder_depth >= self.spatial.layers {
            return bad(format!(
                "encoder_depth {} leaves no decoder layers out of {}",
                self.encoder_depth, self.spatial.layers
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.flow.steps == 0 {
            return bad("flow.steps must be at least 1".into());
        }
        if self.flow.dim == 0 || self.flow.layers == 0 {
            return bad("flow head needs positive dim and layers".into());
        }
        if self.group_size == 0 {
            return bad("group_size must be at least 1".into());
        }
        if self.group_size > 1 && !self.use_canvas {
            return bad("group prediction needs canvas heads (use_canvas = true)".into());
        }
        if self.group_temporal_every == 0 {
            return bad("group_temporal_every must be at least 1".into());
        }
        if self.max_frames < 2 {
            return bad("max_frames must be at least 2".into());
        }
        if !(self.canvas_loss_weight.is_finite() && self.canvas_loss_weight >= 0.0) {
            return bad(format!("canvas_loss_weight {} invalid", self.canvas_loss_weight));
        }
        Ok(())
    }

    pub fn layout(&self) -> PatchLayout {
        PatchLayout {
            height: self.height,
            width: self.width,
            channels: self.channels,
            patch: self.patch,
        }
    }

    pub fn dim(&self) -> usize {
        self.temporal.dim
    }

    pub fn num_tokens(&self) -> usize {
        self.layout().num_tokens()
    }

    pub fn token_dim(&self) -> usize {
        self.layout().token_dim()
    }

    pub fn decoder_depth(&self) -> usize {
        self.spatial.layers - self.encoder_depth
    }

    /// Number of cross-frame layers in the spatial decoder.
    pub fn group_layers(&self) -> usize {
        if self.group_size > 1 {
            (self.decoder_depth() / self.group_temporal_every).max(1)
        } else {
            0
        }
    }

    /// First field whose value differs between two configs, as
    /// `(field, self value, other value)`.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<(String, String, String)> {
        let a = serde_json::to_value(self).ok()?;
        let b = serde_json::to_value(other).ok()?;
        diff_values("", &a, &b)
    }
}

fn diff_values(
    prefix: &str,
    a: &serde_json::Value,
    b: &serde_json::Value,
) -> Option<(String, String, String)> {
    match (a, b) {
        (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
            for (k, va) in ma {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match mb.get(k) {
                    Some(vb) => {
                        if let Some(d) = diff_values(&path, va, vb) {
                            return Some(d);
                        }
                    }
                    None => return Some((path, va.to_string(), "<missing>".into())),
                }
            }
            mb.keys()
                .find(|k| !ma.contains_key(*k))
                .map(|k| (k.clone(), "<missing>".into(), mb[k].to_string()))
        }
        _ if a != b => Some((prefix.to_string(), a.to_string(), b.to_string())),
        _ => None,
    }
}
