use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::numerics::{RngStream, Scalar, Tensor};

/// Compositional guidance weights: `w_s` for the spatial (canvas)
/// condition, `w_t` for the temporal condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceScales {
    pub w_s: f64,
    pub w_t: f64,
}

impl GuidanceScales {
    pub fn new(w_s: f64, w_t: f64) -> Result<Self> {
        if !(w_s.is_finite() && w_t.is_finite() && w_s >= 0.0 && w_t >= 0.0) {
            return invalid(format!("guidance scales must be finite and >= 0, got ({w_s}, {w_t})"));
        }
        Ok(Self { w_s, w_t })
    }
}

/// Schedule length with the guidance tuned for it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingPreset {
    pub steps: usize,
    pub guidance: GuidanceScales,
}

impl SamplingPreset {
    pub const SIX_STEP: SamplingPreset = SamplingPreset {
        steps: 6,
        guidance: GuidanceScales { w_s: 2.5, w_t: 1.1 },
    };
    pub const TWELVE_STEP: SamplingPreset = SamplingPreset {
        steps: 12,
        guidance: GuidanceScales { w_s: 2.25, w_t: 1.0 },
    };
}

/// `v_u + w_t (v_t - v_u) + w_s (v_st - v_t)`, evaluated in the regrouped
/// form `(1 - w_t) v_u + (w_t - w_s) v_t + w_s v_st` so that the
/// reductions at (1,1), (0,1) and (0,0) are exact in floating point.
pub fn cfg_velocity<T: Scalar>(
    v_uncond: &Tensor<T>,
    v_t: &Tensor<T>,
    v_st: &Tensor<T>,
    w: GuidanceScales,
) -> Result<Tensor<T>> {
    if v_uncond.shape() != v_t.shape() || v_t.shape() != v_st.shape() {
        return shape_err(
            "cfg_velocity",
            format!("{:?}, {:?}, {:?}", v_uncond.shape(), v_t.shape(), v_st.shape()),
        );
    }
    let a = T::lit(1.0 - w.w_t);
    let b = T::lit(w.w_t - w.w_s);
    let c = T::lit(w.w_s);
    let data = v_uncond
        .data()
        .iter()
        .zip(v_t.data())
        .zip(v_st.data())
        .map(|((&u, &t), &st)| a * u + b * t + c * st)
        .collect();
    Tensor::new(v_st.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Train,
    Inference,
}

/// Noise levels for the previous frame (`r`) and the canvas (`r_prime`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub r: f64,
    pub r_prime: f64,
    pub mode: AugmentMode,
}

impl AugmentConfig {
    pub const TRAIN_MAX: f64 = 0.8;
    pub const INFERENCE_RANGE: (f64, f64) = (0.3, 0.6);

    pub fn train() -> Self {
        Self {
            r: 0.0,
            r_prime: 0.0,
            mode: AugmentMode::Train,
        }
    }

    pub fn inference(r: f64, r_prime: f64) -> Result<Self> {
        let (lo, hi) = Self::INFERENCE_RANGE;
        for (name, v) in [("r", r), ("r'", r_prime)] {
            if !(lo..=hi).contains(&v) {
                return invalid(format!("inference {name} = {v} outside [{lo}, {hi}]"));
            }
        }
        Ok(Self {
            r,
            r_prime,
            mode: AugmentMode::Inference,
        })
    }

    /// Fixed `r = r' = 0.4`.
    pub fn inference_default() -> Self {
        Self::inference(0.4, 0.4).expect("in range")
    }

    /// Levels to use for one sample: fresh `U(0, 0.8)` draws in train mode,
    /// the fixed pair otherwise.
    pub fn levels(&self, rng: &mut RngStream) -> (f64, f64) {
        match self.mode {
            AugmentMode::Train => (
                rng.uniform(0.0, Self::TRAIN_MAX),
                rng.uniform(0.0, Self::TRAIN_MAX),
            ),
            AugmentMode::Inference => (self.r, self.r_prime),
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::inference_default()
    }
}

/// `x (1 - r) + eps r` with `eps ~ N(0, I)`.
pub fn augment<T: Scalar>(x: &Tensor<T>, r: f64, rng: &mut RngStream) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&r) {
        return invalid(format!("augmentation level {r} outside [0, 1]"));
    }
    let eps = rng.gaussian::<T>(x.shape());
    let (keep, mix) = (T::lit(1.0 - r), T::lit(r));
    x.zip_with(&eps, "augment", |a, e| a * keep + e * mix)
}
