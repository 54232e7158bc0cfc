//! Standard and debiased evaluation protocols over held-out clips.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataeval::features::{FeatureEmbedder, DEFAULT_EMBEDDER_SEED};
use crate::dataeval::metrics::{frechet_proxy, mse};
use crate::error::{invalid, Result};
use crate::generation::{rollout_batch, RolloutConfig};
use crate::model::{decode_tokens, encode_frame, CanvasMar};
use crate::numerics::{RngStream, Scalar};
use crate::video::Video;

/// Anything that continues conditioning clips.
pub trait ClipPredictor {
    /// Returns each conditioning clip followed by `num_new` predicted
    /// frames; `seeds[b]` keys the randomness of clip `b`.
    fn predict(&self, conds: &[Video], num_new: usize, seeds: &[u64]) -> Result<Vec<Video>>;

    /// Settings folded into the report's config hash.
    fn describe(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

/// Rollouts of a trained model, `batch` clips at a time.
pub struct ModelPredictor<'a, T> {
    pub model: &'a CanvasMar<T>,
    pub rollout: RolloutConfig,
    pub batch: usize,
}

impl<T: Scalar> ClipPredictor for ModelPredictor<'_, T> {
    fn predict(&self, conds: &[Video], num_new: usize, seeds: &[u64]) -> Result<Vec<Video>> {
        let layout = self.model.layout();
        let mut out = Vec::with_capacity(conds.len());
        for (chunk, seeds) in conds.chunks(self.batch.max(1)).zip(seeds.chunks(self.batch.max(1))) {
            let grids = chunk
                .iter()
                .map(|v| {
                    (0..v.frames)
                        .map(|i| {
                            let px: Vec<T> = v.frame(i).iter().map(|&p| T::lit(p as f64)).collect();
                            encode_frame(&px, layout, i)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let rolled = rollout_batch(self.model, &grids, seeds, num_new, &self.rollout)?;
            for (cond, r) in chunk.iter().zip(rolled) {
                let mut v = cond.clone();
                for f in &r.frames[cond.frames..] {
                    let px: Vec<f32> = decode_tokens(&f.tokens, layout)?
                        .into_iter()
                        .map(|x| x.as_f64().clamp(0.0, 1.0) as f32)
                        .collect();
                    v.push_frame(&px)?;
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.model.config, "rollout": self.rollout })
    }
}

/// Replays the ground truth continuation of whichever clip contains the
/// conditioning frames.
pub struct OraclePredictor<'a> {
    pub clips: &'a [Video],
}

impl ClipPredictor for OraclePredictor<'_> {
    fn predict(&self, conds: &[Video], num_new: usize, _seeds: &[u64]) -> Result<Vec<Video>> {
        conds
            .iter()
            .map(|cond| {
                let need = cond.frames + num_new;
                for clip in self.clips.iter().filter(|c| c.frames >= need) {
                    for start in 0..=clip.frames - need {
                        if clip.window(start, cond.frames)?.data == cond.data {
                            return clip.window(start, need);
                        }
                    }
                }
                invalid("oracle has no clip matching the conditioning frames")
            })
            .collect()
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!("oracle")
    }
}

/// Appends uniform noise frames.
pub struct NoisePredictor;

impl ClipPredictor for NoisePredictor {
    fn predict(&self, conds: &[Video], num_new: usize, seeds: &[u64]) -> Result<Vec<Video>> {
        conds
            .iter()
            .zip(seeds)
            .map(|(cond, &seed)| {
                let mut rng = RngStream::new(seed);
                let mut v = cond.clone();
                for _ in 0..num_new {
                    let px: Vec<f32> = (0..v.frame_len()).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
                    v.push_frame(&px)?;
                }
                Ok(v)
            })
            .collect()
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!("noise")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Standard,
    Debiased,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "standard" => Ok(Self::Standard),
            "debiased" => Ok(Self::Debiased),
            other => Err(format!("unknown protocol `{other}` (expected standard or debiased)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Frames given to the predictor.
    pub cond_frames: usize,
    /// Frames per evaluated clip, conditioning included.
    pub clip_len: usize,
    /// Generated clips per test clip in the standard protocol.
    pub clips_per_condition: usize,
    /// Held-out clips used (the first ones of the test split).
    pub test_clips: usize,
    /// Random windows per test clip in the debiased protocol.
    pub repeats: usize,
    pub seed: u64,
    pub embedder_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cond_frames: 2,
            clip_len: 16,
            clips_per_condition: 16,
            test_clips: 64,
            repeats: 16,
            seed: 0,
            embedder_seed: DEFAULT_EMBEDDER_SEED,
        }
    }
}

/// Real and generated clips of one protocol pass.
#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub protocol: Protocol,
    pub real: Vec<Video>,
    pub fake: Vec<Video>,
    /// Ground truth window `(test clip, start frame)` of each fake clip.
    pub windows: Vec<(usize, usize)>,
}

fn check(test: &[Video], cfg: &EvalConfig) -> Result<usize> {
    let count = cfg.test_clips.min(test.len());
    if count == 0 {
        return invalid("no test clips to evaluate");
    }
    if cfg.cond_frames == 0 || cfg.cond_frames >= cfg.clip_len {
        return invalid(format!(
            "need 0 < cond_frames < clip_len, got {} and {}",
            cfg.cond_frames, cfg.clip_len
        ));
    }
    if let Some(short) = test[..count].iter().find(|v| v.frames < cfg.clip_len) {
        return invalid(format!("test clip of {} frames shorter than clip_len {}", short.frames, cfg.clip_len));
    }
    Ok(count)
}

/// The first frames of each test clip condition `clips_per_condition`
/// generated clips; the real set holds one ground-truth clip per test clip.
pub fn standard_run(pred: &dyn ClipPredictor, test: &[Video], cfg: &EvalConfig) -> Result<ProtocolRun> {
    let count = check(test, cfg)?;
    let root = RngStream::new(cfg.seed);
    let mut conds = Vec::new();
    let mut seeds = Vec::new();
    let mut windows = Vec::new();
    let mut real = Vec::with_capacity(count);
    for (c, clip) in test[..count].iter().enumerate() {
        real.push(clip.window(0, cfg.clip_len)?);
        let cond = clip.window(0, cfg.cond_frames)?;
        for m in 0..cfg.clips_per_condition {
            conds.push(cond.clone());
            seeds.push(root.substream(&[0, c as u64, m as u64]).next_u64());
            windows.push((c, 0));
        }
    }
    let fake = pred.predict(&conds, cfg.clip_len - cfg.cond_frames, &seeds)?;
    Ok(ProtocolRun {
        protocol: Protocol::Standard,
        real,
        fake,
        windows,
    })
}

/// Every repeat draws a fresh window position in each test clip and
/// generates one continuation from its first frames.
pub fn debiased_run(pred: &dyn ClipPredictor, test: &[Video], cfg: &EvalConfig) -> Result<ProtocolRun> {
    let count = check(test, cfg)?;
    if cfg.repeats == 0 {
        return invalid("repeats must be positive");
    }
    let root = RngStream::new(cfg.seed);
    let mut conds = Vec::new();
    let mut seeds = Vec::new();
    let mut windows = Vec::new();
    let mut real = Vec::new();
    for r in 0..cfg.repeats {
        for (c, clip) in test[..count].iter().enumerate() {
            let mut rng = root.substream(&[1, r as u64, c as u64]);
            let start = rng.below(clip.frames - cfg.clip_len + 1);
            real.push(clip.window(start, cfg.clip_len)?);
            conds.push(clip.window(start, cfg.cond_frames)?);
            seeds.push(rng.next_u64());
            windows.push((c, start));
        }
    }
    let fake = pred.predict(&conds, cfg.clip_len - cfg.cond_frames, &seeds)?;
    Ok(ProtocolRun {
        protocol: Protocol::Debiased,
        real,
        fake,
        windows,
    })
}

/// One evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub seed: u64,
    /// Fréchet distance between real and generated clip features.
    pub score: f64,
    /// Pixel MSE of generated frames against their ground truth.
    pub mse: f64,
    pub psnr: f64,
    pub real_clips: usize,
    pub fake_clips: usize,
    pub config_hash: String,
}

/// Hex SHA-256 of the JSON form of `value`.
pub fn config_hash(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn score_run(run: &ProtocolRun, test: &[Video], cfg: &EvalConfig, describe: serde_json::Value) -> Result<EvalReport> {
    let channels = run.real[0].channels;
    let embedder = FeatureEmbedder::new(channels, cfg.embedder_seed);
    let score = frechet_proxy(&embedder.embed_all(&run.real)?, &embedder.embed_all(&run.fake)?)?;
    let mut err = 0.0;
    for (fake, &(c, start)) in run.fake.iter().zip(&run.windows) {
        let truth = test[c].window(start, cfg.clip_len)?;
        let from = cfg.cond_frames * truth.frame_len();
        err += mse(&fake.data[from..], &truth.data[from..])?;
    }
    let err = err / run.fake.len() as f64;
    Ok(EvalReport {
        protocol: run.protocol,
        seed: cfg.seed,
        score,
        mse: err,
        psnr: if err == 0.0 { f64::INFINITY } else { -10.0 * err.log10() },
        real_clips: run.real.len(),
        fake_clips: run.fake.len(),
        config_hash: config_hash(&serde_json::json!({
            "protocol": run.protocol,
            "eval": cfg,
            "predictor": describe,
        }))?,
    })
}

pub fn eval_protocol_standard(pred: &dyn ClipPredictor, test: &[Video], cfg: &EvalConfig) -> Result<EvalReport> {
    let run = standard_run(pred, test, cfg)?;
    score_run(&run, test, cfg, pred.describe())
}

pub fn eval_protocol_debiased(pred: &dyn ClipPredictor, test: &[Video], cfg: &EvalConfig) -> Result<EvalReport> {
    let run = debiased_run(pred, test, cfg)?;
    score_run(&run, test, cfg, pred.describe())
}

pub fn evaluate(pred: &dyn ClipPredictor, test: &[Video], cfg: &EvalConfig, protocol: Protocol) -> Result<EvalReport> {
    match protocol {
        Protocol::Standard => eval_protocol_standard(pred, test, cfg),
        Protocol::Debiased => eval_protocol_debiased(pred, test, cfg),
    }
}
