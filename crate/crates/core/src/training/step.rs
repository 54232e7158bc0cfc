//! Multi-frame training loss and the optimization step.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::generation::AugmentConfig;
use crate::model::{encode_frame, CanvasMar, SpatialBatch, SpatialItem};
use crate::nn::{PatchLayout, TokenGrid};
use crate::numerics::{adam_step, clip_grad_norm, AdamConfig, OptState, RngStream, Scalar, Tape, Tensor, Var};
use crate::training::losses::{canvas_loss_var, flow_matching_loss_var, mask_set_with_ratio, DropoutFlags, FlowDraw, MASK_RATIO_RANGE};
use crate::video::Video;

mod purpose {
    pub const AUGMENT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const MASK: u64 = 100;
    pub const FLOW: u64 = 200;
    pub const CANVAS_NOISE: u64 = 300;
}

/// Fixed-length clips in model-space tokens.
#[derive(Clone, Debug)]
pub struct TrainBatch<T> {
    pub clips: Vec<Vec<TokenGrid<T>>>,
    /// Keys of each clip's RNG substreams.
    pub sample_ids: Vec<u64>,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn from_videos(videos: &[Video], layout: PatchLayout) -> Result<Self> {
        let clips = videos
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
        Ok(Self {
            sample_ids: (0..clips.len() as u64).collect(),
            clips,
        })
    }

    pub fn frames(&self) -> usize {
        self.clips.first().map_or(0, Vec::len)
    }
}

/// Random draws of one training frame.
#[derive(Clone, Debug)]
pub struct FrameDraws<T> {
    pub masked: Vec<bool>,
    /// Noise and time for every position; only masked rows are used.
    pub flow: FlowDraw<T>,
}

/// Random draws for the group of frames `start..start+G` of one clip.
#[derive(Clone, Debug)]
pub struct GroupDraws<T> {
    pub clip: usize,
    pub start: usize,
    pub r: f64,
    pub r_prime: f64,
    pub prev_noise: Tensor<T>,
    pub canvas_noise: Vec<Tensor<T>>,
    pub flags: DropoutFlags,
    pub frames: Vec<FrameDraws<T>>,
}

/// Draws every random quantity of one step up front, keyed by
/// `(seed, step, sample id, start frame, purpose)`.
pub fn draw_batch<T: Scalar>(
    model: &CanvasMar<T>,
    batch: &TrainBatch<T>,
    seed: u64,
    step: u64,
) -> Result<Vec<GroupDraws<T>>> {
    let g = model.config.group_size;
    let nf = batch.frames();
    if batch.clips.is_empty() || batch.clips.iter().any(|c| c.len() != nf) {
        return invalid("training clips must be non-empty and of equal length");
    }
    if nf < g + 1 {
        return invalid(format!("clips of {nf} frames cannot train groups of {g}"));
    }
    if nf - 1 > model.config.max_frames {
        return invalid(format!("clips of {nf} frames exceed max_frames {}", model.config.max_frames));
    }
    if batch.sample_ids.len() != batch.clips.len() {
        return invalid("one sample id per clip required");
    }
    let (n, dt, d) = (model.num_tokens(), model.token_dim(), model.dim());
    let root = RngStream::new(seed);
    let aug = AugmentConfig::train();
    let mut out = Vec::new();
    for (c, &sid) in batch.sample_ids.iter().enumerate() {
        for start in 1..=nf - g {
            let key = |p: u64| root.substream(&[step, sid, start as u64, p]);
            let mut rng = key(purpose::AUGMENT);
            let (r, r_prime) = aug.levels(&mut rng);
            let prev_noise = rng.gaussian(&[n, dt]);
            let canvas_noise = (0..g)
                .map(|k| key(purpose::CANVAS_NOISE + k as u64).gaussian(&[n, d]))
                .collect();
            let flags = DropoutFlags::sample(&mut key(purpose::DROPOUT));
            let frames = (0..g)
                .map(|k| {
                    let mut rng = key(purpose::MASK + k as u64);
                    let rho = rng.uniform(MASK_RATIO_RANGE.0, MASK_RATIO_RANGE.1);
                    let set = mask_set_with_ratio(n, rho, &mut rng);
                    let mut masked = vec![false; n];
                    for p in set {
                        masked[p] = true;
                    }
                    let flow = FlowDraw::sample(n, dt, &mut key(purpose::FLOW + k as u64));
                    FrameDraws { masked, flow }
                })
                .collect();
            out.push(GroupDraws {
                clip: c,
                start,
                r,
                r_prime,
                prev_noise,
                canvas_noise,
                flags,
                frames,
            });
        }
    }
    Ok(out)
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub canvas: Option<Var>,
    pub flow: Var,
}

fn stack_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    Tensor::concat_rows(parts)
}

/// Canvas, spatial and flow terms for `draws`, given zt of each group start
/// (`draws.len() * n` rows). Terms are normalized by `total_items` so that
/// summing over disjoint subsets reproduces the whole-batch loss.
fn group_terms<T: Scalar>(
    tape: &mut Tape<'_, T>,
    model: &CanvasMar<T>,
    batch: &TrainBatch<T>,
    draws: &[GroupDraws<T>],
    zt: Var,
    total_items: usize,
) -> Result<(Option<Var>, Var)> {
    let cfg = &model.config;
    let (n, g, m) = (model.num_tokens(), cfg.group_size, draws.len());
    let d = model.dim();
    let frame = |s: &GroupDraws<T>, k: usize| &batch.clips[s.clip][s.start + k].tokens;

    let mut canvas_rows = None;
    let mut canvas_term = None;
    if let Some(net) = &model.canvas {
        let zin = if cfg.canvas_grad_to_temporal {
            zt
        } else {
            tape.constant(tape.value(zt).clone())
        };
        let prev: Vec<Tensor<T>> = draws
            .iter()
            .map(|s| {
                let (keep, mix) = (T::lit(1.0 - s.r), T::lit(s.r));
                batch.clips[s.clip][s.start - 1]
                    .tokens
                    .zip_with(&s.prev_noise, "augment", |a, e| a * keep + e * mix)
            })
            .collect::<Result<_>>()?;
        let prev = tape.constant(stack_rows(&prev.iter().collect::<Vec<_>>())?);
        let heads = net.forward(tape, zin, prev, m, g)?;

        let mut preds = Vec::with_capacity(g);
        let mut targets = Vec::with_capacity(g * m);
        for (k, &zs) in heads.iter().enumerate() {
            preds.push(net.project(tape, zs)?);
            targets.extend(draws.iter().map(|s| frame(s, k)));
        }
        let pred = tape.concat_rows(&preds)?;
        let target = tape.constant(stack_rows(&targets)?);
        let per_row = canvas_loss_var(tape, pred, target)?;
        // canvas_loss_var averages over g*m*n rows; rescale to total_items
        canvas_term = Some(tape.scale(per_row, T::lit((g * m) as f64 / total_items as f64))?);

        let mut augmented = Vec::with_capacity(g);
        for (k, &zs) in heads.iter().enumerate() {
            let mut keep = Vec::with_capacity(m * n * d);
            let mut noise = Vec::with_capacity(m * n * d);
            for s in draws {
                let rp = T::lit(s.r_prime);
                keep.extend(std::iter::repeat(T::one() - rp).take(n * d));
                noise.extend(s.canvas_noise[k].data().iter().map(|&e| e * rp));
            }
            let keep = tape.constant(Tensor::matrix(m * n, d, keep)?);
            let noise = tape.constant(Tensor::matrix(m * n, d, noise)?);
            let scaled = tape.mul(zs, keep)?;
            augmented.push(tape.add(scaled, noise)?);
        }
        let all = tape.concat_rows(&augmented)?;
        let idx: Vec<usize> = (0..m)
            .flat_map(|s| (0..g).flat_map(move |k| (k * m + s) * n..(k * m + s + 1) * n))
            .collect();
        canvas_rows = Some(tape.gather_rows(all, &idx)?);
    }

    let uncond = model.temporal.uncond(tape)?;
    let ctx_src = tape.concat_rows(&[zt, uncond])?;
    let mut ctx_idx = Vec::with_capacity(m * g * n);
    let mut items = Vec::with_capacity(m * g);
    let mut tokens = Vec::with_capacity(m * g);
    for (si, s) in draws.iter().enumerate() {
        for k in 0..g {
            for j in 0..n {
                ctx_idx.push(if s.flags.drop_temporal { m * n + j } else { si * n + j });
            }
            items.push(SpatialItem {
                masked: s.frames[k].masked.clone(),
                canvas: canvas_rows.is_some() && !s.flags.drop_spatial,
            });
            tokens.push(frame(s, k));
        }
    }
    let context = tape.gather_rows(ctx_src, &ctx_idx)?;
    let tokens = tape.constant(stack_rows(&tokens)?);
    let sb = SpatialBatch {
        context,
        tokens,
        canvas: canvas_rows,
        items: &items,
        group: g,
    };
    let z = model.spatial.forward(tape, &sb)?;

    let dt = model.token_dim();
    let mut x1 = Vec::new();
    let mut x0 = Vec::new();
    let mut t = Vec::new();
    let mut w = Vec::new();
    for s in draws {
        for k in 0..g {
            let fd = &s.frames[k];
            let count = fd.masked.iter().filter(|&&b| b).count();
            for j in (0..n).filter(|&j| fd.masked[j]) {
                x1.extend_from_slice(frame(s, k).row(j));
                x0.extend_from_slice(fd.flow.x0.row(j));
                t.push(fd.flow.t[j]);
                w.push(1.0 / (count * total_items) as f64);
            }
        }
    }
    let rows = t.len();
    let x1 = Tensor::matrix(rows, dt, x1)?;
    let draw = FlowDraw {
        x0: Tensor::matrix(rows, dt, x0)?,
        t,
    };
    let flow = flow_matching_loss_var(tape, &model.flow, &x1, z, &draw, &w)?;
    Ok((canvas_term, flow))
}

fn combine<T: Scalar>(tape: &mut Tape<'_, T>, model: &CanvasMar<T>, canvas: Option<Var>, flow: Var) -> Result<LossParts> {
    let total = match canvas {
        Some(c) => {
            let c = tape.scale(c, T::lit(model.config.canvas_loss_weight))?;
            tape.add(c, flow)?
        }
        None => flow,
    };
    Ok(LossParts { total, canvas, flow })
}

/// Whole-batch loss with one frame-causal temporal pass per clip.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    model: &CanvasMar<T>,
    batch: &TrainBatch<T>,
    draws: &[GroupDraws<T>],
) -> Result<LossParts> {
    let n = model.num_tokens();
    let nf = batch.frames();
    let f = nf - 1;
    let inputs: Vec<&Tensor<T>> = batch
        .clips
        .iter()
        .flat_map(|c| c[..f].iter().map(|g| &g.tokens))
        .collect();
    let tokens = tape.constant(stack_rows(&inputs)?);
    let zt_all = model.temporal.forward_clips(tape, tokens, batch.clips.len(), f)?;
    let idx: Vec<usize> = draws
        .iter()
        .flat_map(|s| {
            let base = (s.clip * f + s.start - 1) * n;
            base..base + n
        })
        .collect();
    let zt = tape.gather_rows(zt_all, &idx)?;
    let items = draws.len() * model.config.group_size;
    let (canvas, flow) = group_terms(tape, model, batch, draws, zt, items)?;
    combine(tape, model, canvas, flow)
}

/// Same loss as [`batch_loss`], computed one group start at a time with a
/// separate temporal pass over only the frames it may see.
pub fn sequential_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    model: &CanvasMar<T>,
    batch: &TrainBatch<T>,
    draws: &[GroupDraws<T>],
) -> Result<LossParts> {
    let n = model.num_tokens();
    let items = draws.len() * model.config.group_size;
    let mut canvas_acc: Option<Var> = None;
    let mut flow_acc: Option<Var> = None;
    for s in draws {
        let hist: Vec<&Tensor<T>> = batch.clips[s.clip][..s.start].iter().map(|g| &g.tokens).collect();
        let tokens = tape.constant(stack_rows(&hist)?);
        let out = model.temporal.forward_clips(tape, tokens, 1, s.start)?;
        let zt = tape.slice_rows(out, (s.start - 1) * n, s.start * n)?;
        let (c, fl) = group_terms(tape, model, batch, std::slice::from_ref(s), zt, items)?;
        canvas_acc = match (canvas_acc, c) {
            (Some(a), Some(c)) => Some(tape.add(a, c)?),
            (None, c) => c,
            (a, None) => a,
        };
        flow_acc = Some(match flow_acc {
            Some(a) => tape.add(a, fl)?,
            None => fl,
        });
    }
    let flow = flow_acc.ok_or_else(|| Error::InvalidArgument("no training items".into()))?;
    combine(tape, model, canvas_acc, flow)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub canvas_loss: Option<f64>,
    pub flow_loss: f64,
    pub grad_norm: f64,
}

/// One optimization step on `batch`. Random draws are keyed by `seed` and
/// the optimizer step counter. Nothing is updated if any value or gradient
/// is non-finite.
pub fn train_step<T: Scalar>(
    model: &mut CanvasMar<T>,
    opt: &mut OptState<T>,
    batch: &TrainBatch<T>,
    seed: u64,
    grad_clip: Option<f64>,
) -> Result<StepMetrics> {
    let step = opt.step;
    let draws = draw_batch(model, batch, seed, step)?;
    let (metrics, mut grads) = {
        let mut tape = Tape::with_params(&model.params);
        let parts = batch_loss(&mut tape, model, batch, &draws)?;
        let value = |v: Var| tape.value(v).item().as_f64();
        let loss = value(parts.total);
        let canvas = parts.canvas.map(value);
        let flow = value(parts.flow);
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "loss", node: parts.total.index() });
        }
        let g = tape.backward(parts.total)?;
        (
            StepMetrics {
                step: step + 1,
                loss,
                canvas_loss: canvas,
                flow_loss: flow,
                grad_norm: 0.0,
            },
            tape.param_grads(&g),
        )
    };
    let norm = match grad_clip {
        Some(c) => clip_grad_norm(&mut grads, c),
        None => crate::numerics::grad_norm(&grads),
    };
    adam_step(&mut model.params, &grads, opt)?;
    Ok(StepMetrics {
        grad_norm: norm,
        ..metrics
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub clip_len: usize,
    pub steps: u64,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            clip_len: 8,
            steps: 1000,
            adam: AdamConfig::default(),
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

/// Picks `batch_size` random windows of `clip_len` frames.
pub fn sample_batch<T: Scalar>(
    videos: &[Video],
    cfg: &TrainConfig,
    layout: PatchLayout,
    step: u64,
) -> Result<TrainBatch<T>> {
    if videos.is_empty() {
        return invalid("empty training set");
    }
    let mut rng = RngStream::new(cfg.seed).substream(&[step, purpose::BATCH]);
    let mut clips = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let v = &videos[rng.below(videos.len())];
        if v.frames < cfg.clip_len {
            return invalid(format!("video of {} frames shorter than clip_len {}", v.frames, cfg.clip_len));
        }
        let start = rng.below(v.frames - cfg.clip_len + 1);
        clips.push(v.window(start, cfg.clip_len)?);
    }
    TrainBatch::from_videos(&clips, layout)
}

/// Model, optimizer state and run settings.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: CanvasMar<T>,
    pub opt: OptState<T>,
    pub config: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: CanvasMar<T>, config: TrainConfig) -> Self {
        let opt = OptState::new(&model.params, config.adam);
        Self { model, opt, config }
    }

    pub fn step(&mut self, videos: &[Video]) -> Result<StepMetrics> {
        let batch = sample_batch(videos, &self.config, self.model.layout(), self.opt.step)?;
        train_step(&mut self.model, &mut self.opt, &batch, self.config.seed, self.config.grad_clip)
    }

    /// Runs until the optimizer reaches `config.steps`, calling `log` after
    /// every step.
    pub fn run(&mut self, videos: &[Video], mut log: impl FnMut(&StepMetrics)) -> Result<()> {
        while self.opt.step < self.config.steps {
            let m = self.step(videos)?;
            log(&m);
        }
        Ok(())
    }
}
