//! Canvas-initialized masked decoding of frames and frame groups, and the
//! autoregressive rollout built on it.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::generation::guidance::{augment, cfg_velocity, AugmentConfig, GuidanceScales};
use crate::generation::schedule::MaskPlan;
use crate::model::{decode_tokens, encode_frame, CanvasEmbedding, CanvasMar, SpatialBatch, SpatialItem, TemporalEmbedding};
use crate::nn::TokenGrid;
use crate::numerics::{RngStream, Scalar, Tape, Tensor};
use crate::video::Video;

/// Purposes distinguishing RNG substreams of one (frame, token) slot.
pub mod purpose {
    pub const ORDER: u64 = 1;
    pub const FLOW: u64 = 2;
    pub const PREV_NOISE: u64 = 3;
    pub const CANVAS_NOISE: u64 = 4;
}

/// Substream for one `(frame, token, purpose)` slot of a seeded job.
pub fn slot_stream(seed: u64, frame: usize, token: usize, purpose: u64) -> RngStream {
    RngStream::new(seed).substream(&[frame as u64, token as u64, purpose])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    /// Spatial autoregressive steps per frame.
    pub steps: usize,
    /// `None` runs only the fully conditional branch.
    pub guidance: Option<GuidanceScales>,
    pub flow_steps: usize,
    pub seed: u64,
}

fn repeat_rows<T: Scalar>(t: &Tensor<T>, times: usize) -> Result<Tensor<T>> {
    Tensor::concat_rows(&vec![t; times])
}

/// One sequence in a batched group decode.
#[derive(Clone, Copy, Debug)]
pub struct GroupJob<'a, T> {
    pub zt: &'a TemporalEmbedding<T>,
    /// Canvas of each frame of the group; `None` uses the mask vector.
    pub canvases: Option<&'a [CanvasEmbedding<T>]>,
    pub first_frame: usize,
    /// Keys this job's RNG slots, so a job decodes the same whether it runs
    /// alone or batched with others.
    pub seed: u64,
}

/// Decodes `g` consecutive frames starting at `first_frame` jointly. All
/// frames share `zt`; frame `f` uses `canvases[f]` when given, otherwise
/// the learnable mask vector.
pub fn generate_group<T: Scalar>(
    model: &CanvasMar<T>,
    zt: &TemporalEmbedding<T>,
    canvases: Option<&[CanvasEmbedding<T>]>,
    first_frame: usize,
    g: usize,
    opts: &DecodeOptions,
) -> Result<Vec<TokenGrid<T>>> {
    let job = GroupJob {
        zt,
        canvases,
        first_frame,
        seed: opts.seed,
    };
    Ok(generate_groups(model, &[job], g, opts)?.remove(0))
}

/// Decodes one group per job, running the spatial network and flow head
/// over all jobs at once. `opts.seed` is ignored in favour of each job's.
pub fn generate_groups<T: Scalar>(
    model: &CanvasMar<T>,
    jobs: &[GroupJob<'_, T>],
    g: usize,
    opts: &DecodeOptions,
) -> Result<Vec<Vec<TokenGrid<T>>>> {
    let (n, dt) = (model.num_tokens(), model.token_dim());
    if g == 0 {
        return invalid("group size must be at least 1");
    }
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let has_canvas = jobs[0].canvases.is_some();
    for job in jobs {
        match job.canvases {
            Some(c) if c.len() != g => return invalid(format!("{} canvases for a group of {g}", c.len())),
            c if c.is_some() != has_canvas => return invalid("jobs disagree on canvas use"),
            _ => {}
        }
    }
    if opts.steps == 0 || opts.steps > n {
        return invalid(format!("need 1 <= K <= {n}, got {}", opts.steps));
    }
    // One entry per decoded frame, job-major.
    let slots: Vec<(u64, usize)> = jobs
        .iter()
        .flat_map(|j| (0..g).map(move |f| (j.seed, j.first_frame + f)))
        .collect();
    let plans = slots
        .iter()
        .map(|&(seed, frame)| {
            let mut rng = slot_stream(seed, frame, 0, purpose::ORDER);
            MaskPlan::new(n, opts.steps, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let zt_rep = Tensor::concat_rows(&jobs.iter().flat_map(|j| vec![&j.zt.zt; g]).collect::<Vec<_>>())?;
    let uncond_rep = if opts.guidance.is_some() {
        Some(repeat_rows(&model.uncond_embedding()?, g * jobs.len())?)
    } else {
        None
    };
    let canvas_rep = if has_canvas {
        let parts: Vec<&Tensor<T>> = jobs
            .iter()
            .flat_map(|j| j.canvases.expect("checked above").iter().map(|e| &e.zs))
            .collect();
        Some(Tensor::concat_rows(&parts)?)
    } else {
        None
    };
    let mut tokens: Vec<Tensor<T>> = vec![Tensor::zeros(&[n, dt]); slots.len()];
    let mut masked = vec![vec![true; n]; slots.len()];

    let spatial = |context: &Tensor<T>, canvas: Option<&Tensor<T>>, tokens: &[Tensor<T>], masked: &[Vec<bool>]| {
        let items: Vec<SpatialItem> = masked
            .iter()
            .map(|m| SpatialItem {
                masked: m.clone(),
                canvas: canvas.is_some(),
            })
            .collect();
        let mut tape = Tape::inference(&model.params);
        let parts: Vec<&Tensor<T>> = tokens.iter().collect();
        let tok = tape.constant(Tensor::concat_rows(&parts)?);
        let ctx = tape.constant(context.clone());
        let cv = canvas.map(|c| tape.constant(c.clone()));
        let batch = SpatialBatch {
            context: ctx,
            tokens: tok,
            canvas: cv,
            items: &items,
            group: g,
        };
        let z = model.spatial.forward(&mut tape, &batch)?;
        Ok::<_, crate::Error>(tape.value(z).clone())
    };

    for k in 0..opts.steps {
        // Row of each masked position within the spatial output.
        let mut idx = Vec::new();
        let mut offset = 0;
        for f in 0..slots.len() {
            let mut rank = vec![usize::MAX; n];
            let mut r = 0;
            for j in 0..n {
                if masked[f][j] {
                    rank[j] = r;
                    r += 1;
                }
            }
            for &pos in plans[f].set(k) {
                idx.push(offset + rank[pos]);
            }
            offset += r;
        }
        let z_st = spatial(&zt_rep, canvas_rep.as_ref(), &tokens, &masked)?.gather_rows(&idx);
        let mut x0_parts = Vec::with_capacity(idx.len());
        for (&(seed, frame), plan) in slots.iter().zip(&plans) {
            for &pos in plan.set(k) {
                let mut rng = slot_stream(seed, frame, pos, purpose::FLOW);
                x0_parts.push(rng.gaussian::<T>(&[1, dt]));
            }
        }
        let x0 = Tensor::concat_rows(&x0_parts.iter().collect::<Vec<_>>())?;
        let x = match opts.guidance {
            None => model.flow_integrate(x0, &[&z_st], opts.flow_steps, |v| Ok(v[0].clone()))?,
            Some(w) => {
                let z_t = if canvas_rep.is_some() {
                    spatial(&zt_rep, None, &tokens, &masked)?.gather_rows(&idx)
                } else {
                    z_st.clone()
                };
                let uncond = uncond_rep.as_ref().expect("built when guided");
                let z_u = spatial(uncond, None, &tokens, &masked)?.gather_rows(&idx);
                model.flow_integrate(x0, &[&z_u, &z_t, &z_st], opts.flow_steps, |v| {
                    cfg_velocity(v[0], v[1], v[2], w)
                })?
            }
        };
        let mut row = 0;
        for (f, plan) in plans.iter().enumerate() {
            for &pos in plan.set(k) {
                tokens[f].row_mut(pos).copy_from_slice(x.row(row));
                masked[f][pos] = false;
                row += 1;
            }
        }
    }
    let mut out: Vec<Vec<TokenGrid<T>>> = Vec::with_capacity(jobs.len());
    for (t, &(_, frame)) in tokens.into_iter().zip(&slots) {
        if out.last().is_none_or(|v| v.len() == g) {
            out.push(Vec::with_capacity(g));
        }
        out.last_mut().expect("pushed").push(TokenGrid {
            tokens: t,
            frame_index: frame,
        });
    }
    Ok(out)
}

/// Single-frame decode; `zs = None` uses the uniform-mask fallback.
pub fn generate_frame<T: Scalar>(
    model: &CanvasMar<T>,
    zt: &TemporalEmbedding<T>,
    zs: Option<&CanvasEmbedding<T>>,
    opts: &DecodeOptions,
) -> Result<TokenGrid<T>> {
    let canvases = zs.map(std::slice::from_ref);
    Ok(generate_group(model, zt, canvases, zt.frame_index, 1, opts)?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub decode: DecodeOptions,
    pub aug: AugmentConfig,
    /// Frames per temporal step; at most the model's group size.
    pub group: usize,
}

#[derive(Clone, Debug)]
pub struct RolloutOutput<T> {
    /// Conditioning frames followed by the generated ones (model space).
    pub frames: Vec<TokenGrid<T>>,
    /// Projected canvas of each generated frame (model space), when the
    /// model has a canvas.
    pub canvases: Vec<TokenGrid<T>>,
}

/// Generates `num_new` frames after `cond`. Work is done in whole groups;
/// surplus frames of the last group are dropped, so the first frames never
/// depend on how many are requested.
pub fn rollout_tokens<T: Scalar>(
    model: &CanvasMar<T>,
    cond: &[TokenGrid<T>],
    num_new: usize,
    cfg: &RolloutConfig,
) -> Result<RolloutOutput<T>> {
    Ok(rollout_batch(model, &[cond.to_vec()], &[cfg.decode.seed], num_new, cfg)?.remove(0))
}

/// Rolls out several sequences together; sequence `b` is keyed by
/// `seeds[b]` and matches a lone rollout with that seed.
pub fn rollout_batch<T: Scalar>(
    model: &CanvasMar<T>,
    conds: &[Vec<TokenGrid<T>>],
    seeds: &[u64],
    num_new: usize,
    cfg: &RolloutConfig,
) -> Result<Vec<RolloutOutput<T>>> {
    if seeds.len() != conds.len() {
        return invalid(format!("{} seeds for {} sequences", seeds.len(), conds.len()));
    }
    let Some(first) = conds.first() else {
        return Ok(Vec::new());
    };
    let start = first.len();
    if start == 0 || conds.iter().any(|c| c.len() != start) {
        return invalid("rollout needs conditioning frames of equal, non-zero count");
    }
    let g = cfg.group;
    if g == 0 || g > model.config.group_size {
        return invalid(format!(
            "group {g} unsupported by a model with group size {}",
            model.config.group_size
        ));
    }
    let mut outs: Vec<RolloutOutput<T>> = conds
        .iter()
        .map(|c| RolloutOutput {
            frames: c.clone(),
            canvases: Vec::new(),
        })
        .collect();
    let mut caches: Vec<Option<_>> = vec![None; conds.len()];
    while outs[0].frames.len() < start + num_new {
        let i = outs[0].frames.len();
        let mut zts = Vec::with_capacity(outs.len());
        let mut noisy_all = Vec::with_capacity(outs.len());
        for (b, out) in outs.iter_mut().enumerate() {
            let (zt, c) = model.temporal_forward(&out.frames, caches[b].take())?;
            caches[b] = Some(c);
            let seed = seeds[b];
            if model.canvas.is_some() {
                let mut rng = slot_stream(seed, i, 0, purpose::PREV_NOISE);
                let (r, _) = cfg.aug.levels(&mut rng);
                let prev = out.frames.last().expect("non-empty");
                let prev = TokenGrid {
                    tokens: augment(&prev.tokens, r, &mut rng)?,
                    frame_index: prev.frame_index,
                };
                let raw = model.canvas_forward(&zt, &prev, g)?;
                let mut noisy = Vec::with_capacity(g);
                for (f, c) in raw.iter().enumerate() {
                    out.canvases.push(model.canvas_project(c, i + f)?);
                    let mut rng = slot_stream(seed, i + f, 0, purpose::CANVAS_NOISE);
                    let (_, rp) = cfg.aug.levels(&mut rng);
                    noisy.push(CanvasEmbedding {
                        zs: augment(&c.zs, rp, &mut rng)?,
                        group_offset: c.group_offset,
                    });
                }
                noisy_all.push(Some(noisy));
            } else {
                noisy_all.push(None);
            }
            zts.push(zt);
        }
        let jobs: Vec<GroupJob<'_, T>> = zts
            .iter()
            .zip(&noisy_all)
            .zip(seeds)
            .map(|((zt, zs), &seed)| GroupJob {
                zt,
                canvases: zs.as_deref(),
                first_frame: i,
                seed,
            })
            .collect();
        let new = generate_groups(model, &jobs, g, &cfg.decode)?;
        for (out, frames) in outs.iter_mut().zip(new) {
            out.frames.extend(frames);
        }
    }
    for out in &mut outs {
        out.frames.truncate(start + num_new);
        out.canvases.truncate(num_new);
    }
    Ok(outs)
}

/// Pixel-space rollout: conditions on every frame of `cond`.
pub fn rollout<T: Scalar>(
    model: &CanvasMar<T>,
    cond: &Video,
    num_new: usize,
    cfg: &RolloutConfig,
) -> Result<(Video, Vec<Vec<f32>>)> {
    let layout = model.layout();
    if (cond.height, cond.width, cond.channels) != (layout.height, layout.width, layout.channels) {
        return invalid(format!(
            "video is {}x{}x{}, model expects {}x{}x{}",
            cond.height, cond.width, cond.channels, layout.height, layout.width, layout.channels
        ));
    }
    let grids = (0..cond.frames)
        .map(|i| {
            let px: Vec<T> = cond.frame(i).iter().map(|&p| T::lit(p as f64)).collect();
            encode_frame(&px, layout, i)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = rollout_tokens(model, &grids, num_new, cfg)?;
    let mut video = cond.clone();
    for f in &out.frames[cond.frames..] {
        let px: Vec<f32> = decode_tokens(&f.tokens, layout)?
            .into_iter()
            .map(|v| v.as_f64().clamp(0.0, 1.0) as f32)
            .collect();
        video.push_frame(&px)?;
    }
    let canvases = out
        .canvases
        .iter()
        .map(|c| {
            Ok(decode_tokens(&c.tokens, layout)?
                .into_iter()
                .map(|v| v.as_f64().clamp(0.0, 1.0) as f32)
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((video, canvases))
}
