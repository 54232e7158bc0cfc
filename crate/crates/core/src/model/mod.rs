//! The CanvasMAR networks and their inference-level entry points.

pub mod canvas;
pub mod config;
pub mod flow;
pub mod spatial;
pub mod temporal;

pub use canvas::{CanvasEmbedding, CanvasVit};
pub use config::{FlowConfig, ModelConfig, SubnetConfig};
pub use flow::FlowHead;
pub use spatial::{SpatialBatch, SpatialItem, SpatialMar};
pub use temporal::{TemporalEmbedding, TemporalVit};

use crate::error::{invalid, shape_err, Result};
use crate::nn::{patchify, unpatchify, KvCache, PatchLayout, TokenGrid};
use crate::numerics::{ParamStore, RngStream, Scalar, Tape, Tensor};

/// Pixels in `[0, 1]` map to model-space tokens in `[-1, 1]`.
pub fn encode_frame<T: Scalar>(pixels: &[T], layout: PatchLayout, frame_index: usize) -> Result<TokenGrid<T>> {
    let mut g = patchify(pixels, layout, frame_index)?;
    g.tokens = g.tokens.map(|p| p + p - T::one());
    Ok(g)
}

/// Inverse of [`encode_frame`]; values are not clamped.
pub fn decode_tokens<T: Scalar>(tokens: &Tensor<T>, layout: PatchLayout) -> Result<Vec<T>> {
    let half = T::lit(0.5);
    unpatchify(&tokens.map(|x| (x + T::one()) * half), layout)
}

/// All four networks with their parameters.
#[derive(Clone, Debug)]
pub struct CanvasMar<T> {
    pub config: ModelConfig,
    pub temporal: TemporalVit,
    pub canvas: Option<CanvasVit>,
    pub spatial: SpatialMar,
    pub flow: FlowHead,
    pub params: ParamStore<T>,
}

impl<T: Scalar> CanvasMar<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(seed);
        let mut ps = ParamStore::new();
        let temporal = TemporalVit::new(&mut ps, &config, &mut root.substream(&[1]))?;
        let canvas = if config.use_canvas {
            Some(CanvasVit::new(&mut ps, &config, &mut root.substream(&[2]))?)
        } else {
            None
        };
        let spatial = SpatialMar::new(&mut ps, &config, &mut root.substream(&[3]))?;
        let flow = FlowHead::new(&mut ps, &config, &mut root.substream(&[4]))?;
        Ok(Self {
            config,
            temporal,
            canvas,
            spatial,
            flow,
            params: ps,
        })
    }

    pub fn cast<U: Scalar>(&self) -> CanvasMar<U> {
        CanvasMar {
            config: self.config.clone(),
            temporal: self.temporal.clone(),
            canvas: self.canvas.clone(),
            spatial: self.spatial.clone(),
            flow: self.flow.clone(),
            params: self.params.cast(),
        }
    }

    /// A next-group model of size `g` initialized from this one: shared
    /// parameters are copied, new canvas heads start as copies of the first
    /// head, and new cross-frame layers keep their inert initialization.
    pub fn expand_group(&self, g: usize, seed: u64) -> Result<Self> {
        let mut out = Self::new(self.config.clone().with_group(g), seed)?;
        let ids: Vec<_> = out.params.ids().collect();
        for id in ids {
            let name = out.params.name(id).to_string();
            let src = self.params.id(&name).or_else(|| {
                name.strip_prefix("canvas.head")
                    .and_then(|rest| rest.split_once('.'))
                    .and_then(|(_, tail)| self.params.id(&format!("canvas.head0.{tail}")))
            });
            if let Some(src) = src {
                if self.params.get(src).shape() != out.params.get(id).shape() {
                    return shape_err("expand_group", format!("parameter {name} changed shape"));
                }
                *out.params.get_mut(id) = self.params.get(src).clone();
            }
        }
        Ok(out)
    }

    pub fn layout(&self) -> PatchLayout {
        self.config.layout()
    }

    pub fn num_tokens(&self) -> usize {
        self.config.num_tokens()
    }

    pub fn token_dim(&self) -> usize {
        self.config.token_dim()
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    fn check_grid(&self, g: &TokenGrid<T>, what: &str) -> Result<()> {
        if g.tokens.shape() != [self.num_tokens(), self.token_dim()] {
            return shape_err(
                "model",
                format!("{what} has shape {:?}, expected {}x{}", g.tokens.shape(), self.num_tokens(), self.token_dim()),
            );
        }
        Ok(())
    }

    fn stack(&self, frames: &[TokenGrid<T>]) -> Result<Tensor<T>> {
        let parts: Vec<&Tensor<T>> = frames.iter().map(|f| &f.tokens).collect();
        Tensor::concat_rows(&parts)
    }

    /// zt for the frame after `history`. With a cache, only frames the cache
    /// has not seen are processed; the returned cache covers all of
    /// `history`.
    pub fn temporal_forward(
        &self,
        history: &[TokenGrid<T>],
        cache: Option<KvCache<T>>,
    ) -> Result<(TemporalEmbedding<T>, KvCache<T>)> {
        if history.is_empty() {
            return invalid("temporal_forward needs at least one history frame");
        }
        for f in history {
            self.check_grid(f, "history frame")?;
        }
        let mut cache = cache.unwrap_or_else(|| self.temporal.new_cache());
        let seen = cache.frames();
        if cache.len() % self.num_tokens() != 0 || seen >= history.len() {
            return invalid(format!(
                "cache covers {seen} frames, history has {}; nothing new to process",
                history.len()
            ));
        }
        let mut tape = Tape::inference(&self.params);
        let x = tape.constant(self.stack(&history[seen..])?);
        let out = self.temporal.forward_cached(&mut tape, x, seen, &mut cache)?;
        let n = self.num_tokens();
        let rows = tape.value(out).rows();
        let last: Vec<usize> = (rows - n..rows).collect();
        Ok((
            TemporalEmbedding {
                zt: tape.value(out).gather_rows(&last),
                frame_index: history.len(),
            },
            cache,
        ))
    }

    /// Full recompute without a cache; row block `f` is zt of frame `f+1`.
    pub fn temporal_full(&self, history: &[TokenGrid<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::inference(&self.params);
        let x = tape.constant(self.stack(history)?);
        let out = self.temporal.forward_clips(&mut tape, x, 1, history.len())?;
        Ok(tape.value(out).clone())
    }

    pub fn uncond_embedding(&self) -> Result<Tensor<T>> {
        let mut tape = Tape::inference(&self.params);
        let u = self.temporal.uncond(&mut tape)?;
        Ok(tape.value(u).clone())
    }

    fn canvas_net(&self) -> Result<&CanvasVit> {
        self.canvas
            .as_ref()
            .ok_or_else(|| crate::error::Error::InvalidArgument("model was built without a canvas".into()))
    }

    /// `g` canvas embeddings for frames `zt.frame_index .. + g`.
    pub fn canvas_forward(
        &self,
        zt: &TemporalEmbedding<T>,
        prev_frame: &TokenGrid<T>,
        g: usize,
    ) -> Result<Vec<CanvasEmbedding<T>>> {
        let net = self.canvas_net()?;
        self.check_grid(prev_frame, "previous frame")?;
        let mut tape = Tape::inference(&self.params);
        let z = tape.constant(zt.zt.clone());
        let p = tape.constant(prev_frame.tokens.clone());
        let outs = net.forward(&mut tape, z, p, 1, g)?;
        Ok(outs
            .into_iter()
            .enumerate()
            .map(|(k, v)| CanvasEmbedding {
                zs: tape.value(v).clone(),
                group_offset: k + 1,
            })
            .collect())
    }

    /// Token-space canvas (model space, `n x d_tok`).
    pub fn canvas_project(&self, zs: &CanvasEmbedding<T>, frame_index: usize) -> Result<TokenGrid<T>> {
        let net = self.canvas_net()?;
        let mut tape = Tape::inference(&self.params);
        let z = tape.constant(zs.zs.clone());
        let out = net.project(&mut tape, z)?;
        Ok(TokenGrid {
            tokens: tape.value(out).clone(),
            frame_index,
        })
    }

    /// Embeddings `z_j` for `mask_positions` (returned in ascending position
    /// order). `known` supplies token values at `known_positions`; the two
    /// sets must partition `0..n`. Without a canvas the masked rows start
    /// from the learnable mask vector.
    pub fn spatial_forward(
        &self,
        known: &TokenGrid<T>,
        known_positions: &[usize],
        canvas: Option<&CanvasEmbedding<T>>,
        zt: &TemporalEmbedding<T>,
        mask_positions: &[usize],
    ) -> Result<Tensor<T>> {
        let n = self.num_tokens();
        self.check_grid(known, "known tokens")?;
        let mut seen = vec![0u8; n];
        for &p in known_positions.iter().chain(mask_positions) {
            if p >= n {
                return invalid(format!("position {p} out of range for {n} tokens"));
            }
            seen[p] += 1;
        }
        if let Some(p) = seen.iter().position(|&c| c != 1) {
            return invalid(format!("known and masked positions must partition 0..{n}; position {p} is not covered exactly once"));
        }
        if mask_positions.is_empty() {
            return Ok(Tensor::zeros(&[0, self.dim()]));
        }
        let mut masked = vec![false; n];
        for &p in mask_positions {
            masked[p] = true;
        }
        let items = [SpatialItem {
            masked,
            canvas: canvas.is_some(),
        }];
        let mut tape = Tape::inference(&self.params);
        let context = tape.constant(zt.zt.clone());
        let tokens = tape.constant(known.tokens.clone());
        let canvas = canvas.map(|c| tape.constant(c.zs.clone()));
        let batch = SpatialBatch {
            context,
            tokens,
            canvas,
            items: &items,
            group: 1,
        };
        let z = self.spatial.forward(&mut tape, &batch)?;
        Ok(tape.value(z).clone())
    }

    /// Velocity at time `t` for each row of `x_t` given embeddings `z`.
    pub fn flow_velocity(&self, x_t: &Tensor<T>, t: f64, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference(&self.params);
        let zv = tape.constant(z.clone());
        let c = self.flow.condition(&mut tape, zv)?;
        let x = tape.constant(x_t.clone());
        let v = self.flow.velocity(&mut tape, x, &vec![t; x_t.rows()], c)?;
        Ok(tape.value(v).clone())
    }

    /// Euler integration from `x0 ~ N(0, I)` at `t = 0` to `t = 1`.
    pub fn flow_sample(&self, z: &Tensor<T>, steps: usize, rng: &mut RngStream) -> Result<Tensor<T>> {
        let x0 = rng.gaussian::<T>(&[z.rows(), self.token_dim()]);
        self.flow_integrate(x0, &[z], steps, |v| Ok(v[0].clone()))
    }

    /// Euler integration from `x0` where the velocity at each step is
    /// `combine` applied to the per-branch velocities, one branch per entry
    /// of `conds`. All branches share the same trajectory.
    pub fn flow_integrate<F>(&self, x0: Tensor<T>, conds: &[&Tensor<T>], steps: usize, combine: F) -> Result<Tensor<T>>
    where
        F: Fn(&[&Tensor<T>]) -> Result<Tensor<T>>,
    {
        if steps == 0 {
            return invalid("flow sampling needs at least one step");
        }
        if conds.is_empty() {
            return invalid("flow sampling needs a conditioning branch");
        }
        let m = x0.rows();
        let mut tape = Tape::inference(&self.params);
        let mut projected = Vec::with_capacity(conds.len());
        for z in conds {
            if z.rows() != m {
                return shape_err("flow_sample", format!("{} embeddings for {m} tokens", z.rows()));
            }
            let zv = tape.constant((*z).clone());
            projected.push(self.flow.condition(&mut tape, zv)?);
        }
        let dt = T::lit(1.0 / steps as f64);
        let mut x = x0;
        for s in 0..steps {
            let t = vec![s as f64 / steps as f64; m];
            let xv = tape.constant(x.clone());
            let mut vs = Vec::with_capacity(projected.len());
            for &c in &projected {
                vs.push(self.flow.velocity(&mut tape, xv, &t, c)?);
            }
            let vals: Vec<&Tensor<T>> = vs.iter().map(|&v| tape.value(v)).collect();
            let v = combine(&vals)?;
            x = x.zip_with(&v, "euler", |a, b| a + dt * b)?;
        }
        Ok(x)
    }
}
