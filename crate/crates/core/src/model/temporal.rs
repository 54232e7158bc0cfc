use crate::error::{invalid, shape_err, Result};
use crate::model::config::ModelConfig;
use crate::nn::layers::normal_init;
use crate::nn::{sinusoidal_pe, AttnSpec, Block, KvCache, LayerNorm, Linear, MaskRule};
use crate::numerics::{ParamId, ParamStore, RngStream, Scalar, Tape, Tensor, Var};

/// Frame-causal transformer over the token history. The output rows of
/// frame `i-1` are the temporal embedding `zt(i)` of frame `i`.
#[derive(Clone, Debug)]
pub struct TemporalVit {
    pub embed: Linear,
    pub pos: ParamId,
    pub frame_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln: LayerNorm,
    /// Learnable vector standing in for zt when the temporal condition is
    /// dropped.
    pub uncond: ParamId,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_frames: usize,
}

impl TemporalVit {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let (n, d) = (cfg.num_tokens(), cfg.dim());
        let embed = Linear::new(ps, "temporal.embed", cfg.token_dim(), d, rng)?;
        let pos = ps.add("temporal.pos", normal_init(rng, &[n, d], 0.02))?;
        let frame_emb = ps.add("temporal.frame", normal_init(rng, &[cfg.max_frames, d], 0.02))?;
        let blocks = (0..cfg.temporal.layers)
            .map(|l| Block::new(ps, &format!("temporal.block{l}"), d, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<_>>()?;
        let ln = LayerNorm::new(ps, "temporal.ln", d)?;
        let uncond = ps.add("temporal.uncond", normal_init(rng, &[d], 0.02))?;
        Ok(Self {
            embed,
            pos,
            frame_emb,
            blocks,
            ln,
            uncond,
            tokens: n,
            dim: d,
            heads: cfg.heads,
            max_frames: cfg.max_frames,
        })
    }

    fn embed_rows<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var, frame_ids: &[usize]) -> Result<Var> {
        let n = self.tokens;
        if tape.value(tokens).rows() != frame_ids.len() * n {
            return shape_err(
                "temporal_forward",
                format!("{} token rows for {} frames", tape.value(tokens).rows(), frame_ids.len()),
            );
        }
        if let Some(&f) = frame_ids.iter().find(|&&f| f >= self.max_frames) {
            return invalid(format!("frame index {f} exceeds max_frames {}", self.max_frames));
        }
        let pos_idx: Vec<usize> = frame_ids.iter().flat_map(|_| 0..n).collect();
        let frame_idx: Vec<usize> = frame_ids.iter().flat_map(|&f| std::iter::repeat(f).take(n)).collect();
        let x = self.embed.forward(tape, tokens)?;
        let pos = tape.param(self.pos);
        let pos = tape.gather_rows(pos, &pos_idx)?;
        let fe = tape.param(self.frame_emb);
        let fe = tape.gather_rows(fe, &frame_idx)?;
        let x = tape.add(x, pos)?;
        tape.add(x, fe)
    }

    /// Full hybrid-masked pass over `clips` clips of `frames` frames each,
    /// stacked clip-major in `tokens`. Row block `(c, f)` of the result is
    /// zt of frame `f + 1` in clip `c`.
    pub fn forward_clips<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: Var,
        clips: usize,
        frames: usize,
    ) -> Result<Var> {
        let ids: Vec<usize> = (0..clips).flat_map(|_| 0..frames).collect();
        let mut x = self.embed_rows(tape, tokens, &ids)?;
        let spec = AttnSpec::uniform_blocks(
            clips,
            frames * self.tokens,
            self.heads,
            MaskRule::Hybrid {
                tokens_per_frame: self.tokens,
                q_offset: 0,
                k_offset: 0,
            },
        );
        for b in &self.blocks {
            x = b.forward(tape, x, &spec)?;
        }
        self.ln.forward(tape, x)
    }

    /// Runs frames `first..first+k` (stacked in `tokens`) against the cache
    /// and returns their output rows.
    pub fn forward_cached<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: Var,
        first: usize,
        cache: &mut KvCache<T>,
    ) -> Result<Var> {
        let n = self.tokens;
        let k = tape.value(tokens).rows() / n;
        if cache.layers.len() != self.blocks.len() || cache.tokens_per_frame != n {
            return invalid("KV cache does not match the temporal network");
        }
        if cache.len() != first * n {
            return invalid(format!(
                "cache holds {} frames but the new block starts at frame {first}",
                cache.frames()
            ));
        }
        let ids: Vec<usize> = (first..first + k).collect();
        let mut x = self.embed_rows(tape, tokens, &ids)?;
        for (b, layer) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            x = b.forward_cached(tape, x, layer, first * n, n)?;
        }
        self.ln.forward(tape, x)
    }

    pub fn new_cache<T: Scalar>(&self) -> KvCache<T> {
        KvCache::new(self.blocks.len(), self.dim, self.tokens)
    }

    /// Unconditional temporal embedding: the learnable vector on every row
    /// plus a sinusoidal code of the token position, `n x d`.
    pub fn uncond<T: Scalar>(&self, tape: &mut Tape<'_, T>) -> Result<Var> {
        let u = tape.param(self.uncond);
        let u = tape.repeat_rows(u, self.tokens)?;
        let pe = tape.constant(sinusoidal_pe::<T>(self.tokens, self.dim)?);
        tape.add(u, pe)
    }
}

/// zt for one frame index.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalEmbedding<T> {
    pub zt: Tensor<T>,
    pub frame_index: usize,
}
