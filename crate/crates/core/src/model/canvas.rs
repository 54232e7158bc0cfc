use crate::error::{invalid, Result};
use crate::model::config::ModelConfig;
use crate::nn::layers::normal_init;
use crate::nn::{AttnSpec, Block, LayerNorm, Linear, MaskRule, Mlp};
use crate::numerics::{ParamId, ParamStore, RngStream, Scalar, Tape, Tensor, Var};

/// Predicts coarse next-frame embeddings from zt and the previous frame.
/// The trunk is shared; each of the `G` heads targets one future offset.
#[derive(Clone, Debug)]
pub struct CanvasVit {
    pub prev_embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln: LayerNorm,
    pub heads: Vec<Mlp>,
    /// Linear map from canvas embeddings back to token space.
    pub project: Linear,
    pub tokens: usize,
    pub attn_heads: usize,
}

impl CanvasVit {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let (n, d) = (cfg.num_tokens(), cfg.dim());
        let prev_embed = Linear::new(ps, "canvas.prev", cfg.token_dim(), d, rng)?;
        let pos = ps.add("canvas.pos", normal_init(rng, &[n, d], 0.02))?;
        let blocks = (0..cfg.canvas.layers)
            .map(|l| Block::new(ps, &format!("canvas.block{l}"), d, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<_>>()?;
        let ln = LayerNorm::new(ps, "canvas.ln", d)?;
        let heads = (0..cfg.group_size)
            .map(|g| Mlp::new(ps, &format!("canvas.head{g}"), d, d, d, rng))
            .collect::<Result<_>>()?;
        let project = Linear::new(ps, "canvas.project", d, cfg.token_dim(), rng)?;
        Ok(Self {
            prev_embed,
            pos,
            blocks,
            ln,
            heads,
            project,
            tokens: n,
            attn_heads: cfg.heads,
        })
    }

    /// `zt` and `prev` hold `m` frames stacked row-wise (`m*n` rows). Returns
    /// one `m*n x d` embedding per requested head.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        zt: Var,
        prev: Var,
        m: usize,
        g: usize,
    ) -> Result<Vec<Var>> {
        if g == 0 || g > self.heads.len() {
            return invalid(format!(
                "requested {g} canvas heads, model has {}",
                self.heads.len()
            ));
        }
        let pos_idx: Vec<usize> = (0..m).flat_map(|_| 0..self.tokens).collect();
        let p = self.prev_embed.forward(tape, prev)?;
        let x = tape.add(zt, p)?;
        let pos = tape.param(self.pos);
        let pos = tape.gather_rows(pos, &pos_idx)?;
        let mut x = tape.add(x, pos)?;
        let spec = AttnSpec::uniform_blocks(m, self.tokens, self.attn_heads, MaskRule::Full);
        for b in &self.blocks {
            x = b.forward(tape, x, &spec)?;
        }
        let trunk = self.ln.forward(tape, x)?;
        self.heads[..g].iter().map(|h| h.forward(tape, trunk)).collect()
    }

    pub fn project<T: Scalar>(&self, tape: &mut Tape<'_, T>, zs: Var) -> Result<Var> {
        self.project.forward(tape, zs)
    }
}

/// zs for one future offset (`group_offset` counts from 1).
#[derive(Clone, Debug, PartialEq)]
pub struct CanvasEmbedding<T> {
    pub zs: Tensor<T>,
    pub group_offset: usize,
}
