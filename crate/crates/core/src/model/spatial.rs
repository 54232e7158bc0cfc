use crate::error::{invalid, shape_err, Result};
use crate::model::config::ModelConfig;
use crate::nn::layers::normal_init;
use crate::nn::{AttnSpec, Block, LayerNorm, Linear, MaskRule, Mlp, SelfAttention};
use crate::numerics::{ParamId, ParamStore, RngStream, Scalar, Tape, Tensor, Var};

/// Decoder block with shared attention and separate MLPs for
/// context/clean rows and canvas/mask rows.
#[derive(Clone, Debug)]
pub struct DualBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp_clean: Mlp,
    pub mlp_mask: Mlp,
}

impl DualBlock {
    fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let d = cfg.dim();
        let h = d * cfg.mlp_ratio;
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d)?,
            attn: SelfAttention::new(ps, &format!("{name}.attn"), d, cfg.heads, rng)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d)?,
            mlp_clean: Mlp::new(ps, &format!("{name}.mlp_clean"), d, h, d, rng)?,
            mlp_mask: Mlp::new(ps, &format!("{name}.mlp_mask"), d, h, d, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, spec: &AttnSpec, routes: &Routes) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let a = self.attn.forward(tape, h, spec)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, x)?;
        let m = match (routes.clean.is_empty(), routes.mask.is_empty()) {
            (false, false) => {
                let hc = tape.gather_rows(h, &routes.clean)?;
                let hm = tape.gather_rows(h, &routes.mask)?;
                let mc = self.mlp_clean.forward(tape, hc)?;
                let mm = self.mlp_mask.forward(tape, hm)?;
                let cat = tape.concat_rows(&[mc, mm])?;
                tape.gather_rows(cat, &routes.inverse)?
            }
            (false, true) => self.mlp_clean.forward(tape, h)?,
            _ => self.mlp_mask.forward(tape, h)?,
        };
        tape.add(x, m)
    }
}

/// Attention across the frames of a group at each token position.
#[derive(Clone, Debug)]
pub struct GroupTemporal {
    pub ln: LayerNorm,
    pub attn: SelfAttention,
}

struct Routes {
    clean: Vec<usize>,
    mask: Vec<usize>,
    inverse: Vec<usize>,
}

/// Which positions of one frame are still masked, and whether its masked
/// rows start from the canvas or from the learnable mask vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialItem {
    pub masked: Vec<bool>,
    pub canvas: bool,
}

impl SpatialItem {
    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Stacked inputs for `items.len()` frames (each `n` rows).
pub struct SpatialBatch<'a> {
    /// Conditioning context (zt or the unconditional embedding), `I*n x d`.
    pub context: Var,
    /// Token values, `I*n x d_tok`; rows at masked positions are ignored.
    pub tokens: Var,
    /// Canvas embeddings `I*n x d`, required when any item uses the canvas.
    pub canvas: Option<Var>,
    pub items: &'a [SpatialItem],
    /// Consecutive runs of this many items form one frame group.
    pub group: usize,
}

#[derive(Clone, Debug)]
pub struct SpatialMar {
    pub token_embed: Linear,
    pub pos: ParamId,
    pub ctx_embed: ParamId,
    pub canvas_in: Option<Linear>,
    pub mask_vec: ParamId,
    pub encoder: Vec<Block>,
    pub decoder: Vec<DualBlock>,
    pub group_layers: Vec<GroupTemporal>,
    pub group_every: usize,
    pub ln_out: LayerNorm,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
}

impl SpatialMar {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let (n, d) = (cfg.num_tokens(), cfg.dim());
        let token_embed = Linear::new(ps, "spatial.embed", cfg.token_dim(), d, rng)?;
        let pos = ps.add("spatial.pos", normal_init(rng, &[n, d], 0.02))?;
        let ctx_embed = ps.add("spatial.ctx", normal_init(rng, &[n, d], 0.02))?;
        let canvas_in = if cfg.use_canvas {
            Some(Linear::new(ps, "spatial.canvas_in", d, d, rng)?)
        } else {
            None
        };
        let mask_vec = ps.add("spatial.mask", normal_init(rng, &[d], 0.02))?;
        let encoder = (0..cfg.encoder_depth)
            .map(|l| Block::new(ps, &format!("spatial.enc{l}"), d, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.decoder_depth())
            .map(|l| DualBlock::new(ps, &format!("spatial.dec{l}"), cfg, rng))
            .collect::<Result<_>>()?;
        let group_layers = (0..cfg.group_layers())
            .map(|l| {
                Ok(GroupTemporal {
                    ln: LayerNorm::new(ps, &format!("spatial.group{l}.ln"), d)?,
                    attn: SelfAttention::new_inert(ps, &format!("spatial.group{l}.attn"), d, cfg.heads, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let ln_out = LayerNorm::new(ps, "spatial.ln", d)?;
        Ok(Self {
            token_embed,
            pos,
            ctx_embed,
            canvas_in,
            mask_vec,
            encoder,
            decoder,
            group_layers,
            group_every: cfg.group_temporal_every,
            ln_out,
            tokens: n,
            dim: d,
            heads: cfg.heads,
        })
    }

    /// Embeddings at every masked position, item by item in ascending
    /// position order, `sum(masked) x d`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, batch: &SpatialBatch<'_>) -> Result<Var> {
        let n = self.tokens;
        let items = batch.items;
        let ni = items.len();
        if ni == 0 || batch.group == 0 || ni % batch.group != 0 {
            return invalid(format!("{ni} spatial items do not split into groups of {}", batch.group));
        }
        for v in [batch.context, batch.tokens].into_iter().chain(batch.canvas) {
            if tape.value(v).rows() != ni * n {
                return shape_err(
                    "spatial_forward",
                    format!("{} rows for {ni} items of {n} tokens", tape.value(v).rows()),
                );
            }
        }
        if let Some(bad) = items.iter().position(|it| it.masked.len() != n) {
            return shape_err("spatial_forward", format!("item {bad} mask has wrong length"));
        }
        let wants_canvas = items.iter().any(|it| it.canvas);
        if wants_canvas && (batch.canvas.is_none() || self.canvas_in.is_none()) {
            return invalid("canvas requested but not available");
        }

        let pos_all: Vec<usize> = (0..ni).flat_map(|_| 0..n).collect();
        let ctx_param = tape.param(self.ctx_embed);
        let ctx_rows = tape.gather_rows(ctx_param, &pos_all)?;
        let ctx = tape.add(batch.context, ctx_rows)?;
        let pos_param = tape.param(self.pos);
        let pos_rows = tape.gather_rows(pos_param, &pos_all)?;
        let tok = self.token_embed.forward(tape, batch.tokens)?;
        let tok = tape.add(tok, pos_rows)?;

        // Encoder: per item, context rows followed by its clean tokens.
        let src = tape.concat_rows(&[ctx, tok])?;
        let mut enc_idx = Vec::new();
        let mut enc_lens = Vec::with_capacity(ni);
        let mut enc_start = Vec::with_capacity(ni);
        let mut clean_row = vec![usize::MAX; ni * n];
        for (i, it) in items.iter().enumerate() {
            enc_start.push(enc_idx.len());
            enc_idx.extend(i * n..(i + 1) * n);
            for j in 0..n {
                if !it.masked[j] {
                    clean_row[i * n + j] = enc_idx.len();
                    enc_idx.push(ni * n + i * n + j);
                }
            }
            enc_lens.push(enc_idx.len() - enc_start[i]);
        }
        let mut enc = tape.gather_rows(src, &enc_idx)?;
        let enc_spec = AttnSpec::blocks(&enc_lens, self.heads, MaskRule::Full);
        for b in &self.encoder {
            enc = b.forward(tape, enc, &enc_spec)?;
        }
        let e_rows = enc_idx.len();

        // Decoder: per item, context rows then all n positions in order.
        let mut pieces = vec![enc];
        let canvas_base = e_rows;
        if wants_canvas {
            let proj = self.canvas_in.as_ref().expect("checked above");
            let c = proj.forward(tape, batch.canvas.expect("checked above"))?;
            pieces.push(tape.add(c, pos_rows)?);
        }
        let mask_base = e_rows + if wants_canvas { ni * n } else { 0 };
        let mv = tape.param(self.mask_vec);
        pieces.push(tape.add_row(pos_param, mv)?);
        let dec_src = tape.concat_rows(&pieces)?;

        let mut dec_idx = Vec::with_capacity(ni * 2 * n);
        let mut routes = Routes {
            clean: Vec::new(),
            mask: Vec::new(),
            inverse: vec![0; ni * 2 * n],
        };
        let mut masked_rows = Vec::new();
        for (i, it) in items.iter().enumerate() {
            for j in 0..n {
                routes.clean.push(dec_idx.len());
                dec_idx.push(enc_start[i] + j);
            }
            for j in 0..n {
                if it.masked[j] {
                    masked_rows.push(dec_idx.len());
                    routes.mask.push(dec_idx.len());
                    dec_idx.push(if it.canvas {
                        canvas_base + i * n + j
                    } else {
                        mask_base + j
                    });
                } else {
                    routes.clean.push(dec_idx.len());
                    dec_idx.push(clean_row[i * n + j]);
                }
            }
        }
        for (k, &r) in routes.clean.iter().chain(routes.mask.iter()).enumerate() {
            routes.inverse[r] = k;
        }
        let mut x = tape.gather_rows(dec_src, &dec_idx)?;
        let dec_spec = AttnSpec::uniform_blocks(ni, 2 * n, self.heads, MaskRule::Full);
        let mut applied = 0;
        for (l, b) in self.decoder.iter().enumerate() {
            x = b.forward(tape, x, &dec_spec, &routes)?;
            if (l + 1) % self.group_every == 0 && applied < self.group_layers.len() {
                x = self.group_layer(tape, applied, x, ni, batch.group)?;
                applied += 1;
            }
        }
        while applied < self.group_layers.len() {
            x = self.group_layer(tape, applied, x, ni, batch.group)?;
            applied += 1;
        }
        if masked_rows.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[0, self.dim])));
        }
        let z = tape.gather_rows(x, &masked_rows)?;
        self.ln_out.forward(tape, z)
    }

    fn group_layer<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        layer: usize,
        x: Var,
        ni: usize,
        g: usize,
    ) -> Result<Var> {
        let n = self.tokens;
        let q = ni / g;
        let mut idx = Vec::with_capacity(ni * n);
        for qi in 0..q {
            for j in 0..n {
                for gi in 0..g {
                    idx.push((qi * g + gi) * 2 * n + n + j);
                }
            }
        }
        let gl = &self.group_layers[layer];
        let y = tape.gather_rows(x, &idx)?;
        let h = gl.ln.forward(tape, y)?;
        let spec = AttnSpec::uniform_blocks(q * n, g, self.heads, MaskRule::Full);
        let a = gl.attn.forward(tape, h, &spec)?;
        let zero = tape.constant(Tensor::zeros(&[1, self.dim]));
        let padded = tape.concat_rows(&[a, zero])?;
        let zero_row = ni * n;
        let map: Vec<usize> = (0..ni * 2 * n)
            .map(|r| {
                let (i, local) = (r / (2 * n), r % (2 * n));
                if local < n {
                    zero_row
                } else {
                    ((i / g) * n + local - n) * g + i % g
                }
            })
            .collect();
        let delta = tape.gather_rows(padded, &map)?;
        tape.add(x, delta)
    }
}
