use crate::error::{invalid, Result};
use crate::model::config::ModelConfig;
use crate::nn::{time_features, LayerNorm, Linear, Mlp};
use crate::numerics::{ParamStore, RngStream, Scalar, Tape, Var};

const TIME_DIM: usize = 64;

/// Per-token velocity field `v(x_t, t | z)` for flow matching.
#[derive(Clone, Debug)]
pub struct FlowHead {
    pub x_in: Linear,
    pub cond_in: Linear,
    pub t_in: Linear,
    pub blocks: Vec<(LayerNorm, Mlp)>,
    pub ln_out: LayerNorm,
    pub out: Linear,
    pub token_dim: usize,
}

impl FlowHead {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let w = cfg.flow.dim;
        let dt = cfg.token_dim();
        let x_in = Linear::new(ps, "flow.x", dt, w, rng)?;
        let cond_in = Linear::new(ps, "flow.cond", cfg.dim(), w, rng)?;
        let t_in = Linear::new(ps, "flow.t", TIME_DIM, w, rng)?;
        let blocks = (0..cfg.flow.layers)
            .map(|l| {
                Ok((
                    LayerNorm::new(ps, &format!("flow.block{l}.ln"), w)?,
                    Mlp::new(ps, &format!("flow.block{l}.mlp"), w, w, w, rng)?,
                ))
            })
            .collect::<Result<_>>()?;
        let ln_out = LayerNorm::new(ps, "flow.ln", w)?;
        let out = Linear::new(ps, "flow.out", w, dt, rng)?;
        Ok(Self {
            x_in,
            cond_in,
            t_in,
            blocks,
            ln_out,
            out,
            token_dim: dt,
        })
    }

    /// Projects token embeddings once; the result is reused at every step.
    pub fn condition<T: Scalar>(&self, tape: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        self.cond_in.forward(tape, z)
    }

    /// Velocity for each row of `x_t`, with `t[r]` the time of row `r`.
    pub fn velocity<T: Scalar>(&self, tape: &mut Tape<'_, T>, x_t: Var, t: &[f64], cond: Var) -> Result<Var> {
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return invalid(format!("flow time {bad} outside [0, 1]"));
        }
        if t.len() != tape.value(x_t).rows() {
            return invalid(format!("{} times for {} tokens", t.len(), tape.value(x_t).rows()));
        }
        let tf = tape.constant(time_features::<T>(t, TIME_DIM)?);
        let hx = self.x_in.forward(tape, x_t)?;
        let ht = self.t_in.forward(tape, tf)?;
        let h = tape.add(hx, ht)?;
        let mut h = tape.add(h, cond)?;
        for (ln, mlp) in &self.blocks {
            let a = ln.forward(tape, h)?;
            let a = mlp.forward(tape, a)?;
            h = tape.add(h, a)?;
        }
        let h = self.ln_out.forward(tape, h)?;
        self.out.forward(tape, h)
    }
}
