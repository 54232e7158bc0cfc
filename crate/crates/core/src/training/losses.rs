use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::model::FlowHead;
use crate::nn::TokenGrid;
use crate::numerics::{RngStream, Scalar, Tape, Tensor, Var};

/// Mean over tokens of the squared L2 distance between prediction and
/// target rows.
pub fn canvas_loss<T: Scalar>(pred: &TokenGrid<T>, target: &TokenGrid<T>) -> Result<f64> {
    if pred.tokens.shape() != target.tokens.shape() {
        return shape_err(
            "canvas_loss",
            format!("{:?} vs {:?}", pred.tokens.shape(), target.tokens.shape()),
        );
    }
    let d = pred.tokens.sub(&target.tokens)?;
    let ss: f64 = d.data().iter().map(|x| x.as_f64().powi(2)).sum();
    Ok(ss / pred.num_tokens().max(1) as f64)
}

/// Tape version of [`canvas_loss`] over `rows` token rows.
pub fn canvas_loss_var<T: Scalar>(tape: &mut Tape<'_, T>, pred: Var, target: Var) -> Result<Var> {
    let rows = tape.value(pred).rows();
    if tape.value(pred).shape() != tape.value(target).shape() {
        return shape_err(
            "canvas_loss",
            format!("{:?} vs {:?}", tape.value(pred).shape(), tape.value(target).shape()),
        );
    }
    let d = tape.sub(pred, target)?;
    let ss = tape.sum_squares(d)?;
    tape.scale(ss, T::lit(1.0 / rows.max(1) as f64))
}

/// Inputs of one flow-matching term: noise `x0`, per-row times `t`.
#[derive(Clone, Debug)]
pub struct FlowDraw<T> {
    pub x0: Tensor<T>,
    pub t: Vec<f64>,
}

impl<T: Scalar> FlowDraw<T> {
    pub fn sample(rows: usize, dim: usize, rng: &mut RngStream) -> Self {
        let x0 = rng.gaussian(&[rows, dim]);
        let t = (0..rows).map(|_| rng.uniform(0.0, 1.0)).collect();
        Self { x0, t }
    }
}

/// Per-row squared velocity error `||v(x_t, t | z) - (x1 - x0)||^2` with
/// `x_t = (1 - t) x0 + t x1`, weighted by `weights[r]` and summed.
pub fn flow_matching_loss_var<T: Scalar>(
    tape: &mut Tape<'_, T>,
    head: &FlowHead,
    x1: &Tensor<T>,
    z: Var,
    draw: &FlowDraw<T>,
    weights: &[f64],
) -> Result<Var> {
    let (rows, dim) = (x1.rows(), x1.cols());
    if draw.x0.shape() != x1.shape() || draw.t.len() != rows || weights.len() != rows {
        return shape_err("flow_matching_loss", format!("{rows} targets vs draws/weights"));
    }
    let mut xt = Vec::with_capacity(rows * dim);
    let mut target = Vec::with_capacity(rows * dim);
    let mut w = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        let t = T::lit(draw.t[r]);
        let sw = T::lit(weights[r].sqrt());
        for (&a, &b) in draw.x0.row(r).iter().zip(x1.row(r)) {
            xt.push((T::one() - t) * a + t * b);
            target.push(b - a);
            w.push(sw);
        }
    }
    let xt = tape.constant(Tensor::matrix(rows, dim, xt)?);
    let target = tape.constant(Tensor::matrix(rows, dim, target)?);
    let w = tape.constant(Tensor::matrix(rows, dim, w)?);
    let cond = head.condition(tape, z)?;
    let v = head.velocity(tape, xt, &draw.t, cond)?;
    let d = tape.sub(v, target)?;
    let d = tape.mul(d, w)?;
    tape.sum_squares(d)
}

/// Mean flow-matching loss over the rows of `x1` with fresh draws.
pub fn flow_matching_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    head: &FlowHead,
    x1: &Tensor<T>,
    z: Var,
    rng: &mut RngStream,
) -> Result<Var> {
    let draw = FlowDraw::sample(x1.rows(), x1.cols(), rng);
    let w = vec![1.0 / x1.rows().max(1) as f64; x1.rows()];
    flow_matching_loss_var(tape, head, x1, z, &draw, &w)
}

/// Training masking ratio is drawn from `U(0.5, 1)`.
pub const MASK_RATIO_RANGE: (f64, f64) = (0.5, 1.0);

/// Uniformly random subset of `0..n` of size `round(rho * n)` with
/// `rho ~ U(0.5, 1)`, returned sorted.
pub fn sample_mask_set(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let rho = rng.uniform(MASK_RATIO_RANGE.0, MASK_RATIO_RANGE.1);
    mask_set_with_ratio(n, rho, rng)
}

pub fn mask_set_with_ratio(n: usize, rho: f64, rng: &mut RngStream) -> Vec<usize> {
    let k = ((rho * n as f64).round() as usize).clamp(1, n.max(1)).min(n);
    let mut perm = crate::generation::sample_permutation(n, rng);
    perm.truncate(k);
    perm.sort_unstable();
    perm
}

/// Which conditions are replaced for one training sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutFlags {
    /// Canvas replaced by the learnable mask vector.
    pub drop_spatial: bool,
    /// zt replaced by the unconditional embedding.
    pub drop_temporal: bool,
}

impl DropoutFlags {
    pub const P_SPATIAL_ONLY: f64 = 0.05;
    pub const P_TEMPORAL_ONLY: f64 = 0.05;
    pub const P_BOTH: f64 = 0.05;

    pub fn sample(rng: &mut RngStream) -> Self {
        let u = rng.uniform(0.0, 1.0);
        let a = Self::P_SPATIAL_ONLY;
        let b = a + Self::P_TEMPORAL_ONLY;
        let c = b + Self::P_BOTH;
        Self {
            drop_spatial: u < a || (b..c).contains(&u),
            drop_temporal: (a..c).contains(&u),
        }
    }
}
