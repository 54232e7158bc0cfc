//! Parameterized building blocks. Structs hold only [`ParamId`]s; forward
//! passes are generic over the scalar type of the bound store.

use crate::error::Result;
use crate::nn::attention::{attend_with_cache, attention_var, AttnSpec, LayerKv};
use crate::numerics::{CustomOp, ParamId, ParamStore, RngStream, Scalar, Tape, Tensor, Var};

fn xavier<T: Scalar>(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.uniform(-limit, limit)))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape")
}

/// Normal init with the given std, used for embeddings.
pub fn normal_init<T: Scalar>(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor<T> {
    rng.gaussian::<T>(shape).scale(T::lit(std))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let w = ps.add(format!("{name}.w"), xavier(rng, in_dim, out_dim))?;
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        })
    }

    /// Weight only; used where a bias is redundant (attention keys).
    pub fn no_bias<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let w = ps.add(format!("{name}.w"), xavier(rng, in_dim, out_dim))?;
        Ok(Self {
            w,
            b: None,
            in_dim,
            out_dim,
        })
    }

    /// Zero-initialized weights and bias; the layer starts as a constant 0.
    pub fn zeros<T: Scalar>(ps: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(&[in_dim, out_dim]))?;
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

struct LayerNormOp<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for LayerNormOp<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let n = x.cols();
        let nf = T::lit(n as f64);
        let mut dx = Tensor::zeros(x.shape());
        let mut dg = vec![T::zero(); n];
        let mut db = vec![T::zero(); n];
        for r in 0..x.rows() {
            let gy = grad.row(r);
            let xh = &self.xhat[r * n..(r + 1) * n];
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for j in 0..n {
                let d = gy[j] * gamma.data()[j];
                sum_d += d;
                sum_dx += d * xh[j];
                dg[j] += gy[j] * xh[j];
                db[j] += gy[j];
            }
            if needs[0] {
                let rs = self.rstd[r];
                let out = dx.row_mut(r);
                for j in 0..n {
                    let d = gy[j] * gamma.data()[j];
                    out[j] = rs * (d - sum_d / nf - xh[j] * sum_dx / nf);
                }
            }
        }
        Ok(vec![
            Some(dx),
            Some(Tensor::new(inputs[1].shape().to_vec(), dg)?),
            Some(Tensor::new(inputs[2].shape().to_vec(), db)?),
        ])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = ps.add(format!("{name}.g"), Tensor::full(&[dim], T::one()))?;
        let beta = ps.add(format!("{name}.b"), Tensor::zeros(&[dim]))?;
        Ok(Self {
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        layer_norm(tape, x, g, b, self.eps)
    }
}

/// Row-wise layer normalization with affine `gamma`/`beta`.
pub fn layer_norm<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let xv = tape.value(x);
    let (rows, n) = (xv.rows(), xv.cols());
    let (gv, bv) = (tape.value(gamma), tape.value(beta));
    if gv.len() != n || bv.len() != n {
        return crate::error::shape_err("layer_norm", format!("width {n}, gamma {:?}", gv.shape()));
    }
    let nf = T::lit(n as f64);
    let eps = T::lit(eps);
    let mut out = Vec::with_capacity(rows * n);
    let mut xhat = Vec::with_capacity(rows * n);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = xv.row(r);
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..n {
            let h = (row[j] - mean) * rs;
            xhat.push(h);
            out.push(h * gv.data()[j] + bv.data()[j]);
        }
    }
    let out = Tensor::new(xv.shape().to_vec(), out)?;
    tape.custom(&[x, gamma, beta], out, Box::new(LayerNormOp { xhat, rstd }))
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, out, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::no_bias(ps, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    /// Same as `new` but with a zero output projection, so the residual
    /// branch is initially inert.
    pub fn new_inert<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::no_bias(ps, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::zeros(ps, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, spec: &AttnSpec) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let a = attention_var(tape, q, k, v, spec)?;
        self.o.forward(tape, a)
    }

    /// Inference-only pass for a block of new tokens against a KV cache.
    pub fn forward_cached<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        cache: &mut LayerKv<T>,
        start: usize,
        tokens_per_frame: usize,
    ) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let a = attend_with_cache(
            cache,
            start,
            tape.value(q),
            tape.value(k),
            tape.value(v),
            self.heads,
            tokens_per_frame,
        )?;
        let a = tape.constant(a);
        self.o.forward(tape, a)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            attn: SelfAttention::new(ps, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, spec: &AttnSpec) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let a = self.attn.forward(tape, h, spec)?;
        let x = tape.add(x, a)?;
        self.mlp_residual(tape, x)
    }

    pub fn forward_cached<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        cache: &mut LayerKv<T>,
        start: usize,
        tokens_per_frame: usize,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let a = self.attn.forward_cached(tape, h, cache, start, tokens_per_frame)?;
        let x = tape.add(x, a)?;
        self.mlp_residual(tape, x)
    }

    fn mlp_residual<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln2.forward(tape, x)?;
        let m = self.mlp.forward(tape, h)?;
        tape.add(x, m)
    }
}
