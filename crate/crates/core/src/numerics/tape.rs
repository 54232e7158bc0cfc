//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends a node holding its output value; `backward` walks the
//! nodes once in reverse order. Blocks with hand-written vector-Jacobian
//! products (attention, layer norm) plug in through [`CustomOp`].

use crate::error::{shape_err, Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::scalar::{gemm, Scalar};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op whose backward pass is supplied by the caller.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input; entries where `needs[i]` is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sin(Var),
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    RepeatRows(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Sin(..) => "sin",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Records ops for a single forward pass. Parameters are bound lazily from
/// an optional [`ParamStore`]; each is materialized on the tape at most once.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParamStore<T>>,
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            bound: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            bound: vec![None; store.len()],
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires grad.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::with_params(store)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let needs_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter from the attached store.
    ///
    /// Panics when the tape was created without a store.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let v = self.leaf(store.get(id).clone(), true);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> Option<&'p ParamStore<T>> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node,
            });
        }
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(node))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, T::zero(), &mut out);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `x * w + b` with `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        if wv.rows() != k {
            return shape_err("linear", format!("{:?} x {:?}", xv.shape(), wv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return shape_err("linear", format!("bias {:?} for width {n}", bv.shape()));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(m, k, n, xv.data(), false, wv.data(), false, beta, &mut out);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::matrix(m, n, out)?, Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if rv.len() != c {
            return shape_err("add_row", format!("{:?} + {:?}", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        for r in out.data_mut().chunks_exact_mut(c) {
            for (x, &y) in r.iter_mut().zip(rv.data()) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::sin);
        self.push(out, Op::Sin(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.rows() {
            return shape_err("slice_rows", format!("{start}..{end} of {} rows", av.rows()));
        }
        let idx: Vec<usize> = (start..end).collect();
        let out = av.gather_rows(&idx);
        self.push(out, Op::SliceRows { a, start }, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return shape_err("gather_rows", format!("row {bad} of {}", av.rows()));
        }
        let out = av.gather_rows(idx);
        self.push(
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    /// Broadcasts a single row to `times` rows.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.len();
        let mut data = Vec::with_capacity(c * times);
        for _ in 0..times {
            data.extend_from_slice(av.data());
        }
        let out = Tensor::matrix(times, c, data)?;
        self.push(out, Op::RepeatRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return shape_err("mean", "empty tensor");
        }
        let s = av.sum() / T::lit(av.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq)
    }

    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !g.is_finite() {
                return Err(Error::NonFiniteGrad {
                    op: node.op.name(),
                    node: i,
                });
            }
            self.backward_node(node, &g, &mut grads)?;
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGrad {
                        op: self.nodes[i].op.name(),
                        node: i,
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient for every parameter of the attached store, zero where the
    /// parameter did not participate.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        let store = self.store.expect("tape has no parameter store");
        store
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, T::zero(), &mut da);
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, T::zero(), &mut db);
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, wv.data(), true, T::zero(), &mut dx);
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    gemm(k, m, n, xv.data(), true, g.data(), false, T::zero(), &mut dw);
                    accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = column_sums(g, n);
                        accumulate(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, reshaped(g, self.value(*a))?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, reshaped(g, self.value(*b))?);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, reshaped(g, self.value(*a))?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, reshaped(&g.scale(-T::one()), self.value(*b))?);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = g.zip_with(bv, "mul_grad", |x, y| x * y)?;
                    accumulate(grads, *a, reshaped(&da, av)?);
                }
                if self.wants(*b) {
                    let db = g.zip_with(av, "mul_grad", |x, y| x * y)?;
                    accumulate(grads, *b, reshaped(&db, bv)?);
                }
            }
            Op::AddRow(a, r) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*r) {
                    let rv = self.value(*r);
                    let dr = column_sums(g, rv.len());
                    accumulate(grads, *r, Tensor::new(rv.shape().to_vec(), dr)?);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.scale(*c));
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let da = g.zip_with(self.value(*a), "gelu_grad", |gy, x| gy * gelu_grad(x))?;
                    accumulate(grads, *a, da);
                }
            }
            Op::Sin(a) => {
                if self.wants(*a) {
                    let da = g.zip_with(self.value(*a), "sin_grad", |gy, x| gy * x.cos())?;
                    accumulate(grads, *a, da);
                }
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let r = pv.rows();
                    if self.wants(*p) {
                        let idx: Vec<usize> = (row..row + r).collect();
                        let dp = g.gather_rows(&idx);
                        accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), dp.into_data())?);
                    }
                    row += r;
                }
            }
            Op::SliceRows { a, start } => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut da = Tensor::zeros(av.shape());
                    let off = start * c;
                    da.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                    accumulate(grads, *a, da);
                }
            }
            Op::GatherRows { a, idx } => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let mut da = Tensor::zeros(av.shape());
                    for (r, &src) in idx.iter().enumerate() {
                        for (x, &y) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::RepeatRows(a) => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let da = column_sums(g, av.len());
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g.item()));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let s = g.item() / T::lit(av.len() as f64);
                    accumulate(grads, *a, Tensor::full(av.shape(), s));
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, reshaped(g, self.value(*a))?);
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.wants(v)).collect();
                let out = op.backward(&vals, &node.value, g, &needs)?;
                for ((v, need), dv) in inputs.iter().zip(&needs).zip(out) {
                    if let (true, Some(dv)) = (need, dv) {
                        if dv.len() != self.value(*v).len() {
                            return shape_err(op.name(), "backward produced wrong gradient size");
                        }
                        accumulate(grads, *v, dv);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (x, &y) in existing.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn reshaped<T: Scalar>(g: &Tensor<T>, like: &Tensor<T>) -> Result<Tensor<T>> {
    g.clone().reshape(like.shape())
}

fn column_sums<T: Scalar>(g: &Tensor<T>, width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for r in g.data().chunks_exact(width) {
        for (o, &x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x)
}
