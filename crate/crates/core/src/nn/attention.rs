//! Multi-head scaled dot-product attention over row segments, with a
//! hand-written backward pass and an append-only key/value cache.

use std::sync::Arc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::mask::{AttentionMask, MaskRule};
use crate::numerics::{gemm, CustomOp, Scalar, Tape, Tensor, Var};

/// One independent attention problem: queries `q_start..q_start+q_len`
/// attend to keys `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub heads: usize,
    pub segments: Vec<Segment>,
    pub rule: MaskRule,
}

impl AttnSpec {
    pub fn single(q_len: usize, k_len: usize, heads: usize, rule: MaskRule) -> Self {
        Self {
            heads,
            segments: vec![Segment {
                q_start: 0,
                q_len,
                k_start: 0,
                k_len,
            }],
            rule,
        }
    }

    /// Self-attention over consecutive row blocks of the given lengths.
    pub fn blocks(lens: &[usize], heads: usize, rule: MaskRule) -> Self {
        let mut start = 0;
        let segments = lens
            .iter()
            .map(|&len| {
                let s = Segment {
                    q_start: start,
                    q_len: len,
                    k_start: start,
                    k_len: len,
                };
                start += len;
                s
            })
            .collect();
        Self {
            heads,
            segments,
            rule,
        }
    }

    pub fn uniform_blocks(count: usize, len: usize, heads: usize, rule: MaskRule) -> Self {
        Self::blocks(&vec![len; count], heads, rule)
    }
}

fn head_slice<T: Scalar>(x: &Tensor<T>, start: usize, len: usize, head: usize, dh: usize) -> Vec<T> {
    let d = x.cols();
    let mut out = Vec::with_capacity(len * dh);
    for r in start..start + len {
        let off = r * d + head * dh;
        out.extend_from_slice(&x.data()[off..off + dh]);
    }
    out
}

fn validate<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, spec: &AttnSpec) -> Result<usize> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d {
        return shape_err(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        );
    }
    if k.rows() != v.rows() {
        return shape_err("attention", "keys and values differ in length");
    }
    if spec.heads == 0 || d % spec.heads != 0 {
        return shape_err("attention", format!("dim {d} not divisible by {} heads", spec.heads));
    }
    for s in &spec.segments {
        if s.q_start + s.q_len > q.rows() || s.k_start + s.k_len > k.rows() {
            return shape_err("attention", format!("segment {s:?} out of range"));
        }
    }
    Ok(d / spec.heads)
}

/// Forward kernel. Returns the output and, when `save` is set, the softmax
/// probabilities per (segment, head) for the backward pass.
fn forward_kernel<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &AttnSpec,
    save: bool,
) -> Result<(Tensor<T>, Vec<Vec<T>>)> {
    let dh = validate(q, k, v, spec)?;
    let d = q.cols();
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut out = Tensor::zeros(&[q.rows(), d]);
    let mut saved = Vec::new();
    for seg in &spec.segments {
        let (ql, kl) = (seg.q_len, seg.k_len);
        for h in 0..spec.heads {
            if ql == 0 {
                if save {
                    saved.push(Vec::new());
                }
                continue;
            }
            let qh = head_slice(q, seg.q_start, ql, h, dh);
            let kh = head_slice(k, seg.k_start, kl, h, dh);
            let vh = head_slice(v, seg.k_start, kl, h, dh);
            let mut p = vec![T::zero(); ql * kl];
            gemm(ql, dh, kl, &qh, false, &kh, true, T::zero(), &mut p);
            for i in 0..ql {
                let row = &mut p[i * kl..(i + 1) * kl];
                let mut max = T::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    if spec.rule.allows(i, j) {
                        *s *= scale;
                        if *s > max {
                            max = *s;
                        }
                    } else {
                        *s = T::neg_infinity();
                    }
                }
                if max == T::neg_infinity() {
                    return Err(Error::FullyMaskedRow {
                        row: seg.q_start + i,
                    });
                }
                let mut total = T::zero();
                for s in row.iter_mut() {
                    *s = if *s == T::neg_infinity() {
                        T::zero()
                    } else {
                        (*s - max).exp()
                    };
                    total += *s;
                }
                let inv = T::one() / total;
                for s in row.iter_mut() {
                    *s *= inv;
                }
            }
            let mut oh = vec![T::zero(); ql * dh];
            gemm(ql, kl, dh, &p, false, &vh, false, T::zero(), &mut oh);
            for i in 0..ql {
                let off = (seg.q_start + i) * d + h * dh;
                out.data_mut()[off..off + dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
            if save {
                saved.push(p);
            }
        }
    }
    Ok((out, saved))
}

struct AttentionOp<T> {
    spec: AttnSpec,
    probs: Vec<Vec<T>>,
}

impl<T: Scalar> CustomOp<T> for AttentionOp<T> {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let d = q.cols();
        let dh = d / self.spec.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut dq = Tensor::zeros(q.shape());
        let mut dk = Tensor::zeros(k.shape());
        let mut dv = Tensor::zeros(v.shape());
        let mut slot = 0;
        for seg in &self.spec.segments {
            let (ql, kl) = (seg.q_len, seg.k_len);
            for h in 0..self.spec.heads {
                let p = &self.probs[slot];
                slot += 1;
                if ql == 0 {
                    continue;
                }
                let qh = head_slice(q, seg.q_start, ql, h, dh);
                let kh = head_slice(k, seg.k_start, kl, h, dh);
                let vh = head_slice(v, seg.k_start, kl, h, dh);
                let doh = head_slice(grad, seg.q_start, ql, h, dh);

                let mut dvh = vec![T::zero(); kl * dh];
                gemm(kl, ql, dh, p, true, &doh, false, T::zero(), &mut dvh);
                let mut dp = vec![T::zero(); ql * kl];
                gemm(ql, dh, kl, &doh, false, &vh, true, T::zero(), &mut dp);
                for i in 0..ql {
                    let pr = &p[i * kl..(i + 1) * kl];
                    let dr = &mut dp[i * kl..(i + 1) * kl];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (g, &pp) in dr.iter_mut().zip(pr) {
                        *g = pp * (*g - dot) * scale;
                    }
                }
                let mut dqh = vec![T::zero(); ql * dh];
                gemm(ql, kl, dh, &dp, false, &kh, false, T::zero(), &mut dqh);
                let mut dkh = vec![T::zero(); kl * dh];
                gemm(kl, ql, dh, &dp, true, &qh, false, T::zero(), &mut dkh);

                scatter_head(&mut dq, &dqh, seg.q_start, ql, h, dh);
                scatter_head(&mut dk, &dkh, seg.k_start, kl, h, dh);
                scatter_head(&mut dv, &dvh, seg.k_start, kl, h, dh);
            }
        }
        Ok(vec![Some(dq), Some(dk), Some(dv)])
    }
}

fn scatter_head<T: Scalar>(dst: &mut Tensor<T>, src: &[T], start: usize, len: usize, h: usize, dh: usize) {
    let d = dst.cols();
    for r in 0..len {
        let off = (start + r) * d + h * dh;
        for (x, &y) in dst.data_mut()[off..off + dh].iter_mut().zip(&src[r * dh..(r + 1) * dh]) {
            *x += y;
        }
    }
}

/// Differentiable attention on a tape.
pub fn attention_var<T: Scalar>(tape: &mut Tape<'_, T>, q: Var, k: Var, v: Var, spec: &AttnSpec) -> Result<Var> {
    let save = tape.grad_enabled() && (tape.needs_grad(q) || tape.needs_grad(k) || tape.needs_grad(v));
    let (out, probs) = forward_kernel(tape.value(q), tape.value(k), tape.value(v), spec, save)?;
    tape.custom(
        &[q, k, v],
        out,
        Box::new(AttentionOp {
            spec: spec.clone(),
            probs,
        }),
    )
}

/// Plain attention of `q` over `k`/`v` under an explicit mask.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttentionMask,
    heads: usize,
) -> Result<Tensor<T>> {
    if mask.rows() != q.rows() || mask.cols() != k.rows() {
        return shape_err(
            "attention",
            format!(
                "mask {}x{} for {} queries and {} keys",
                mask.rows(),
                mask.cols(),
                q.rows(),
                k.rows()
            ),
        );
    }
    let spec = AttnSpec::single(q.rows(), k.rows(), heads, MaskRule::Explicit(Arc::new(mask.clone())));
    Ok(forward_kernel(q, k, v, &spec, false)?.0)
}

/// Cached keys and values of one attention layer.
#[derive(Clone, Debug)]
pub struct LayerKv<T> {
    keys: Vec<T>,
    values: Vec<T>,
    dim: usize,
    len: usize,
}

impl<T: Scalar> LayerKv<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            keys: Vec::new(),
            values: Vec::new(),
            dim,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn keys(&self) -> Tensor<T> {
        Tensor::matrix(self.len, self.dim, self.keys.clone()).expect("cache consistent")
    }

    pub fn values(&self) -> Tensor<T> {
        Tensor::matrix(self.len, self.dim, self.values.clone()).expect("cache consistent")
    }
}

/// Per-layer key/value cache for frame-causal decoding.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    pub layers: Vec<LayerKv<T>>,
    pub tokens_per_frame: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(num_layers: usize, dim: usize, tokens_per_frame: usize) -> Self {
        Self {
            layers: (0..num_layers).map(|_| LayerKv::new(dim)).collect(),
            tokens_per_frame,
        }
    }

    /// Tokens processed so far.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames(&self) -> usize {
        self.len() / self.tokens_per_frame
    }
}

/// Appends `new_k`/`new_v` (absolute positions starting at `start`) and
/// attends `new_q` over every cached key under the hybrid frame mask.
///
/// Equivalent to recomputing hybrid-masked attention over the whole
/// sequence and keeping the rows of the new tokens.
pub fn attend_with_cache<T: Scalar>(
    cache: &mut LayerKv<T>,
    start: usize,
    new_q: &Tensor<T>,
    new_k: &Tensor<T>,
    new_v: &Tensor<T>,
    heads: usize,
    tokens_per_frame: usize,
) -> Result<Tensor<T>> {
    if start != cache.len {
        return invalid(format!(
            "out-of-order cache append: cache holds {} tokens, new block starts at {start}",
            cache.len
        ));
    }
    if new_q.rows() != new_k.rows() || new_k.rows() != new_v.rows() {
        return shape_err("attend_with_cache", "q/k/v row counts differ");
    }
    if new_k.cols() != cache.dim || new_v.cols() != cache.dim || new_q.cols() != cache.dim {
        return shape_err("attend_with_cache", format!("dim != cached {}", cache.dim));
    }
    if tokens_per_frame == 0 {
        return invalid("tokens_per_frame must be positive");
    }
    if new_q.rows() == 0 {
        return Ok(Tensor::zeros(&[0, cache.dim]));
    }
    cache.keys.extend_from_slice(new_k.data());
    cache.values.extend_from_slice(new_v.data());
    cache.len += new_k.rows();
    let k = cache.keys();
    let v = cache.values();
    let spec = AttnSpec::single(
        new_q.rows(),
        cache.len,
        heads,
        MaskRule::Hybrid {
            tokens_per_frame,
            q_offset: start,
            k_offset: 0,
        },
    );
    Ok(forward_kernel(new_q, &k, &v, &spec, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mask::build_hybrid_mask;
    use crate::numerics::{check_param_grads, Objective, ParamStore, RngStream};
    use proptest::prelude::*;

    fn rand(rng: &mut RngStream, r: usize, c: usize) -> Tensor<f64> {
        rng.gaussian(&[r, c])
    }

    #[test]
    fn single_key_returns_value() {
        let mut rng = RngStream::new(1);
        let q = rand(&mut rng, 1, 4);
        let k = rand(&mut rng, 1, 4);
        let v = rand(&mut rng, 1, 4);
        let o = attention(&q, &k, &v, &AttentionMask::full(1, 1), 2).unwrap();
        assert!(o.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn identity_mask_returns_own_value() {
        let mut rng = RngStream::new(2);
        let (q, k, v) = (rand(&mut rng, 5, 6), rand(&mut rng, 5, 6), rand(&mut rng, 5, 6));
        let o = attention(&q, &k, &v, &AttentionMask::identity(5), 3).unwrap();
        assert!(o.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn equal_scores_average_values() {
        let q = Tensor::<f64>::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let k = Tensor::matrix(2, 2, vec![0.5, 1.0, 0.5, -3.0]).unwrap();
        let v = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let o = attention(&q, &k, &v, &AttentionMask::full(1, 2), 1).unwrap();
        assert!((o.data()[0] - 2.0).abs() < 1e-12);
        assert!((o.data()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_error() {
        let q = Tensor::<f32>::zeros(&[2, 2]);
        let mask = AttentionMask::from_fn(2, 2, |i, _| i == 0);
        let err = attention(&q, &q, &q, &mask, 1).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let q = Tensor::<f32>::zeros(&[2, 4]);
        let k = Tensor::<f32>::zeros(&[2, 3]);
        assert!(attention(&q, &k, &k, &AttentionMask::full(2, 2), 1).is_err());
        assert!(attention(&q, &q, &q, &AttentionMask::full(2, 2), 3).is_err());
        assert!(attention(&q, &q, &q, &AttentionMask::full(3, 2), 1).is_err());
    }

    #[test]
    fn cached_frames_match_full_pass() {
        let (frames, tpf, d) = (3, 4, 8);
        let mut rng = RngStream::new(9);
        let q = rand(&mut rng, frames * tpf, d);
        let k = rand(&mut rng, frames * tpf, d);
        let v = rand(&mut rng, frames * tpf, d);
        let full = attention(&q, &k, &v, &build_hybrid_mask(frames, tpf).unwrap(), 2).unwrap();

        let mut cache = LayerKv::new(d);
        for f in 0..frames {
            let rows: Vec<usize> = (f * tpf..(f + 1) * tpf).collect();
            let o = attend_with_cache(
                &mut cache,
                f * tpf,
                &q.gather_rows(&rows),
                &k.gather_rows(&rows),
                &v.gather_rows(&rows),
                2,
                tpf,
            )
            .unwrap();
            assert!(o.max_abs_diff(&full.gather_rows(&rows)) < 1e-5);
        }
        assert_eq!(cache.len(), frames * tpf);
    }

    #[test]
    fn empty_cache_equals_plain_frame_attention() {
        let mut rng = RngStream::new(4);
        let (q, k, v) = (rand(&mut rng, 3, 4), rand(&mut rng, 3, 4), rand(&mut rng, 3, 4));
        let mut cache = LayerKv::new(4);
        let o = attend_with_cache(&mut cache, 0, &q, &k, &v, 2, 3).unwrap();
        let plain = attention(&q, &k, &v, &AttentionMask::full(3, 3), 2).unwrap();
        assert!(o.max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn zero_new_tokens_leave_cache_unchanged() {
        let mut cache = LayerKv::<f32>::new(4);
        let e = Tensor::zeros(&[0, 4]);
        let o = attend_with_cache(&mut cache, 0, &e, &e, &e, 1, 2).unwrap();
        assert_eq!(o.rows(), 0);
        assert!(cache.is_empty());
    }

    #[test]
    fn out_of_order_append_is_rejected() {
        let mut cache = LayerKv::<f32>::new(2);
        let x = Tensor::zeros(&[1, 2]);
        assert!(attend_with_cache(&mut cache, 3, &x, &x, &x, 1, 1).is_err());
    }

    struct AttnObjective {
        x: Tensor<f64>,
        spec: AttnSpec,
    }

    impl Objective for AttnObjective {
        fn eval<T: Scalar>(&self, tape: &mut Tape<'_, T>) -> Result<Var> {
            let ids: Vec<_> = tape.store().unwrap().ids().collect();
            let x = tape.constant(self.x.cast());
            let mut qkv = Vec::new();
            for id in &ids[..3] {
                let w = tape.param(*id);
                qkv.push(tape.matmul(x, w)?);
            }
            let o = attention_var(tape, qkv[0], qkv[1], qkv[2], &self.spec)?;
            let s = tape.sin(o)?;
            tape.sum(s)
        }
    }

    #[test]
    fn backward_matches_finite_differences_across_segments() {
        let mut rng = RngStream::new(77);
        let mut store = ParamStore::<f64>::new();
        for name in ["wq", "wk", "wv"] {
            store.add(name, rand(&mut rng, 6, 6).scale(0.7)).unwrap();
        }
        let spec = AttnSpec::blocks(
            &[4, 3],
            2,
            MaskRule::Hybrid {
                tokens_per_frame: 2,
                q_offset: 0,
                k_offset: 0,
            },
        );
        let obj = AttnObjective {
            x: rand(&mut rng, 7, 6),
            spec,
        };
        let rep = check_param_grads::<f64, f64>(&store, &obj, 1e-4, usize::MAX).unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }

    proptest! {
        #[test]
        fn permuting_key_value_pairs_is_invariant(seed in any::<u64>(), n in 2usize..7) {
            let mut rng = RngStream::new(seed);
            let q = rand(&mut rng, 3, 4);
            let k = rand(&mut rng, n, 4);
            let v = rand(&mut rng, n, 4);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.below(i + 1));
            }
            let mask = AttentionMask::full(3, n);
            let a = attention(&q, &k, &v, &mask, 2).unwrap();
            let b = attention(&q, &k.gather_rows(&perm), &v.gather_rows(&perm), &mask, 2).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}
