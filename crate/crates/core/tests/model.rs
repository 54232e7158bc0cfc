use canvasmar::model::{CanvasEmbedding, CanvasMar, ModelConfig, TemporalEmbedding};
use canvasmar::nn::TokenGrid;
use canvasmar::numerics::{check_param_grads, Objective, RngStream, Scalar, Tape, Tensor, Var};
use canvasmar::Result;
use nalgebra::DMatrix;

fn random_frames(model: &CanvasMar<f32>, count: usize, seed: u64) -> Vec<TokenGrid<f32>> {
    let mut rng = RngStream::new(seed);
    (0..count)
        .map(|i| TokenGrid {
            tokens: rng.gaussian(&[model.num_tokens(), model.token_dim()]),
            frame_index: i,
        })
        .collect()
}

#[test]
fn cached_temporal_matches_full_recompute_over_eight_frames() {
    let model = CanvasMar::<f32>::new(ModelConfig::tiny(), 1).unwrap();
    let frames = random_frames(&model, 8, 2);
    let full = model.temporal_full(&frames).unwrap();
    let n = model.num_tokens();
    let mut cache = None;
    for i in 1..=8 {
        let (zt, c) = model.temporal_forward(&frames[..i], cache).unwrap();
        cache = Some(c);
        assert_eq!(zt.frame_index, i);
        let rows: Vec<usize> = ((i - 1) * n..i * n).collect();
        let diff = zt.zt.max_abs_diff(&full.gather_rows(&rows));
        assert!(diff < 1e-5, "frame {i}: {diff}");
    }
}

#[test]
fn cache_can_catch_up_several_frames() {
    let model = CanvasMar::<f32>::new(ModelConfig::tiny(), 1).unwrap();
    let frames = random_frames(&model, 5, 3);
    let (_, c) = model.temporal_forward(&frames[..2], None).unwrap();
    let (zt, c) = model.temporal_forward(&frames, Some(c)).unwrap();
    let (direct, _) = model.temporal_forward(&frames, None).unwrap();
    assert!(zt.zt.max_abs_diff(&direct.zt) < 1e-5);
    assert!(model.temporal_forward(&frames, Some(c)).is_err());
}

#[test]
fn editing_a_frame_never_changes_earlier_embeddings() {
    let model = CanvasMar::<f32>::new(ModelConfig::tiny(), 4).unwrap();
    let frames = random_frames(&model, 6, 5);
    let base = model.temporal_full(&frames).unwrap();
    let n = model.num_tokens();
    for j in 0..6 {
        let mut edited = frames.clone();
        edited[j].tokens = edited[j].tokens.map(|x| x + 1.5);
        let out = model.temporal_full(&edited).unwrap();
        // zt(i) is row block i-1, built from frames < i
        for i in 1..=j {
            let rows: Vec<usize> = ((i - 1) * n..i * n).collect();
            let diff = out.gather_rows(&rows).max_abs_diff(&base.gather_rows(&rows));
            assert!(diff < 1e-6, "frame {j} edit moved zt({i}) by {diff}");
        }
        let rows: Vec<usize> = (j * n..(j + 1) * n).collect();
        assert!(out.gather_rows(&rows).max_abs_diff(&base.gather_rows(&rows)) > 1e-4);
    }
}

#[test]
fn temporal_rejects_empty_history_and_foreign_shapes() {
    let model = CanvasMar::<f32>::new(ModelConfig::tiny(), 1).unwrap();
    assert!(model.temporal_forward(&[], None).is_err());
    let bad = TokenGrid {
        tokens: Tensor::zeros(&[3, model.token_dim()]),
        frame_index: 0,
    };
    assert!(model.temporal_forward(&[bad], None).is_err());
}

fn zt_and_prev(model: &CanvasMar<f32>, seed: u64) -> (TemporalEmbedding<f32>, TokenGrid<f32>) {
    let frames = random_frames(model, 2, seed);
    let (zt, _) = model.temporal_forward(&frames, None).unwrap();
    (zt, frames[1].clone())
}

#[test]
fn canvas_shapes_determinism_and_distinct_heads() {
    let model = CanvasMar::<f32>::new(ModelConfig::tiny().with_group(2), 7).unwrap();
    let (zt, prev) = zt_and_prev(&model, 8);
    let one = model.canvas_forward(&zt, &prev, 1).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].zs.shape(), &[model.num_tokens(), model.dim()]);
    let a = model.canvas_forward(&zt, &prev, 2).unwrap();
    let b = model.canvas_forward(&zt, &prev, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0], one[0]);
    assert!(a[0].zs.max_abs_diff(&a[1].zs) > 1e-3);
    assert!(model.canvas_forward(&zt, &prev, 3).is_err());
    let p = model.canvas_project(&a[0], 2).unwrap();
    assert_eq!(p.tokens.shape(), &[model.num_tokens(), 16]);
}

#[test]
fn expanded_group_model_starts_from_base_heads() {
    let base = CanvasMar::<f32>::new(ModelConfig::tiny(), 7).unwrap();
    let g2 = base.expand_group(2, 99).unwrap();
    let (zt, prev) = zt_and_prev(&base, 8);
    let b = base.canvas_forward(&zt, &prev, 1).unwrap();
    let e = g2.canvas_forward(&zt, &prev, 2).unwrap();
    assert_eq!(b[0].zs, e[0].zs);
    assert_eq!(e[0].zs, e[1].zs);
}

#[test]
fn zero_projection_gives_zero_canvas() {
    let mut model = CanvasMar::<f32>::new(ModelConfig::tiny(), 1).unwrap();
    let proj = model.canvas.as_ref().unwrap().project.clone();
    model.params.get_mut(proj.w).data_mut().fill(0.0);
    model.params.get_mut(proj.b.unwrap()).data_mut().fill(0.0);
    let zs = CanvasEmbedding {
        zs: Tensor::zeros(&[model.num_tokens(), model.dim()]),
        group_offset: 1,
    };
    let c = model.canvas_project(&zs, 1).unwrap();
    assert!(c.tokens.data().iter().all(|&v| v == 0.0));
}

#[test]
fn least_squares_projection_reproduces_its_target() {
    // n = 4 tokens, d = 16: the system zs W = target is underdetermined, so
    // the minimum-norm solution interpolates the target exactly.
    let mut model = CanvasMar::<f64>::new(ModelConfig::tiny(), 11).unwrap();
    let mut rng = RngStream::new(12);
    let (n, d, dt) = (model.num_tokens(), model.dim(), model.token_dim());
    let zs: Tensor<f64> = rng.gaussian(&[n, d]);
    let target: Tensor<f64> = rng.gaussian(&[n, dt]);
    let a = DMatrix::from_row_slice(n, d, zs.data());
    let y = DMatrix::from_row_slice(n, dt, target.data());
    let w = a.pseudo_inverse(1e-12).unwrap() * y;
    let proj = model.canvas.as_ref().unwrap().project.clone();
    let wdata: Vec<f64> = (0..d).flat_map(|r| (0..dt).map(move |c| (r, c))).map(|(r, c)| w[(r, c)]).collect();
    model.params.get_mut(proj.w).data_mut().copy_from_slice(&wdata);
    model.params.get_mut(proj.b.unwrap()).data_mut().fill(0.0);
    let c = model
        .canvas_project(
            &CanvasEmbedding {
                zs,
                group_offset: 1,
            },
            1,
        )
        .unwrap();
    assert!(c.tokens.max_abs_diff(&target) < 1e-9);
}

#[test]
fn spatial_forward_boundaries() {
    let model = CanvasMar::<f32>::new(ModelConfig::tiny(), 3).unwrap();
    let (zt, prev) = zt_and_prev(&model, 4);
    let zs = model.canvas_forward(&zt, &prev, 1).unwrap().remove(0);
    let n = model.num_tokens();
    let all: Vec<usize> = (0..n).collect();
    let z = model.spatial_forward(&prev, &[], Some(&zs), &zt, &all).unwrap();
    assert_eq!(z.shape(), &[n, model.dim()]);
    let empty = model.spatial_forward(&prev, &all, Some(&zs), &zt, &[]).unwrap();
    assert_eq!(empty.rows(), 0);
    assert!(model.spatial_forward(&prev, &[0, 1], Some(&zs), &zt, &[1, 2, 3]).is_err());
    assert!(model.spatial_forward(&prev, &[0], Some(&zs), &zt, &[1, 2]).is_err());
    let partial = model.spatial_forward(&prev, &[0, 2], Some(&zs), &zt, &[3, 1]).unwrap();
    assert_eq!(partial.rows(), 2);
    let fallback = model.spatial_forward(&prev, &[], None, &zt, &all).unwrap();
    assert!(fallback.max_abs_diff(&z) > 1e-4);
}

#[test]
fn known_tokens_matter_but_masked_values_do_not() {
    let model = CanvasMar::<f32>::new(ModelConfig::tiny(), 3).unwrap();
    let (zt, prev) = zt_and_prev(&model, 4);
    let z0 = model.spatial_forward(&prev, &[0, 1], None, &zt, &[2, 3]).unwrap();
    let mut other = prev.clone();
    for v in other.tokens.row_mut(3) {
        *v += 2.0;
    }
    let z1 = model.spatial_forward(&other, &[0, 1], None, &zt, &[2, 3]).unwrap();
    assert_eq!(z0, z1);
    for v in other.tokens.row_mut(0) {
        *v += 2.0;
    }
    let z2 = model.spatial_forward(&other, &[0, 1], None, &zt, &[2, 3]).unwrap();
    assert!(z0.max_abs_diff(&z2) > 1e-5);
}

#[test]
fn flow_velocity_contract() {
    let model = CanvasMar::<f32>::new(ModelConfig::tiny(), 5).unwrap();
    let mut rng = RngStream::new(6);
    let x: Tensor<f32> = rng.gaussian(&[3, model.token_dim()]);
    let z: Tensor<f32> = rng.gaussian(&[3, model.dim()]);
    let v = model.flow_velocity(&x, 0.3, &z).unwrap();
    assert_eq!(v.shape(), x.shape());
    assert_eq!(v, model.flow_velocity(&x, 0.3, &z).unwrap());
    assert!(model.flow_velocity(&x, 1.2, &z).is_err());
    assert!(model.flow_velocity(&x, -0.1, &z).is_err());
}

#[test]
fn constant_field_integrates_exactly() {
    let mut model = CanvasMar::<f64>::new(ModelConfig::tiny(), 5).unwrap();
    let out = model.flow.out.clone();
    model.params.get_mut(out.w).data_mut().fill(0.0);
    let c: Vec<f64> = (0..model.token_dim()).map(|i| 0.1 * i as f64 - 0.5).collect();
    model.params.get_mut(out.b.unwrap()).data_mut().copy_from_slice(&c);
    let z: Tensor<f64> = RngStream::new(1).gaussian(&[2, model.dim()]);
    for steps in [1, 7, 30] {
        let sample = model.flow_sample(&z, steps, &mut RngStream::new(9)).unwrap();
        let x0: Tensor<f64> = RngStream::new(9).gaussian(&[2, model.token_dim()]);
        for r in 0..2 {
            for (k, (&s, &x)) in sample.row(r).iter().zip(x0.row(r)).enumerate() {
                assert!((s - (x + c[k])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn flow_sample_is_seeded() {
    let model = CanvasMar::<f32>::new(ModelConfig::tiny(), 5).unwrap();
    let z: Tensor<f32> = RngStream::new(1).gaussian(&[4, model.dim()]);
    let a = model.flow_sample(&z, 5, &mut RngStream::new(3)).unwrap();
    let b = model.flow_sample(&z, 5, &mut RngStream::new(3)).unwrap();
    let c = model.flow_sample(&z, 5, &mut RngStream::new(4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

struct FlowLoss {
    model: CanvasMar<f64>,
    x: Tensor<f64>,
    z: Tensor<f64>,
    target: Tensor<f64>,
}

impl Objective for FlowLoss {
    fn eval<T: Scalar>(&self, tape: &mut Tape<'_, T>) -> Result<Var> {
        let z = tape.constant(self.z.cast());
        let c = self.model.flow.condition(tape, z)?;
        let x = tape.constant(self.x.cast());
        let v = self.model.flow.velocity(tape, x, &[0.2, 0.7, 0.9], c)?;
        let t = tape.constant(self.target.cast());
        let d = tape.sub(v, t)?;
        tape.sum_squares(d)
    }
}

#[test]
fn flow_head_gradients_match_finite_differences() {
    let model = CanvasMar::<f64>::new(ModelConfig::tiny(), 21).unwrap();
    let mut rng = RngStream::new(22);
    let dt = model.token_dim();
    let obj = FlowLoss {
        x: rng.gaussian(&[3, dt]),
        z: rng.gaussian(&[3, model.dim()]),
        target: rng.gaussian(&[3, dt]),
        model,
    };
    let report = check_param_grads::<f64, f64>(&obj.model.params, &obj, 1e-5, 8).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}
