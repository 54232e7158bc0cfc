use canvasmar::generation::{
    generate_frame, generate_group, rollout, rollout_batch, rollout_tokens, AugmentConfig, DecodeOptions, GuidanceScales,
    RolloutConfig,
};
use canvasmar::model::{CanvasMar, ModelConfig, TemporalEmbedding};
use canvasmar::nn::TokenGrid;
use canvasmar::numerics::RngStream;
use canvasmar::Video;

fn setup(g: usize) -> (CanvasMar<f32>, Vec<TokenGrid<f32>>) {
    let model = CanvasMar::<f32>::new(ModelConfig::tiny().with_group(g), 5).unwrap();
    let mut rng = RngStream::new(6);
    let frames = (0..2)
        .map(|i| TokenGrid {
            tokens: rng.gaussian(&[model.num_tokens(), model.token_dim()]),
            frame_index: i,
        })
        .collect();
    (model, frames)
}

fn opts(steps: usize, guidance: Option<GuidanceScales>) -> DecodeOptions {
    DecodeOptions {
        steps,
        guidance,
        flow_steps: 4,
        seed: 77,
    }
}

fn zt_zs(model: &CanvasMar<f32>, frames: &[TokenGrid<f32>]) -> (TemporalEmbedding<f32>, canvasmar::model::CanvasEmbedding<f32>) {
    let (zt, _) = model.temporal_forward(frames, None).unwrap();
    let zs = model.canvas_forward(&zt, frames.last().unwrap(), 1).unwrap().remove(0);
    (zt, zs)
}

#[test]
fn fully_sequential_schedule_decodes() {
    let (model, frames) = setup(1);
    let (zt, zs) = zt_zs(&model, &frames);
    let n = model.num_tokens();
    let f = generate_frame(&model, &zt, Some(&zs), &opts(n, None)).unwrap();
    assert_eq!(f.tokens.shape(), &[n, model.token_dim()]);
    assert!(f.tokens.is_finite());
    assert_eq!(f.frame_index, 2);
}

#[test]
fn decoding_is_deterministic_and_seeded() {
    let (model, frames) = setup(1);
    let (zt, zs) = zt_zs(&model, &frames);
    let w = Some(GuidanceScales::new(2.5, 1.1).unwrap());
    let a = generate_frame(&model, &zt, Some(&zs), &opts(2, w)).unwrap();
    let b = generate_frame(&model, &zt, Some(&zs), &opts(2, w)).unwrap();
    assert_eq!(a, b);
    let mut o = opts(2, w);
    o.seed += 1;
    assert_ne!(a, generate_frame(&model, &zt, Some(&zs), &o).unwrap());
}

#[test]
fn uniform_mask_fallback_still_produces_finite_frames() {
    let (model, frames) = setup(1);
    let (zt, _) = zt_zs(&model, &frames);
    let w = Some(GuidanceScales::new(2.0, 1.0).unwrap());
    let f = generate_frame(&model, &zt, None, &opts(3, w)).unwrap();
    assert!(f.tokens.is_finite());
}

#[test]
fn unit_guidance_equals_guidance_free_decoding_bitwise() {
    let (model, frames) = setup(1);
    let (zt, zs) = zt_zs(&model, &frames);
    let guided = generate_frame(&model, &zt, Some(&zs), &opts(2, Some(GuidanceScales::new(1.0, 1.0).unwrap()))).unwrap();
    let free = generate_frame(&model, &zt, Some(&zs), &opts(2, None)).unwrap();
    assert_eq!(guided, free);
    let other = generate_frame(&model, &zt, Some(&zs), &opts(2, Some(GuidanceScales::new(2.0, 1.0).unwrap()))).unwrap();
    assert_ne!(other, free);
}

#[test]
fn group_decode_checks_its_inputs() {
    let (model, frames) = setup(2);
    let (zt, _) = model.temporal_forward(&frames, None).unwrap();
    let zs = model.canvas_forward(&zt, &frames[1], 2).unwrap();
    let out = generate_group(&model, &zt, Some(&zs), 2, 2, &opts(2, None)).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[1].frame_index, 3);
    assert!(generate_group(&model, &zt, Some(&zs[..1]), 2, 2, &opts(2, None)).is_err());
    assert!(generate_group(&model, &zt, Some(&zs), 2, 2, &opts(0, None)).is_err());
    assert!(generate_group(&model, &zt, Some(&zs), 2, 2, &opts(5, None)).is_err());
}

fn rcfg(group: usize, guidance: Option<GuidanceScales>) -> RolloutConfig {
    RolloutConfig {
        decode: opts(2, guidance),
        aug: AugmentConfig::inference_default(),
        group,
    }
}

#[test]
fn rollout_counts_and_prefix_stability() {
    for g in [1, 2] {
        let (model, frames) = setup(g);
        let zero = rollout_tokens(&model, &frames, 0, &rcfg(g, None)).unwrap();
        assert_eq!(zero.frames, frames);
        let three = rollout_tokens(&model, &frames, 3, &rcfg(g, None)).unwrap();
        let four = rollout_tokens(&model, &frames, 4, &rcfg(g, None)).unwrap();
        assert_eq!(three.frames.len(), 5);
        assert_eq!(four.frames.len(), 6);
        assert_eq!(&four.frames[..5], &three.frames[..]);
        assert_eq!(three.canvases.len(), 3);
        assert_eq!(rollout_tokens(&model, &frames, 4, &rcfg(g, None)).unwrap().frames, four.frames);
    }
}

#[test]
fn rollout_rejects_unsupported_groups() {
    let (model, frames) = setup(1);
    assert!(rollout_tokens(&model, &frames, 2, &rcfg(2, None)).is_err());
    assert!(rollout_tokens(&model, &[], 2, &rcfg(1, None)).is_err());
}

#[test]
fn pixel_rollout_keeps_conditioning_frames() {
    let (model, _) = setup(1);
    let mut rng = RngStream::new(3);
    let data: Vec<f32> = (0..2 * 64).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    let cond = Video::new(2, 8, 8, 1, data).unwrap();
    let (v, canvases) = rollout(&model, &cond, 3, &rcfg(1, None)).unwrap();
    assert_eq!(v.frames, 5);
    assert_eq!(canvases.len(), 3);
    assert_eq!(&v.data[..128], &cond.data[..]);
    assert!(v.data.iter().all(|p| (0.0..=1.0).contains(p)));
    let wrong = Video::zeros(1, 16, 16, 1);
    assert!(rollout(&model, &wrong, 1, &rcfg(1, None)).is_err());
}

#[test]
fn batched_rollout_matches_individual_rollouts() {
    for g in [1, 2] {
        let (model, _) = setup(g);
        let conds: Vec<Vec<TokenGrid<f32>>> = (0..3).map(|s| setup_frames(&model, 40 + s)).collect();
        let seeds = [3, 4, 5];
        let cfg = rcfg(g, Some(GuidanceScales::new(2.0, 1.1).unwrap()));
        let batched = rollout_batch(&model, &conds, &seeds, 3, &cfg).unwrap();
        for (b, out) in batched.iter().enumerate() {
            let mut c = cfg;
            c.decode.seed = seeds[b];
            let alone = rollout_tokens(&model, &conds[b], 3, &c).unwrap();
            assert_eq!(out.frames.len(), alone.frames.len());
            for (x, y) in out.frames.iter().zip(&alone.frames) {
                assert!(x.tokens.max_abs_diff(&y.tokens) < 1e-5);
            }
        }
        assert!(rollout_batch(&model, &conds, &seeds[..2], 3, &cfg).is_err());
    }
}

fn setup_frames(model: &CanvasMar<f32>, seed: u64) -> Vec<TokenGrid<f32>> {
    let mut rng = RngStream::new(seed);
    (0..2)
        .map(|i| TokenGrid {
            tokens: rng.gaussian(&[model.num_tokens(), model.token_dim()]),
            frame_index: i,
        })
        .collect()
}
