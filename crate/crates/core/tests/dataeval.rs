use canvasmar::dataeval::{
    debiased_run, eval_protocol_debiased, eval_protocol_standard, load_dataset, load_manifest, save_dataset,
    standard_run, Dataset, EvalConfig, ModelPredictor, NoisePredictor, OraclePredictor, SyntheticKind, SyntheticSpec,
};
use canvasmar::generation::{AugmentConfig, DecodeOptions, RolloutConfig};
use canvasmar::model::{CanvasMar, ModelConfig};

fn small_eval() -> EvalConfig {
    EvalConfig {
        cond_frames: 2,
        clip_len: 8,
        clips_per_condition: 3,
        test_clips: 6,
        repeats: 4,
        seed: 11,
        ..EvalConfig::default()
    }
}

fn data() -> Dataset {
    Dataset::generate(&SyntheticSpec::bouncing(16, 16, 2), 4, 8).unwrap()
}

#[test]
fn standard_protocol_counts_and_conditioning() {
    let d = data();
    let cfg = small_eval();
    let run = standard_run(&NoisePredictor, &d.test, &cfg).unwrap();
    assert_eq!(run.fake.len(), cfg.test_clips * cfg.clips_per_condition);
    assert_eq!(run.real.len(), cfg.test_clips);
    for (fake, &(c, start)) in run.fake.iter().zip(&run.windows) {
        assert_eq!(start, 0);
        assert_eq!(fake.frames, cfg.clip_len);
        assert_eq!(fake.window(0, 2).unwrap(), d.test[c].window(0, 2).unwrap());
    }
}

#[test]
fn debiased_protocol_redraws_windows_per_repeat() {
    let d = data();
    let cfg = small_eval();
    let run = debiased_run(&NoisePredictor, &d.test, &cfg).unwrap();
    assert_eq!(run.fake.len(), cfg.test_clips * cfg.repeats);
    let per_clip: Vec<Vec<usize>> = (0..cfg.test_clips)
        .map(|c| run.windows.iter().filter(|w| w.0 == c).map(|w| w.1).collect())
        .collect();
    assert!(per_clip.iter().any(|starts| starts.iter().any(|&s| s != starts[0])));
    for (fake, &(c, s)) in run.fake.iter().zip(&run.windows) {
        assert_eq!(fake.window(0, 2).unwrap(), d.test[c].window(s, 2).unwrap());
    }
    let one = EvalConfig { repeats: 1, ..cfg.clone() };
    let single = debiased_run(&NoisePredictor, &d.test, &one).unwrap();
    assert_eq!(single.fake.len(), cfg.test_clips);
    assert_eq!(single.windows[..], run.windows[..cfg.test_clips]);
}

#[test]
fn oracle_beats_noise_and_scores_are_deterministic() {
    let d = data();
    let cfg = small_eval();
    let oracle = OraclePredictor { clips: &d.test };
    for eval in [eval_protocol_standard, eval_protocol_debiased] {
        let o = eval(&oracle, &d.test, &cfg).unwrap();
        let n = eval(&NoisePredictor, &d.test, &cfg).unwrap();
        assert!(o.score < n.score, "{} vs {}", o.score, n.score);
        assert_eq!(o.mse, 0.0);
        assert_eq!(n, eval(&NoisePredictor, &d.test, &cfg).unwrap());
        assert_ne!(o.config_hash, n.config_hash);
    }
}

#[test]
fn protocols_reject_bad_inputs() {
    let d = data();
    let cfg = small_eval();
    assert!(eval_protocol_standard(&NoisePredictor, &[], &cfg).is_err());
    let long = EvalConfig { clip_len: 40, ..cfg.clone() };
    assert!(eval_protocol_debiased(&NoisePredictor, &d.test, &long).is_err());
    let zero = EvalConfig { repeats: 0, ..cfg };
    assert!(eval_protocol_debiased(&NoisePredictor, &d.test, &zero).is_err());
}

#[test]
fn model_predictor_runs_both_protocols() {
    let d = Dataset::generate(&SyntheticSpec::bouncing(8, 8, 3), 1, 3).unwrap();
    let model = CanvasMar::<f32>::new(ModelConfig::tiny(), 1).unwrap();
    let pred = ModelPredictor {
        model: &model,
        rollout: RolloutConfig {
            decode: DecodeOptions {
                steps: 2,
                guidance: None,
                flow_steps: 2,
                seed: 0,
            },
            aug: AugmentConfig::inference_default(),
            group: 1,
        },
        batch: 4,
    };
    let cfg = EvalConfig {
        clip_len: 4,
        clips_per_condition: 2,
        test_clips: 3,
        repeats: 2,
        ..small_eval()
    };
    let a = eval_protocol_standard(&pred, &d.test, &cfg).unwrap();
    assert_eq!(a.fake_clips, 6);
    assert!(a.score.is_finite() && a.psnr.is_finite());
    assert_eq!(a, eval_protocol_standard(&pred, &d.test, &cfg).unwrap());
    let b = eval_protocol_debiased(&pred, &d.test, &cfg).unwrap();
    assert_eq!(b.fake_clips, 6);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = Dataset::generate(&SyntheticSpec::coinflip(16, 16, 9), 3, 2).unwrap();
    save_dataset(dir.path(), &d).unwrap();
    let m = load_manifest(dir.path()).unwrap();
    assert_eq!(m.spec.kind, SyntheticKind::Coinflip);
    assert_eq!((m.train_clips, m.test_clips), (3, 2));
    assert_eq!(load_dataset(dir.path()).unwrap(), d);
    assert!(load_dataset(&dir.path().join("missing")).is_err());
}
