use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use canvasmar::dataeval::{
    evaluate, load_dataset, read_video, save_dataset, write_video, ClipPredictor, Dataset, EvalConfig,
    ModelPredictor, NoisePredictor, OraclePredictor, SyntheticKind, SyntheticSpec,
};
use canvasmar::generation::{
    rollout, rollout_batch, AugmentConfig, DecodeOptions, GuidanceScales, RolloutConfig, SamplingPreset,
};
use canvasmar::model::{encode_frame, CanvasMar, ModelConfig};
use canvasmar::numerics::{OptState, RngStream};
use canvasmar::training::{load_checkpoint, save_checkpoint, Trainer};
use canvasmar::Video;

use crate::config::RunConfig;
use crate::{resolve_seed, BenchArgs, CliError, DecodeArgs, DumpFormat, EvalArgs, GenDataArgs, Preset, PredictorKind, SampleArgs, TrainArgs};

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let seed = resolve_seed(a.seed);
    let mut spec = match a.kind {
        SyntheticKind::Bouncing => SyntheticSpec::bouncing(a.height, a.width, seed),
        SyntheticKind::Coinflip => SyntheticSpec::coinflip(a.height, a.width, seed),
    };
    if let Some(f) = a.frames {
        spec.frames = f;
    }
    if let Some(s) = a.shapes {
        spec.num_shapes = s;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = Dataset::generate(&spec, a.train, a.test)?;
    save_dataset(&a.out, &data)
        .map_err(|e| CliError::Runtime(format!("cannot write dataset to {}: {e}", a.out.display())))?;
    println!(
        "wrote {} train and {} test {:?} clips to {}",
        data.train.len(),
        data.test.len(),
        spec.kind,
        a.out.display()
    );
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    load_dataset(dir).map_err(|e| CliError::Runtime(format!("cannot load dataset {}: {e}", dir.display())))
}

fn load_model(path: &Path) -> Result<CanvasMar<f32>, CliError> {
    let ck = load_checkpoint(path)
        .map_err(|e| CliError::Runtime(format!("cannot load checkpoint {}: {e}", path.display())))?;
    Ok(ck.restore::<f32>(None)?.0)
}

fn check_geometry(model: &ModelConfig, v: &Video, what: &str) -> Result<(), CliError> {
    if (v.height, v.width, v.channels) != (model.height, model.width, model.channels) {
        return Err(CliError::Runtime(format!(
            "incompatible resolution: {what} is {}x{}x{}, model expects {}x{}x{}",
            v.height, v.width, v.channels, model.height, model.width, model.channels
        )));
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&a.config)?;
    let model_cfg = cfg.model_config()?;
    let seed = resolve_seed(cfg.seed);
    let data = load_data(&cfg.dataset)?;
    if let Some(v) = data.train.first() {
        check_geometry(&model_cfg, v, "the dataset")?;
    }
    let tcfg = cfg.train_config(seed);
    let mut trainer = if let Some(path) = &a.resume {
        let ck = load_checkpoint(path)?;
        let (model, mut opt) = ck.restore::<f32>(Some(&model_cfg))?;
        opt.config = tcfg.adam;
        eprintln!("resuming {} at step {}", path.display(), opt.step);
        Trainer {
            model,
            opt,
            config: tcfg,
        }
    } else if let Some(path) = &cfg.init_from {
        let base = load_model(path)?;
        let expect = model_cfg.clone().with_group(base.config.group_size);
        if let Some((field, want, found)) = expect.first_difference(&base.config) {
            return Err(CliError::Runtime(format!(
                "init_from checkpoint differs in `{field}`: run wants {want}, checkpoint has {found}"
            )));
        }
        let mut model = base.expand_group(cfg.group_size, seed)?;
        model.config = model_cfg.clone();
        let opt = OptState::new(&model.params, tcfg.adam);
        Trainer {
            model,
            opt,
            config: tcfg,
        }
    } else {
        Trainer::new(CanvasMar::new(model_cfg, seed)?, tcfg)
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let resolved = RunConfig {
        seed: Some(seed),
        ..cfg.clone()
    };
    fs::write(
        cfg.out_dir.join("run.toml"),
        toml::to_string(&resolved).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(cfg.out_dir.join("metrics.log"))?;
    let mut last_good: Option<PathBuf> = a.resume.clone();
    while trainer.opt.step < trainer.config.steps {
        let m = match trainer.step(&data.train) {
            Ok(m) => m,
            Err(e) => {
                let kept = last_good
                    .as_ref()
                    .map_or("none".to_string(), |p| p.display().to_string());
                return Err(CliError::Runtime(format!(
                    "training aborted at step {}: {e}; last good checkpoint: {kept}",
                    trainer.opt.step + 1
                )));
            }
        };
        let canvas = m.canvas_loss.map_or("-".to_string(), |c| format!("{c:.6}"));
        let line = format!(
            "step {} loss {:.6} canvas {} flow {:.6} grad_norm {:.4}",
            m.step, m.loss, canvas, m.flow_loss, m.grad_norm
        );
        println!("{line}");
        writeln!(log, "{line}")?;
        if m.step % cfg.checkpoint_every == 0 || m.step == trainer.config.steps {
            let path = cfg.out_dir.join(format!("step_{:06}.cmar", m.step));
            save_checkpoint(&path, &trainer.model, &trainer.opt)?;
            fs::copy(&path, cfg.out_dir.join("latest.cmar"))?;
            last_good = Some(path);
        }
    }
    Ok(())
}

fn decode_settings(d: &DecodeArgs, model: &ModelConfig, seed: u64) -> Result<RolloutConfig, CliError> {
    if d.group == 0 || d.group > model.group_size {
        return Err(CliError::Runtime(format!(
            "group {} unsupported by a checkpoint trained with group size {}",
            d.group, model.group_size
        )));
    }
    let base = match &d.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut steps = base.sample_steps;
    let mut w = (base.w_s, base.w_t);
    if let Some(p) = d.preset {
        let p: SamplingPreset = match p {
            Preset::Six => SamplingPreset::SIX_STEP,
            Preset::Twelve => SamplingPreset::TWELVE_STEP,
        };
        steps = p.steps;
        w = (p.guidance.w_s, p.guidance.w_t);
    }
    steps = d.steps.unwrap_or(steps);
    w = (d.ws.unwrap_or(w.0), d.wt.unwrap_or(w.1));
    if steps == 0 || steps > model.num_tokens() {
        return Err(CliError::Usage(format!(
            "--steps must lie in 1..={} for this model",
            model.num_tokens()
        )));
    }
    let usage = |e: canvasmar::Error| CliError::Usage(e.to_string());
    let guidance = if d.no_guidance {
        None
    } else {
        Some(GuidanceScales::new(w.0, w.1).map_err(usage)?)
    };
    let aug = AugmentConfig::inference(d.r.unwrap_or(base.r), d.r_prime.unwrap_or(base.r_prime)).map_err(usage)?;
    let flow_steps = d.flow_steps.unwrap_or(model.flow.steps);
    if flow_steps == 0 {
        return Err(CliError::Usage("--flow-steps must be positive".into()));
    }
    Ok(RolloutConfig {
        decode: DecodeOptions {
            steps,
            guidance,
            flow_steps,
            seed,
        },
        aug,
        group: d.group,
    })
}

fn write_image(path: &Path, pixels: &[f32], v: &Video, format: DumpFormat) -> Result<(), CliError> {
    let bytes: Vec<u8> = pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let (w, h) = (v.width as u32, v.height as u32);
    let rgb = match v.channels {
        1 => bytes.iter().flat_map(|&b| [b, b, b]).collect(),
        3 => bytes,
        c => return Err(CliError::Runtime(format!("cannot render {c}-channel frames"))),
    };
    let img = image::RgbImage::from_raw(w, h, rgb).expect("buffer matches frame size");
    let fmt = match format {
        DumpFormat::Png => image::ImageFormat::Png,
        DumpFormat::Ppm => image::ImageFormat::Pnm,
    };
    img.save_with_format(path, fmt)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn sample(a: SampleArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let seed = resolve_seed(a.seed);
    let mut cond = read_video(&a.cond)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", a.cond.display())))?;
    check_geometry(&model.config, &cond, "the conditioning video")?;
    let rcfg = decode_settings(&a.decode, &model.config, seed)?;
    if let Some(n) = a.cond_frames {
        if n == 0 || n > cond.frames {
            return Err(CliError::Usage(format!("--cond-frames must lie in 1..={}", cond.frames)));
        }
        cond = cond.window(0, n)?;
    }
    let (video, canvases) = rollout(&model, &cond, a.frames, &rcfg)?;
    write_video(&a.out, &video)?;
    if let Some(dir) = &a.dump_dir {
        fs::create_dir_all(dir)?;
        let ext = match a.dump_format {
            DumpFormat::Png => "png",
            DumpFormat::Ppm => "ppm",
        };
        for i in 0..video.frames {
            write_image(&dir.join(format!("frame_{i:03}.{ext}")), video.frame(i), &video, a.dump_format)?;
        }
        if a.dump_canvas {
            for (k, c) in canvases.iter().enumerate() {
                let i = cond.frames + k;
                write_image(&dir.join(format!("canvas_{i:03}.{ext}")), c, &video, a.dump_format)?;
            }
        }
    }
    println!("wrote {} frames ({} generated) to {}", video.frames, a.frames, a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let data = load_data(&a.dataset)?;
    let seed = resolve_seed(a.seed);
    let ecfg = EvalConfig {
        cond_frames: a.cond_frames,
        clip_len: a.clip_len,
        clips_per_condition: a.clips_per_condition,
        test_clips: a.test_clips,
        repeats: a.repeats,
        seed,
        ..EvalConfig::default()
    };
    let model;
    let pred: Box<dyn ClipPredictor + '_> = match a.predictor {
        PredictorKind::Model => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("--checkpoint is required for the model predictor".into()))?;
            model = load_model(path)?;
            if let Some(v) = data.test.first() {
                check_geometry(&model.config, v, "the dataset")?;
            }
            let rollout = decode_settings(&a.decode, &model.config, seed)?;
            Box::new(ModelPredictor {
                model: &model,
                rollout,
                batch: a.batch,
            })
        }
        PredictorKind::Oracle => Box::new(OraclePredictor { clips: &data.test }),
        PredictorKind::Noise => Box::new(NoisePredictor),
    };
    let report = evaluate(pred.as_ref(), &data.test, &ecfg, a.protocol)?;
    let line = serde_json::to_string(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{line}");
    if let Some(path) = &a.out {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

#[derive(serde::Serialize)]
struct BenchCell {
    group: usize,
    batch: usize,
    frames_per_second: f64,
    runs: usize,
}

pub fn bench(a: BenchArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let seed = resolve_seed(a.seed);
    if a.runs == 0 || a.frames == 0 || a.batches.contains(&0) {
        return Err(CliError::Usage("--runs, --frames and --batch must be positive".into()));
    }
    let layout = model.layout();
    let mut cells = Vec::new();
    println!("{:>5} {:>5} {:>12}", "G", "batch", "frames/s");
    for &g in &a.groups {
        let dargs = DecodeArgs {
            steps: Some(a.steps),
            ws: None,
            wt: None,
            preset: None,
            no_guidance: false,
            r: None,
            r_prime: None,
            flow_steps: a.flow_steps,
            group: g,
            config: None,
        };
        let rcfg = decode_settings(&dargs, &model.config, seed)?;
        for &b in &a.batches {
            let mut rng = RngStream::new(seed).substream(&[b as u64]);
            let conds = (0..b)
                .map(|_| {
                    (0..2)
                        .map(|i| {
                            let px: Vec<f32> = (0..layout.height * layout.width * layout.channels)
                                .map(|_| rng.uniform(0.0, 1.0) as f32)
                                .collect();
                            encode_frame(&px, layout, i)
                        })
                        .collect::<canvasmar::Result<Vec<_>>>()
                })
                .collect::<canvasmar::Result<Vec<_>>>()?;
            let seeds: Vec<u64> = (0..b as u64).map(|s| seed.wrapping_add(s)).collect();
            let mut fps = Vec::with_capacity(a.runs);
            for _ in 0..a.runs {
                let t0 = Instant::now();
                rollout_batch(&model, &conds, &seeds, a.frames, &rcfg)?;
                fps.push((b * a.frames) as f64 / t0.elapsed().as_secs_f64());
            }
            let cell = BenchCell {
                group: g,
                batch: b,
                frames_per_second: median(fps),
                runs: a.runs,
            };
            println!("{:>5} {:>5} {:>12.3}", cell.group, cell.batch, cell.frames_per_second);
            cells.push(cell);
        }
    }
    if a.json {
        println!("{}", serde_json::to_string(&cells).map_err(|e| CliError::Runtime(e.to_string()))?);
    }
    Ok(())
}
