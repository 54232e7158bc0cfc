//! Procedural toy videos: bouncing shapes and the coin-flip motion set.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::RngStream;
use crate::video::Video;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Bouncing,
    Coinflip,
}

impl std::str::FromStr for SyntheticKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bouncing" => Ok(Self::Bouncing),
            "coinflip" => Ok(Self::Coinflip),
            other => Err(format!("unknown dataset kind `{other}` (expected bouncing or coinflip)")),
        }
    }
}

/// Grayscale synthetic video settings. Sizes are half-extents (circle
/// radius, half the square side) in pixels; velocities are per-axis speeds
/// in pixels per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_shapes: usize,
    pub size_range: (f64, f64),
    pub velocity_range: (f64, f64),
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn bouncing(height: usize, width: usize, seed: u64) -> Self {
        let s = height.min(width) as f64 / 8.0;
        Self {
            kind: SyntheticKind::Bouncing,
            frames: 24,
            height,
            width,
            num_shapes: 2,
            size_range: (s, 1.5 * s),
            velocity_range: (0.5, s),
            seed,
        }
    }

    /// One square of half-side `size_range.0` starting at the centre and
    /// moving `velocity_range.1` pixels per frame left or right.
    pub fn coinflip(height: usize, width: usize, seed: u64) -> Self {
        let s = (height.min(width) / 8) as f64;
        Self {
            kind: SyntheticKind::Coinflip,
            frames: 8,
            height,
            width,
            num_shapes: 1,
            size_range: (s, s),
            velocity_range: (s, s),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        let (vlo, vhi) = self.velocity_range;
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return invalid("frames, height and width must be positive");
        }
        if !(lo > 0.0 && lo <= hi) || !(vlo >= 0.0 && vlo <= vhi) {
            return invalid("size and velocity ranges must be ordered and non-negative");
        }
        if 2.0 * hi > self.height.min(self.width) as f64 {
            return invalid(format!(
                "shape of size {} does not fit a {}x{} frame",
                2.0 * hi,
                self.height,
                self.width
            ));
        }
        if self.kind == SyntheticKind::Bouncing && self.num_shapes == 0 {
            return invalid("at least one shape required");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub size: f64,
    pub intensity: f32,
}

impl Shape {
    fn covers(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.x, py - self.y);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy < self.size * self.size,
            ShapeKind::Square => dx.abs() < self.size && dy.abs() < self.size,
        }
    }

    /// Advances one frame, reflecting off the walls.
    pub fn advance(&mut self, height: usize, width: usize) {
        fn axis(p: &mut f64, v: &mut f64, s: f64, extent: f64) {
            *p += *v;
            if *p - s < 0.0 {
                *p = 2.0 * s - *p;
                *v = -*v;
            } else if *p + s > extent {
                *p = 2.0 * (extent - s) - *p;
                *v = -*v;
            }
        }
        axis(&mut self.x, &mut self.vx, self.size, width as f64);
        axis(&mut self.y, &mut self.vy, self.size, height as f64);
    }
}

/// Pixel `(i, j)` is lit when its centre lies inside a shape; overlaps take
/// the brighter value.
pub fn render(shapes: &[Shape], height: usize, width: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; height * width];
    for i in 0..height {
        for j in 0..width {
            let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
            for s in shapes {
                if s.covers(px, py) {
                    out[i * width + j] = out[i * width + j].max(s.intensity);
                }
            }
        }
    }
    out
}

/// Renders `frames` frames, advancing the shapes between frames.
pub fn simulate(mut shapes: Vec<Shape>, frames: usize, height: usize, width: usize) -> Result<Video> {
    for s in &shapes {
        if 2.0 * s.size > height.min(width) as f64 {
            return invalid(format!("shape of size {} does not fit a {height}x{width} frame", 2.0 * s.size));
        }
    }
    let mut v = Video::zeros(0, height, width, 1);
    for f in 0..frames {
        if f > 0 {
            for s in &mut shapes {
                s.advance(height, width);
            }
        }
        v.push_frame(&render(&shapes, height, width))?;
    }
    Ok(v)
}

fn clip_stream(spec: &SyntheticSpec, clip: usize) -> RngStream {
    RngStream::new(spec.seed).substream(&[clip as u64])
}

pub fn gen_bouncing(spec: &SyntheticSpec, clips: usize) -> Result<Vec<Video>> {
    spec.validate()?;
    let (h, w) = (spec.height as f64, spec.width as f64);
    (0..clips)
        .map(|c| {
            let mut rng = clip_stream(spec, c);
            let shapes = (0..spec.num_shapes)
                .map(|_| {
                    let size = rng.uniform(spec.size_range.0, spec.size_range.1);
                    let mut speed = || {
                        let v = rng.uniform(spec.velocity_range.0, spec.velocity_range.1);
                        if rng.bernoulli(0.5) {
                            -v
                        } else {
                            v
                        }
                    };
                    let (vx, vy) = (speed(), speed());
                    Shape {
                        kind: if rng.bernoulli(0.5) { ShapeKind::Circle } else { ShapeKind::Square },
                        x: rng.uniform(size, w - size),
                        y: rng.uniform(size, h - size),
                        vx,
                        vy,
                        size,
                        intensity: rng.uniform(0.6, 1.0) as f32,
                    }
                })
                .collect();
            simulate(shapes, spec.frames, spec.height, spec.width)
        })
        .collect()
}

fn coinflip_shape(spec: &SyntheticSpec, right: bool) -> Shape {
    let v = spec.velocity_range.1;
    Shape {
        kind: ShapeKind::Square,
        x: (spec.width / 2) as f64,
        y: (spec.height / 2) as f64,
        vx: if right { v } else { -v },
        vy: 0.0,
        size: spec.size_range.0,
        intensity: 1.0,
    }
}

/// Which way each coin-flip clip moves (`true` = right).
pub fn coinflip_directions(spec: &SyntheticSpec, clips: usize) -> Vec<bool> {
    (0..clips).map(|c| clip_stream(spec, c).bernoulli(0.5)).collect()
}

pub fn gen_coinflip(spec: &SyntheticSpec, clips: usize) -> Result<Vec<Video>> {
    spec.validate()?;
    coinflip_directions(spec, clips)
        .into_iter()
        .map(|right| simulate(vec![coinflip_shape(spec, right)], spec.frames, spec.height, spec.width))
        .collect()
}

/// The shared first frame and the two possible second frames
/// `(first, left, right)` of the coin-flip set.
pub fn coinflip_outcomes(spec: &SyntheticSpec) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    spec.validate()?;
    let left = simulate(vec![coinflip_shape(spec, false)], 2, spec.height, spec.width)?;
    let right = simulate(vec![coinflip_shape(spec, true)], 2, spec.height, spec.width)?;
    Ok((left.frame(0).to_vec(), left.frame(1).to_vec(), right.frame(1).to_vec()))
}

pub fn generate(spec: &SyntheticSpec, clips: usize) -> Result<Vec<Video>> {
    match spec.kind {
        SyntheticKind::Bouncing => gen_bouncing(spec, clips),
        SyntheticKind::Coinflip => gen_coinflip(spec, clips),
    }
}

/// Train and held-out test clips of one spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub train: Vec<Video>,
    pub test: Vec<Video>,
}

impl Dataset {
    /// Test clips come from a seed derived from `spec.seed`, so the two
    /// splits never share a clip stream.
    pub fn generate(spec: &SyntheticSpec, train: usize, test: usize) -> Result<Self> {
        let test_spec = SyntheticSpec {
            seed: RngStream::new(spec.seed).substream(&[u64::MAX]).next_u64(),
            ..spec.clone()
        };
        Ok(Self {
            spec: spec.clone(),
            train: generate(spec, train)?,
            test: generate(&test_spec, test)?,
        })
    }
}
