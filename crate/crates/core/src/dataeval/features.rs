//! Frozen random convolutional features for comparing sets of clips.

use crate::error::{invalid, Result};
use crate::numerics::RngStream;
use crate::video::Video;

/// Clip length the embedder is meant for; other lengths are accepted.
pub const CLIP_FRAMES: usize = 16;

#[derive(Clone, Debug)]
struct Conv3d {
    cin: usize,
    cout: usize,
    /// `cout x cin x 3 x 3 x 3`
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Activation volume `t x h x w x c`.
struct Volume {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Conv3d {
    fn new(cin: usize, cout: usize, rng: &mut RngStream) -> Self {
        let std = (2.0 / (27 * cin) as f64).sqrt();
        Self {
            cin,
            cout,
            w: (0..cout * cin * 27).map(|_| rng.normal() * std).collect(),
            b: (0..cout).map(|_| rng.normal() * 0.1).collect(),
        }
    }

    /// 3x3x3 convolution, temporal stride 1, spatial stride 2, zero padding
    /// 1, followed by ReLU.
    fn forward(&self, x: &Volume) -> Volume {
        let (t, h, w) = (x.t, x.h.div_ceil(2), x.w.div_ceil(2));
        let mut out = vec![0.0; t * h * w * self.cout];
        for ot in 0..t {
            for oy in 0..h {
                for ox in 0..w {
                    let o = ((ot * h + oy) * w + ox) * self.cout;
                    out[o..o + self.cout].copy_from_slice(&self.b);
                    for kt in 0..3 {
                        let it = ot as isize + kt as isize - 1;
                        if it < 0 || it >= x.t as isize {
                            continue;
                        }
                        for ky in 0..3 {
                            let iy = (2 * oy) as isize + ky as isize - 1;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (2 * ox) as isize + kx as isize - 1;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                let i = ((it as usize * x.h + iy as usize) * x.w + ix as usize) * x.c;
                                let tap = (kt * 3 + ky) * 3 + kx;
                                for co in 0..self.cout {
                                    let wrow = &self.w[(co * self.cin) * 27..];
                                    let mut acc = 0.0;
                                    for ci in 0..self.cin {
                                        acc += wrow[ci * 27 + tap] * x.data[i + ci];
                                    }
                                    out[o + co] += acc;
                                }
                            }
                        }
                    }
                    for v in &mut out[o..o + self.cout] {
                        *v = v.max(0.0);
                    }
                }
            }
        }
        Volume {
            t,
            h,
            w,
            c: self.cout,
            data: out,
        }
    }
}

fn channel_stats(v: &Volume) -> (Vec<f64>, Vec<f64>) {
    let count = (v.data.len() / v.c) as f64;
    let mut mean = vec![0.0; v.c];
    let mut sq = vec![0.0; v.c];
    for px in v.data.chunks_exact(v.c) {
        for (k, &x) in px.iter().enumerate() {
            mean[k] += x;
            sq[k] += x * x;
        }
    }
    let std = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, s)| {
            *m /= count;
            (s / count - *m * *m).max(0.0).sqrt()
        })
        .collect();
    (mean, std)
}

/// Two seeded 3-D conv layers; the feature vector is the per-channel mean
/// of the first layer and the per-channel mean and standard deviation of
/// the second, computed over space and time.
#[derive(Clone, Debug)]
pub struct FeatureEmbedder {
    channels: usize,
    layers: [Conv3d; 2],
}

pub const DEFAULT_EMBEDDER_SEED: u64 = 0x5eed_feed;

impl FeatureEmbedder {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed);
        let l1 = Conv3d::new(channels, 8, &mut rng);
        let l2 = Conv3d::new(8, 16, &mut rng);
        Self {
            channels,
            layers: [l1, l2],
        }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cout + 2 * self.layers[1].cout
    }

    pub fn embed(&self, clip: &Video) -> Result<Vec<f64>> {
        if clip.channels != self.channels || clip.frames == 0 {
            return invalid(format!(
                "embedder expects {}-channel clips, got {} frames of {} channels",
                self.channels, clip.frames, clip.channels
            ));
        }
        // centre pixels so an empty frame is not a constant offset
        let x = Volume {
            t: clip.frames,
            h: clip.height,
            w: clip.width,
            c: clip.channels,
            data: clip.data.iter().map(|&p| 2.0 * p as f64 - 1.0).collect(),
        };
        let a = self.layers[0].forward(&x);
        let b = self.layers[1].forward(&a);
        let (m1, _) = channel_stats(&a);
        let (m2, s2) = channel_stats(&b);
        Ok(m1.into_iter().chain(m2).chain(s2).collect())
    }

    pub fn embed_all(&self, clips: &[Video]) -> Result<Vec<Vec<f64>>> {
        clips.iter().map(|c| self.embed(c)).collect()
    }
}
