//! `CMV1` video files and on-disk datasets.
//!
//! A video file is the magic `CMV1`, then `u32` frames, height, width and
//! channels, then `f32` pixels, all little endian and row-major.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataeval::synthetic::{Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::video::Video;

pub const VIDEO_MAGIC: &[u8; 4] = b"CMV1";

pub fn encode_video(v: &Video) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * v.data.len());
    out.extend_from_slice(VIDEO_MAGIC);
    for d in [v.frames, v.height, v.width, v.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for p in &v.data {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_video(bytes: &[u8], path: &Path) -> Result<Video> {
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 20 {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != VIDEO_MAGIC {
        return Err(fail("not a CMV1 video (bad magic)".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
    let (n, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let count = n
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| fail("dimensions overflow".into()))?;
    if bytes.len() - 20 != 4 * count {
        return Err(fail(format!(
            "expected {} pixel bytes for {n}x{h}x{w}x{c}, found {}",
            4 * count,
            bytes.len() - 20
        )));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Video::new(n, h, w, c, data)
}

pub fn write_video(path: &Path, v: &Video) -> Result<()> {
    std::fs::write(path, encode_video(v))?;
    Ok(())
}

pub fn read_video(path: &Path) -> Result<Video> {
    decode_video(&std::fs::read(path)?, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub train_clips: usize,
    pub test_clips: usize,
}

pub const MANIFEST: &str = "manifest.json";

fn clip_path(dir: &Path, split: &str, i: usize) -> PathBuf {
    dir.join(split).join(format!("clip_{i:05}.cmv"))
}

/// Writes `train/`, `test/` and `manifest.json` under `dir`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    for (split, clips) in [("train", &data.train), ("test", &data.test)] {
        std::fs::create_dir_all(dir.join(split))?;
        for (i, v) in clips.iter().enumerate() {
            write_video(&clip_path(dir, split, i), v)?;
        }
    }
    let manifest = Manifest {
        spec: data.spec.clone(),
        train_clips: data.train.len(),
        test_clips: data.test.len(),
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Format {
        path: path.clone(),
        reason: format!("cannot read dataset manifest: {e}"),
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m = load_manifest(dir)?;
    let read = |split: &str, count: usize| (0..count).map(|i| read_video(&clip_path(dir, split, i))).collect::<Result<Vec<_>>>();
    Ok(Dataset {
        train: read("train", m.train_clips)?,
        test: read("test", m.test_clips)?,
        spec: m.spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn video_round_trip_is_bitwise() {
        let mut rng = RngStream::new(1);
        let data: Vec<f32> = (0..3 * 4 * 5 * 2).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
        let v = Video::new(3, 4, 5, 2, data).unwrap();
        let back = decode_video(&encode_video(&v), Path::new("mem")).unwrap();
        assert_eq!(back, v);
        assert!(back.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn malformed_videos_are_rejected() {
        let v = Video::zeros(2, 2, 2, 1);
        let good = encode_video(&v);
        let mut bad = good.clone();
        bad[3] = b'0';
        assert!(decode_video(&bad, Path::new("x")).is_err());
        assert!(decode_video(&good[..good.len() - 1], Path::new("x")).is_err());
        assert!(decode_video(&good[..10], Path::new("x")).is_err());
    }
}
