use crate::error::{shape_err, Result};

/// `frames x height x width x channels` pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Video {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width * channels {
            return shape_err(
                "video",
                format!("{} values for {frames}x{height}x{width}x{channels}", data.len()),
            );
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![0.0; frames * height * width * channels],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let l = self.frame_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f32] {
        let l = self.frame_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn push_frame(&mut self, pixels: &[f32]) -> Result<()> {
        if pixels.len() != self.frame_len() {
            return shape_err("video", format!("frame of {} values, expected {}", pixels.len(), self.frame_len()));
        }
        self.data.extend_from_slice(pixels);
        self.frames += 1;
        Ok(())
    }

    /// Frames `start..start+len` as a new video.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return shape_err("video", format!("window {start}+{len} of {} frames", self.frames));
        }
        let l = self.frame_len();
        Self::new(
            len,
            self.height,
            self.width,
            self.channels,
            self.data[start * l..(start + len) * l].to_vec(),
        )
    }
}
