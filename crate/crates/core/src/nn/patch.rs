use crate::error::{shape_err, Result};
use crate::numerics::{Scalar, Tensor};

/// One frame as a raster-ordered sequence of flattened pixel patches.
///
/// `tokens` is `n x d_tok` with `n = (H/p)(W/p)` and `d_tok = p*p*C`; each
/// row holds its patch in `(dy, dx, channel)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    pub tokens: Tensor<T>,
    pub frame_index: usize,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Geometry shared by `patchify` / `unpatchify`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl PatchLayout {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return shape_err(
                "patchify",
                format!("patch {patch} does not divide {height}x{width}"),
            );
        }
        if channels == 0 {
            return shape_err("patchify", "zero channels");
        }
        Ok(Self {
            height,
            width,
            channels,
            patch,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Pixel offset in an `H x W x C` frame for element `e` of token `j`.
    fn pixel_offset(&self, j: usize, e: usize) -> usize {
        let (_, gw) = self.grid();
        let (pr, pc) = (j / gw, j % gw);
        let c = e % self.channels;
        let dx = (e / self.channels) % self.patch;
        let dy = e / (self.channels * self.patch);
        let y = pr * self.patch + dy;
        let x = pc * self.patch + dx;
        (y * self.width + x) * self.channels + c
    }
}

/// Splits an `H x W x C` frame (row-major slice) into raster-ordered patches.
pub fn patchify<T: Scalar>(frame: &[T], layout: PatchLayout, frame_index: usize) -> Result<TokenGrid<T>> {
    if frame.len() != layout.frame_len() {
        return shape_err(
            "patchify",
            format!("frame has {} values, layout needs {}", frame.len(), layout.frame_len()),
        );
    }
    let (n, dt) = (layout.num_tokens(), layout.token_dim());
    let mut data = Vec::with_capacity(n * dt);
    for j in 0..n {
        for e in 0..dt {
            data.push(frame[layout.pixel_offset(j, e)]);
        }
    }
    Ok(TokenGrid {
        tokens: Tensor::matrix(n, dt, data)?,
        frame_index,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, layout: PatchLayout) -> Result<Vec<T>> {
    let (n, dt) = (layout.num_tokens(), layout.token_dim());
    if tokens.rows() != n || tokens.cols() != dt {
        return shape_err(
            "unpatchify",
            format!("tokens {:?} vs layout {n}x{dt}", tokens.shape()),
        );
    }
    let mut frame = vec![T::zero(); layout.frame_len()];
    for j in 0..n {
        for (e, &v) in tokens.row(j).iter().enumerate() {
            frame[layout.pixel_offset(j, e)] = v;
        }
    }
    Ok(frame)
}
