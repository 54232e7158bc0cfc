use std::sync::Arc;

use crate::error::{invalid, Result};

/// Dense boolean visibility matrix; `true` means the query row may attend
/// to the key column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| i == j)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    /// Rows of `0`/`1` characters, handy in assertions.
    pub fn pattern(&self) -> Vec<String> {
        (0..self.rows)
            .map(|i| {
                (0..self.cols)
                    .map(|j| if self.allows(i, j) { '1' } else { '0' })
                    .collect()
            })
            .collect()
    }
}

/// Causal across frames, bidirectional inside each frame.
pub fn build_hybrid_mask(num_frames: usize, tokens_per_frame: usize) -> Result<AttentionMask> {
    if num_frames == 0 || tokens_per_frame == 0 {
        return invalid("hybrid mask needs at least one frame and one token per frame");
    }
    let l = num_frames * tokens_per_frame;
    Ok(AttentionMask::from_fn(l, l, |i, j| {
        j / tokens_per_frame <= i / tokens_per_frame
    }))
}

/// Visibility rule evaluated lazily inside each attention segment, using
/// segment-local query/key indices.
#[derive(Clone, Debug)]
pub enum MaskRule {
    Full,
    /// Hybrid frame-causal rule; offsets give the absolute position of the
    /// first query and key so cached decoding can reuse it.
    Hybrid {
        tokens_per_frame: usize,
        q_offset: usize,
        k_offset: usize,
    },
    Explicit(Arc<AttentionMask>),
}

impl MaskRule {
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            MaskRule::Full => true,
            MaskRule::Hybrid {
                tokens_per_frame,
                q_offset,
                k_offset,
            } => (k_offset + j) / tokens_per_frame <= (q_offset + i) / tokens_per_frame,
            MaskRule::Explicit(m) => m.allows(i, j),
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, MaskRule::Full)
    }
}
