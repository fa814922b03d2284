//! Joint text/image token layout and signed 2D offsets between image tokens.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// A joint sequence: `n_text` text tokens followed by an `height × width`
/// raster of image tokens.
///
/// Indices are zero-based. Token `k < n_text` is text; token `k ≥ n_text` is
/// the image token at raster index `k − n_text`, with coordinates
/// `(x, y) = (idx mod width, idx div width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub n_text: usize,
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn new(n_text: usize, height: usize, width: usize) -> Self {
        TokenGrid {
            n_text,
            height,
            width,
        }
    }

    /// Image-only grid.
    pub fn image(height: usize, width: usize) -> Self {
        Self::new(0, height, width)
    }

    #[inline]
    pub fn n_image(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn n_tokens(&self) -> usize {
        self.n_text + self.n_image()
    }

    #[inline]
    pub fn is_text(&self, token: usize) -> bool {
        token < self.n_text
    }

    /// `(x, y)` of an image token, `None` for text tokens.
    #[inline]
    pub fn coords(&self, token: usize) -> Option<(usize, usize)> {
        if token < self.n_text || token >= self.n_tokens() {
            return None;
        }
        let k = token - self.n_text;
        Some((k % self.width, k / self.width))
    }

    #[inline]
    pub fn token_at(&self, x: usize, y: usize) -> usize {
        self.n_text + y * self.width + x
    }

    /// Largest Euclidean distance between two image tokens.
    pub fn diagonal(&self) -> f64 {
        let dx = self.width.saturating_sub(1) as f64;
        let dy = self.height.saturating_sub(1) as f64;
        (dx * dx + dy * dy).sqrt()
    }

    /// `(x_i − x_j, y_i − y_j)` between two image tokens.
    pub fn relative_offsets(&self, i: usize, j: usize) -> Result<(i64, i64)> {
        let (xi, yi) = self.coords(i).ok_or_else(|| not_image(i, self))?;
        let (xj, yj) = self.coords(j).ok_or_else(|| not_image(j, self))?;
        Ok((xi as i64 - xj as i64, yi as i64 - yj as i64))
    }
}

fn not_image(token: usize, grid: &TokenGrid) -> LabError {
    LabError::Geometry(format!(
        "token {token} has no 2D position (n_text={}, n={})",
        grid.n_text,
        grid.n_tokens()
    ))
}

/// Perturbation applied to relative distances before they reach the rotary
/// embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", content = "r", rename_all = "lowercase")]
pub enum ClipMode {
    #[default]
    None,
    /// Clamp to `[-r, r]`: remote tokens look no further than `r`.
    Remote(i64),
    /// Push `|d| < r` out to `±r` (zero goes to `+r`): local tokens look no
    /// closer than `r`.
    Local(i64),
}

impl ClipMode {
    pub fn radius(&self) -> Option<i64> {
        match *self {
            ClipMode::None => None,
            ClipMode::Remote(r) | ClipMode::Local(r) => Some(r),
        }
    }
}

/// Applies a clip mode to one signed offset. `ClipMode::None` is the identity.
pub fn clip_offsets(d: i64, mode: ClipMode) -> i64 {
    match mode {
        ClipMode::None => d,
        ClipMode::Remote(r) => d.clamp(-r, r),
        ClipMode::Local(r) => {
            if d.abs() < r {
                if d < 0 {
                    -r
                } else {
                    r
                }
            } else {
                d
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn raster_coordinates() {
        let g = TokenGrid::new(2, 3, 4);
        assert_eq!(g.n_tokens(), 14);
        assert_eq!(g.coords(0), None);
        assert_eq!(g.coords(2), Some((0, 0)));
        assert_eq!(g.coords(2 + 7), Some((3, 1)));
        assert_eq!(g.token_at(3, 1), 9);
        assert_eq!(g.coords(14), None);
    }

    #[test]
    fn offsets_examples() {
        let g = TokenGrid::new(1, 3, 4);
        let i = g.token_at(3, 1);
        let j = g.token_at(0, 1);
        assert_eq!(g.relative_offsets(i, i).unwrap(), (0, 0));
        assert_eq!(g.relative_offsets(i, j).unwrap(), (3, 0));
        assert_eq!(g.relative_offsets(j, i).unwrap(), (-3, 0));
        assert!(g.relative_offsets(0, i).is_err());
        assert!(g.relative_offsets(i, 0).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_offsets(20, ClipMode::Remote(8)), 8);
        assert_eq!(clip_offsets(-3, ClipMode::Remote(8)), -3);
        assert_eq!(clip_offsets(-20, ClipMode::Remote(8)), -8);
        assert_eq!(clip_offsets(1, ClipMode::Local(2)), 2);
        assert_eq!(clip_offsets(-1, ClipMode::Local(2)), -2);
        assert_eq!(clip_offsets(0, ClipMode::Local(2)), 2);
        assert_eq!(clip_offsets(5, ClipMode::Local(2)), 5);
    }

    #[test]
    fn remote_clip_beyond_extent_is_identity() {
        let g = TokenGrid::new(0, 5, 7);
        let r = 7;
        for i in 0..g.n_tokens() {
            for j in 0..g.n_tokens() {
                let (dx, dy) = g.relative_offsets(i, j).unwrap();
                assert_eq!(clip_offsets(dx, ClipMode::Remote(r)), dx);
                assert_eq!(clip_offsets(dy, ClipMode::Remote(r)), dy);
            }
        }
    }

    proptest! {
        #[test]
        fn clips_are_idempotent(d in -100i64..100, r in 1i64..40) {
            for mode in [ClipMode::Remote(r), ClipMode::Local(r)] {
                let once = clip_offsets(d, mode);
                prop_assert_eq!(clip_offsets(once, mode), once);
            }
        }

        #[test]
        fn offsets_antisymmetric(h in 1usize..8, w in 1usize..8, a in 0usize..64, b in 0usize..64) {
            let g = TokenGrid::new(3, h, w);
            let i = 3 + a % g.n_image();
            let j = 3 + b % g.n_image();
            let (dx, dy) = g.relative_offsets(i, j).unwrap();
            prop_assert_eq!(g.relative_offsets(j, i).unwrap(), (-dx, -dy));
        }
    }
}
