//! Axis-split 2D rotary position embedding with NTK base scaling.
//!
//! The first half of each head's channels encodes `x`, the second half `y`;
//! within a half, adjacent channel pairs rotate at frequencies
//! `θ_t = (base · ntk)^(−2t / axis_dim)`. Text tokens sit at the origin and are
//! never rotated.
//!
//! Per-token rotation ([`rope_apply`]) can only express true offsets. Clipped
//! offsets are handled by [`rope_scores`], which rebuilds each pairwise angle
//! from the clipped `(dx, dy)`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::{clip_offsets, ClipMode, TokenGrid};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    pub ntk_factor: f64,
    pub clip: ClipMode,
    /// Multiplier on pairwise scores. `1.0` leaves logits untouched.
    pub logit_scale: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize) -> Self {
        RopeConfig {
            head_dim,
            base: 10_000.0,
            ntk_factor: 1.0,
            clip: ClipMode::None,
            logit_scale: 1.0,
        }
    }

    pub fn with_ntk(mut self, factor: f64) -> Self {
        self.ntk_factor = factor;
        self
    }

    pub fn with_clip(mut self, clip: ClipMode) -> Self {
        self.clip = clip;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.head_dim.is_multiple_of(2) {
            return Err(LabError::Config(format!("head_dim {} must be even", self.head_dim)));
        }
        if !self.head_dim.is_multiple_of(4) {
            return Err(LabError::Config(format!(
                "head_dim {} must split into two even axis halves",
                self.head_dim
            )));
        }
        if !(self.ntk_factor >= 1.0) {
            return Err(LabError::Config(format!("ntk_factor {} < 1", self.ntk_factor)));
        }
        if !(self.base > 1.0) {
            return Err(LabError::Config(format!("base {} must exceed 1", self.base)));
        }
        if let Some(r) = self.clip.radius() {
            if r <= 0 {
                return Err(LabError::Config(format!("clip radius {r} must be positive")));
            }
        }
        Ok(())
    }

    /// Channels devoted to one axis.
    pub fn axis_dim(&self) -> usize {
        self.head_dim / 2
    }

    /// Rotation frequency of each pair within one axis half.
    pub fn frequencies(&self) -> Vec<f64> {
        let axis = self.axis_dim() as f64;
        let base = self.base * self.ntk_factor;
        (0..self.axis_dim() / 2)
            .map(|t| base.powf(-2.0 * t as f64 / axis))
            .collect()
    }

    /// Per-pair rotation angles for a (possibly relative) position `(x, y)`;
    /// `x` pairs first, then `y` pairs.
    pub fn angles(&self, x: f64, y: f64) -> Vec<f64> {
        let f = self.frequencies();
        f.iter().map(|w| x * w).chain(f.iter().map(|w| y * w)).collect()
    }
}

/// Cosine/sine tables, one row per token and one column per channel pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    cos: Matrix,
    sin: Matrix,
}

impl RopeTable {
    pub fn from_angles(angles: &Matrix) -> Self {
        RopeTable {
            cos: angles.map(f64::cos),
            sin: angles.map(f64::sin),
        }
    }

    /// Absolute-position table for every token of `grid`.
    pub fn for_grid(grid: &TokenGrid, cfg: &RopeConfig) -> Result<Self> {
        cfg.validate()?;
        let pairs = cfg.head_dim / 2;
        let mut angles = Matrix::zeros(grid.n_tokens(), pairs);
        for tok in grid.n_text..grid.n_tokens() {
            let (x, y) = grid.coords(tok).expect("image token");
            angles.row_mut(tok).copy_from_slice(&cfg.angles(x as f64, y as f64));
        }
        Ok(Self::from_angles(&angles))
    }

    /// Restricts the table to a subset of token rows.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        RopeTable {
            cos: self.cos.select_rows(idx),
            sin: self.sin.select_rows(idx),
        }
    }

    pub fn rows(&self) -> usize {
        self.cos.rows()
    }

    fn rotate(&self, m: &Matrix, sign: f64) -> Result<Matrix> {
        let pairs = self.cos.cols();
        if m.rows() != self.cos.rows() || pairs == 0 || !m.cols().is_multiple_of(2 * pairs) {
            return Err(LabError::Shape(format!(
                "rope table {}x{} pairs cannot rotate {:?}",
                self.cos.rows(),
                pairs,
                m.shape()
            )));
        }
        let mut out = m.clone();
        for r in 0..m.rows() {
            let cos = self.cos.row(r);
            let sin = self.sin.row(r);
            // heads repeat the same table
            for chunk in out.row_mut(r).chunks_exact_mut(2 * pairs) {
                for p in 0..pairs {
                    let (a, b) = (chunk[2 * p], chunk[2 * p + 1]);
                    let (c, s) = (cos[p], sign * sin[p]);
                    chunk[2 * p] = a * c - b * s;
                    chunk[2 * p + 1] = a * s + b * c;
                }
            }
        }
        Ok(out)
    }

    /// Rotates each row's channel pairs forward.
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        self.rotate(m, 1.0)
    }

    /// Inverse (transpose) rotation.
    pub fn apply_transpose(&self, m: &Matrix) -> Result<Matrix> {
        self.rotate(m, -1.0)
    }
}

/// Rotates per-token head vectors by their absolute grid position.
///
/// Only valid for unclipped configurations; clipped distances exist only
/// pairwise, see [`rope_scores`].
pub fn rope_apply(q_or_k: &Matrix, grid: &TokenGrid, cfg: &RopeConfig) -> Result<Matrix> {
    cfg.validate()?;
    if cfg.clip != ClipMode::None {
        return Err(LabError::Config(
            "clipped relative distances need pairwise scores (rope_scores)".into(),
        ));
    }
    if q_or_k.cols() != cfg.head_dim {
        return Err(LabError::Shape(format!(
            "vector width {} != head_dim {}",
            q_or_k.cols(),
            cfg.head_dim
        )));
    }
    if q_or_k.rows() != grid.n_tokens() {
        return Err(LabError::Shape(format!(
            "{} rows for a grid of {} tokens",
            q_or_k.rows(),
            grid.n_tokens()
        )));
    }
    RopeTable::for_grid(grid, cfg)?.apply(q_or_k)
}

/// Pairwise rotary scores `s_ij = q_i · R(φ_ij) k_j` with `φ_ij` built from
/// the (clipped) offset between tokens `i` and `j`.
///
/// Image–image offsets are clipped per `cfg.clip`; any pair involving a text
/// token uses the raw offset to the origin.
pub fn rope_scores(q: &Matrix, k: &Matrix, grid: &TokenGrid, cfg: &RopeConfig) -> Result<Matrix> {
    cfg.validate()?;
    let n = grid.n_tokens();
    for m in [q, k] {
        if m.shape() != (n, cfg.head_dim) {
            return Err(LabError::Shape(format!(
                "expected {n}x{}, got {:?}",
                cfg.head_dim,
                m.shape()
            )));
        }
    }
    let pos = |t: usize| -> (i64, i64) {
        grid.coords(t).map_or((0, 0), |(x, y)| (x as i64, y as i64))
    };
    let pairs = cfg.head_dim / 2;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let qi = q.row(i);
        let (xi, yi) = pos(i);
        for j in 0..n {
            let kj = k.row(j);
            let (xj, yj) = pos(j);
            let (mut dx, mut dy) = (xi - xj, yi - yj);
            if !grid.is_text(i) && !grid.is_text(j) {
                dx = clip_offsets(dx, cfg.clip);
                dy = clip_offsets(dy, cfg.clip);
            }
            let angles = cfg.angles(dx as f64, dy as f64);
            let mut s = 0.0;
            for p in 0..pairs {
                let (q0, q1) = (qi[2 * p], qi[2 * p + 1]);
                let (k0, k1) = (kj[2 * p], kj[2 * p + 1]);
                let (sn, cs) = angles[p].sin_cos();
                s += (q0 * k0 + q1 * k1) * cs + (q0 * k1 - q1 * k0) * sn;
            }
            out[(i, j)] = cfg.logit_scale * s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn odd_head_dim_rejected() {
        let g = TokenGrid::image(2, 2);
        let q = Matrix::zeros(4, 5);
        assert!(rope_apply(&q, &g, &RopeConfig::new(5)).is_err());
        assert!(RopeConfig::new(6).validate().is_err());
        assert!(RopeConfig::new(8).with_ntk(0.5).validate().is_err());
        assert!(RopeConfig::new(8).with_clip(ClipMode::Local(0)).validate().is_err());
    }

    #[test]
    fn identical_positions_preserve_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = TokenGrid::image(3, 3);
        let cfg = RopeConfig::new(8);
        let q = Matrix::randn(9, 8, 1.0, &mut rng);
        let k = Matrix::randn(9, 8, 1.0, &mut rng);
        let rq = rope_apply(&q, &g, &cfg).unwrap();
        let rk = rope_apply(&k, &g, &cfg).unwrap();
        for t in 0..9 {
            let raw: f64 = q.row(t).iter().zip(k.row(t)).map(|(a, b)| a * b).sum();
            let rot: f64 = rq.row(t).iter().zip(rk.row(t)).map(|(a, b)| a * b).sum();
            assert!((raw - rot).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_scores_match_per_token_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = TokenGrid::new(2, 3, 4);
        let cfg = RopeConfig::new(8);
        let q = Matrix::randn(14, 8, 1.0, &mut rng);
        let k = Matrix::randn(14, 8, 1.0, &mut rng);
        let rq = rope_apply(&q, &g, &cfg).unwrap();
        let rk = rope_apply(&k, &g, &cfg).unwrap();
        let direct = rq.matmul_nt(&rk).unwrap();
        let pairwise = rope_scores(&q, &k, &g, &cfg).unwrap();
        assert!(direct.max_abs_diff(&pairwise) < 1e-12);
    }

    #[test]
    fn ntk_scales_angles_per_pair() {
        let plain = RopeConfig::new(16);
        let scaled = RopeConfig::new(16).with_ntk(10.0);
        let a1 = plain.angles(1.0, 0.0);
        let a10 = scaled.angles(1.0, 0.0);
        let axis = plain.axis_dim() as f64;
        for t in 0..plain.axis_dim() / 2 {
            let expected = 10f64.powf(-2.0 * t as f64 / axis);
            assert!((a10[t] / a1[t] - expected).abs() < 1e-12);
        }
        // y pairs carry no angle at offset (1, 0)
        assert!(a10[plain.axis_dim() / 2..].iter().all(|&a| a == 0.0));
    }

    #[test]
    fn transpose_inverts_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = RopeTable::from_angles(&Matrix::randn(3, 2, 2.0, &mut rng));
        let m = Matrix::randn(3, 8, 1.0, &mut rng);
        let back = table.apply_transpose(&table.apply(&m).unwrap()).unwrap();
        assert!(back.max_abs_diff(&m) < 1e-14);
        assert!(table.apply(&Matrix::zeros(3, 6)).is_err());
    }
}
