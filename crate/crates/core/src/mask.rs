//! Sparse attention patterns over a joint text/image sequence.
//!
//! Every pattern shares the text clause: text queries see every key and every
//! query sees every text key. Patterns differ only in the image–image block.
//! Masks are stored as bit-packed rows; counts can also be streamed per row or,
//! for the shift-invariant windows, computed analytically, so megapixel-scale
//! grids never need to be materialized.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::exact_rank::exact_rank_bool;
use crate::geometry::TokenGrid;

/// Which pattern built a mask, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum MaskPattern {
    Full,
    /// Circular window: `dx² + dy² < radius²`.
    Clear { radius: f64 },
    /// Square window: `max(|dx|, |dy|) ≤ half_width`.
    Neighborhood { half_width: usize },
    /// Non-overlapping windows, shifted on odd layers.
    Swin { window: usize, shift: usize, layer: usize },
    /// Keys at a fixed residue of the offset modulo `stride`, per layer.
    Strided { stride: usize, layer: usize },
    /// Built from an arbitrary predicate.
    Custom,
}

impl MaskPattern {
    pub fn tag(&self) -> u8 {
        match self {
            MaskPattern::Full => 0,
            MaskPattern::Clear { .. } => 1,
            MaskPattern::Neighborhood { .. } => 2,
            MaskPattern::Swin { .. } => 3,
            MaskPattern::Strided { .. } => 4,
            MaskPattern::Custom => 255,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskPattern::Full => "full",
            MaskPattern::Clear { .. } => "clear",
            MaskPattern::Neighborhood { .. } => "neighborhood",
            MaskPattern::Swin { .. } => "swin",
            MaskPattern::Strided { .. } => "strided",
            MaskPattern::Custom => "custom",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            MaskPattern::Full | MaskPattern::Custom => vec![],
            MaskPattern::Clear { radius } => vec![radius],
            MaskPattern::Neighborhood { half_width } => vec![half_width as f64],
            MaskPattern::Swin {
                window,
                shift,
                layer,
            } => vec![window as f64, shift as f64, layer as f64],
            MaskPattern::Strided { stride, layer } => vec![stride as f64, layer as f64],
        }
    }

    fn from_tag(tag: u8, params: &[f64]) -> Result<Self> {
        let p = |i: usize| -> Result<f64> {
            params
                .get(i)
                .copied()
                .ok_or_else(|| LabError::Format(format!("pattern tag {tag} missing parameter {i}")))
        };
        Ok(match tag {
            0 => MaskPattern::Full,
            1 => MaskPattern::Clear { radius: p(0)? },
            2 => MaskPattern::Neighborhood {
                half_width: p(0)? as usize,
            },
            3 => MaskPattern::Swin {
                window: p(0)? as usize,
                shift: p(1)? as usize,
                layer: p(2)? as usize,
            },
            4 => MaskPattern::Strided {
                stride: p(0)? as usize,
                layer: p(1)? as usize,
            },
            255 => MaskPattern::Custom,
            other => return Err(LabError::Format(format!("unknown pattern tag {other}"))),
        })
    }

    pub fn validate(&self, grid: &TokenGrid) -> Result<()> {
        let _ = grid;
        match *self {
            MaskPattern::Clear { radius } if !(radius > 0.0) || !radius.is_finite() => {
                Err(LabError::Geometry(format!("CLEAR radius {radius} must be positive")))
            }
            MaskPattern::Swin { window, shift, .. } if window == 0 || shift >= window => Err(
                LabError::Geometry(format!("swin window {window} with shift {shift}")),
            ),
            MaskPattern::Strided { stride: 0, .. } => {
                Err(LabError::Geometry("stride must be at least 1".into()))
            }
            MaskPattern::Strided { stride, layer } if layer / stride >= stride => {
                Err(LabError::Geometry(format!(
                    "layer {layer} gives row offset {} outside stride {stride}",
                    layer / stride
                )))
            }
            _ => Ok(()),
        }
    }

    /// Image–image rule on raster coordinates.
    #[inline]
    pub fn image_pair(
        &self,
        grid: &TokenGrid,
        (xi, yi): (usize, usize),
        (xj, yj): (usize, usize),
    ) -> bool {
        let dx = xi as i64 - xj as i64;
        let dy = yi as i64 - yj as i64;
        match *self {
            MaskPattern::Full | MaskPattern::Custom => true,
            MaskPattern::Clear { radius } => ((dx * dx + dy * dy) as f64) < radius * radius,
            MaskPattern::Neighborhood { half_width } => {
                dx.unsigned_abs().max(dy.unsigned_abs()) as usize <= half_width
            }
            MaskPattern::Swin {
                window,
                shift,
                layer,
            } => {
                let sx = swin_shift(window, shift, layer, grid.width);
                let sy = swin_shift(window, shift, layer, grid.height);
                swin_window(xi, window, sx) == swin_window(xj, window, sx)
                    && swin_window(yi, window, sy) == swin_window(yj, window, sy)
            }
            MaskPattern::Strided { stride, layer } => {
                let r = stride as i64;
                let (rx, ry) = ((layer % stride) as i64, (layer / stride) as i64);
                (dx == 0 && dy == 0) || (dx.rem_euclid(r) == rx && dy.rem_euclid(r) == ry)
            }
        }
    }

    /// Full rule including the text clause.
    #[inline]
    pub fn allows(&self, grid: &TokenGrid, i: usize, j: usize) -> bool {
        match (grid.coords(i), grid.coords(j)) {
            (Some(a), Some(b)) => self.image_pair(grid, a, b),
            _ => true,
        }
    }

    /// Number of keys visible to query `i`, without building the mask.
    pub fn row_count(&self, grid: &TokenGrid, i: usize) -> u64 {
        let n = grid.n_tokens() as u64;
        let Some((xi, yi)) = grid.coords(i) else {
            return n;
        };
        let (w, h) = (grid.width as i64, grid.height as i64);
        let text = grid.n_text as u64;
        let span = |reach: i64| {
            let x0 = (xi as i64 - reach).max(0);
            let x1 = (xi as i64 + reach).min(w - 1);
            let y0 = (yi as i64 - reach).max(0);
            let y1 = (yi as i64 + reach).min(h - 1);
            (x0, x1, y0, y1)
        };
        let image = match *self {
            MaskPattern::Full | MaskPattern::Custom => grid.n_image() as u64,
            MaskPattern::Clear { radius } => {
                let (x0, x1, y0, y1) = span(radius.ceil() as i64);
                let mut c = 0u64;
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        c += self.image_pair(grid, (xi, yi), (x as usize, y as usize)) as u64;
                    }
                }
                c
            }
            MaskPattern::Neighborhood { half_width } => {
                let (x0, x1, y0, y1) = span(half_width as i64);
                ((x1 - x0 + 1) * (y1 - y0 + 1)) as u64
            }
            _ => {
                let mut c = 0u64;
                for y in 0..grid.height {
                    for x in 0..grid.width {
                        c += self.image_pair(grid, (xi, yi), (x, y)) as u64;
                    }
                }
                c
            }
        };
        text + image
    }

    /// Total popcount, summing [`Self::row_count`] over queries.
    pub fn streamed_popcount(&self, grid: &TokenGrid) -> u64 {
        (0..grid.n_tokens()).map(|i| self.row_count(grid, i)).sum()
    }

    /// Total popcount in closed form for translation-invariant windows:
    /// each in-window offset `(dx, dy)` occurs `(W−|dx|)(H−|dy|)` times.
    /// Falls back to streaming for the other patterns.
    pub fn analytic_popcount(&self, grid: &TokenGrid) -> u64 {
        let n = grid.n_tokens() as u64;
        let n_img = grid.n_image() as u64;
        let text_part = n * n - n_img * n_img;
        let (w, h) = (grid.width as i64, grid.height as i64);
        let offsets = |reach: i64, keep: &dyn Fn(i64, i64) -> bool| -> u64 {
            let rx = reach.min(w - 1);
            let ry = reach.min(h - 1);
            let mut total = 0u64;
            for dy in -ry..=ry {
                for dx in -rx..=rx {
                    if keep(dx, dy) {
                        total += ((w - dx.abs()) * (h - dy.abs())) as u64;
                    }
                }
            }
            total
        };
        match *self {
            MaskPattern::Full => n * n,
            _ if n_img == 0 => n * n,
            MaskPattern::Clear { radius } => {
                let r2 = radius * radius;
                text_part
                    + offsets(radius.ceil() as i64, &|dx, dy| ((dx * dx + dy * dy) as f64) < r2)
            }
            MaskPattern::Neighborhood { half_width } => {
                text_part + offsets(half_width as i64, &|_, _| true)
            }
            _ => self.streamed_popcount(grid),
        }
    }
}

/// Odd layers shift their windows, except along an axis that a single
/// window already covers.
fn swin_shift(window: usize, shift: usize, layer: usize, extent: usize) -> usize {
    if layer % 2 == 1 && extent > window {
        shift
    } else {
        0
    }
}

fn swin_window(coord: usize, window: usize, shift: usize) -> usize {
    (coord + window - shift) / window
}

/// Square boolean matrix over the tokens of a [`TokenGrid`], rows bit-packed
/// into `u64` words (bit `j % 64` of word `j / 64`).
#[derive(Clone, PartialEq)]
pub struct AttentionMask {
    grid: TokenGrid,
    pattern: MaskPattern,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl std::fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "AttentionMask({:?}, n={}, popcount={})",
            self.pattern,
            self.n(),
            self.popcount()
        )
    }
}

impl AttentionMask {
    /// Mask from an arbitrary predicate over token pairs.
    pub fn from_fn(grid: TokenGrid, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(grid, MaskPattern::Custom);
        for i in 0..m.n() {
            for j in 0..m.n() {
                if f(i, j) {
                    m.set(i, j);
                }
            }
        }
        m
    }

    fn empty(grid: TokenGrid, pattern: MaskPattern) -> Self {
        let n = grid.n_tokens();
        let words_per_row = n.div_ceil(64);
        AttentionMask {
            grid,
            pattern,
            words_per_row,
            bits: vec![0; n * words_per_row],
        }
    }

    /// Materializes `pattern` on `grid`.
    pub fn build(grid: TokenGrid, pattern: MaskPattern) -> Result<Self> {
        pattern.validate(&grid)?;
        let n = grid.n_tokens();
        let mut m = Self::empty(grid, pattern);
        let nt = grid.n_text;
        let wpr = m.words_per_row;
        for i in 0..n {
            let row = &mut m.bits[i * wpr..(i + 1) * wpr];
            match grid.coords(i) {
                None => fill_prefix(row, n),
                Some(qi) => {
                    fill_prefix(row, nt);
                    for j in nt..n {
                        let kj = grid.coords(j).expect("image token");
                        if pattern.image_pair(&grid, qi, kj) {
                            row[j / 64] |= 1u64 << (j % 64);
                        }
                    }
                }
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.grid.n_tokens()
    }

    pub fn grid(&self) -> &TokenGrid {
        &self.grid
    }

    pub fn pattern(&self) -> &MaskPattern {
        &self.pattern
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        (self.bits[i * self.words_per_row + j / 64] >> (j % 64)) & 1 == 1
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.words_per_row + j / 64] |= 1u64 << (j % 64);
    }

    pub fn row_words(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    pub fn row_popcount(&self, i: usize) -> u64 {
        self.row_words(i).iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn popcount(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn sparsity(&self) -> f64 {
        let n = self.n() as f64;
        if n == 0.0 {
            return 0.0;
        }
        1.0 - self.popcount() as f64 / (n * n)
    }

    /// Column indices set in row `i`.
    pub fn row_indices(&self, i: usize) -> Vec<usize> {
        (0..self.n()).filter(|&j| self.get(i, j)).collect()
    }

    /// The image–image block as boolean rows.
    pub fn image_block(&self) -> Vec<Vec<bool>> {
        let nt = self.grid.n_text;
        (nt..self.n())
            .map(|i| (nt..self.n()).map(|j| self.get(i, j)).collect())
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n()).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn is_subset_of(&self, other: &AttentionMask) -> bool {
        self.n() == other.n() && self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }

    /// True when text rows and text columns are fully set.
    pub fn satisfies_text_clause(&self) -> bool {
        let nt = self.grid.n_text;
        (0..nt).all(|i| self.row_popcount(i) == self.n() as u64)
            && (0..self.n()).all(|i| (0..nt).all(|j| self.get(i, j)))
    }

    /// Writes the portable bitmap form: `CLRMASK` magic, version byte, four
    /// little-endian `u64` (n, n_text, height, width), pattern tag, parameter
    /// count, `f64` parameters, then each row as `ceil(n/64)` LE `u64` words.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[FORMAT_VERSION])?;
        for v in [self.n(), self.grid.n_text, self.grid.height, self.grid.width] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        let params = self.pattern.params();
        w.write_all(&[self.pattern.tag(), params.len() as u8])?;
        for p in params {
            w.write_all(&p.to_le_bytes())?;
        }
        for word in &self.bits {
            w.write_all(&word.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(LabError::Format("not a mask file".into()));
        }
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        if b1[0] != FORMAT_VERSION {
            return Err(LabError::Format(format!("unsupported mask version {}", b1[0])));
        }
        let mut u = [0u64; 4];
        for v in u.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = u64::from_le_bytes(b);
        }
        let grid = TokenGrid::new(u[1] as usize, u[2] as usize, u[3] as usize);
        if grid.n_tokens() as u64 != u[0] {
            return Err(LabError::Format("header n disagrees with grid".into()));
        }
        let mut tp = [0u8; 2];
        r.read_exact(&mut tp)?;
        let mut params = Vec::with_capacity(tp[1] as usize);
        for _ in 0..tp[1] {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            params.push(f64::from_le_bytes(b));
        }
        let pattern = MaskPattern::from_tag(tp[0], &params)?;
        let mut m = Self::empty(grid, pattern);
        for word in m.bits.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *word = u64::from_le_bytes(b);
        }
        Ok(m)
    }

    /// Binary PBM (P4) image; black pixels are attended pairs.
    pub fn write_pbm(&self, mut w: impl Write) -> Result<()> {
        let n = self.n();
        write!(w, "P4\n# {} mask, n_text={}\n{n} {n}\n", self.pattern.name(), self.grid.n_text)?;
        let mut line = vec![0u8; n.div_ceil(8)];
        for i in 0..n {
            line.iter_mut().for_each(|b| *b = 0);
            for j in 0..n {
                if self.get(i, j) {
                    line[j / 8] |= 0x80 >> (j % 8);
                }
            }
            w.write_all(&line)?;
        }
        Ok(())
    }
}

const MAGIC: &[u8; 7] = b"CLRMASK";
const FORMAT_VERSION: u8 = 1;

fn fill_prefix(row: &mut [u64], count: usize) {
    let full = count / 64;
    row[..full].iter_mut().for_each(|w| *w = u64::MAX);
    if !count.is_multiple_of(64) {
        row[full] |= (1u64 << (count % 64)) - 1;
    }
}

pub fn build_full(grid: TokenGrid) -> AttentionMask {
    AttentionMask::build(grid, MaskPattern::Full).expect("full mask is always valid")
}

pub fn build_clear(grid: TokenGrid, radius: f64) -> Result<AttentionMask> {
    AttentionMask::build(grid, MaskPattern::Clear { radius })
}

pub fn build_neighborhood(grid: TokenGrid, half_width: usize) -> AttentionMask {
    AttentionMask::build(grid, MaskPattern::Neighborhood { half_width })
        .expect("neighborhood mask is always valid")
}

pub fn build_swin(grid: TokenGrid, window: usize, shift: usize, layer: usize) -> Result<AttentionMask> {
    AttentionMask::build(
        grid,
        MaskPattern::Swin {
            window,
            shift,
            layer,
        },
    )
}

pub fn build_strided(grid: TokenGrid, stride: usize, layer: usize) -> Result<AttentionMask> {
    AttentionMask::build(grid, MaskPattern::Strided { stride, layer })
}

/// Largest image side for which [`mask_stats`] runs the exact rank oracle.
pub const EXACT_RANK_MAX_SIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub popcount: u64,
    pub sparsity: f64,
    /// Exact rank of the image–image block; `None` when the grid is larger
    /// than [`EXACT_RANK_MAX_SIDE`] on either side.
    pub image_rank: Option<usize>,
}

pub fn mask_stats(m: &AttentionMask) -> MaskStats {
    let g = m.grid();
    let image_rank = (g.height <= EXACT_RANK_MAX_SIDE && g.width <= EXACT_RANK_MAX_SIDE)
        .then(|| exact_rank_bool(&m.image_block()));
    MaskStats {
        popcount: m.popcount(),
        sparsity: m.sparsity(),
        image_rank,
    }
}

/// Number of distinct (possibly shifted, possibly partial) Swin windows.
pub fn swin_window_count(grid: &TokenGrid, window: usize, shift: usize, layer: usize) -> usize {
    let count = |extent: usize| {
        let s = swin_shift(window, shift, layer, extent);
        if extent == 0 {
            0
        } else {
            swin_window(extent - 1, window, s) - swin_window(0, window, s) + 1
        }
    };
    count(grid.width) * count(grid.height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_examples() {
        let m = build_full(TokenGrid::new(1, 0, 0));
        assert_eq!(m.n(), 1);
        assert!(m.get(0, 0));
        let g = TokenGrid::new(3, 4, 5);
        assert_eq!(build_full(g).popcount(), 23 * 23);
        assert_eq!(mask_stats(&build_full(g)).sparsity, 0.0);
    }

    #[test]
    fn clear_three_by_three() {
        let g = TokenGrid::image(3, 3);
        let m = build_clear(g, 2.0).unwrap();
        assert_eq!(m.row_popcount(g.token_at(0, 0)), 4);
        assert_eq!(m.row_popcount(g.token_at(2, 2)), 4);
        assert_eq!(m.row_popcount(g.token_at(1, 1)), 9);
        assert!(build_clear(g, 0.0).is_err());
        assert!(build_clear(g, -1.0).is_err());
    }

    #[test]
    fn neighborhood_examples() {
        let g = TokenGrid::new(2, 3, 3);
        let m0 = build_neighborhood(g, 0);
        let block = m0.image_block();
        for (i, row) in block.iter().enumerate() {
            for (j, &b) in row.iter().enumerate() {
                assert_eq!(b, i == j);
            }
        }
        let m1 = build_neighborhood(g, 1);
        assert_eq!(m1.row_popcount(g.token_at(1, 1)), 2 + 9);
        let big = TokenGrid::image(9, 9);
        assert_eq!(build_neighborhood(big, 2).row_popcount(big.token_at(4, 4)), 25);
    }

    #[test]
    fn swin_examples() {
        let g = TokenGrid::image(4, 4);
        let m = build_swin(g, 2, 0, 0).unwrap();
        assert!((0..16).all(|i| m.row_popcount(i) == 4));
        let g = TokenGrid::new(2, 5, 6);
        for layer in 0..2 {
            let m = build_swin(g, 8, 3, layer).unwrap();
            assert!(m.image_block().iter().all(|r| r.iter().all(|&b| b)));
        }
        assert!(build_swin(g, 4, 4, 1).is_err());
        assert!(build_swin(g, 0, 0, 0).is_err());
    }

    #[test]
    fn swin_rank_is_window_count() {
        let g = TokenGrid::new(3, 8, 8);
        let m = build_swin(g, 4, 0, 0).unwrap();
        assert_eq!(mask_stats(&m).image_rank, Some(4));
        let shifted = build_swin(g, 4, 2, 1).unwrap();
        assert_eq!(swin_window_count(&g, 4, 2, 1), 9);
        assert_eq!(mask_stats(&shifted).image_rank, Some(9));
        let ragged = TokenGrid::image(7, 10);
        let m = build_swin(ragged, 4, 0, 0).unwrap();
        assert_eq!(mask_stats(&m).image_rank, Some(swin_window_count(&ragged, 4, 0, 0)));
        assert_eq!(swin_window_count(&ragged, 4, 0, 0), 6);
    }

    #[test]
    fn strided_examples() {
        let g = TokenGrid::new(2, 3, 4);
        let m = build_strided(g, 1, 0).unwrap();
        assert!(m.image_block().iter().all(|r| r.iter().all(|&b| b)));

        let g = TokenGrid::image(4, 4);
        let l0 = build_strided(g, 2, 0).unwrap();
        assert!((0..16).all(|i| l0.row_popcount(i) == 4));
        let l1 = build_strided(g, 2, 1).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                if i != j {
                    assert!(!(l0.get(i, j) && l1.get(i, j)), "overlap at {i},{j}");
                }
            }
            assert!(l1.get(i, i));
        }
        assert!(build_strided(g, 2, 4).is_err());
        assert!(build_strided(g, 0, 0).is_err());
    }

    #[test]
    fn strided_symmetry_follows_residues() {
        let g = TokenGrid::image(7, 7);
        assert!(build_strided(g, 3, 0).unwrap().is_symmetric());
        for layer in 1..9 {
            assert!(!build_strided(g, 3, layer).unwrap().is_symmetric(), "layer {layer}");
        }
        // with stride 2 every residue is its own negative
        for layer in 0..4 {
            assert!(build_strided(g, 2, layer).unwrap().is_symmetric());
        }
    }

    #[test]
    fn clear_rank_regression() {
        let g = TokenGrid::image(8, 8);
        let m = build_clear(g, 2.0).unwrap();
        // pinned from the exact row-reduction oracle
        assert_eq!(mask_stats(&m).image_rank, Some(CLEAR_8X8_R2_RANK));
    }

    // 3×3 stencil = T⊗T with T the 8×8 tridiagonal ones matrix (rank 7).
    const CLEAR_8X8_R2_RANK: usize = 49;

    #[test]
    fn large_grid_skips_rank() {
        let m = build_clear(TokenGrid::image(33, 2), 1.5).unwrap();
        assert_eq!(mask_stats(&m).image_rank, None);
    }

    #[test]
    fn bitmap_roundtrip_and_pbm() {
        let g = TokenGrid::new(3, 5, 7);
        let m = build_swin(g, 4, 2, 1).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = AttentionMask::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        buf[0] = b'X';
        assert!(AttentionMask::read_from(buf.as_slice()).is_err());

        let mut pbm = Vec::new();
        m.write_pbm(&mut pbm).unwrap();
        let header = "P4\n# swin mask, n_text=3\n38 38\n".to_string();
        assert!(pbm.starts_with(header.as_bytes()));
        assert_eq!(pbm.len(), header.len() + 38 * 5);
    }

    #[test]
    fn counting_paths_agree() {
        let g = TokenGrid::new(5, 11, 9);
        for pattern in [
            MaskPattern::Full,
            MaskPattern::Clear { radius: 3.5 },
            MaskPattern::Clear { radius: 20.0 },
            MaskPattern::Neighborhood { half_width: 2 },
            MaskPattern::Swin { window: 4, shift: 2, layer: 1 },
            MaskPattern::Strided { stride: 3, layer: 5 },
        ] {
            let m = AttentionMask::build(g, pattern).unwrap();
            assert_eq!(pattern.streamed_popcount(&g), m.popcount(), "{pattern:?}");
            assert_eq!(pattern.analytic_popcount(&g), m.popcount(), "{pattern:?}");
            for i in 0..g.n_tokens() {
                assert_eq!(pattern.row_count(&g, i), m.row_popcount(i));
            }
        }
    }

    proptest! {
        #[test]
        fn builders_keep_text_clause_and_diagonal(
            nt in 0usize..4, h in 1usize..7, w in 1usize..7,
            r in 0.5f64..6.0, hw in 0usize..3, win in 1usize..5, layer in 0usize..4,
        ) {
            let g = TokenGrid::new(nt, h, w);
            let masks = [
                build_full(g),
                build_clear(g, r).unwrap(),
                build_neighborhood(g, hw),
                build_swin(g, win, win / 2, layer).unwrap(),
                build_strided(g, 2, layer).unwrap(),
            ];
            for m in &masks {
                prop_assert!(m.satisfies_text_clause());
                prop_assert!((0..m.n()).all(|i| m.get(i, i)));
            }
            prop_assert!(masks[1].is_symmetric());
            prop_assert!(masks[2].is_symmetric());
        }

        #[test]
        fn clear_is_monotone_in_radius(h in 1usize..8, w in 1usize..8, r1 in 0.3f64..5.0, dr in 0.0f64..3.0) {
            let g = TokenGrid::new(2, h, w);
            let small = build_clear(g, r1).unwrap();
            let large = build_clear(g, r1 + dr).unwrap();
            prop_assert!(small.is_subset_of(&large));
        }
    }
}
