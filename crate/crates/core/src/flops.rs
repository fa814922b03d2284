//! Attention cost model: `4 · popcount · c` FLOPS per layer.
//!
//! Only the masked score and value products are counted. Projections and
//! MLPs are excluded.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::TokenGrid;
use crate::mask::{AttentionMask, MaskPattern};
use crate::report::{Cell, Table};

/// FLOPS of one attention call under `mask` with feature width `c`.
pub fn flops_of_mask(mask: &AttentionMask, c: u64) -> u64 {
    flops_of_popcount(mask.popcount(), c)
}

pub fn flops_of_popcount(popcount: u64, c: u64) -> u64 {
    4 * popcount * c
}

/// Joint-attention geometry of a FLUX-sized transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FluxConfig {
    pub width: u64,
    pub n_text: usize,
    pub patch: usize,
}

impl Default for FluxConfig {
    fn default() -> Self {
        FluxConfig {
            width: 3072,
            n_text: 512,
            patch: 16,
        }
    }
}

impl FluxConfig {
    /// Token grid for a square image of `resolution` pixels per side.
    pub fn grid(&self, resolution: usize) -> Result<TokenGrid> {
        if resolution == 0 || !resolution.is_multiple_of(self.patch) {
            return Err(LabError::Config(format!(
                "resolution {resolution} is not a positive multiple of {}",
                self.patch
            )));
        }
        let side = resolution / self.patch;
        Ok(TokenGrid::new(self.n_text, side, side))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: String,
    pub resolution: usize,
    pub radius: Option<f64>,
    pub n_tokens: usize,
    pub popcount: u64,
    pub flops: u64,
}

impl CostRow {
    pub fn tflops(&self) -> f64 {
        self.flops as f64 / 1e12
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn get(&self, resolution: usize, radius: Option<f64>) -> Option<&CostRow> {
        self.rows
            .iter()
            .find(|r| r.resolution == resolution && r.radius == radius)
    }

    /// Fraction of full-attention FLOPS removed by radius `r`, in `[0, 1]`.
    pub fn reduction(&self, resolution: usize, radius: f64) -> Option<f64> {
        let full = self.get(resolution, None)?;
        let sparse = self.get(resolution, Some(radius))?;
        if full.flops == 0 {
            return Some(0.0);
        }
        Some((1.0 - sparse.flops as f64 / full.flops as f64).clamp(0.0, 1.0))
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(
            &["method", "resolution", "radius", "n_tokens", "popcount", "flops"],
            3,
        );
        for r in &self.rows {
            t.push(vec![
                r.method.as_str().into(),
                r.resolution.into(),
                r.radius.into(),
                r.n_tokens.into(),
                Cell::Int(r.popcount as i64),
                Cell::Int(r.flops as i64),
            ])
            .expect("fixed width");
        }
        t
    }

    /// Reduction ratios as a separate table.
    pub fn reduction_table(&self) -> Table {
        let mut t = Table::new(&["resolution", "radius", "reduction"], 2);
        for r in self.rows.iter().filter(|r| r.radius.is_some()) {
            let rad = r.radius.unwrap();
            if let Some(red) = self.reduction(r.resolution, rad) {
                t.push(vec![r.resolution.into(), rad.into(), red.into()])
                    .expect("fixed width");
            }
        }
        t
    }
}

/// Full attention plus one CLEAR row per radius, for every resolution.
///
/// Popcounts are analytic, so the 8192² case never touches an `n × n` mask.
pub fn flux_cost_table(cfg: &FluxConfig, resolutions: &[usize], radii: &[f64]) -> Result<CostReport> {
    let grids = resolutions
        .iter()
        .map(|&res| cfg.grid(res).map(|g| (res, g)))
        .collect::<Result<Vec<_>>>()?;
    for &r in radii {
        MaskPattern::Clear { radius: r }.validate(&grids.first().map_or(TokenGrid::image(1, 1), |g| g.1))?;
    }
    let per_res: Vec<Vec<CostRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = grids
            .iter()
            .map(|&(res, grid)| {
                s.spawn(move || {
                    let row = |method: &str, radius: Option<f64>, pattern: MaskPattern| {
                        let popcount = pattern.analytic_popcount(&grid);
                        CostRow {
                            method: method.to_string(),
                            resolution: res,
                            radius,
                            n_tokens: grid.n_tokens(),
                            popcount,
                            flops: flops_of_popcount(popcount, cfg.width),
                        }
                    };
                    let mut rows = vec![row("full", None, MaskPattern::Full)];
                    for &r in radii {
                        rows.push(row("clear", Some(r), MaskPattern::Clear { radius: r }));
                    }
                    rows
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("cost worker")).collect()
    });
    Ok(CostReport {
        rows: per_res.into_iter().flatten().collect(),
    })
}

/// Published GFLOPS at 1024² as `(radius, value)`; `None` is full attention.
pub const PUBLISHED_GFLOPS_1024: [(Option<f64>, f64); 4] = [
    (None, 260.9),
    (Some(8.0), 63.5),
    (Some(16.0), 80.6),
    (Some(32.0), 154.1),
];

pub const PUBLISHED_RESOLUTIONS: [usize; 4] = [1024, 2048, 4096, 8192];

/// Published TFLOPS per layer, rows full/r8/r16/r32 by column resolution.
#[allow(clippy::approx_constant)]
pub const PUBLISHED_TFLOPS: [(Option<f64>, [f64; 4]); 4] = [
    (None, [0.26, 3.51, 53.60, 847.73]),
    (Some(8.0), [0.06, 0.25, 0.98, 3.92]),
    (Some(16.0), [0.09, 0.35, 1.43, 5.79]),
    (Some(32.0), [0.15, 0.72, 3.14, 13.09]),
];

/// Ratio of circular-window to square-window popcounts over interior
/// queries (those whose square window lies fully inside the grid).
pub fn circle_square_overhead(grid: &TokenGrid, r: usize) -> Result<f64> {
    if r == 0 {
        return Err(LabError::Geometry("radius must be positive".into()));
    }
    if grid.height < 4 * r || grid.width < 4 * r {
        return Err(LabError::Geometry(format!(
            "{}x{} grid too small for interior windows of radius {r} (need >= {})",
            grid.height,
            grid.width,
            4 * r
        )));
    }
    let image = TokenGrid::image(grid.height, grid.width);
    let circle = MaskPattern::Clear { radius: r as f64 };
    let square = MaskPattern::Neighborhood { half_width: r };
    let (mut c, mut s) = (0u64, 0u64);
    for y in r..grid.height - r {
        for x in r..grid.width - r {
            let tok = image.token_at(x, y);
            c += circle.row_count(&image, tok);
            s += square.row_count(&image, tok);
        }
    }
    Ok(c as f64 / s as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_full_masks() {
        let g = TokenGrid::new(2, 3, 3);
        let empty = AttentionMask::from_fn(g, |_, _| false);
        assert_eq!(flops_of_mask(&empty, 3072), 0);
        let full = AttentionMask::build(g, MaskPattern::Full).unwrap();
        assert_eq!(flops_of_mask(&full, 7), 4 * 11 * 11 * 7);
    }

    #[test]
    fn flux_full_1024_is_exact() {
        let cfg = FluxConfig::default();
        let g = cfg.grid(1024).unwrap();
        assert_eq!(g.n_tokens(), 4608);
        let t = flux_cost_table(&cfg, &[1024], &[]).unwrap();
        assert_eq!(t.rows[0].flops, 4 * 4608 * 4608 * 3072);
    }

    #[test]
    fn materialized_and_analytic_agree_at_1024() {
        let cfg = FluxConfig::default();
        let g = cfg.grid(1024).unwrap();
        let mask = AttentionMask::build(g, MaskPattern::Clear { radius: 8.0 }).unwrap();
        let t = flux_cost_table(&cfg, &[1024], &[8.0]).unwrap();
        assert_eq!(t.get(1024, Some(8.0)).unwrap().flops, flops_of_mask(&mask, 3072));
        let g = t.get(1024, Some(8.0)).unwrap().gflops();
        assert!((g - 63.5).abs() / 63.5 < 0.01, "{g}");
    }

    #[test]
    fn bad_resolution_rejected() {
        assert!(FluxConfig::default().grid(1000).is_err());
        assert!(flux_cost_table(&FluxConfig::default(), &[1000], &[8.0]).is_err());
    }

    #[test]
    fn reduction_in_unit_interval() {
        let t = flux_cost_table(&FluxConfig::default(), &[1024, 2048], &[8.0, 1e6]).unwrap();
        for res in [1024, 2048] {
            let r8 = t.reduction(res, 8.0).unwrap();
            assert!(r8 > 0.0 && r8 < 1.0);
            assert_eq!(t.reduction(res, 1e6).unwrap(), 0.0);
        }
    }

    #[test]
    fn overhead_small_radii() {
        // strict inequality keeps only the centre at r = 1
        let r1 = circle_square_overhead(&TokenGrid::image(8, 8), 1).unwrap();
        assert!((r1 - 1.0 / 9.0).abs() < 1e-15);
        let r2 = circle_square_overhead(&TokenGrid::image(8, 8), 2).unwrap();
        assert!((r2 - 9.0 / 25.0).abs() < 1e-15);
        assert!(circle_square_overhead(&TokenGrid::image(7, 8), 2).is_err());
    }

    fn lattice_oracle(r: i64) -> f64 {
        let mut inside = 0;
        for dx in -r..=r {
            for dy in -r..=r {
                if dx * dx + dy * dy < r * r {
                    inside += 1;
                }
            }
        }
        inside as f64 / ((2 * r + 1) * (2 * r + 1)) as f64
    }

    #[test]
    fn overhead_matches_lattice_count() {
        for r in [1usize, 2, 3, 5, 8] {
            let got = circle_square_overhead(&TokenGrid::image(4 * r + 3, 4 * r), r).unwrap();
            assert!((got - lattice_oracle(r as i64)).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_height_roughly_doubles_image_cost() {
        for r in [2.0, 3.5, 5.0] {
            let ri = r as usize + 1;
            let w = 6 * ri;
            let h = 8 * ri;
            let p = MaskPattern::Clear { radius: r };
            let a = p.analytic_popcount(&TokenGrid::image(h, w)) as f64;
            let b = p.analytic_popcount(&TokenGrid::image(2 * h, w)) as f64;
            let ratio = b / a;
            assert!((1.9..=2.1).contains(&ratio), "r={r} ratio={ratio}");
        }
    }
}
