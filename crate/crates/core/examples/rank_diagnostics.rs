//! Exact and numerical rank of mask image blocks. Swin blocks are block
//! diagonal, so their rank is the window count; local masks are near full
//! rank.
//!
//! `cargo run --release --example rank_diagnostics`

use clear_lab::exact_rank::exact_rank_bool;
use clear_lab::mask::swin_window_count;
use clear_lab::tensor::{rank_of, Matrix, DEFAULT_RANK_TOL};
use clear_lab::{AttentionMask, MaskPattern, TokenGrid};

fn main() -> clear_lab::Result<()> {
    println!("{:<14} {:<16} {:>6} {:>6} {:>8}", "grid", "mask", "exact", "svd", "windows");
    for side in [8usize, 12, 16] {
        let grid = TokenGrid::image(side, side);
        let patterns = [
            MaskPattern::Clear { radius: 2.0 },
            MaskPattern::Clear { radius: 5.0 },
            MaskPattern::Neighborhood { half_width: 1 },
            MaskPattern::Swin { window: 4, shift: 2, layer: 0 },
            MaskPattern::Swin { window: 4, shift: 2, layer: 1 },
            MaskPattern::Strided { stride: 2, layer: 0 },
        ];
        for p in patterns {
            let block = AttentionMask::build(grid, p)?.image_block();
            let dense = Matrix::from_fn(block.len(), block.len(), |i, j| if block[i][j] { 1.0 } else { 0.0 });
            let windows = match p {
                MaskPattern::Swin { window, shift, layer } => swin_window_count(&grid, window, shift, layer).to_string(),
                _ => "-".into(),
            };
            println!(
                "{:<14} {:<16} {:>6} {:>6} {:>8}",
                format!("{side}x{side}"),
                format!("{}{:?}", p.name(), p.params()),
                exact_rank_bool(&block),
                rank_of(&dense, DEFAULT_RANK_TOL)?,
                windows
            );
        }
    }
    Ok(())
}
