//! Draws the image neighbourhood of one query under each mask family and
//! prints popcount, sparsity and image-block rank.
//!
//! `cargo run --release --example mask_gallery`

use clear_lab::mask::mask_stats;
use clear_lab::{AttentionMask, MaskPattern, TokenGrid};

fn main() -> clear_lab::Result<()> {
    let grid = TokenGrid::new(4, 12, 12);
    let query = grid.token_at(5, 5);
    let patterns = [
        MaskPattern::Full,
        MaskPattern::Clear { radius: 3.0 },
        MaskPattern::Clear { radius: 4.5 },
        MaskPattern::Neighborhood { half_width: 2 },
        MaskPattern::Swin { window: 4, shift: 2, layer: 0 },
        MaskPattern::Swin { window: 4, shift: 2, layer: 1 },
        MaskPattern::Strided { stride: 3, layer: 1 },
    ];
    let out_dir = std::env::temp_dir().join("clear_lab_masks");
    std::fs::create_dir_all(&out_dir)?;
    for p in patterns {
        let mask = AttentionMask::build(grid, p)?;
        let s = mask_stats(&mask);
        println!(
            "{} {:?}: popcount {} sparsity {:.3} image rank {:?}",
            p.name(),
            p.params(),
            s.popcount,
            s.sparsity,
            s.image_rank
        );
        for y in 0..grid.height {
            let line: String = (0..grid.width)
                .map(|x| {
                    let j = grid.token_at(x, y);
                    match (j == query, mask.get(query, j)) {
                        (true, _) => 'Q',
                        (false, true) => '#',
                        (false, false) => '.',
                    }
                })
                .collect();
            println!("  {line}");
        }
        let path = out_dir.join(format!("{}_{}.pbm", p.name(), p.params().iter().map(|v| v.to_string()).collect::<Vec<_>>().join("_")));
        mask.write_pbm(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
    }
    println!("PBM images in {}", out_dir.display());
    Ok(())
}
