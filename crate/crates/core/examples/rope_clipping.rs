//! 2D rotary embeddings with clipped relative distances.
//!
//! Remote clipping caps how far apart two tokens can look; local clipping
//! stops nearby tokens from looking any closer than the clip radius.
//!
//! `cargo run --release --example rope_clipping`

use clear_lab::geometry::clip_offsets;
use clear_lab::rope::{rope_apply, rope_scores, RopeConfig};
use clear_lab::tensor::Matrix;
use clear_lab::{ClipMode, TokenGrid};
use rand::SeedableRng;

fn main() -> clear_lab::Result<()> {
    println!("offset  remote(3)  local(3)");
    for d in -5..=5 {
        println!(
            "{d:>6} {:>10} {:>9}",
            clip_offsets(d, ClipMode::Remote(3)),
            clip_offsets(d, ClipMode::Local(3))
        );
    }

    let grid = TokenGrid::new(2, 10, 10);
    let cfg = RopeConfig::new(16);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    // the same vector everywhere isolates the positional effect
    let v = Matrix::randn(1, 16, 1.0, &mut rng);
    let q = Matrix::from_fn(grid.n_tokens(), 16, |_, c| v[(0, c)]);

    let plain = rope_scores(&q, &q, &grid, &cfg)?;
    let rotated = rope_apply(&q, &grid, &cfg)?;
    let direct = rotated.matmul_nt(&rotated)?;
    println!("\npairwise scores vs rotate-then-dot: max diff {:.2e}", plain.max_abs_diff(&direct));

    let origin = grid.token_at(0, 0);
    for clip in [ClipMode::None, ClipMode::Remote(3), ClipMode::Local(3)] {
        let s = rope_scores(&q, &q, &grid, &cfg.with_clip(clip))?;
        let row: Vec<String> = (0..grid.width)
            .map(|x| format!("{:6.2}", s[(origin, grid.token_at(x, 0))]))
            .collect();
        println!("{:<12} {}", format!("{clip:?}"), row.join(""));
    }

    let ntk = rope_scores(&q, &q, &grid, &cfg.with_ntk(4.0))?;
    println!("\nNTK factor 4 changes scores by up to {:.3}", ntk.max_abs_diff(&plain));
    Ok(())
}
