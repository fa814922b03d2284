//! Every attention variant on the same random inputs: distance from full
//! softmax attention and wall time.
//!
//! `cargo run --release --example attention_zoo`

use std::time::Instant;

use clear_lab::zoo::{masked_attention, AttentionInputs, AttentionMethod};
use clear_lab::{AttentionMask, MaskPattern, TokenGrid};

fn main() -> clear_lab::Result<()> {
    let grid = TokenGrid::new(8, 24, 24);
    let inputs = AttentionInputs::random(grid, 32, 7);
    let full = masked_attention(&inputs, &AttentionMask::build(grid, MaskPattern::Full)?)?;
    let methods = [
        AttentionMethod::Masked { pattern: MaskPattern::Clear { radius: 4.0 } },
        AttentionMethod::Masked { pattern: MaskPattern::Clear { radius: 12.0 } },
        AttentionMethod::Masked { pattern: MaskPattern::Clear { radius: grid.diagonal() + 1.0 } },
        AttentionMethod::Masked { pattern: MaskPattern::Neighborhood { half_width: 4 } },
        AttentionMethod::Masked { pattern: MaskPattern::Swin { window: 8, shift: 4, layer: 1 } },
        AttentionMethod::Masked { pattern: MaskPattern::Strided { stride: 2, layer: 0 } },
        AttentionMethod::Linear,
        AttentionMethod::Sigmoid { bias: None },
        AttentionMethod::KvCompressed,
        AttentionMethod::Agent { down_factor: 4 },
        AttentionMethod::Slot { slots: 32, seed: 1 },
    ];
    println!("{} tokens, c = {}", grid.n_tokens(), inputs.q.cols());
    println!("{:<28} {:>12} {:>10}", "method", "rel err", "ms");
    for m in methods {
        let t = Instant::now();
        let out = m.apply(&inputs)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        println!("{:<28} {:>12.3e} {:>10.2}", m.name(), out.rel_err(&full), ms);
    }
    Ok(())
}
