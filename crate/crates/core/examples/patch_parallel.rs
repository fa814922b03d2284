//! CLEAR attention split across simulated workers that exchange only halo
//! rows and text partials, compared against a single worker.
//!
//! `cargo run --release --example patch_parallel`

use clear_lab::parallel::{
    comm_cost, distributed_clear_attention, make_plan, reference_inference, simulate_inference, CommMode,
    MsgKind, TextMode,
};
use clear_lab::tensor::Matrix;
use clear_lab::zoo::{masked_attention, AttentionInputs};
use clear_lab::dit::{DitConfig, ToyDit};
use clear_lab::{AttentionMask, MaskPattern, TokenGrid};
use rand::SeedableRng;

fn main() -> clear_lab::Result<()> {
    let grid = TokenGrid::new(4, 32, 16);
    let r = 3.0;
    let inputs = AttentionInputs::random(grid, 16, 11);
    let single = masked_attention(&inputs, &AttentionMask::build(grid, MaskPattern::Clear { radius: r })?)?;
    println!("{:>3} {:>12} {:>7} {:>7} {:>9}", "N", "rel err", "halo", "text", "vs sync");
    for n in [1, 2, 4, 8] {
        let plan = make_plan(grid, n, r)?;
        let d = distributed_clear_attention(&plan, &inputs)?;
        println!(
            "{n:>3} {:>12.2e} {:>7} {:>7} {:>9.4}",
            d.out.rel_err(&single),
            d.ledger.total_tokens(MsgKind::HaloKv),
            d.ledger.total_tokens(MsgKind::TextPartial),
            comm_cost(&grid, r, CommMode::Clear).ratio
        );
    }

    let model = ToyDit::new(DitConfig { height: 16, width: 8, ..DitConfig::default() }, 5)?
        .student(MaskPattern::Clear { radius: r })?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
    let z = Matrix::randn(model.grid().n_image(), model.config().in_dim, 1.0, &mut rng);
    let y = Matrix::randn(model.grid().n_text, model.config().dim, 1.0, &mut rng);
    let reference = reference_inference(&model, &z, &y, 8)?;
    println!("\n8-step sampler, 4 workers, final-latent gap to one worker:");
    for mode in [TextMode::Exact, TextMode::PatchAverage] {
        let run = simulate_inference(&make_plan(model.grid(), 4, r)?, &model, &z, &y, 8, mode)?;
        println!("  {mode:?}: {:.3e}", run.final_latent().max_abs_diff(reference.last().unwrap()));
    }
    Ok(())
}
