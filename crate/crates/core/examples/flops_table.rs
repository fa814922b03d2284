//! Attention cost of a FLUX-sized layer under full and CLEAR masks, next to
//! the published per-layer figures.
//!
//! `cargo run --release --example flops_table`

use clear_lab::flops::{
    circle_square_overhead, flux_cost_table, FluxConfig, PUBLISHED_GFLOPS_1024, PUBLISHED_RESOLUTIONS,
    PUBLISHED_TFLOPS,
};
use clear_lab::TokenGrid;

fn main() -> clear_lab::Result<()> {
    let cfg = FluxConfig::default();
    let report = flux_cost_table(&cfg, &PUBLISHED_RESOLUTIONS, &[8.0, 16.0, 32.0])?;

    println!("1024x1024, GFLOPS per layer");
    for (radius, published) in PUBLISHED_GFLOPS_1024 {
        let row = report.get(1024, radius).expect("row present");
        println!(
            "  {:<5} {:>4}  computed {:>8.2}  published {:>6.1}  diff {:+.1}%",
            row.method,
            radius.map_or("-".into(), |r| r.to_string()),
            row.gflops(),
            published,
            100.0 * (row.gflops() - published) / published
        );
    }

    println!("\nTFLOPS per layer (computed / published)");
    for (radius, published) in PUBLISHED_TFLOPS {
        let name = radius.map_or("full".to_string(), |r| format!("r={r}"));
        let cells: Vec<String> = PUBLISHED_RESOLUTIONS
            .iter()
            .zip(published)
            .map(|(&res, p)| format!("{:>9.3}/{:<7}", report.get(res, radius).unwrap().tflops(), p))
            .collect();
        println!("  {name:<5} {}", cells.join(" "));
    }

    println!("\nreduction vs full");
    for res in PUBLISHED_RESOLUTIONS {
        let reds: Vec<String> = [8.0, 16.0, 32.0]
            .iter()
            .map(|&r| format!("r={r}: {:.4}", report.reduction(res, r).unwrap()))
            .collect();
        println!("  {res:>5}  {}", reds.join("  "));
    }

    println!("\ncircle / square window cost (interior queries)");
    for r in [4usize, 8, 16, 32] {
        let o = circle_square_overhead(&TokenGrid::image(4 * r + 8, 4 * r + 8), r)?;
        println!("  r={r:<3} {o:.4}  (pi/4 = {:.4})", std::f64::consts::FRAC_PI_4);
    }
    Ok(())
}
