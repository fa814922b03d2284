//! Pretrains a small full-attention teacher on synthetic class-conditioned
//! fields, samples a distillation set from it, and distills a CLEAR student.
//!
//! `cargo run --release --example distill_toy [steps]`

use std::time::Instant;

use clear_lab::dit::{
    eval_samples, generate_teacher_dataset, mean_distill_losses, pretrain_teacher, train_distill,
    DistillConfig, DitConfig, PretrainConfig, SyntheticTask, ToyDit,
};
use clear_lab::{MaskPattern, Params};

fn main() -> clear_lab::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let cfg = DitConfig::default();
    let task = SyntheticTask::new(&cfg, 4, 0)?;
    let mut teacher = ToyDit::new(cfg.clone(), 0)?;
    let clock = Instant::now();
    let fm = pretrain_teacher(&mut teacher, &task, &PretrainConfig::default())?;
    println!(
        "teacher pretrain: L_fm {:.4} -> {:.4} ({:.1}s)",
        fm[0],
        fm[fm.len() - 1],
        clock.elapsed().as_secs_f64()
    );

    let data = generate_teacher_dataset(&teacher, &task, 64, 20, 2)?;
    let eval = eval_samples(&data, 32, 99);
    let mut student = teacher.student(MaskPattern::Clear { radius: 3.0 })?;
    let dc = DistillConfig {
        steps,
        ..DistillConfig::for_blocks(cfg.blocks)
    };
    let before = mean_distill_losses(&student, &teacher, &eval, &dc)?;
    let clock = Instant::now();
    let curve = train_distill(&mut student, &teacher, &data, &dc)?;
    let after = mean_distill_losses(&student, &teacher, &eval, &dc)?;
    println!(
        "distill {} steps in {:.1}s: eval L_pred {:.5} -> {:.5} (ratio {:.3}), L_attn {:.5} -> {:.5}",
        curve.len(),
        clock.elapsed().as_secs_f64(),
        before.l_pred,
        after.l_pred,
        after.l_pred / before.l_pred,
        before.l_attn,
        after.l_attn
    );
    let frozen = student
        .params()
        .bits_equal(teacher.params(), |n| !Params::is_attention(n));
    println!("non-attention weights unchanged: {frozen}");
    Ok(())
}
