//! One PASS/FAIL line per acceptance criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. The
//! process fails when a criterion's outcome differs from `EXPECTED_FAIL`:
//! a regression, or a known-unattainable target that starts passing.

use std::time::Instant;

use clear_lab::dit::{
    distill_losses, eval_samples, generate_teacher_dataset, mean_distill_losses, pretrain_teacher,
    sample_gradients, train_distill, DistillConfig, DitConfig, FlowSample, PretrainConfig, SyntheticTask, ToyDit,
};
use clear_lab::exact_rank::exact_rank_bool;
use clear_lab::flops::{
    circle_square_overhead, flux_cost_table, FluxConfig, PUBLISHED_GFLOPS_1024, PUBLISHED_RESOLUTIONS,
    PUBLISHED_TFLOPS,
};
use clear_lab::mask::{build_swin, swin_window_count};
use clear_lab::parallel::{
    distributed_clear_attention, divergence_table, exact_text_recombination, make_plan, reference_inference,
    simulate_inference, text_partials, text_patch_average, MsgKind, TextMode, TextPartial,
};
use clear_lab::report::Format;
use clear_lab::tensor::Matrix;
use clear_lab::zoo::{masked_attention, AttentionInputs};
use clear_lab::{AttentionMask, MaskPattern, Params, TokenGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The 1024² r=16 published figure disagrees with the cost model that
/// reproduces every other entry; see README.
const EXPECTED_FAIL: &[u32] = &[1];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn criterion_1() -> Outcome {
    let clock = Instant::now();
    let report = flux_cost_table(&FluxConfig::default(), &PUBLISHED_RESOLUTIONS, &[8.0, 16.0, 32.0]).unwrap();
    let mut misses = Vec::new();
    for (radius, published) in PUBLISHED_GFLOPS_1024 {
        let got = report.get(1024, radius).unwrap().gflops();
        if (got - published).abs() / published > 0.02 {
            misses.push(format!("1024 {radius:?}: {got:.2} GFLOPS vs {published}"));
        }
    }
    for (radius, row) in PUBLISHED_TFLOPS {
        for (&res, published) in PUBLISHED_RESOLUTIONS.iter().zip(row) {
            let got = report.get(res, radius).unwrap().tflops();
            let within = (got - published).abs() / published <= 0.05;
            let rounds = (got * 100.0).round() / 100.0 == published;
            if !(within || rounds) {
                misses.push(format!("{res} {radius:?}: {got:.3} TFLOPS vs {published}"));
            }
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    if secs >= 60.0 {
        misses.push(format!("took {secs:.1}s"));
    }
    if misses.is_empty() {
        outcome(true, format!("all 4 GFLOPS and 16 TFLOPS cells match ({secs:.2}s)"))
    } else {
        outcome(false, misses.join("; "))
    }
}

fn criterion_2() -> Outcome {
    let report = flux_cost_table(&FluxConfig::default(), &[8192], &[8.0]).unwrap();
    let red = report.reduction(8192, 8.0).unwrap();
    outcome(red >= 0.995, format!("reduction at 8192², r=8 is {red:.5}"))
}

/// Dense softmax attention written from scratch, no library kernels.
fn oracle_attention(q: &Matrix, k: &Matrix, v: &Matrix, scale: f64) -> Matrix {
    let (n, m, c) = (q.rows(), k.rows(), v.cols());
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        let s: Vec<f64> = (0..m)
            .map(|j| (0..q.cols()).map(|d| q[(i, d)] * k[(j, d)]).sum::<f64>() * scale)
            .collect();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = s.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = w.iter().sum();
        for j in 0..m {
            for d in 0..c {
                out[(i, d)] += w[j] / z * v[(j, d)];
            }
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut largest = 0;
    for case in 0..100 {
        let (grid, c) = loop {
            let g = TokenGrid::new(rng.gen_range(0..=16), rng.gen_range(1..=16), rng.gen_range(1..=16));
            if g.n_tokens() <= 256 {
                break (g, rng.gen_range(1..=32));
            }
        };
        largest = largest.max(grid.n_tokens());
        let inputs = AttentionInputs::random(grid, c, 1000 + case);
        let got = masked_attention(&inputs, &AttentionMask::build(grid, MaskPattern::Full).unwrap()).unwrap();
        worst = worst.max(got.rel_err(&oracle_attention(&inputs.q, &inputs.k, &inputs.v, inputs.scale)));
    }
    let grid = TokenGrid::new(6, 14, 11);
    let inputs = AttentionInputs::random(grid, 16, 77);
    let full = masked_attention(&inputs, &AttentionMask::build(grid, MaskPattern::Full).unwrap()).unwrap();
    let covering = MaskPattern::Clear { radius: grid.diagonal() + 0.5 };
    let clear = masked_attention(&inputs, &AttentionMask::build(grid, covering).unwrap()).unwrap();
    let cover_gap = clear.rel_err(&full);
    outcome(
        worst <= 1e-10 && cover_gap == 0.0,
        format!("max rel err {worst:.2e} over 100 cases (n ≤ {largest}); covering CLEAR gap {cover_gap:.1e}"),
    )
}

fn criterion_4() -> Outcome {
    let cases = [
        (4, 4, 2, 1, 0),
        (8, 8, 4, 2, 0),
        (8, 8, 4, 2, 1),
        (12, 9, 4, 2, 1),
        (16, 16, 4, 2, 1),
        (16, 24, 8, 4, 1),
        (32, 32, 8, 4, 0),
        (32, 32, 8, 4, 1),
        (32, 32, 16, 8, 1),
        (30, 20, 7, 3, 1),
    ];
    let mut misses = Vec::new();
    for (h, w, win, shift, layer) in cases {
        let grid = TokenGrid::new(2, h, w);
        let block = build_swin(grid, win, shift, layer).unwrap().image_block();
        let rank = exact_rank_bool(&block);
        let windows = swin_window_count(&grid, win, shift, layer);
        if rank != windows {
            misses.push(format!("{h}x{w} w{win} s{shift} l{layer}: rank {rank} vs {windows} windows"));
        }
    }
    if misses.is_empty() {
        outcome(true, format!("rank = window count on {} grids up to 32x32", cases.len()))
    } else {
        outcome(false, misses.join("; "))
    }
}

fn criterion_5() -> Outcome {
    let o = circle_square_overhead(&TokenGrid::image(128, 128), 32).unwrap();
    outcome((0.72..=0.82).contains(&o), format!("circle/square at r=32 is {o:.4}"))
}

fn criterion_6() -> Outcome {
    let cfg = DitConfig {
        n_text: 2,
        height: 4,
        width: 4,
        in_dim: 3,
        dim: 16,
        heads: 2,
        blocks: 1,
        ..DitConfig::default()
    };
    let teacher = ToyDit::new(cfg.clone(), 1).unwrap();
    let mut student = ToyDit::new(cfg.clone(), 2).unwrap().student(MaskPattern::Clear { radius: 2.0 }).unwrap();
    let dc = DistillConfig {
        attn_loss_layers: vec![0],
        ..DistillConfig::for_blocks(1)
    };
    let task = SyntheticTask::new(&cfg, 2, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sample = FlowSample::draw(&task.sample(&mut rng), &mut rng);
    let names = student.params().attention_names();
    let t_out = teacher.forward(&sample.z_t(), sample.t, &sample.y).unwrap();
    let (_, grads) = sample_gradients(&student, Some(&t_out), &sample, &dc, &names).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = rng.gen_range(0..names.len());
        let (rows, cols) = student.params().get(&names[p]).unwrap().shape();
        let (i, j) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
        let mut loss_at = |delta: f64| {
            let w = student.params_mut().get_mut(&names[p]).unwrap();
            let orig = w[(i, j)];
            w[(i, j)] = orig + delta;
            let l = distill_losses(&student, &teacher, &sample, &dc).unwrap().total;
            student.params_mut().get_mut(&names[p]).unwrap()[(i, j)] = orig;
            l
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        let g = grads[p][(i, j)];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    outcome(worst < 1e-4, format!("max rel err {worst:.2e} over 20 attention-weight probes"))
}

fn criterion_7() -> Outcome {
    let clock = Instant::now();
    let cfg = DitConfig::default();
    let task = SyntheticTask::new(&cfg, 4, 0).unwrap();
    let mut teacher = ToyDit::new(cfg.clone(), 0).unwrap();
    pretrain_teacher(&mut teacher, &task, &PretrainConfig::default()).unwrap();
    let data = generate_teacher_dataset(&teacher, &task, 64, 20, 2).unwrap();
    let eval = eval_samples(&data, 32, 99);
    let mut student = teacher.student(MaskPattern::Clear { radius: 3.0 }).unwrap();
    let dc = DistillConfig::for_blocks(cfg.blocks);
    let before = mean_distill_losses(&student, &teacher, &eval, &dc).unwrap();
    let init = student.params().clone();
    train_distill(&mut student, &teacher, &data, &dc).unwrap();
    let after = mean_distill_losses(&student, &teacher, &eval, &dc).unwrap();
    let frozen = student.params().bits_equal(&init, |n| !Params::is_attention(n));
    let secs = clock.elapsed().as_secs_f64();
    let ratio = after.l_pred / before.l_pred;
    outcome(
        ratio <= 0.5 && frozen && secs < 600.0,
        format!(
            "L_pred {:.4} -> {:.4} (ratio {ratio:.3}), non-attention weights bit-equal: {frozen}, {secs:.0}s",
            before.l_pred, after.l_pred
        ),
    )
}

fn criterion_8() -> Outcome {
    let grid = TokenGrid::new(4, 32, 8);
    let r: f64 = 2.5;
    let halo = r.ceil() as usize * grid.width;
    let mut problems = Vec::new();
    let mut worst: f64 = 0.0;
    for layer in 0..4u64 {
        let inputs = AttentionInputs::random(grid, 16, 50 + layer);
        let single = masked_attention(&inputs, &AttentionMask::build(grid, MaskPattern::Clear { radius: r }).unwrap()).unwrap();
        let one = distributed_clear_attention(&make_plan(grid, 1, r).unwrap(), &inputs).unwrap();
        if one.out.as_slice().iter().zip(single.as_slice()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            problems.push(format!("layer {layer}: N=1 not bit-identical"));
        }
        for n in [2, 4, 8] {
            let plan = make_plan(grid, n, r).unwrap();
            let first = distributed_clear_attention(&plan, &inputs).unwrap();
            worst = worst.max(first.out.rel_err(&single));
            for p in 0..n - 1 {
                for (s, d) in [(p, p + 1), (p + 1, p)] {
                    let got = first.ledger.tokens(MsgKind::HaloKv, s, d);
                    if got != halo {
                        problems.push(format!("N={n} {s}->{d}: {got} halo tokens, expected {halo}"));
                    }
                }
            }
            for _ in 0..5 {
                let again = distributed_clear_attention(&plan, &inputs).unwrap();
                if again.out != first.out || again.ledger != first.ledger {
                    problems.push(format!("N={n}: repeated run differs"));
                    break;
                }
            }
        }
    }

    let model = ToyDit::new(DitConfig { height: 16, width: 8, ..DitConfig::default() }, 8)
        .unwrap()
        .student(MaskPattern::Clear { radius: r })
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = Matrix::randn(model.grid().n_image(), model.config().in_dim, 1.0, &mut rng);
    let y = Matrix::randn(model.grid().n_text, model.config().dim, 1.0, &mut rng);
    let reference = reference_inference(&model, &z, &y, 3).unwrap();
    let one = simulate_inference(&make_plan(model.grid(), 1, r).unwrap(), &model, &z, &y, 3, TextMode::Exact).unwrap();
    if one.trajectory != reference {
        problems.push("N=1 sampler not bit-identical".into());
    }
    for n in [2, 4] {
        let run = simulate_inference(&make_plan(model.grid(), n, r).unwrap(), &model, &z, &y, 3, TextMode::Exact).unwrap();
        for (a, b) in run.trajectory.iter().zip(&reference) {
            worst = worst.max(a.rel_err(b));
        }
        if !run.ledger.is_conserved() {
            problems.push(format!("N={n}: ledger sends and receives disagree"));
        }
    }
    if worst > 1e-10 {
        problems.push(format!("max rel err {worst:.2e}"));
    }
    if problems.is_empty() {
        outcome(
            true,
            format!("N in {{2,4,8}} max rel err {worst:.1e}; {halo} halo tokens per pair; N=1 bit-identical; 5 reruns identical"),
        )
    } else {
        outcome(false, problems.join("; "))
    }
}

/// Per-head attention with log partition masses, written independently.
fn oracle_partial(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, scale: f64) -> TextPartial {
    let dh = q.cols() / heads;
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut lse = Matrix::zeros(q.rows(), heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.rows() {
            let s: Vec<f64> = (0..k.rows())
                .map(|j| cols.clone().map(|d| q[(i, d)] * k[(j, d)]).sum::<f64>() * scale)
                .collect();
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - max).exp()).sum();
            lse[(i, h)] = max + z.ln();
            for j in 0..k.rows() {
                let w = (s[j] - lse[(i, h)]).exp();
                for d in cols.clone() {
                    out[(i, d)] += w * v[(j, d)];
                }
            }
        }
    }
    TextPartial { out, lse }
}

fn criterion_9() -> Outcome {
    let (heads, c) = (2, 8);
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    // every patch sees the same keys, so every partition mass is equal
    let grid = TokenGrid::new(3, 12, 4);
    let plan = make_plan(grid, 4, 1.0).unwrap();
    let q_text = Matrix::randn(3, c, 1.0, &mut rng);
    let patch_k = Matrix::randn(3 * 4, c, 1.0, &mut rng);
    let k_img = Matrix::vstack(&[&patch_k, &patch_k, &patch_k, &patch_k]).unwrap();
    let v_img = Matrix::randn(grid.n_image(), c, 1.0, &mut rng);
    let empty = Matrix::zeros(0, c);
    let parts = text_partials(&plan, &q_text, (&empty, &empty), (&k_img, &v_img), heads, scale).unwrap();
    let equal_gap = text_patch_average(&parts)
        .unwrap()
        .max_abs_diff(&exact_text_recombination(&parts, None).unwrap());

    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let grid = TokenGrid::new(rng.gen_range(1..6), rng.gen_range(8..20), rng.gen_range(2..8));
        let n = rng.gen_range(2..=4);
        let plan = make_plan(grid, n, 2.0).unwrap();
        let sigma = 1.0 + case as f64 / 5.0;
        let q = Matrix::randn(grid.n_text, c, sigma, &mut rng);
        let (k_t, v_t) = (Matrix::randn(grid.n_text, c, sigma, &mut rng), Matrix::randn(grid.n_text, c, 1.0, &mut rng));
        let (k_i, v_i) = (Matrix::randn(grid.n_image(), c, sigma, &mut rng), Matrix::randn(grid.n_image(), c, 1.0, &mut rng));
        let parts = text_partials(&plan, &q, (&k_t, &v_t), (&k_i, &v_i), heads, scale).unwrap();
        let text_only = oracle_partial(&q, &k_t, &v_t, heads, scale);
        let got = exact_text_recombination(&parts, Some(&text_only)).unwrap();
        let k_all = Matrix::vstack(&[&k_t, &k_i]).unwrap();
        let v_all = Matrix::vstack(&[&v_t, &v_i]).unwrap();
        worst = worst.max(got.rel_err(&oracle_partial(&q, &k_all, &v_all, heads, scale).out));
    }

    let model = ToyDit::new(DitConfig { height: 16, width: 8, ..DitConfig::default() }, 12)
        .unwrap()
        .student(MaskPattern::Clear { radius: 3.0 })
        .unwrap();
    let z = Matrix::randn(model.grid().n_image(), model.config().in_dim, 1.0, &mut rng);
    let y = Matrix::randn(model.grid().n_text, model.config().dim, 1.0, &mut rng);
    let plan = make_plan(model.grid(), 4, 3.0).unwrap();
    let exact = simulate_inference(&plan, &model, &z, &y, 6, TextMode::Exact).unwrap();
    let uniform = simulate_inference(&plan, &model, &z, &y, 6, TextMode::PatchAverage).unwrap();
    let table = divergence_table(&exact.trajectory, &uniform.trajectory).unwrap();
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("uniform_vs_exact_text.csv");
    table.emit(&path, Format::Csv, None).unwrap();
    let final_gap = uniform.final_latent().max_abs_diff(exact.final_latent());

    outcome(
        equal_gap <= 1e-14 && worst <= 1e-10,
        format!(
            "equal-mass gap {equal_gap:.1e}; lse identity max rel err {worst:.1e}; uniform-vs-exact final gap {final_gap:.2e} written to {}",
            path.display()
        ),
    )
}

fn main() {
    let criteria: [(u32, fn() -> Outcome); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let mut unexpected = Vec::new();
    for (id, run) in criteria {
        let o = run();
        let expected_fail = EXPECTED_FAIL.contains(&id);
        let tag = match (o.pass, expected_fail) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("criterion {id}: {tag}: {}", o.detail);
        if o.pass == expected_fail {
            unexpected.push(id);
        }
    }
    println!(
        "criterion 10: FAIL (not reproducible): image-quality metrics and wall-clock speedups need full-scale models and GPU kernels"
    );
    if !unexpected.is_empty() {
        eprintln!("unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
