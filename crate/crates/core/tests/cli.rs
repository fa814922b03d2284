use std::path::Path;
use std::process::{Command, Output};

fn clear_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clear-lab")).args(args).output().expect("spawn clear-lab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(o: &Output, key: &str) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
        .unwrap_or_else(|| panic!("no {key} in:\n{}", stdout(o)))
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn corner_row_count_of_small_clear_mask() {
    let o = clear_lab(&["mask", "--H", "3", "--W", "3", "--n-text", "0", "--method", "clear", "--r", "2", "--stats"]);
    assert!(o.status.success());
    assert_eq!(value(&o, "corner_row_count"), "4");
    assert_eq!(value(&o, "popcount"), "49");
}

#[test]
fn mask_files_in_every_format() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["m.bin", "m.pbm", "m.csv", "m.json"] {
        let p = dir.path().join(name);
        let o = clear_lab(&["mask", "--method", "swin", "--window", "4", "--layer", "1", "--out", path_arg(&p)]);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(std::fs::metadata(&p).unwrap().len() > 0);
    }
    let bin = std::fs::File::open(dir.path().join("m.bin")).unwrap();
    let mask = clear_lab::AttentionMask::read_from(std::io::BufReader::new(bin)).unwrap();
    assert_eq!(mask.n(), 68);
    let pbm = std::fs::read(dir.path().join("m.pbm")).unwrap();
    assert!(pbm.starts_with(b"P4\n"));
}

#[test]
fn flops_csv_has_provenance_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.csv");
    let o = clear_lab(&["flops", "--preset", "flux", "--resolutions", "1024,2048", "--radii", "8,32", "--out", path_arg(&p)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&p).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# {"));
    assert_eq!(lines.next().unwrap(), "method,resolution,radius,n_tokens,popcount,flops");
    assert_eq!(lines.count(), 6);
    assert!(text.contains("full,1024,,4608,21233664,260919263232"));
}

#[test]
fn single_worker_hash_matches_bench() {
    let bench = clear_lab(&["attn-bench", "--method", "clear", "--r", "2.5", "--H", "12", "--W", "6", "--seed", "5"]);
    let par = clear_lab(&["parallel", "--N", "1", "--r", "2.5", "--H", "12", "--W", "6", "--seed", "5"]);
    assert!(bench.status.success() && par.status.success());
    assert_eq!(value(&bench, "output_sha256"), value(&par, "output_sha256"));
    let par3 = clear_lab(&["parallel", "--N", "3", "--r", "2.5", "--H", "12", "--W", "6", "--seed", "5"]);
    let err: f64 = value(&par3, "rel_err_vs_single_worker").parse().unwrap();
    assert!(err < 1e-12);
}

#[test]
fn bench_is_seed_deterministic() {
    let a = clear_lab(&["attn-bench", "--method", "linear", "--seed", "9"]);
    let b = clear_lab(&["attn-bench", "--method", "linear", "--seed", "9"]);
    let c = clear_lab(&["attn-bench", "--method", "linear", "--seed", "10"]);
    assert_eq!(value(&a, "output_sha256"), value(&b, "output_sha256"));
    assert_ne!(value(&a, "output_sha256"), value(&c, "output_sha256"));
}

#[test]
fn rank_reports_window_count() {
    let o = clear_lab(&["rank", "--method", "swin", "--H", "8", "--W", "8", "--window", "4", "--shift", "2", "--layer", "1"]);
    assert!(o.status.success());
    assert_eq!(value(&o, "exact_rank"), "9");
    assert_eq!(value(&o, "window_count"), "9");
}

#[test]
fn parallel_ledger_and_divergence_files() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = dir.path().join("ledger.csv");
    let out = dir.path().join("div.csv");
    let o = clear_lab(&[
        "parallel", "--mode", "inference", "--N", "2", "--steps", "2", "--text-mode", "average",
        "--ledger", path_arg(&ledger), "--out", path_arg(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let l = std::fs::read_to_string(&ledger).unwrap();
    assert!(l.lines().nth(1).unwrap() == "step,layer,sender,receiver,kind,token_count");
    assert!(l.contains(",halo_kv,"));
    let d = std::fs::read_to_string(&out).unwrap();
    assert_eq!(d.lines().filter(|l| !l.starts_with('#')).count(), 3);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "H = 3\nW = 3\nn-text = 0\nr = 1.5\nstats = true\n").unwrap();
    let o = clear_lab(&["--config", path_arg(&cfg), "mask", "--r", "2"]);
    assert!(o.status.success());
    assert_eq!(value(&o, "corner_row_count"), "4");
    std::fs::write(&cfg, "radius = 2\n").unwrap();
    assert_eq!(clear_lab(&["--config", path_arg(&cfg), "mask"]).status.code(), Some(2));
}

#[test]
fn distill_and_data_gen_small_runs() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = dir.path().join("teacher.ckpt");
    let data = dir.path().join("data.csv");
    let common = ["--H", "4", "--W", "4", "--n-text", "2", "--dim", "16", "--heads", "2", "--blocks", "2", "--teacher-steps", "3", "--sampler-steps", "2"];
    let mut args = vec!["data-gen", "--count", "3", "--checkpoint", path_arg(&teacher), "--out", path_arg(&data)];
    args.extend(common);
    let o = clear_lab(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = std::fs::read_to_string(&data).unwrap();
    assert_eq!(rows.lines().nth(1).unwrap(), "sample,class,token,channel,value");
    assert_eq!(rows.lines().count(), 2 + 3 * 16 * 4);

    let losses = dir.path().join("loss.csv");
    let student = dir.path().join("student.ckpt");
    let mut args = vec![
        "distill", "--teacher-checkpoint", path_arg(&teacher), "--steps", "3", "--batch", "2", "--dataset-size", "4",
        "--r", "2", "--out", path_arg(&losses), "--checkpoint", path_arg(&student),
    ];
    args.extend(common);
    let o = clear_lab(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let l = std::fs::read_to_string(&losses).unwrap();
    assert_eq!(l.lines().nth(1).unwrap(), "step,L_fm,L_pred,L_attn,total");
    assert_eq!(l.lines().count(), 2 + 3);
    let s = clear_lab::ToyDit::load(std::fs::File::open(&student).unwrap()).unwrap();
    assert_eq!(s.mask_patterns()[0], clear_lab::MaskPattern::Clear { radius: 2.0 });
}

#[test]
fn exit_codes() {
    assert_eq!(clear_lab(&["mask", "--method", "circle"]).status.code(), Some(2));
    assert_eq!(clear_lab(&["mask", "--H", "0"]).status.code(), Some(2));
    assert_eq!(clear_lab(&["parallel", "--N", "8", "--H", "8", "--r", "3"]).status.code(), Some(2));
    assert_eq!(clear_lab(&["flops", "--out", "/no/such/dir/f.csv"]).status.code(), Some(2));
    assert_eq!(clear_lab(&["distill", "--lr", "1e300", "--steps", "5", "--r", "1.5", "--teacher-steps", "1", "--dim", "8", "--heads", "1", "--H", "3", "--W", "3", "--dataset-size", "2", "--sampler-steps", "1"]).status.code(), Some(3));
    let o = clear_lab(&["mask", "--method", "circle"]);
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);
}
