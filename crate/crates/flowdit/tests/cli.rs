use std::path::Path;
use std::process::{Command, Output};

use flowdit::checkpoint::Checkpoint;
use flowdit::dataset::read_dataset;
use flowdit::run::{PROFILE_HEADER, SUMMARY_HEADER};

const TINY: &str = "\
preset = mini
model.layers = 3
model.hidden = 24
model.heads = 2
model.extents = 8,8,8
model.window = 1
model.d_pe = 4
model.t_embed_dim = 8
train.steps = 6
train.batch_size = 2
train.lr_max = 1e-3
run.eval_every = 3
run.checkpoint_every = 4
";

fn flowdit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowdit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, extents: &str, count: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    let out = flowdit(&[
        "gen-data", "--generator", "taylor-green", "--extents", extents, "--count", count, "--out", s(&path),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains(&format!("{count}/{count} fields within tolerance")), "{stdout}");
    path
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowdit(&["gen-data", "--generator", "vortex", "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown generator"));
    assert_eq!(code(&flowdit(&["gen-data", "--extents", "8,8", "--out", "x"])), 2);
    assert_eq!(code(&flowdit(&["config", "--set", "train.stepz=3"])), 2);
    assert_eq!(code(&flowdit(&["config", "--set", "model.heads=7"])), 2);
    assert_eq!(code(&flowdit(&["no-such-command"])), 2);
}

#[test]
fn missing_or_corrupt_files_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.vxfd");
    assert_eq!(code(&flowdit(&["eval", "--pred", s(&missing), "--true", s(&missing), "--out", "o"])), 4);
    let junk = dir.path().join("junk.vxfd");
    std::fs::write(&junk, b"not a dataset").unwrap();
    assert_eq!(code(&flowdit(&["eval", "--pred", s(&junk), "--true", s(&junk), "--out", "o"])), 4);
}

#[test]
fn config_prints_provenance() {
    let out = flowdit(&["config", "--set", "train.steps=42"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("train.steps = 42  # assumed; default 5000"), "{text}");
    assert!(text.contains("train.lr_max = 0.0001  # paper"), "{text}");
}

#[test]
fn eval_writes_profiles_and_rejects_mismatched_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.vxfd", "8,10,12", "2");
    let b = gen(dir.path(), "b.vxfd", "8,8,8", "2");
    let out_dir = dir.path().join("eval");
    let out = flowdit(&["eval", "--pred", s(&a), "--true", s(&a), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean nrmse: 0.000000"));
    let profiles = std::fs::read_to_string(out_dir.join("profiles.csv")).unwrap();
    let lines: Vec<&str> = profiles.lines().collect();
    assert_eq!(lines[0], PROFILE_HEADER);
    assert_eq!(lines.len() - 1, 2 * (8 + 10 + 12));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some(SUMMARY_HEADER));
    assert_eq!(summary.lines().count(), 3);

    let out = flowdit(&["eval", "--pred", s(&a), "--true", s(&b), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn import_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("f.raw");
    let values: Vec<u8> = (0..192).flat_map(|i| (i as f32).to_le_bytes()).collect();
    std::fs::write(&raw, &values).unwrap();
    let ds = dir.path().join("f.vxfd");
    let out = flowdit(&["import", "--input", s(&raw), "--extents", "4,4,4", "--out", s(&ds)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let back = dir.path().join("g.raw");
    assert_eq!(code(&flowdit(&["export", "--data", s(&ds), "--out", s(&back)])), 0);
    assert_eq!(std::fs::read(&back).unwrap(), values);

    std::fs::write(&raw, &values[..700]).unwrap();
    assert_eq!(code(&flowdit(&["import", "--input", s(&raw), "--extents", "4,4,4", "--out", s(&ds)])), 4);
}

#[test]
fn train_resume_reconstruct_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "tg.vxfd", "8,8,8", "5");
    let cfg = dir.path().join("tiny.txt");
    std::fs::write(&cfg, TINY).unwrap();

    let run = dir.path().join("run");
    let out = flowdit(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("config.txt").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows[0], "step,epoch,loss,lr,grad_norm,eval_loss");
    assert_eq!(rows.len(), 7);
    // evaluation at steps 3 and 6 only
    let evals: Vec<bool> = rows[1..].iter().map(|r| !r.ends_with(',')).collect();
    assert_eq!(evals, [false, false, true, false, false, true]);
    let ck4 = run.join("checkpoints/ckpt_4.bin");
    let ck6 = run.join("checkpoints/ckpt_6.bin");
    assert!(ck4.exists() && ck6.exists());
    assert!(Checkpoint::load(&ck6).unwrap().stats.is_some());

    // resuming from step 4 reproduces the uninterrupted end state
    let run2 = dir.path().join("run2");
    let out = flowdit(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run2), "--resume", s(&ck4),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let a = Checkpoint::load(&ck6).unwrap();
    let b = Checkpoint::load(&run2.join("checkpoints/ckpt_6.bin")).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.train, b.train);
    let resumed = std::fs::read_to_string(run2.join("metrics.csv")).unwrap();
    assert_eq!(resumed.lines().skip(1).collect::<Vec<_>>(), rows[5..].to_vec());

    let recon = dir.path().join("recon");
    let out = flowdit(&[
        "reconstruct", "--ckpt", s(&ck6), "--data", s(&data), "--planes", "x:4,y:4,x:4", "--steps", "5", "--out",
        s(&recon),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // the default picks the test split: the last of five fields
    let r = read_dataset(&recon.join("recon.vxfd")).unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(r.fields[0].meta.time_index, 4);
    assert!(r.fields[0].data().iter().all(|v| v.is_finite()));
    let profiles = std::fs::read_to_string(recon.join("profiles.csv")).unwrap();
    assert_eq!(profiles.lines().count(), 1 + 24);

    let out = flowdit(&[
        "eval", "--pred", s(&recon.join("recon.vxfd")), "--true", s(&recon.join("truth.vxfd")), "--out",
        s(&dir.path().join("ev")),
    ]);
    assert_eq!(code(&out), 0);
    let a = std::fs::read_to_string(recon.join("summary.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("ev/summary.csv")).unwrap();
    assert_eq!(a, b);

    let bad = flowdit(&["reconstruct", "--ckpt", s(&ck6), "--data", s(&data), "--planes", "x:9", "--steps", "2", "--out", s(&recon)]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "tg.vxfd", "8,8,8", "3");
    let cfg = dir.path().join("tiny.txt");
    std::fs::write(&cfg, TINY).unwrap();
    let out = flowdit(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("run")), "--set",
        "train.divergence_factor=0", "--set", "train.divergence_patience=2",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bench_attn_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    let out = flowdit(&[
        "bench-attn", "--tokens", "64", "--dim", "16", "--window", "2", "--heads", "2", "--repeats", "1", "--out",
        s(&path),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&path).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 1);
    assert_eq!(code(&flowdit(&["bench-attn", "--tokens", "60"])), 2);
}
