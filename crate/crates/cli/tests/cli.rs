use std::path::Path;
use std::process::{Command, Output};

fn hoi(args: &[&str], data_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hoi"));
    cmd.args(args).env("RUST_LOG", "error").env_remove("HOI_DATA_ROOT");
    if let Some(root) = data_root {
        cmd.env("HOI_DATA_ROOT", root);
    }
    cmd.output().expect("run hoi")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &[&str] = &["--preset", "tiny", "--set", "train_scenes=4", "--set", "test_scenes=2", "--set", "batch_size=2"];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(TINY).chain(tail).copied().collect()
}

#[test]
fn synth_train_eval_inspect_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let s = ok(&hoi(&with(&["synth"], &[]), Some(&data)));
    assert!(s.contains("4 train / 2 test"), "{s}");
    assert!(data.join("train.jsonl").exists() && data.join("test.jsonl.raster").exists());

    ok(&hoi(&with(&["train"], &["--out", run.to_str().unwrap()]), Some(&data)));
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.exists() && run.join("train_log.jsonl").exists() && run.join("config.txt").exists());

    let eval_dir = tmp.path().join("eval");
    let e = ok(&hoi(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()], Some(&data)));
    let report: serde_json::Value = serde_json::from_str(&e).unwrap();
    assert_eq!(report["scenes"], 2);
    assert!(report["hoi_map"].as_f64().is_some_and(|m| (0.0..=1.0).contains(&m)));
    assert!(eval_dir.join("eval.json").exists());

    let c = ok(&hoi(&["inspect-clusters", "--checkpoint", ckpt.to_str().unwrap(), "--scene", "1"], None));
    assert!(c.starts_with("stage 1 centers") && c.contains("stage 2 instance tokens"), "{c}");
}

#[test]
fn config_file_and_seed_flags_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "preset = tiny\ntrain_scenes = 3\ntest_scenes = 1\n").unwrap();
    let run = tmp.path().join("run");
    ok(&hoi(&["train", "--config", cfg.to_str().unwrap(), "--seed", "5", "--out", run.to_str().unwrap()], None));
    let text = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(text.contains("seed = 5") && text.contains("train_scenes = 3"), "{text}");
}

#[test]
fn flops_reports_terms_and_writes_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&hoi(
        &["flops", "--resolution", "640", "--sweep", "320:960:320", "--plot", "--out", tmp.path().to_str().unwrap()],
        None,
    ));
    assert!(out.contains("N=400") && out.contains("2560N^2 + 1136640N + 63135744"), "{out}");
    let csv = std::fs::read_to_string(tmp.path().join("flops_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(tmp.path().join("flops_sweep.svg").exists() && tmp.path().join("flops.json").exists());
}

#[test]
fn ablate_prints_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&hoi(
        &with(&["ablate"], &["--axis", "patterns", "--values", "1;2", "--seeds", "1", "--out", tmp.path().to_str().unwrap()]),
        None,
    ));
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with("| 1 ") || l.starts_with("| 2 ")).collect();
    assert_eq!(rows.len(), 2, "{out}");
    assert!(tmp.path().join("ablation_patterns.md").exists());
}

#[test]
fn errors_exit_nonzero_with_message() {
    let bad_axis = hoi(&with(&["ablate"], &["--axis", "depth", "--values", "1"]), None);
    assert!(!bad_axis.status.success());
    assert!(String::from_utf8_lossy(&bad_axis.stderr).contains("unknown ablation axis"));

    let missing = hoi(&["eval", "--checkpoint", "/nonexistent/checkpoint.bin"], None);
    assert!(!missing.status.success());

    let bad_key = hoi(&["flops", "--set", "no_such_key=1"], None);
    assert!(!bad_key.status.success());
}
