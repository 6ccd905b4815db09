use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use auprompt::Manifest;

fn auprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auprompt"))
        .args(args)
        .env_remove("AUPROMPT_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = auprompt(args);
    assert!(
        out.status.success(),
        "`auprompt {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

/// A default corpus and a model pretrained on it, shared by every test.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["synth", "--seed", "1", "--out", s(&root.join("corpus"))]);
        let manifest = root.join("corpus/manifest.jsonl");
        ok(&[
            "pretrain",
            "--seed",
            "1",
            "--manifest",
            s(&manifest),
            "--out",
            s(&root.join("pretrain")),
        ]);
        Fixture {
            checkpoint: root.join("pretrain/checkpoint.bin"),
            manifest,
            root,
            _dir: dir,
        }
    })
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), read(&p)));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d1");
    ok(&["synth", "--seed", "7", "--out", s(&out)]);
    let first = files(&out);
    std::fs::remove_dir_all(&out).unwrap();
    ok(&["synth", "--seed", "7", "--out", s(&out)]);
    assert_eq!(first, files(&out));
    assert!(first.len() > 200);
}

#[test]
fn synth_output_passes_manifest_validation() {
    let f = fixture();
    let summary = Manifest::load(&f.manifest).unwrap().validate(None).unwrap();
    assert_eq!((summary.dim, summary.n_classes, summary.videos), (64, 2, 200));
}

#[test]
fn synth_rejects_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = auprompt(&["synth", "--classes", "1", "--out", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}

#[test]
fn bad_flag_values_exit_2() {
    assert_eq!(auprompt(&["adapt", "--reset", "sometimes"]).status.code(), Some(2));
    assert_eq!(auprompt(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn zero_lr_keeps_initial_parameters() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let init = dir.path().join("init.bin");
    ok(&[
        "pretrain",
        "--manifest",
        s(&f.manifest),
        "--lr",
        "0",
        "--epochs",
        "2",
        "--dump-init",
        s(&init),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(read(&init), read(dir.path().join("run/checkpoint.bin")));
}

#[test]
fn missing_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = auprompt(&[
        "pretrain",
        "--manifest",
        s(&missing),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));
    let out = auprompt(&["pretrain", "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--manifest"));
}

#[test]
fn run_directory_has_fixed_artifacts() {
    let f = fixture();
    for name in ["config.json", "checkpoint.bin", "report.json", "metrics.csv"] {
        assert!(f.root.join("pretrain").join(name).is_file(), "{name} missing");
    }
}

#[test]
fn adapt_without_iterations_reduces_to_eval() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str], name: &str| -> Vec<u8> {
        let out = dir.path().join(name);
        let mut all = args.to_vec();
        all.extend([
            "--checkpoint",
            s(&f.checkpoint),
            "--manifest",
            s(&f.manifest),
            "--out",
            s(&out),
        ]);
        ok(&all);
        read(out.join("metrics.csv"))
    };
    let adapt_window = run(
        &["adapt", "--iters", "0", "--scoring", "window", "--window", "16"],
        "aw",
    );
    let eval_window = run(&["eval", "--window", "16"], "ew");
    assert_eq!(adapt_window, eval_window);
    let adapt_whole = run(&["adapt", "--iters", "0"], "a");
    let eval_whole = run(&["eval"], "e");
    assert_eq!(adapt_whole, eval_whole);

    let report: serde_json::Value = serde_json::from_slice(&read(dir.path().join("aw/report.json"))).unwrap();
    let eval: serde_json::Value = serde_json::from_slice(&read(dir.path().join("ew/report.json"))).unwrap();
    let records = report["records"].as_array().unwrap();
    let predictions = eval["predictions"].as_array().unwrap();
    assert_eq!(records.len(), predictions.len());
    for (r, p) in records.iter().zip(predictions) {
        assert_eq!(r["prediction"], p["prediction"]);
        assert_eq!(r["i_star"], p["i_star"]);
    }
}

#[test]
fn adapt_reruns_are_byte_identical() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for (name, jobs) in [("a", "1"), ("b", "3")] {
        let out = dir.path().join(name);
        ok(&[
            "adapt",
            "--reset",
            "per-video",
            "--jobs",
            jobs,
            "--checkpoint",
            s(&f.checkpoint),
            "--manifest",
            s(&f.manifest),
            "--out",
            s(&out),
        ]);
        reports.push((read(out.join("report.json")), read(out.join("videos.csv"))));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn eval_is_deterministic_and_checks_dimensions() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&[
            "eval",
            "--checkpoint",
            s(&f.checkpoint),
            "--manifest",
            s(&f.manifest),
            "--out",
            s(out),
        ]);
    }
    assert_eq!(read(a.join("report.json")), read(b.join("report.json")));

    let small = dir.path().join("small");
    ok(&["synth", "--dim", "48", "--out", s(&small)]);
    let out = auprompt(&[
        "eval",
        "--checkpoint",
        s(&f.checkpoint),
        "--manifest",
        s(&small.join("manifest.jsonl")),
        "--out",
        s(&dir.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
}

#[test]
fn config_file_replays_and_flags_override() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    ok(&[
        "adapt",
        "--iters",
        "3",
        "--window",
        "8",
        "--checkpoint",
        s(&f.checkpoint),
        "--manifest",
        s(&f.manifest),
        "--out",
        s(&first),
    ]);
    let replay = dir.path().join("replay");
    ok(&["adapt", "--config", s(&first.join("config.json")), "--out", s(&replay)]);
    assert_eq!(read(first.join("report.json")), read(replay.join("report.json")));

    let changed = dir.path().join("changed");
    ok(&[
        "adapt",
        "--config",
        s(&first.join("config.json")),
        "--iters",
        "0",
        "--out",
        s(&changed),
    ]);
    let cfg: serde_json::Value = serde_json::from_slice(&read(changed.join("config.json"))).unwrap();
    assert_eq!(cfg["tta"]["iterations"], 0);
    assert_eq!(cfg["tta"]["window"], 8);

    let wrong = auprompt(&["eval", "--config", s(&first.join("config.json")), "--out", s(&changed)]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn output_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_auprompt"))
        .args(["synth", "--videos-per-subject", "2"])
        .env("AUPROMPT_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("synth/manifest.jsonl").is_file());
    assert!(dir.path().join("synth/config.json").is_file());
}

#[test]
fn gradcheck_passes_and_echoes_its_step() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["gradcheck", "--instances", "10", "--out", s(dir.path())]);
    assert!(stdout.contains("all 19 checks passed"), "{stdout}");
    let cfg: serde_json::Value = serde_json::from_slice(&read(dir.path().join("config.json"))).unwrap();
    assert_eq!(cfg["gradcheck"]["step"], 1e-5);
}

#[test]
fn injected_fault_fails_and_names_the_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = auprompt(&[
        "gradcheck",
        "--instances",
        "5",
        "--inject-fault",
        "softmax",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("softmax"), "{stderr}");
    let unknown = auprompt(&["gradcheck", "--inject-fault", "warp", "--out", s(dir.path())]);
    assert_eq!(unknown.status.code(), Some(2));
}
