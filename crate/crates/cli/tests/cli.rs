use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 6] = ["--base-filters", "4", "--depth", "2", "--groupnorm-groups", "2"];

fn mtflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtflow")).args(args).output().expect("binary runs")
}

fn succeed(args: &[&str]) -> String {
    let out = mtflow(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn count(dir: &Path) -> usize {
    std::fs::read_dir(dir).map(|d| d.count()).unwrap_or(0)
}

fn generate(root: &Path) -> std::path::PathBuf {
    let data = root.join("data");
    succeed(&["generate", "--count", "10", "--size", "16", "--seed", "7", "--out", s(&data)]);
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--max-epochs", "2", "--lr", "1e-3"];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    succeed(&args)
}

#[test]
fn generate_writes_layout_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path());
    assert_eq!(count(&data.join("images")), 10);
    assert_eq!(count(&data.join("masks")), 10);
    assert!(data.join("manifest").is_file());
    assert!(data.join("config.toml").is_file());
}

#[test]
fn train_infer_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path());
    let run = tmp.path().join("run");
    let stdout = train(&data, &run, &[]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
    for f in ["best.ckpt", "last.ckpt", "train.log", "config.toml"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let pred = tmp.path().join("pred");
    let ckpt = run.join("best.ckpt");
    succeed(&["infer", "--checkpoint", s(&ckpt), "--input", s(&data), "--out", s(&pred), "--steps", "10", "--seed", "3", "--emit-trajectory"]);
    assert_eq!(count(&pred.join("masks")), 10);
    assert_eq!(count(&pred.join("probmaps")), 10);
    assert_eq!(count(&pred.join("trajectory").join("sample_0000")), 11);

    // Same seed, same masks.
    let again = tmp.path().join("pred2");
    succeed(&["infer", "--checkpoint", s(&ckpt), "--input", s(&data), "--out", s(&again), "--steps", "10", "--seed", "3"]);
    let m = |d: &Path| std::fs::read(d.join("masks").join("sample_0004.png")).unwrap();
    assert_eq!(m(&pred), m(&again));

    let eval_out = tmp.path().join("eval");
    let table = succeed(&["evaluate", "--data", s(&data), "--model", s(&ckpt), "--predictions", s(&pred), "--out", s(&eval_out)]);
    assert!(table.starts_with("Model"), "{table}");
    assert!(eval_out.join("metrics_best.csv").is_file());
    assert_eq!(count(&eval_out.join("overlays").join("predictions")), 10);
}

#[test]
fn ground_truth_as_prediction_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path());
    let table = succeed(&["evaluate", "--data", s(&data), "--predictions", s(&data.join("masks")), "--out", s(&tmp.path().join("e"))]);
    let row: Vec<&str> = table.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(row[0], "predictions");
    assert_eq!(&row[2..6], ["1.0000"; 4], "{table}");
}

#[test]
fn resume_continues_log_and_effective_config_reproduces_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path());
    let run = tmp.path().join("run");
    train(&data, &run, &[]);
    succeed(&["train", "--data", s(&data), "--out", s(&run), "--config", s(&run.join("config.toml")), "--max-epochs", "3", "--patience", "2", "--resume"]);
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let replay = tmp.path().join("replay");
    let cfg = tmp.path().join("replay.toml");
    std::fs::copy(run.join("config.toml"), &cfg).unwrap();
    succeed(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&replay)]);
    let replayed = std::fs::read_to_string(replay.join("train.log")).unwrap();
    assert_eq!(replayed, log);
}

#[test]
fn missing_masks_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path());
    std::fs::remove_dir_all(data.join("masks")).unwrap();
    let mut args = vec!["train", "--data", s(&data), "--out", s(tmp.path())];
    args.extend_from_slice(&TINY);
    let out = mtflow(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("masks"));
}

#[test]
fn mismatched_model_flags_rejected_at_inference() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path());
    let run = tmp.path().join("run");
    train(&data, &run, &["--model", "unet"]);
    let ckpt = run.join("last.ckpt");
    let out = mtflow(&["infer", "--checkpoint", s(&ckpt), "--input", s(&data), "--out", s(&tmp.path().join("p")), "--base-filters", "8"]);
    assert!(!out.status.success());
    let out = mtflow(&["train", "--data", s(&data), "--out", s(&run), "--resume", "--max-epochs", "3"]);
    assert!(!out.status.success(), "resume with the default full-size model must be refused");
}

#[test]
fn unsupported_device_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_mtflow"))
        .env("MTFLOW_DEVICE", "cuda")
        .args(["generate", "--count", "1", "--size", "16", "--out", "unused"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!Path::new("unused").exists());
}
