//! End-to-end tests of the `lowshot` binary: exit codes, artifact layout,
//! metadata stamping, and byte-level reproducibility of results.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// The workspace root, where the default fixture paths resolve.
fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

fn lowshot(results: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowshot"))
        .args(args)
        .current_dir(workspace_root())
        .env("LOWSHOT_RESULTS", results)
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// The single run directory under `results` for the given command.
fn run_dir(results: &Path, command: &str) -> PathBuf {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(results)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.file_name()
                .unwrap()
                .to_str()
                .unwrap()
                .starts_with(&format!("{command}-"))
        })
        .collect();
    assert_eq!(dirs.len(), 1, "expected one {command} run dir, got {dirs:?}");
    dirs.pop().unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap())
        .unwrap_or_else(|e| panic!("{} is not JSON: {e}", path.display()))
}

#[test]
fn selftest_passes_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lowshot(tmp.path(), &["selftest"]);
    assert_exit(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("all 7 checks passed"), "{stdout}");
}

#[test]
fn missing_config_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lowshot(tmp.path(), &["pretrain", "no-such-file.cfg"]);
    assert_exit(&out, 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no-such-file.cfg"), "{stderr}");
}

#[test]
fn unknown_setting_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lowshot(tmp.path(), &["eval", "--set", "episodes.n=3"]);
    assert_exit(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("episodes.n"));
}

#[test]
fn malformed_override_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lowshot(tmp.path(), &["eval", "--set", "episodes.N"]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("key=value"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lowshot(tmp.path(), &["frobnicate"]);
    assert_exit(&out, 2);
}

#[test]
fn external_profile_reports_the_missing_backend() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lowshot(
        tmp.path(),
        &["eval", "--set", "encoder.profile=external", "--set", "episodes.count=1"],
    );
    assert_exit(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("external"));
}

#[test]
fn forge_data_writes_stamped_artifacts_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    assert_exit(&lowshot(tmp.path(), &["forge-data"]), 0);
    let dir = run_dir(tmp.path(), "forge-data");

    let manifest = read_json(&dir.join("manifest.json"));
    assert_eq!(manifest["command"], "forge-data");
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert_eq!(manifest["seed"], 11);
    assert!(manifest["versions"]["core"].is_string());
    assert!(manifest["runtime_seconds"].as_f64().unwrap() >= 0.0);

    let corpus = dir.join("pseudo_corpus.jsonl");
    let first = std::fs::read(&corpus).unwrap();
    assert!(!first.is_empty());
    let sidecar = read_json(&dir.join("pseudo_corpus.jsonl.meta.json"));
    assert_eq!(sidecar["command"], "forge-data");
    assert_eq!(sidecar["config_hash"].as_str().unwrap(), hash);

    // same config + seed ⇒ byte-identical data artifact
    assert_exit(&lowshot(tmp.path(), &["forge-data"]), 0);
    assert_eq!(std::fs::read(&corpus).unwrap(), first);
}

#[test]
fn eval_records_overrides_and_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    // base settings come from a config file; the episode shape from --set
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "encoder.profile = hash\nadapt.n = 0\nepisodes.count = 8\n",
    )
    .unwrap();
    let cfg = cfg.display().to_string();
    let args = [
        "eval",
        cfg.as_str(),
        "--set",
        "episodes.N=5",
        "--set",
        "episodes.K=1",
        "--set",
        "episodes.nota_rate=0.15",
    ];
    assert_exit(&lowshot(tmp.path(), &args), 0);
    let dir = run_dir(tmp.path(), "eval");

    let results_path = dir.join("results.json");
    let results = read_json(&results_path);
    assert_eq!(results["command"], "eval");
    assert_eq!(results["config_hash"], read_json(&dir.join("manifest.json"))["config_hash"]);
    assert_eq!(results["settings"]["episodes.nota_rate"], "0.15");
    assert_eq!(results["settings"]["episodes.N"], "5");
    assert_eq!(results["result"]["t"], 8);
    assert!(results["result"]["mean"].as_f64().unwrap() <= 1.0);

    let first = std::fs::read(&results_path).unwrap();
    assert_exit(&lowshot(tmp.path(), &args), 0);
    assert_eq!(std::fs::read(&results_path).unwrap(), first, "rerun changed results.json");
}

#[test]
fn different_settings_produce_different_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let base = [
        "eval",
        "--set",
        "encoder.profile=hash",
        "--set",
        "adapt.n=0",
        "--set",
        "episodes.count=2",
    ];
    assert_exit(&lowshot(tmp.path(), &base), 0);
    let mut shifted = base.to_vec();
    shifted.extend(["--set", "episodes.N=3"]);
    assert_exit(&lowshot(tmp.path(), &shifted), 0);
    let dirs = std::fs::read_dir(tmp.path()).unwrap().count();
    assert_eq!(dirs, 2, "distinct configs share a run directory");
}

#[test]
fn train_then_eval_round_trip_through_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    // pocket encoder so the test stays fast
    let train_args = [
        "meta-train",
        "--set",
        "encoder.d_model=16",
        "--set",
        "encoder.n_layers=1",
        "--set",
        "encoder.n_heads=2",
        "--set",
        "encoder.d_ff=32",
        "--set",
        "meta.steps=3",
    ];
    assert_exit(&lowshot(tmp.path(), &train_args), 0);
    let dir = run_dir(tmp.path(), "meta-train");

    let trace = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
    let header = trace.lines().next().unwrap();
    assert!(header.starts_with("# command=meta-train config_hash="), "{header}");
    assert_eq!(trace.lines().nth(1).unwrap(), "step,loss,lr");
    assert_eq!(trace.lines().count(), 2 + 3, "one row per step");

    let ckpt = dir.join("encoder.ckpt");
    let sidecar = read_json(&dir.join("encoder.ckpt.meta.json"));
    assert_eq!(sidecar["command"], "meta-train");

    let eval_args = [
        "eval",
        "--set",
        &format!("paths.checkpoint={}", ckpt.display()),
        "--set",
        "episodes.count=3",
        "--set",
        "episodes.Q=2",
    ];
    let eval_args: Vec<&str> = eval_args.iter().map(|s| s.as_ref()).collect();
    assert_exit(&lowshot(tmp.path(), &eval_args), 0);
    let results = read_json(&run_dir(tmp.path(), "eval").join("results.json"));
    assert_eq!(results["result"]["t"], 3);
}

#[test]
fn zero_shot_eval_forces_empty_supports_and_no_adaptation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lowshot(
        tmp.path(),
        &[
            "zero-shot-eval",
            "--set",
            "encoder.profile=hash",
            "--set",
            "episodes.count=4",
            // K=1 in the config must be ignored by this command
            "--set",
            "episodes.K=1",
        ],
    );
    assert_exit(&out, 0);
    let results = read_json(&run_dir(tmp.path(), "zero-shot-eval").join("results.json"));
    assert_eq!(results["result"]["settings"][0]["k_shot"], 0);
    assert_eq!(results["result"]["t"], 4);
}

#[test]
fn pretrain_writes_an_epoch_trace_and_a_loadable_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let root = workspace_root();
    // a 10-batch slice of the committed pseudo corpus keeps this quick
    let full = std::fs::read_to_string(root.join("fixtures/pseudo/corpus.jsonl")).unwrap();
    let slice: Vec<&str> = full.lines().take(50).collect();
    let small = tmp.path().join("small.jsonl");
    std::fs::write(&small, slice.join("\n") + "\n").unwrap();

    let args = [
        "pretrain".to_string(),
        "--set".into(),
        format!("paths.pseudo_corpus={}", small.display()),
        "--set".into(),
        "encoder.d_model=16".into(),
        "--set".into(),
        "encoder.n_layers=1".into(),
        "--set".into(),
        "encoder.n_heads=2".into(),
        "--set".into(),
        "encoder.d_ff=32".into(),
        "--set".into(),
        "pretrain.epochs=2".into(),
    ];
    let args: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_exit(&lowshot(tmp.path(), &args), 0);
    let dir = run_dir(tmp.path(), "pretrain");

    let manifest = read_json(&dir.join("manifest.json"));
    assert_eq!(manifest["summary"]["epoch_loss_means"].as_array().unwrap().len(), 2);

    let trace = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("# command=pretrain config_hash="));
    assert_eq!(trace.lines().count(), 2 + 2 * 10, "2 epochs x 10 batches");
    assert!(dir.join("encoder.ckpt").exists());
}
