use std::path::Path;
use std::process::{Command, Output};

fn encodekit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_encodekit"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = encodekit(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_dataset(dir: &Path, name: &str) {
    std::fs::write(
        dir.join("spec.json"),
        r#"{"trs_per_run": 40, "voxels": 12, "mismatch": 0.5, "tuned_gain": 0.8}"#,
    )
    .unwrap();
    ok(dir, &["synth", "gen", "--spec", "spec.json", "--out", name, "--trials", "2"]);
}

fn edit_manifest(path: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let mut m: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    f(&mut m);
    std::fs::write(path, serde_json::to_vec(&m).unwrap()).unwrap();
}

#[test]
fn run_then_rerun_skips_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, "data");
    let first = ok(dir, &["run", "--manifest", "data/run.json", "--jobs", "2"]);
    assert!(first.contains("32 final models"), "{first}");
    assert!(first.contains("tuned__w20s1: perplexity"));
    assert!(dir.join("data/out/summary.csv").is_file());
    assert!(dir.join("data/out/figures/comparison.svg").is_file());
    let second = ok(dir, &["report", "--manifest", "data/run.json"]);
    assert!(second.starts_with("stages executed 0 skipped 46"), "{second}");
}

#[test]
fn train_and_eval_stop_early() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, "data");
    let out = ok(dir, &["train", "--manifest", "data/run.json", "--out", "partial", "--seed", "9"]);
    assert!(out.starts_with("stages executed 36 skipped 0; 32 final models"), "{out}");
    assert!(dir.join("data/partial/tuned__none/sub02/fold3/model.ekc").is_file());
    assert!(dir.join("data/partial/tuned__none/sub02/fold3/trials.json").is_file());
    assert!(!dir.join("data/partial/tuned__none/sub02/report.json").exists());

    let out = ok(dir, &["eval", "--manifest", "data/run.json", "--out", "partial", "--seed", "9"]);
    assert!(out.starts_with("stages executed 8 skipped 36"), "{out}");
    assert!(dir.join("data/partial/tuned__none/sub02/report.json").is_file());
    assert!(!dir.join("data/partial/summary.csv").exists());
}

#[test]
fn stats_commands_on_pipeline_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, "data");
    ok(dir, &["eval", "--manifest", "data/run.json"]);

    let text = ok(
        dir,
        &[
            "stats",
            "significance",
            "--correlations",
            "data/out/baseline__none/sub01/fold_correlations.ekc",
            "--out",
            "rep.json",
        ],
    );
    assert!(text.contains("of 12 voxels significant"));
    let mine: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("rep.json")).unwrap()).unwrap();
    let pipeline: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("data/out/baseline__none/sub01/report.json")).unwrap())
            .unwrap();
    assert_eq!(mine, pipeline);

    let csv = ok(
        dir,
        &[
            "stats",
            "contrast",
            "--a",
            "data/out/tuned__none",
            "--b",
            "data/out/baseline__none",
            "--masks",
            "data/masks.json",
            "--out",
            "tables/model.csv",
        ],
    );
    assert_eq!(csv.lines().count(), 1 + 4);
    assert_eq!(std::fs::read_to_string(dir.join("tables/model.csv")).unwrap(), csv);

    ok(
        dir,
        &[
            "stats",
            "cross-contrast",
            "--baseline",
            "data/out/baseline__none",
            "--baseline-scrambled",
            "data/out/baseline__w20s1",
            "--tuned",
            "data/out/tuned__none",
            "--tuned-scrambled",
            "data/out/tuned__w20s1",
            "--masks",
            "data/masks.json",
            "--selection",
            "all",
            "--out",
            "cross.csv",
        ],
    );
    assert!(dir.join("cross.csv").is_file());
    assert!(dir.join("cross.ekc").is_file());
}

#[test]
fn lm_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, "data");
    let base: f64 = ok(dir, &["lm", "perplexity", "--track", "data/track_baseline__none.ekc"])
        .trim()
        .parse()
        .unwrap();
    let tuned: f64 = ok(dir, &["lm", "perplexity", "--track", "data/track_tuned__none.ekc"])
        .trim()
        .parse()
        .unwrap();
    assert!(tuned < base && base > 1.0);

    ok(dir, &["lm", "scramble-plan", "--timeline", "data/timeline.ekc", "--seed", "5", "--out", "plan.json"]);
    let plan: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["window_size"], 20);
    assert_eq!(plan["seed"], 5);

    ok(
        dir,
        &["lm", "apply-plan", "--timeline", "data/timeline.ekc", "--plan", "plan.json", "--out", "s.txt"],
    );
    ok(
        dir,
        &["lm", "apply-plan", "--timeline", "data/timeline.ekc", "--plan", "data/plan.json", "--out", "t.txt"],
    );
    let s = std::fs::read_to_string(dir.join("s.txt")).unwrap();
    assert_eq!(s.lines().count(), 4);
    let mut a: Vec<&str> = s.split_whitespace().collect();
    let mut b: Vec<String> = std::fs::read_to_string(dir.join("t.txt"))
        .unwrap()
        .split_whitespace()
        .map(str::to_string)
        .collect();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);
}

#[test]
fn featurize_writes_design() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, "data");
    ok(
        dir,
        &[
            "featurize",
            "--timeline",
            "data/timeline.ekc",
            "--track",
            "data/track_baseline__none.ekc",
            "--lags",
            "1,2,3",
            "--out",
            "design.ekc",
        ],
    );
    let bytes = std::fs::read(dir.join("design.ekc")).unwrap();
    assert_eq!(&bytes[..4], b"EKC1");
}

#[test]
fn validation_errors_exit_2_with_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, "data");
    std::fs::remove_file(dir.join("data/bold/sub02_run2.ekc")).unwrap();
    let out = encodekit(dir, &["run", "--manifest", "data/run.json"]);
    assert_eq!(out.status.code(), Some(2));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("data/out/error.json")).unwrap()).unwrap();
    assert_eq!(report["validation"], true);
    assert!(report["message"].as_str().unwrap().contains("sub02_run2"));

    let bad_lags = encodekit(
        dir,
        &["featurize", "--timeline", "data/timeline.ekc", "--track", "data/track_baseline__none.ekc", "--lags", "0", "--out", "x.ekc"],
    );
    assert_eq!(bad_lags.status.code(), Some(2));
    let usage = encodekit(dir, &["lm", "perplexity"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn stage_failure_exits_3_with_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir, "data");
    // a step this large overflows the loss on every trial
    edit_manifest(&dir.join("data/run.json"), |m| {
        m["search"]["learning_rate"] = serde_json::json!([1e300, 1e300]);
        m["search"]["max_epochs"] = serde_json::json!(2);
    });
    let out = encodekit(dir, &["train", "--manifest", "data/run.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("data/out/error.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "stage");
    assert_eq!(report["validation"], false);
}
