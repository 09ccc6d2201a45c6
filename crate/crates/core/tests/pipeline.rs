use std::path::Path;

use encodekit::container::read_container;
use encodekit::encoder::SearchSpace;
use encodekit::pipeline::{run_manifest, run_pipeline, RunManifest};
use encodekit::synth::{generate, SynthSpec};
use encodekit::types::{AlignmentReport, EncodingModel};

fn quick_search() -> SearchSpace {
    SearchSpace {
        trials: 3,
        max_epochs: 5,
        ..SearchSpace::default()
    }
}

fn write_dataset(dir: &Path, spec: &SynthSpec) -> std::path::PathBuf {
    let data = generate(spec).unwrap();
    let files = data.write(dir).unwrap();
    let manifest = RunManifest::for_synth(&files, spec.lags.clone(), quick_search(), 3);
    let path = dir.join("run.json");
    manifest.save(&path).unwrap();
    path
}

fn small(voxels: usize) -> SynthSpec {
    SynthSpec {
        trs_per_run: 40,
        voxels,
        mismatch: 0.5,
        tuned_gain: Some(0.8),
        ..SynthSpec::default()
    }
}

fn count_models(out: &Path) -> usize {
    walk(out).iter().filter(|p| p.ends_with("model.ekc")).count()
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn end_to_end_layout_counts_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &small(200));
    let first = run_manifest(&manifest).unwrap();

    // 4 conditions x 2 participants x 4 runs
    assert_eq!(first.final_models, 32);
    assert!(first.conditions.iter().all(|c| c.models == 8));
    let out = dir.path().join("out");
    assert_eq!(count_models(&out), 32);
    assert_eq!(first.executed_stages, 4 + 32 + 8 + 1 + 1);
    assert_eq!(first.skipped_stages, 0);

    let model = EncodingModel::load(out.join("baseline__none/sub02/fold3/model.ekc")).unwrap();
    assert_eq!((model.participant_id.as_str(), model.heldout_run), ("sub02", 3));
    assert_eq!(model.features(), 80);
    let report = AlignmentReport::load(out.join("tuned__w20s1/sub01/report.json")).unwrap();
    assert_eq!(report.voxels.len(), 200);
    assert_eq!(report.metadata.folds, vec![0, 1, 2, 3]);
    for f in [
        "summary.csv",
        "comparison.csv",
        "figures/comparison.svg",
        "figures/contrasts.svg",
        "contrasts/scramble__baseline__w20s1.csv",
        "contrasts/model__tuned__none.csv",
        "contrasts/cross__tuned__w20s1.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let cross = read_container(out.join("contrasts/cross__tuned__w20s1.ekc")).unwrap();
    assert_eq!(cross.f64_tensor("delta").unwrap().0, &[2, 200]);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4 * 2);

    let second = run_manifest(&manifest).unwrap();
    assert_eq!(second.executed_stages, 0);
    assert_eq!(second.skipped_stages, first.executed_stages);
    assert_eq!(second.conditions, first.conditions);
}

#[test]
fn changed_input_reruns_only_dependent_stages() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        tuned_gain: None,
        ..small(20)
    };
    let manifest_path = write_dataset(dir.path(), &spec);
    let first = run_manifest(&manifest_path).unwrap();
    assert_eq!(first.final_models, 16);
    let bytes = std::fs::read(dir.path().join("out/baseline__none/sub01/fold0/model.ekc")).unwrap();

    let (mut m, base) = RunManifest::load(&manifest_path).unwrap();
    m.alpha = 0.01;
    let second = run_pipeline(&m, &base).unwrap();
    // evaluation of 2 conditions x 2 participants, contrasts and report
    assert_eq!(second.executed_stages, 4 + 1 + 1);
    let again = std::fs::read(dir.path().join("out/baseline__none/sub01/fold0/model.ekc")).unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn outputs_are_bitwise_reproducible() {
    let spec = SynthSpec {
        tuned_gain: None,
        participants: 1,
        ..small(10)
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_manifest(write_dataset(a.path(), &spec)).unwrap();
    run_manifest(write_dataset(b.path(), &spec)).unwrap();
    for rel in ["out/baseline__w20s1/sub01/fold2/model.ekc", "out/summary.csv", "out/contrasts/contrasts.json"] {
        assert_eq!(
            std::fs::read(a.path().join(rel)).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn missing_input_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_dataset(dir.path(), &SynthSpec { tuned_gain: None, ..small(10) });
    std::fs::remove_file(dir.path().join("bold/sub02_run1.ekc")).unwrap();
    let err = run_manifest(&path).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(err.to_string().contains("sub02_run1"));
}

#[test]
fn duplicate_condition_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_dataset(dir.path(), &SynthSpec { tuned_gain: None, ..small(10) });
    let (mut m, base) = RunManifest::load(&path).unwrap();
    let dup = m.conditions[0].clone();
    m.conditions.push(dup);
    assert!(run_pipeline(&m, &base).unwrap_err().is_validation());
}

#[test]
fn mislabelled_track_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_dataset(dir.path(), &SynthSpec { tuned_gain: None, ..small(10) });
    let (mut m, base) = RunManifest::load(&path).unwrap();
    m.conditions.swap(0, 1);
    let t = m.conditions[0].track.clone();
    m.conditions[0].track = m.conditions[1].track.clone();
    m.conditions[1].track = t;
    m.conditions[0].model_tag = "other".into();
    let err = run_pipeline(&m, &base).unwrap_err();
    assert!(err.is_validation(), "{err}");
}
