use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use raa_mil::cli::{dispatch, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use raa_mil::dataio::{synthesize_bags, write_bag, DatasetManifest, SynthConfig, ValidationReport};
use raa_mil::metrics::{MetricsReport, PredictionSet};

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("raa-mil").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 10] = [
    "--set",
    "rows=4",
    "--set",
    "cols=4",
    "--set",
    "dim=6",
    "--set",
    "patients_per_class=5",
    "--set",
    "max_patches=2",
];

const FAST: [&str; 10] = [
    "--set",
    "max_epochs=2",
    "--set",
    "attention_hidden=8",
    "--set",
    "classifier_hidden=8",
    "--set",
    "raa_hidden=4",
    "--set",
    "lr=0.001",
];

fn gen_tiny(dir: &Path) -> PathBuf {
    let mut args = vec!["gen-synth", "--out", s(dir), "--seed", "4"];
    args.extend(TINY);
    assert_eq!(run(&args), EXIT_OK);
    dir.join("manifest.json")
}

#[test]
fn validate_accepts_a_generated_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(dir.path());
    assert_eq!(run(&["validate", s(&manifest)]), EXIT_OK);
}

#[test]
fn validate_reports_a_damaged_bag_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(dir.path());
    let m = DatasetManifest::load(&manifest).unwrap();
    let bag = dir.path().join(&m.patients[0].path);
    let bytes = fs::read(&bag).unwrap();
    fs::write(&bag, &bytes[..bytes.len() - 8]).unwrap();
    assert_eq!(run(&["validate", s(&manifest)]), EXIT_FAILURE);
}

#[test]
fn train_predict_ensemble_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = gen_tiny(&d.join("data"));
    let test_ids = d.join("data/test_ids.json");
    let plan = d.join("plan.json");
    let run_dir = d.join("run");

    assert_eq!(
        run(&[
            "split",
            "--manifest",
            s(&manifest),
            "--k",
            "3",
            "--seed",
            "2",
            "--exclude",
            s(&test_ids),
            "--out",
            s(&plan)
        ]),
        EXIT_OK
    );
    let mut train = vec![
        "train",
        "--manifest",
        s(&manifest),
        "--plan",
        s(&plan),
        "--test-ids",
        s(&test_ids),
        "--seed",
        "2",
        "--set",
        "folds=3",
        "--out",
        s(&run_dir),
    ];
    train.extend(FAST);
    assert_eq!(run(&train), EXIT_OK);
    for f in 0..3 {
        assert!(run_dir.join(format!("fold_{f}.raac")).exists());
    }

    let probs = d.join("probs");
    assert_eq!(
        run(&[
            "predict",
            "--manifest",
            s(&manifest),
            "--run",
            s(&run_dir),
            "--ids",
            s(&test_ids),
            "--out",
            s(&probs)
        ]),
        EXIT_OK
    );
    let files: Vec<PathBuf> = (0..3).map(|f| probs.join(format!("probs_fold_{f}.json"))).collect();
    let held_out: Vec<String> = serde_json::from_str(&fs::read_to_string(&test_ids).unwrap()).unwrap();
    let first = PredictionSet::load(&files[0]).unwrap();
    assert_eq!(first.rows.iter().map(|r| r.id.clone()).collect::<Vec<_>>(), held_out);

    let ens = d.join("ensemble.json");
    let mut args = vec!["ensemble", "--out", s(&ens)];
    args.extend(files.iter().map(|p| s(p)));
    assert_eq!(run(&args), EXIT_OK);
    let ens_set = PredictionSet::load(&ens).unwrap();
    assert_eq!(ens_set.folds, vec![0, 1, 2]);

    let out = d.join("report");
    let named = format!("RAA-MIL={}", s(&ens));
    assert_eq!(run(&["report", &named, s(&files[0]), "--out", s(&out)]), EXIT_OK);
    let report = MetricsReport::load(out.join("RAA-MIL.metrics.json")).unwrap();
    assert_eq!(report.n, held_out.len());
    assert!(out.join("probs_fold_0.metrics.json").exists());
    let tables = fs::read_to_string(out.join("tables.txt")).unwrap();
    assert!(tables.contains("Ensemble results on held-out patients"));
    assert!(tables.contains("Per-class PR-AUC"));
    assert!(tables.lines().any(|l| l.starts_with("RAA-MIL ")));

    let heat = d.join("heat");
    let ck = run_dir.join("fold_0.raac");
    assert_eq!(
        run(&[
            "export-attn",
            "--checkpoint",
            s(&ck),
            "--manifest",
            s(&manifest),
            "--id",
            &held_out[0],
            "--pixels",
            "16",
            "--out",
            s(&heat)
        ]),
        EXIT_OK
    );
    assert!(heat.join(format!("{}_p0.pgm", held_out[0])).exists());
    assert!(heat.join(format!("{}_p0.csv", held_out[0])).exists());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(dir.path());
    let out = dir.path().join("run");
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&["train", "--manifest", s(&manifest)]), EXIT_USAGE);
    assert_eq!(
        run(&[
            "train",
            "--manifest",
            s(&manifest),
            "--out",
            s(&out),
            "--set",
            "learning_rate=1"
        ]),
        EXIT_USAGE
    );
    assert_eq!(
        run(&[
            "train",
            "--manifest",
            s(&manifest),
            "--out",
            s(&out),
            "--set",
            "folds=1"
        ]),
        EXIT_USAGE
    );
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"epochs": 3}"#).unwrap();
    assert_eq!(
        run(&[
            "train",
            "--manifest",
            s(&manifest),
            "--out",
            s(&out),
            "--config",
            s(&cfg)
        ]),
        EXIT_USAGE
    );
    assert!(!out.exists());
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = dir.path().join("run");
    assert_eq!(
        run(&["train", "--manifest", s(&missing), "--out", s(&out)]),
        EXIT_FAILURE
    );
    assert_eq!(run(&["ensemble", s(&missing), "--out", s(&out)]), EXIT_FAILURE);
}

#[test]
fn config_file_and_overrides_are_snapshotted() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(&dir.path().join("data"));
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"folds": 3, "max_epochs": 1, "attention_hidden": 4, "lr": 0.5}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let args = [
        "train",
        "--manifest",
        s(&manifest),
        "--config",
        s(&cfg),
        "--set",
        "lr=0.002",
        "--set",
        "raa=false",
        "--seed",
        "9",
        "--out",
        s(&out),
    ];
    assert_eq!(run(&args), EXIT_OK);
    let snap: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["folds"], 3);
    assert_eq!(snap["attention_hidden"], 4);
    assert_eq!(snap["lr"], 0.002);
    assert_eq!(snap["raa"], false);
    assert_eq!(snap["seed"], 9);
}

/// A featurizer-style fragment: bag files next to a fragment JSON, merged
/// into a manifest that does not exist yet.
#[test]
fn validate_merges_featurizer_fragments() {
    let dir = tempfile::tempdir().unwrap();
    let feat = dir.path().join("features");
    fs::create_dir_all(&feat).unwrap();
    let bags = synthesize_bags(&SynthConfig {
        patients_per_class: 1,
        rows: 3,
        cols: 3,
        dim: 5,
        max_patches: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut patients = Vec::new();
    for b in &bags {
        write_bag(b, feat.join(format!("{}.raab", b.patient_id))).unwrap();
        patients.push(serde_json::json!({
            "id": b.patient_id, "label": b.label, "path": format!("{}.raab", b.patient_id), "patches": b.patches(),
        }));
    }
    let fragment = serde_json::json!({
        "rows": 3, "cols": 3, "dim": 5,
        "patients": patients,
        "errors": [{"id": "p-unreadable", "message": "decode failed"}],
        "provenance": {"model": "test"},
    });
    let frag_path = feat.join("fragment.json");
    fs::write(&frag_path, fragment.to_string()).unwrap();

    let manifest = dir.path().join("manifest.json");
    assert_eq!(run(&["validate", s(&manifest), "--merge", s(&frag_path)]), EXIT_OK);
    let m = DatasetManifest::load(&manifest).unwrap();
    assert_eq!(m.patients.len(), 4);
    assert_eq!(m.patients[0].path, Path::new("features").join("healthy-000.raab"));

    // Merging the same patients twice is a duplicate-id failure.
    assert_eq!(run(&["validate", s(&manifest), "--merge", s(&frag_path)]), EXIT_FAILURE);

    let wrong = dir.path().join("wrong.json");
    fs::write(&wrong, fragment.to_string().replace("\"dim\":5", "\"dim\":7")).unwrap();
    let other = dir.path().join("other.json");
    assert_eq!(
        run(&["validate", s(&manifest), "--merge", s(&wrong), "--out", s(&other)]),
        EXIT_FAILURE
    );
    assert!(!other.exists());
}

#[test]
fn binary_reports_validation_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_raa-mil"))
        .args(["validate", s(&manifest)])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report: ValidationReport = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report.ok && report.patients.len() == 20);

    let bad = Command::new(env!("CARGO_BIN_EXE_raa-mil"))
        .arg("bogus")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
