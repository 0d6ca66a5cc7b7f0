use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dosing_core::cohort::DoseAction;
use dosing_core::pipeline::{self, Layout, RunConfig};
use dosing_core::shadow_metrics::DoseGaussian;
use dosing_core::study::BaselineActions;
use dosing_shadow::api::SubmitRequest;
use dosing_shadow::{Store, Study};

const TINY: &str = r#"
n_admissions = 120
n_test = 30
[state]
belief_dim = 8
epochs = 1
[behavior]
epochs = 1
[policy]
iterations = 4
checkpoint_every = 2
[policy.search]
expansions = 2
candidates = 2
children = 2
[evaluation]
rollouts = 20
critic_epochs = 1
[study]
n_patients = 3
points_per_patient = 2
"#;

const STAGES: [&str; 6] = ["simulate", "ingest", "train-state", "train-behavior", "train-policy", "evaluate"];

fn dosing(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dosing")).args(args).output().expect("spawn dosing")
}

fn run_pipeline(dir: &Path, config: &Path) {
    for stage in STAGES {
        let out = dosing(&[stage, "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--seed", "3"]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for sub in [dir.to_path_buf(), dir.join("checkpoints")] {
        for e in fs::read_dir(&sub).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                let name = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(name, fs::read(&p).unwrap());
            }
        }
    }
    files
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let out = dosing(&[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "n_admissions = 5\nbogus = 1\n").unwrap();
    let out = dosing(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn simulate_zero_admissions_writes_an_empty_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let out = dosing(&["simulate", "--n", "0", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(fs::read(dir.path().join("cohort.jsonl")).unwrap().len(), 0);
    let echo = fs::read_to_string(dir.path().join("simulate.config.toml")).unwrap();
    assert!(echo.contains("n_admissions = 0"));
}

#[test]
fn seeded_pipeline_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    run_pipeline(&a, &cfg);
    run_pipeline(&b, &cfg);
    let (fa, fb) = (outputs(&a), outputs(&b));
    assert!(fa.contains_key("policy-full.ckpt"));
    assert!(fa.contains_key("ope_report.tsv"));
    assert!(fa.contains_key("checkpoints/policy-full-000004.ckpt"));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        assert!(bytes == &fb[name], "{name} differs between runs");
    }
}

#[test]
fn cli_scores_match_the_service() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let dir = root.path().join("run");
    for stage in ["simulate", "ingest", "train-state", "train-behavior", "train-policy"] {
        let out = dosing(&[stage, "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let config = RunConfig::load(&cfg).unwrap();
    let layout = Layout::new(&dir);
    let design = pipeline::load_study_design(&config, &layout).unwrap();
    let baseline = BaselineActions(
        design
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let a = DoseAction {
                    vasopressor: 0.05 * i as f64,
                    iv_fluid: 60.0,
                };
                (p.clone(), a)
            })
            .collect(),
    );
    let baseline_path = root.path().join("baseline.csv");
    fs::write(&baseline_path, baseline.to_csv()).unwrap();

    let log = root.path().join("log.jsonl");
    let mut store = Store::open(
        Study {
            design: design.clone(),
            baseline: Some(baseline),
            recommender: Some(pipeline::load_recommender(&layout).unwrap()),
            joint: false,
        },
        &log,
    )
    .unwrap();
    for (c, clinician) in ["ana", "ben"].iter().enumerate() {
        let s = store.create_session(clinician, 10).unwrap();
        for (i, p) in design.points.iter().enumerate() {
            let req = SubmitRequest {
                patient_id: p.patient_id.clone(),
                time_index: p.time_index,
                vasopressor: DoseGaussian {
                    mean: 0.02 * (i + c) as f64,
                    variance: 0.01,
                },
                iv_fluid: DoseGaussian {
                    mean: 50.0 + 10.0 * c as f64,
                    variance: 900.0,
                },
            };
            store.submit(&s.session_id, &req, 20).unwrap();
        }
    }
    let service = store.scores(&design.study_id).unwrap().to_tsv();

    let out = dosing(&[
        "score",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
        "--baseline-actions",
        baseline_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), service);
    assert_eq!(fs::read_to_string(dir.join("scores.tsv")).unwrap(), service);
}
