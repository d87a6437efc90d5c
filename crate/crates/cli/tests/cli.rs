use std::path::Path;
use std::process::{Command, Output};

use auxid_core::experiments::{paper_models, read_csv};
use auxid_core::io::{estimate_metadata_from_toml, load_model, load_rollouts, save_model};

fn auxid(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auxid"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let (t, a) = paper_models();
    save_model(&t, dir.path().join("true.toml")).unwrap();
    save_model(&a, dir.path().join("aux.toml")).unwrap();
    dir
}

#[test]
fn simulate_estimate_round_trip() {
    let dir = setup();
    let d = dir.path();
    let sim = auxid(
        &[
            "--seed",
            "3",
            "simulate",
            "--model",
            "true.toml",
            "--count",
            "50",
            "--aux-model",
            "aux.toml",
            "--aux-count",
            "80",
            "--out",
            "r.csv",
        ],
        d,
    );
    assert!(sim.status.success(), "{sim:?}");
    let sets = load_rollouts(d.join("r.csv")).unwrap();
    assert_eq!((sets.true_rollouts.len(), sets.aux_rollouts.len()), (50, 80));

    let est = auxid(
        &[
            "estimate",
            "--rollouts",
            "r.csv",
            "--q",
            "0.5",
            "--reference",
            "true.toml",
            "--out",
            "est.toml",
        ],
        d,
    );
    assert!(est.status.success(), "{est:?}");
    let out = stdout(&est);
    assert!(out.contains("err_theta"), "{out}");

    let model = load_model(d.join("est.toml")).unwrap();
    let (t, _) = paper_models();
    assert!(model.theta_at(0).max_abs_diff(&t.theta_at(0)) < 0.5);
    let text = std::fs::read_to_string(d.join("est.toml")).unwrap();
    let meta = estimate_metadata_from_toml(&text).unwrap().unwrap();
    assert_eq!((meta.true_columns, meta.aux_columns), (100, 160));
    assert_eq!(meta.resolved_weights, vec![0.5, 0.5]);
    assert!(meta.gram_min_eig > 0.0);
}

#[test]
fn same_seed_same_rollouts() {
    let dir = setup();
    let d = dir.path();
    for name in ["a.csv", "b.csv"] {
        assert!(auxid(
            &[
                "--seed",
                "9",
                "simulate",
                "--model",
                "true.toml",
                "--count",
                "5",
                "--out",
                name
            ],
            d
        )
        .status
        .success());
    }
    let c = auxid(
        &[
            "--seed",
            "10",
            "simulate",
            "--model",
            "true.toml",
            "--count",
            "5",
            "--out",
            "c.csv",
        ],
        d,
    );
    assert!(c.status.success());
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
}

#[test]
fn singular_gram_exits_with_three() {
    let dir = setup();
    let d = dir.path();
    assert!(auxid(
        &["simulate", "--model", "true.toml", "--count", "1", "--out", "one.csv"],
        d
    )
    .status
    .success());
    let o = auxid(&["estimate", "--rollouts", "one.csv", "--q", "0", "--out", "e.toml"], d);
    assert_eq!(o.status.code(), Some(3), "{o:?}");
    let ridge = auxid(
        &[
            "estimate",
            "--rollouts",
            "one.csv",
            "--q",
            "0",
            "--ridge",
            "--out",
            "e.toml",
        ],
        d,
    );
    assert!(ridge.status.success(), "{ridge:?}");
    assert!(stdout(&ridge).contains("ridge applied"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = setup();
    let d = dir.path();
    let missing = auxid(
        &["simulate", "--model", "nope.toml", "--count", "1", "--out", "x.csv"],
        d,
    );
    assert_eq!(missing.status.code(), Some(2));
    let bad_delta = auxid(
        &["--delta", "0.3", "experiment", "--scenario", "1", "--out", "x.csv"],
        d,
    );
    assert_eq!(bad_delta.status.code(), Some(2));
    let bad_scenario = auxid(&["experiment", "--scenario", "4", "--out", "x.csv"], d);
    assert_eq!(bad_scenario.status.code(), Some(2));
    std::fs::write(d.join("typo.toml"), "repetitons = 3\n").unwrap();
    let typo = auxid(
        &[
            "experiment",
            "--scenario",
            "1",
            "--config",
            "typo.toml",
            "--out",
            "x.csv",
        ],
        d,
    );
    assert_eq!(typo.status.code(), Some(2));
    let no_weights = auxid(&["estimate", "--rollouts", "r.csv", "--out", "e.toml"], d);
    assert_eq!(no_weights.status.code(), Some(2));
}

#[test]
fn bound_prints_text_and_key_values() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(
        d.join("bound.toml"),
        "true_model = \"true.toml\"\naux_model = \"aux.toml\"\ntrue_count = 200\naux_count = 600\nweights = { constant = 1.0 }\n",
    )
    .unwrap();
    let o = auxid(&["bound", "--config", "bound.toml"], d);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.contains("noise term"));
    let total: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("total="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((total - 11.214920094811273).abs() < 1e-9);
    assert!(out.contains("thresholds_met=true"));
    assert!(out.contains("benefit_condition="));

    let flagged = auxid(&["--delta", "0.01", "bound", "--config", "bound.toml"], d);
    assert!(stdout(&flagged).contains("confidence=0.96"));
}

#[test]
fn experiment_with_config_overrides() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(
        d.join("exp.toml"),
        "true_model = \"true.toml\"\naux_model = \"aux.toml\"\nsweep = [100, 200]\nfixed = 50\nrepetitions = 2\nschedules = [{ constant = 0.0 }, { decaying = 1.0 }]\nbound_delta = 0.05\n",
    )
    .unwrap();
    let o = auxid(
        &[
            "--seed",
            "4",
            "experiment",
            "--scenario",
            "3",
            "--config",
            "exp.toml",
            "--out",
            "s3.csv",
        ],
        d,
    );
    assert!(o.status.success(), "{o:?}");
    let result = read_csv(d.join("s3.csv")).unwrap();
    let keys: Vec<(usize, &str)> = result.rows.iter().map(|r| (r.sweep, r.label.as_str())).collect();
    assert_eq!(
        keys,
        [(100, "q=0"), (100, "q=1/sqrt(Nr)"), (200, "q=0"), (200, "q=1/sqrt(Nr)")]
    );
    assert!(result.rows.iter().all(|r| r.bound_total.is_some()));
}

#[test]
fn cv_select_reports_choice() {
    let dir = setup();
    let d = dir.path();
    assert!(auxid(
        &[
            "simulate",
            "--model",
            "true.toml",
            "--count",
            "20",
            "--aux-model",
            "aux.toml",
            "--aux-count",
            "100",
            "--out",
            "r.csv"
        ],
        d
    )
    .status
    .success());
    let o = auxid(
        &[
            "--seed",
            "1",
            "cv-select",
            "--rollouts",
            "r.csv",
            "--candidates",
            "0,0.5,1",
        ],
        d,
    );
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    let chosen: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("chosen="))
        .unwrap()
        .parse()
        .unwrap();
    assert!([0.0, 0.5, 1.0].contains(&chosen));
    assert_eq!(out.lines().filter(|l| l.starts_with("q=")).count(), 3);

    let few = auxid(
        &["cv-select", "--rollouts", "r.csv", "--candidates", "0", "--folds", "50"],
        d,
    );
    assert_eq!(few.status.code(), Some(2));
}
