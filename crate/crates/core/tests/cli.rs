//! The `splitfed` binary and the artifacts it writes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use splitfed::harness::{
    read_manifest, run_grid, summarize_dir, CellStatus, ExperimentConfig, CSV_COLUMNS,
    MANIFEST_FILE, SUMMARY_FILE,
};
use splitfed::privacy::EPSILON_SLACK;

const TINY: &str = r#"{
    "devices": 3,
    "rounds": 2,
    "epsilons": [3],
    "modes": ["FixedOrthonormalA"],
    "model": {"d_x": 4, "width": 8, "layers": 1, "rank": 2, "classes": 2},
    "data": {"n": 120, "fraction": 0.2}
}"#;

fn splitfed(args: &[&str], config_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitfed"))
        .args(args)
        .current_dir(config_dir)
        .env_remove("SIM_DEFAULT_SEED")
        .output()
        .unwrap()
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn tiny_run_writes_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), TINY).unwrap();
    let out = splitfed(&["run", "--config", "c.json", "--out", "o"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let files = csv_files(&dir.path().join("o"));
    assert_eq!(files, vec!["FixedOrthonormalA_eps3.csv"]);
    let text = fs::read_to_string(dir.path().join("o").join(&files[0])).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_COLUMNS.join(","));
    assert_eq!(lines.len(), 3);
    assert!(dir.path().join("o").join(MANIFEST_FILE).exists());
    assert!(dir.path().join("o").join(SUMMARY_FILE).exists());
}

#[test]
fn seed_comes_from_flag_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), TINY).unwrap();
    let run = |extra: &[&str], env: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_splitfed"));
        cmd.args(["run", "--config", "c.json", "--out", out])
            .args(extra)
            .current_dir(dir.path());
        match env {
            Some(v) => cmd.env("SIM_DEFAULT_SEED", v),
            None => cmd.env_remove("SIM_DEFAULT_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        read_manifest(&dir.path().join(out)).unwrap().seed
    };
    assert_eq!(run(&[], None, "a"), 0);
    assert_eq!(run(&[], Some("12"), "b"), 12);
    assert_eq!(run(&["--seed", "5"], Some("12"), "c"), 5);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"delta": 1.5}"#).unwrap();
    fs::write(dir.path().join("typo.json"), r#"{"rouns": 3}"#).unwrap();
    fs::write(dir.path().join("ok.json"), TINY).unwrap();

    let out = splitfed(&["validate", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("delta must lie in (0,1)"));
    let out = splitfed(&["validate", "--config", "typo.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rouns"));
    assert_eq!(
        splitfed(&["validate", "--config", "missing.json"], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        splitfed(&["run", "--config", "bad.json"], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        splitfed(&["validate", "--config", "ok.json"], dir.path())
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        splitfed(&["summarize", "--in", "nowhere"], dir.path())
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn full_grid_cardinality_and_summary_consistency() {
    let cfg = ExperimentConfig {
        devices: 3,
        rounds: 2,
        data: splitfed::harness::DataParams {
            n: 200,
            ..Default::default()
        },
        ..ExperimentConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let report = run_grid(&cfg, 1, dir.path(), 4).unwrap();
    assert_eq!(report.failed(), 0);
    assert_eq!(csv_files(dir.path()).len(), 12);
    let json: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "json")
        })
        .collect();
    assert_eq!(json.len(), 2); // manifest + summary

    // Recomputing from disk gives what the run reported.
    let summary = summarize_dir(dir.path()).unwrap();
    assert_eq!(summary, report.summary);
    let on_disk: splitfed::harness::Summary =
        serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, summary);

    for cell in &summary.cells {
        let rows = csv::Reader::from_path(dir.path().join(splitfed::harness::cell_file_name(
            cell.mode,
            cell.epsilon_target,
        )))
        .unwrap()
        .into_deserialize::<splitfed::harness::EpochRow>()
        .collect::<Result<Vec<_>, _>>()
        .unwrap();
        let best = rows
            .iter()
            .map(|r| r.test_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(cell.best_accuracy, Some(best));
        for r in &rows {
            assert!(r.realized_epsilon_max <= r.epsilon_target * (1.0 + EPSILON_SLACK));
            assert!((0.0..=1.0).contains(&r.power_bound_fraction));
        }
    }
    for ordering in &summary.ordering {
        assert_eq!(ordering.ranking.len(), 3);
        assert!(ordering
            .ranking
            .windows(2)
            .all(|w| w[0].final_accuracy >= w[1].final_accuracy));
    }
}

#[test]
fn reruns_and_job_counts_give_identical_bytes() {
    let cfg = ExperimentConfig {
        devices: 4,
        rounds: 2,
        epsilons: vec![5.0, 10.0],
        data: splitfed::harness::DataParams {
            n: 200,
            ..Default::default()
        },
        ..ExperimentConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_grid(&cfg, 3, a.path(), 1).unwrap();
    run_grid(&cfg, 3, b.path(), 6).unwrap();
    for name in csv_files(a.path())
        .into_iter()
        .chain([MANIFEST_FILE.into(), SUMMARY_FILE.into()])
    {
        assert_eq!(
            fs::read(a.path().join(&name)).unwrap(),
            fs::read(b.path().join(&name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn zero_round_grid_writes_header_only() {
    let cfg = ExperimentConfig {
        rounds: 0,
        epsilons: vec![3.0],
        modes: vec![splitfed::lora::AdapterMode::UpdateBoth],
        devices: 2,
        data: splitfed::harness::DataParams {
            n: 100,
            ..Default::default()
        },
        ..ExperimentConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let report = run_grid(&cfg, 0, dir.path(), 1).unwrap();
    assert_eq!(report.manifest.cells[0].status, CellStatus::Completed);
    let text = fs::read_to_string(dir.path().join("UpdateBoth_eps3.csv")).unwrap();
    assert_eq!(text.trim_end(), CSV_COLUMNS.join(","));
    assert_eq!(report.summary.cells[0].final_accuracy, None);
}

#[test]
fn failing_cells_keep_partial_results() {
    // A legal but absurd learning rate overflows the adapters after a few rounds.
    let cfg = ExperimentConfig::from_json(
        r#"{"devices": 2, "rounds": 6, "epsilons": [100], "modes": ["UpdateBoth"],
            "eta": 1e300, "data": {"n": 100}}"#,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run_grid(&cfg, 0, dir.path(), 1).unwrap();
    assert_eq!(report.failed(), 1);
    let cell = &report.manifest.cells[0];
    assert!(
        cell.error.as_deref().unwrap().contains("aborted"),
        "{:?}",
        cell.error
    );
    assert!(cell.epochs < 6);
    let text = fs::read_to_string(dir.path().join(&cell.file)).unwrap();
    assert_eq!(text.lines().count(), cell.epochs + 1);
    assert_eq!(read_manifest(dir.path()).unwrap(), report.manifest);

    fs::write(dir.path().join("c.json"), cfg.to_json()).unwrap();
    let out = splitfed(&["run", "--config", "c.json", "--out", "again"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("again").join(MANIFEST_FILE).exists());
}
