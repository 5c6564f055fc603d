mod common;

use std::process::Command;

use common::{read_dir_bytes, small_synth, workspace};
use stainforge_cli::commands::{evaluate, preprocess, train};
use stainforge_cli::output::Artifact;
use stainforge_core::synth::read_planted_labels;

#[test]
fn preprocess_keeps_every_planted_nucleus() {
    let ws = workspace(&small_synth(8), 1);
    let summary = preprocess::run(&ws.cfg).unwrap();
    assert_eq!(summary.tiles_kept, 8);
    assert!(summary.dropped.is_empty());
    let (_, planted) = read_planted_labels(&ws.path().join("planted_labels.csv")).unwrap();
    let table = preprocess::load_cells(&ws.cfg).unwrap();
    assert_eq!(table.rows.len(), planted.len());
    for row in &table.rows {
        assert!(planted.contains_key(&(row.tile_id.clone(), row.cell_id)));
        assert!(row.label.is_some());
    }
    let text = std::fs::read_to_string(ws.cfg.preprocess_dir().join("summary.json")).unwrap();
    let artifact: Artifact<serde_json::Value> = serde_json::from_str(&text).unwrap();
    assert_eq!(artifact.config_hash, ws.cfg.hash());
    let cells_csv = std::fs::read_to_string(ws.cfg.preprocess_dir().join("cells.csv")).unwrap();
    assert!(cells_csv.lines().any(|l| l == format!("# config_hash={}", ws.cfg.hash())));
}

#[test]
fn gating_matches_planted_labels() {
    let ws = workspace(&small_synth(12), 1);
    preprocess::run(&ws.cfg).unwrap();
    let (markers, planted) = read_planted_labels(&ws.path().join("planted_labels.csv")).unwrap();
    let table = preprocess::load_cells(&ws.cfg).unwrap();
    assert_eq!(markers, table.markers);
    let wrong: usize = table
        .rows
        .iter()
        .map(|r| {
            let truth = &planted[&(r.tile_id.clone(), r.cell_id)];
            r.label.as_ref().unwrap().iter().zip(truth).filter(|(a, b)| a != b).count()
        })
        .sum();
    assert!((wrong as f64) < 0.02 * (table.rows.len() * markers.len()) as f64, "{wrong} wrong labels");
}

#[test]
fn preprocess_and_train_are_byte_identical_across_runs() {
    let ws = workspace(&small_synth(6), 2);
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&ws.cfg.paths.output_dir);
        preprocess::run(&ws.cfg).unwrap();
        train::run(&ws.cfg).unwrap();
        runs.push(read_dir_bytes(&ws.cfg.paths.output_dir));
    }
    assert!(runs[0].len() > 10);
    let names: Vec<_> = runs[0].iter().map(|(p, _)| p.clone()).collect();
    assert_eq!(names, runs[1].iter().map(|(p, _)| p.clone()).collect::<Vec<_>>());
    for ((name, a), (_, b)) in runs[0].iter().zip(&runs[1]) {
        assert!(a == b, "{} differs", name.display());
    }
}

#[test]
fn identity_evaluation_is_perfect_at_pixel_level() {
    let mut ws = workspace(&small_synth(8), 1);
    ws.update(|c| {
        c.evaluate.identity = true;
        c.evaluate.plots = false;
    });
    preprocess::run(&ws.cfg).unwrap();
    let out = evaluate::run(&ws.cfg).unwrap();
    for m in &out.report.markers {
        assert!(m.psnr.unwrap().0.is_infinite());
        assert!((m.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert!((m.ssim.unwrap() - 1.0).abs() < 1e-12);
    }
    let json = std::fs::read_to_string(ws.cfg.evaluate_dir().join(evaluate::REPORT_FILE)).unwrap();
    assert!(json.contains("\"psnr\": \"inf\""));
    let schema: serde_json::Value = serde_json::from_str(evaluate::REPORT_SCHEMA).unwrap();
    assert!(jsonschema::is_valid(&schema, &serde_json::from_str(&json).unwrap()));
}

#[test]
fn train_then_evaluate_writes_report_and_plots() {
    let ws = workspace(&small_synth(8), 3);
    preprocess::run(&ws.cfg).unwrap();
    let summary = train::run(&ws.cfg).unwrap();
    assert!(summary.steps > 0 && summary.final_loss.unwrap().is_finite());
    let out = evaluate::run(&ws.cfg).unwrap();
    assert_eq!(out.report.markers.len(), 3);
    assert_eq!(out.report.config_hash, ws.cfg.hash());
    for f in ["report.json", "report.csv", "predicted_cells.csv", "auprc.svg", "f1.svg"] {
        assert!(ws.cfg.evaluate_dir().join(f).exists(), "{f} missing");
    }
    for f in ["model.sfw", "model.state.json", "loss_curve.csv", "loss_curve.svg"] {
        assert!(ws.cfg.train_dir().join(f).exists(), "{f} missing");
    }
}

#[test]
fn resume_continues_to_the_same_weights() {
    let mut ws = workspace(&small_synth(6), 4);
    preprocess::run(&ws.cfg).unwrap();
    train::run(&ws.cfg).unwrap();
    let full = std::fs::read(ws.cfg.train_dir().join(train::FINAL_CHECKPOINT)).unwrap();

    std::fs::remove_dir_all(ws.cfg.train_dir()).unwrap();
    ws.update(|c| c.train.stop_after = Some(3));
    assert_eq!(train::run(&ws.cfg).unwrap().steps, 3);
    ws.update(|c| {
        c.train.stop_after = None;
        c.train.resume = true;
    });
    let s = train::run(&ws.cfg).unwrap();
    assert_eq!(s.resumed_from, Some(3));
    assert_eq!(full, std::fs::read(ws.cfg.train_dir().join(train::FINAL_CHECKPOINT)).unwrap());
}

#[test]
fn missing_input_is_a_user_error() {
    let ws = workspace(&small_synth(3), 1);
    std::fs::remove_file(ws.path().join("he/synth_0001.png")).unwrap();
    let err = preprocess::run(&ws.cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("synth_0001.png"), "{err}");
}

#[test]
fn evaluate_without_checkpoint_is_a_user_error() {
    let ws = workspace(&small_synth(4), 1);
    preprocess::run(&ws.cfg).unwrap();
    assert_eq!(evaluate::run(&ws.cfg).unwrap_err().exit_code(), 2);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stainforge"))
}

#[test]
fn binary_exit_codes() {
    let ws = workspace(&small_synth(3), 1);
    let ok = bin().args(["preprocess", "--config"]).arg(&ws.config_path).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(summary["tiles_kept"], 3);

    let missing = bin().args(["train", "--config", "/nonexistent/run.toml"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let bad_env = bin()
        .args(["preprocess", "--config"])
        .arg(&ws.config_path)
        .env("STAINFORGE_PREPROCESS__NO_SUCH_KEY", "1")
        .output()
        .unwrap();
    assert_eq!(bad_env.status.code(), Some(2));
}

#[test]
fn env_override_changes_the_config_hash() {
    let ws = workspace(&small_synth(2), 1);
    let base = stainforge_cli::RunConfig::load_with_env(&ws.config_path, Vec::new()).unwrap();
    let over = stainforge_cli::RunConfig::load_with_env(
        &ws.config_path,
        vec![("STAINFORGE_TRAIN__LR".to_string(), "0.01".to_string())],
    )
    .unwrap();
    assert_eq!(over.train.config.lr, 0.01);
    assert_ne!(base.hash(), over.hash());
    let jobs = stainforge_cli::RunConfig::load_with_env(&ws.config_path, vec![("STAINFORGE_JOBS".to_string(), "3".to_string())]).unwrap();
    assert_eq!(jobs.jobs, Some(3));
    assert_eq!(base.hash(), jobs.hash());
}

#[test]
fn synth_command_writes_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["synth", "--tiles", "2", "--size", "32", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = stainforge_cli::RunConfig::load(&dir.path().join("run.toml")).unwrap();
    assert!(cfg.paths.manifest.is_absolute() && cfg.paths.manifest.exists());
    assert!(cfg.paths.labels.unwrap().exists());
}

#[test]
fn report_validates_against_the_schema() {
    let ws = workspace(&small_synth(8), 2);
    preprocess::run(&ws.cfg).unwrap();
    train::run(&ws.cfg).unwrap();
    evaluate::run(&ws.cfg).unwrap();
    let schema: serde_json::Value = serde_json::from_str(evaluate::REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let text = std::fs::read_to_string(ws.cfg.evaluate_dir().join(evaluate::REPORT_FILE)).unwrap();
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    let errors: Vec<String> = validator.iter_errors(&report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:#?}");

    // the schema rejects malformed reports
    let mut broken = report.clone();
    broken["markers"][0]["cell"]["auprc"] = serde_json::json!(1.5);
    assert!(!validator.is_valid(&broken));
    broken = report.clone();
    broken["markers"][0]["psnr"] = serde_json::json!("infinite");
    assert!(!validator.is_valid(&broken));
}
