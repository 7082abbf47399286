mod common;

use common::*;
use dgmnet::cli::command_keys;

#[test]
fn exit_code_contract() {
    let dir = tempfile::tempdir().unwrap();
    let table = exit_code_table(dir.path());
    for (name, expected, actual) in &table {
        assert_eq!(expected, actual, "{name}");
    }
    let run = dir.path().join("runs").join("unet_ok");
    for f in ["run_record.json", "config.json", "loss_log.csv", "split.csv", "metrics.csv", "environment.json", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(run.join("best").join("manifest.json").exists());
    assert!(dir.path().join("runs").join("unet_nan").join("nan_abort.json").exists());
    let overlays = std::fs::read_dir(dir.path().join("runs").join("eval").join("overlays")).unwrap().count();
    assert!(overlays > 0);
}

#[test]
fn seeded_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "small.cfg", "");
    let cfg = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    assert_eq!(cli(&["--config", cfg, "--seed", "3", "generate-data"]), 0);
    let mut metrics = vec![];
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let code = cli(&[
            "--config", cfg, "--seed", "3", "--deterministic", "--out", out.to_str().unwrap(),
            "train", "--variant", "se_unet", "--data", data.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        metrics.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn help_lists_config_keys() {
    let keys = command_keys("train");
    assert!(keys.contains(&"train.learning_rate".to_string()));
    assert!(!keys.iter().any(|k| k.starts_with("phantom.")));
    let help = dgmnet::cli::command().find_subcommand_mut("generate-data").unwrap().render_long_help().to_string();
    assert!(help.contains("phantom.n_cases"));
}

#[test]
fn ablate_from_runs_needs_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    assert_eq!(cli(&["ablate", "--from-runs", missing.to_str().unwrap()]), 3);
}
