use std::path::Path;
use std::process::{Command, Output};

fn cfbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfbench")).args(args).env("CFBENCH_WORKERS", "2").output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "seed": 1,
        "output_dir": dir.join("out"),
        "data": { "subjects_a": 10, "subjects_b": 2, "scans_per_subject_a": 1, "resolution": 16, "split_ratio": 0.7 },
        "models": [{ "family": "VAE", "resolution": 16, "train": { "epochs": 1, "batch": 4 } }],
        "metrics": { "passes": [1, 2], "cycles": [1], "feature_dim": 8 }
    });
    let path = dir.join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.display().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn stage_commands_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());

    let o = cfbench(&["make-data", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // Evaluating before training is a stage failure.
    let o = cfbench(&["eval", "--config", &cfg, "--family", "VAE", "--axis", "realism"]);
    assert_eq!(code(&o), 3);

    // A family missing from the config is a config error.
    let o = cfbench(&["train", "--config", &cfg, "--family", "HVAE"]);
    assert_eq!(code(&o), 2);

    let o = cfbench(&["train", "--config", &cfg, "--family", "VAE"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = cfbench(&["eval", "--config", &cfg, "--family", "VAE", "--axis", "all", "--sequential"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = cfbench(&["report", "--config", &cfg]);
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("out/report/report.json").is_file());
    assert!(dir.path().join("out/report/report.md").is_file());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert_eq!(code(&cfbench(&["make-data", "--config", "/nonexistent/cfg.json"])), 2);
    assert_eq!(code(&cfbench(&["make-data", "--config", &cfg, "--set", "data.split_ratio=1.5"])), 2);
    assert_eq!(code(&cfbench(&["make-data", "--config", &cfg, "--set", "data.subjects_a=3"])), 2);
    assert_eq!(code(&cfbench(&["eval", "--config", &cfg, "--family", "VAE", "--axis", "beauty"])), 2);
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{ not json").unwrap();
    assert_eq!(code(&cfbench(&["report", "--config", &broken.display().to_string()])), 2);
}
