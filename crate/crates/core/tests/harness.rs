use std::fs;

use dualkf::harness::{run_scenario, ExperimentConfig, InitSpec, Mode};
use dualkf::StepPolicy;

fn small_sweep(dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        mode: Mode::Sgd,
        t_grid: vec![10, 30],
        m_grid: vec![8],
        num_seeds: 2,
        iterations: 15,
        seed0: 42,
        step: StepPolicy::decaying(1.0, 0.6),
        init: InitSpec::Explicit {
            l: vec![vec![0.3], vec![0.1]],
        },
        out_dir: Some(dir.to_path_buf()),
        ..Default::default()
    }
}

#[test]
fn identical_configs_give_identical_csv_bodies() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_scenario(&small_sweep(a.path())).unwrap();
    run_scenario(&small_sweep(b.path())).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().ends_with(".csv"))
        .collect();
    names.sort();
    assert_eq!(names.len(), 4 + 2);
    for name in names {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
}

#[test]
fn run_record_echoes_config_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_sweep(dir.path());
    let record = run_scenario(&cfg).unwrap();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["rng_algorithm"], record.rng_algorithm);
    assert_eq!(json["config"]["seed0"], 42);
    let echoed: ExperimentConfig = serde_json::from_value(json["config"].clone()).unwrap();
    assert_eq!(echoed, cfg);
    for cell in json["cells"].as_array().unwrap() {
        assert!(cell["gain_error"].as_f64().unwrap() >= 0.0);
        assert!(cell["final_j"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn config_roundtrip_is_semantically_stable() {
    let cfg = ExperimentConfig::from_json(r#"{"mode": "grad-check", "num_seeds": 3, "step": {"kind": "backtracking", "eta0": 0.5}}"#).unwrap();
    let text = serde_json::to_string(&cfg).unwrap();
    let again = ExperimentConfig::from_json(&text).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(
        serde_json::to_value(&cfg).unwrap(),
        serde_json::from_str::<serde_json::Value>(&text).unwrap()
    );
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let sgd = ExperimentConfig::from_path(&root.join("mass-spring-sgd.json")).unwrap();
    assert_eq!(sgd.m_grid, vec![16, 64, 256]);
    assert_eq!(sgd.step, StepPolicy::decaying_scaled(2.0, 2.0, 100.0));
    let gd = ExperimentConfig::from_path(&root.join("scalar-gd.json")).unwrap();
    assert_eq!(gd.mode, Mode::Gd);
}
