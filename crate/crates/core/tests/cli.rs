use std::fs;

use gpopf::cli::run;

fn case9() -> &'static str {
    concat!(env!("CARGO_MANIFEST_DIR"), "/data/case9.json")
}

#[test]
fn pipeline_stages_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_string();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "n_train = 30\nn_test = 50\nrestarts = 1\nn_mc = 50\nseed = 3\n").unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    let args = |cmd: &str| vec!["gpopf".to_string(), cmd.to_string(), "--config".into(), cfg.clone(), "--case".into(), case9().into(), "--out".into(), out.clone()];

    assert_eq!(run(args("generate")), 0);
    assert_eq!(run(args("train")), 0);
    assert_eq!(run(args("solve")), 0);
    let mut validate = args("validate");
    validate.push("--mc-csv".into());
    assert_eq!(run(validate), 0);
    for f in ["dataset.csv", "test.csv", "model.json", "train.json", "solution.json", "report.json", "report.txt", "mc_outputs.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_mc"], 50);

    // a truncated model file is a usage error, not a crash
    let model = fs::read_to_string(dir.path().join("model.json")).unwrap();
    fs::write(dir.path().join("model.json"), &model[..model.len() / 2]).unwrap();
    assert_eq!(run(args("solve")), 2);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "n_trian = 30\n").unwrap();
    assert_eq!(run(["gpopf", "generate", "--config", cfg.to_str().unwrap(), "--case", case9()]), 2);
}
