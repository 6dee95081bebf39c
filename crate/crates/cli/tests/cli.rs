//! End-to-end behaviour of the `lotseg` commands, run in-process.

use std::collections::BTreeMap;
use std::path::Path;

use lotseg_cli::run;

const TINY: &str = r#"
seed = 5

[phantom]
image_size = [32, 32]
num_frames = 8
num_sequences = 6

[split]
train_fraction = 0.5

[tracker]
levels = 2
base_width = 4
epochs = 1
train_delta_t = [1, 2]

[sampler]
burn_in = 2
thinning = 1
num_samples = 2
noise_scale = 0.003

[uncertainty]
delta_t = 2

[segmentation]
levels = 2
base_width = 4
epochs = 1

[seg_sampler]
burn_in = 2
thinning = 1
num_samples = 2
noise_scale = 0.003
"#;

fn lotseg(args: &[&str]) -> i32 {
    run(std::iter::once("lotseg").chain(args.iter().copied()), &BTreeMap::new())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn predict_before_train_seg_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    assert_eq!(lotseg(&["phantom", "--config", s(&cfg), "--out", s(&d.join("data"))]), 0);
    let (seg, data, maps, pred) = (d.join("seg"), d.join("data"), d.join("maps"), d.join("pred"));
    let args = [
        "predict",
        "--config",
        s(&cfg),
        "--model",
        s(&seg),
        "--data",
        s(&data),
        "--maps",
        s(&maps),
        "--out",
        s(&pred),
    ];
    assert_eq!(lotseg(&args), 2);
    let cli = <lotseg_cli::Cli as clap::Parser>::try_parse_from(std::iter::once("lotseg").chain(args)).unwrap();
    let err = lotseg_cli::execute(&cli.command, &BTreeMap::new()).unwrap_err();
    assert!(err.to_string().contains("lotseg train-seg"), "{err}");
}

#[test]
fn bad_configs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[tracker]\ndepth = 3\n").unwrap();
    assert_eq!(lotseg(&["phantom", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]), 2);
    std::fs::write(&cfg, "[phantom]\nnum_frames = 2\n").unwrap();
    assert_eq!(lotseg(&["phantom", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]), 2);
    assert_eq!(lotseg(&["phantom"]), 2);
    let env: BTreeMap<String, String> = [("LOTSEG_SPLIT__TRAIN_FRACTION".to_string(), "1.5".to_string())].into();
    assert_eq!(run(["lotseg", "phantom", "--out", s(&dir.path().join("o"))], &env), 2);
}

#[test]
fn full_pipeline_writes_report_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = s(&cfg);
    let p = |x: &str| d.join(x).to_str().unwrap().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["phantom".into(), "--out".into(), p("data")],
        vec!["train-reg".into(), "--data".into(), p("data"), "--out".into(), p("trk")],
        vec!["sample-posterior".into(), "--checkpoint".into(), p("trk"), "--data".into(), p("data"), "--out".into(), p("ens")],
        vec!["uncertainty".into(), "--ensemble".into(), p("ens"), "--data".into(), p("data"), "--out".into(), p("maps")],
        vec!["train-seg".into(), "--data".into(), p("data"), "--maps".into(), p("maps"), "--out".into(), p("seg")],
        vec!["predict".into(), "--model".into(), p("seg"), "--data".into(), p("data"), "--maps".into(), p("maps"), "--out".into(), p("pred")],
        vec!["evaluate".into(), "--predictions".into(), p("pred"), "--data".into(), p("data"), "--out".into(), p("eval")],
    ];
    for step in &steps {
        let mut args: Vec<&str> = step.iter().map(String::as_str).collect();
        args.extend(["--config", c]);
        assert_eq!(lotseg(&args), 0, "{step:?}");
    }
    let report = std::fs::read_to_string(d.join("eval/report.csv")).unwrap();
    assert!(report.starts_with("method,region,phase,case_id,dice,sigma_v_ml,p_value\n"));
    assert!(report.contains("\ndual,"));
    for out in ["data", "trk", "ens", "maps", "seg", "pred", "eval"] {
        let prov: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join(out).join("provenance.json")).unwrap()).unwrap();
        assert_eq!(prov["seed"], 5);
        assert_eq!(prov["config"]["phantom"]["num_frames"], 8);
        assert_eq!(prov["config_sha256"].as_str().unwrap().len(), 64);
    }
    assert!(d.join("pred/dual/volumes.csv").is_file());
    assert!(d.join("seg/dual_training_curve.csv").is_file());
}
