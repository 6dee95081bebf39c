//! One function per subcommand. Each reads its upstream artifacts, runs its
//! stage and writes its outputs plus a `provenance.json` sidecar.

use std::path::{Path, PathBuf};

use log::info;
use lotseg_core::cinedata::{load_bundle, save_bundle, CineSequence};
use lotseg_core::phantom::{generate_phantom, PhantomConfig};
use lotseg_core::posterior::{load_uncertainty, save_uncertainty, sequence_uncertainty, sghmc_sample, PosteriorEnsemble};
use lotseg_core::segnet::{load_results, load_seg_ensemble, save_results, save_seg_ensemble};
use lotseg_core::tracknet::{train_tracker, TrackerWeights, TrainingCurve};

use crate::config::RunConfig;
use crate::pipeline::{self, METHODS, METHOD_DUAL};
use crate::provenance::{write_provenance, InputRecord};
use crate::CliError;

pub const PHANTOM_CONFIG_FILE: &str = "phantom.json";
pub const REPORT_FILE: &str = "report.csv";

fn require(path: &Path, marker: &str, what: &str, command: &str) -> Result<PathBuf, CliError> {
    let p = path.join(marker);
    if p.is_file() {
        Ok(p)
    } else {
        Err(CliError::MissingArtifact(format!(
            "{what} not found at {}; run `lotseg {command}` first",
            path.display()
        )))
    }
}

fn load_data(data: &Path) -> Result<(Vec<CineSequence>, PathBuf), CliError> {
    let marker = require(data, "manifest.json", "cine bundle", "phantom")?;
    Ok((load_bundle(data)?, marker))
}

fn write_curve(path: &Path, curve: &TrainingCurve) -> Result<(), CliError> {
    let mut text = String::from("epoch,loss\n");
    for (k, l) in curve.epoch_loss.iter().enumerate() {
        text.push_str(&format!("{k},{l}\n"));
    }
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn ensure_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))
}

pub fn cmd_phantom(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let pc = config.phantom_config();
    info!("generating {} sequences of {:?}", pc.num_sequences, pc.image_size);
    let (seqs, _) = generate_phantom(&pc)?;
    save_bundle(out, &seqs)?;
    let path = out.join(PHANTOM_CONFIG_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&pc).expect("serializes") + "\n")
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    write_provenance(out, "phantom", config, &[])
}

/// Generator settings stored next to a phantom bundle.
pub fn read_phantom_config(data: &Path) -> Result<PhantomConfig, CliError> {
    let path = require(data, PHANTOM_CONFIG_FILE, "phantom config", "phantom")?;
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Runtime(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn cmd_train_reg(config: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let (seqs, marker) = load_data(data)?;
    let seqs = pipeline::normalize_all(&seqs)?;
    let (train, _) = pipeline::split(&seqs, config.split.train_fraction, config.split_seed())?;
    let pairs = pipeline::training_pairs(&train, &config.tracker.train_delta_t)?;
    info!("training tracker on {} pairs", pairs.len());
    let (weights, curve) = train_tracker(&pairs, &config.tracker_hyper(), config.tracker_arch())?;
    weights.save(out)?;
    write_curve(&out.join("training_curve.csv"), &curve)?;
    write_provenance(out, "train-reg", config, &[InputRecord::new("data", &marker)?])
}

pub fn cmd_sample_posterior(config: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let ck = require(checkpoint, "manifest.json", "tracker checkpoint", "train-reg")?;
    let (seqs, marker) = load_data(data)?;
    let weights = TrackerWeights::load(checkpoint)?;
    let seqs = pipeline::normalize_all(&seqs)?;
    let (train, _) = pipeline::split(&seqs, config.split.train_fraction, config.split_seed())?;
    let pairs = pipeline::training_pairs(&train, &config.tracker.train_delta_t)?;
    let sc = config.sampler_config();
    info!("sampling {} tracker weights ({} steps)", sc.num_samples, sc.total_steps());
    let ensemble = sghmc_sample(&weights, &pairs, config.tracker.lambda, &sc)?;
    ensemble.save(out)?;
    write_provenance(
        out,
        "sample-posterior",
        config,
        &[InputRecord::new("checkpoint", &ck)?, InputRecord::new("data", &marker)?],
    )
}

pub fn cmd_uncertainty(config: &RunConfig, ensemble: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let idx = require(ensemble, "index.json", "tracker ensemble", "sample-posterior")?;
    let (seqs, marker) = load_data(data)?;
    let ens = PosteriorEnsemble::load(ensemble)?;
    let seqs = pipeline::normalize_all(&seqs)?;
    let dt = config.uncertainty.delta_t;
    let maps = seqs.iter().map(|s| sequence_uncertainty(&ens, s, dt)).collect::<lotseg_core::Result<Vec<_>>>()?;
    save_uncertainty(out, &maps)?;
    write_provenance(
        out,
        "uncertainty",
        config,
        &[InputRecord::new("ensemble", &idx)?, InputRecord::new("data", &marker)?],
    )
}

pub fn cmd_train_seg(config: &RunConfig, data: &Path, maps: &Path, out: &Path) -> Result<(), CliError> {
    let mm = require(maps, "manifest.json", "uncertainty maps", "uncertainty")?;
    let (seqs, marker) = load_data(data)?;
    let unc = load_uncertainty(maps)?;
    let seqs = pipeline::normalize_all(&seqs)?;
    let (train, _) = pipeline::split(&seqs, config.split.train_fraction, config.split_seed())?;
    let samples: Vec<_> = pipeline::seg_samples(&train, &unc, None)?.into_iter().map(|s| s.2).collect();
    ensure_out(out)?;
    for method in METHODS {
        info!("training {method} segmentation ensemble on {} frames", samples.len());
        let cfg = config.seg_config(method == METHOD_DUAL);
        let (members, curve) =
            pipeline::train_seg_ensemble(&samples, cfg, &config.seg_hyper(), &config.seg_sampler_config())?;
        save_seg_ensemble(&out.join(method), &members)?;
        write_curve(&out.join(format!("{method}_training_curve.csv")), &curve)?;
    }
    write_provenance(out, "train-seg", config, &[InputRecord::new("data", &marker)?, InputRecord::new("maps", &mm)?])
}

pub fn cmd_predict(config: &RunConfig, model: &Path, data: &Path, maps: &Path, out: &Path) -> Result<(), CliError> {
    let mut inputs = Vec::new();
    for method in METHODS {
        let idx = require(&model.join(method), "index.json", "segmentation ensemble", "train-seg")?;
        inputs.push(InputRecord::new(method, &idx)?);
    }
    let mm = require(maps, "manifest.json", "uncertainty maps", "uncertainty")?;
    let (seqs, marker) = load_data(data)?;
    let unc = load_uncertainty(maps)?;
    let seqs = pipeline::normalize_all(&seqs)?;
    let (_, test) = pipeline::split(&seqs, config.split.train_fraction, config.split_seed())?;
    let samples = pipeline::seg_samples(&test, &unc, None)?;
    for method in METHODS {
        let ens = load_seg_ensemble(&model.join(method))?;
        info!("predicting {} frames with {method}", samples.len());
        let results = pipeline::predict_frames(&ens, &samples, &test)?;
        save_results(&out.join(method), &results)?;
    }
    inputs.push(InputRecord::new("data", &marker)?);
    inputs.push(InputRecord::new("maps", &mm)?);
    write_provenance(out, "predict", config, &inputs)
}

pub fn cmd_evaluate(config: &RunConfig, predictions: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let mut inputs = Vec::new();
    let mut methods = Vec::new();
    for method in METHODS {
        let m = require(&predictions.join(method), "manifest.json", "predictions", "predict")?;
        inputs.push(InputRecord::new(method, &m)?);
        methods.push((method.to_string(), load_results(&predictions.join(method))?));
    }
    let (seqs, marker) = load_data(data)?;
    let (_, test) = pipeline::split(&seqs, config.split.train_fraction, config.split_seed())?;
    let report = pipeline::rv_report(&test, &methods)?;
    ensure_out(out)?;
    report.write_csv(&out.join(REPORT_FILE))?;
    inputs.push(InputRecord::new("data", &marker)?);
    write_provenance(out, "evaluate", config, &inputs)
}
