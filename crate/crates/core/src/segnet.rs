//! Dual-encoder segmentation network. An image encoder and an uncertainty
//! encoder run in parallel; their bottleneck features are concatenated and
//! fused by one convolution before a U-Net decoder that takes skips from the
//! image encoder. Also the training loop, posterior sampling over its
//! weights, ensemble inference and structure volumes.

use std::path::Path;

use log::debug;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cinedata::{Image, LabelMap, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{softmax_channels, unet, Adam, Graph, ParamStore, Scalar, Tensor, Var};
use crate::posterior::{sghmc_chain, SamplerConfig};
use crate::store::{self, TensorRef};
use crate::tracknet::TrainingCurve;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualEncoderConfig {
    pub levels: usize,
    pub base_width: usize,
    pub num_classes: usize,
    pub fusion_kernel: usize,
    /// Channels fed to the uncertainty encoder; 0 builds the image-only baseline.
    pub uncertainty_channels: usize,
    /// Also concatenate uncertainty-encoder skips in the decoder.
    pub phi_skips: bool,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        DualEncoderConfig {
            levels: 3,
            base_width: 16,
            num_classes: NUM_CLASSES,
            fusion_kernel: 3,
            uncertainty_channels: 2,
            phi_skips: false,
        }
    }
}

impl DualEncoderConfig {
    pub fn baseline(self) -> Self {
        DualEncoderConfig { uncertainty_channels: 0, phi_skips: false, ..self }
    }

    pub fn has_phi(&self) -> bool {
        self.uncertainty_channels > 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be >= 1".into()));
        }
        if self.fusion_kernel % 2 == 0 {
            return Err(Error::Config(format!("fusion_kernel must be odd, got {}", self.fusion_kernel)));
        }
        if self.uncertainty_channels > 2 {
            return Err(Error::Config(format!("uncertainty_channels must be 0, 1 or 2, got {}", self.uncertainty_channels)));
        }
        if self.phi_skips && !self.has_phi() {
            return Err(Error::Config("phi_skips needs an uncertainty encoder".into()));
        }
        Ok(())
    }

    fn build_params(&self, seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let (levels, base) = (self.levels, self.base_width);
        let top = unet::level_width(base, levels - 1);
        unet::register_encoder(&mut ps, "enc_img", 1, levels, base, &mut rng);
        if self.has_phi() {
            unet::register_encoder(&mut ps, "enc_unc", self.uncertainty_channels, levels, base, &mut rng);
        }
        let fuse_in = if self.has_phi() { 2 * top } else { top };
        ps.push_conv("fuse", fuse_in, top, self.fusion_kernel, &mut rng);
        let skips: Vec<usize> = (0..levels - 1)
            .map(|l| unet::level_width(base, l) * if self.phi_skips { 2 } else { 1 })
            .collect();
        unet::register_decoder(&mut ps, "dec", levels, base, &skips, &mut rng);
        ps.push_conv("head", base, self.num_classes, 1, &mut rng);
        ps
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = 1 << (self.levels - 1);
        if height % m != 0 || width % m != 0 {
            return Err(Error::Contract(format!("{height}x{width} input is not divisible by {m}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegWeights {
    pub config: DualEncoderConfig,
    pub params: ParamStore<f32>,
}

pub const SEG_KIND: &str = "segnet";

/// Initialized network for `config`.
pub fn build_dual_encoder(config: DualEncoderConfig, seed: u64) -> Result<SegWeights> {
    config.validate()?;
    Ok(SegWeights { config, params: config.build_params(seed) })
}

impl SegWeights {
    pub fn check_layout(&self) -> Result<()> {
        self.config.validate()?;
        let fresh = self.config.build_params(0);
        let same = fresh.names() == self.params.names()
            && fresh.tensors().iter().zip(self.params.tensors()).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::Contract("segmentation parameters do not match the config descriptor".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        store::save_checkpoint(dir, SEG_KIND, &self.config, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (config, params) = store::load_checkpoint::<DualEncoderConfig>(dir, SEG_KIND)?;
        let w = SegWeights { config, params };
        w.check_layout().map_err(|e| Error::format(dir, e.to_string()))?;
        Ok(w)
    }
}

/// One frame with its uncertainty maps and, for training, labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Image,
    pub u_b: Option<Image>,
    pub u_s: Option<Image>,
    pub labels: Option<LabelMap>,
}

impl SegSample {
    fn check(&self, config: &DualEncoderConfig) -> Result<()> {
        let shape = self.image.shape();
        config.check_input(shape.0, shape.1)?;
        if config.has_phi() {
            let maps = [&self.u_b, &self.u_s];
            for (k, m) in maps.iter().take(config.uncertainty_channels).enumerate() {
                match m {
                    None => return Err(Error::Data(format!("uncertainty map {k} missing"))),
                    Some(m) if m.shape() != shape => {
                        return Err(Error::Contract(format!("uncertainty map {k} is {:?}, image is {shape:?}", m.shape())))
                    }
                    _ => {}
                }
            }
        }
        if let Some(l) = &self.labels {
            if (l.height, l.width) != shape {
                return Err(Error::Contract("labels and image differ in shape".into()));
            }
        }
        Ok(())
    }
}

/// Per-pixel class probabilities, stored class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub data: Vec<f32>,
}

impl ProbMap {
    #[inline]
    pub fn get(&self, class: usize, i: usize, j: usize) -> f32 {
        self.data[(class * self.height + i) * self.width + j]
    }

    pub fn argmax(&self) -> LabelMap {
        let plane = self.height * self.width;
        let data = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.num_classes {
                    if self.data[c * plane + p] > self.data[best * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(self.height, self.width, data)
    }
}

fn batch_inputs<F: Scalar>(config: &DualEncoderConfig, samples: &[&SegSample]) -> (Tensor<F>, Option<Tensor<F>>) {
    let (h, w) = samples[0].image.shape();
    let plane = h * w;
    let mut img = Vec::with_capacity(samples.len() * plane);
    for s in samples {
        img.extend(s.image.data.iter().map(|&v| F::lit(v as f64)));
    }
    let img = Tensor::from_vec([samples.len(), 1, h, w], img);
    if !config.has_phi() {
        return (img, None);
    }
    let u = config.uncertainty_channels;
    let mut maps = Vec::with_capacity(samples.len() * u * plane);
    for s in samples {
        for m in [&s.u_b, &s.u_s].into_iter().take(u) {
            let m = m.as_ref().expect("checked");
            maps.extend(m.data.iter().map(|&v| F::lit(v as f64)));
        }
    }
    (img, Some(Tensor::from_vec([samples.len(), u, h, w], maps)))
}

/// Logits for a batch. `ablate_phi` zeroes the uncertainty encoder's output.
pub(crate) fn seg_logits<F: Scalar>(
    b: &unet::Bound<'_, F>,
    g: &mut Graph<F>,
    config: &DualEncoderConfig,
    img: Var,
    maps: Option<Var>,
    ablate_phi: bool,
) -> Var {
    let levels = config.levels;
    let fi = unet::encode(b, g, "enc_img", img, levels);
    let top_i = fi[levels - 1];
    let (fused_in, phi_feats) = match maps {
        Some(m) if config.has_phi() => {
            let mut fp = unet::encode(b, g, "enc_unc", m, levels);
            if ablate_phi {
                for f in fp.iter_mut() {
                    *f = g.scale(*f, 0.0);
                }
            }
            (g.concat(top_i, fp[levels - 1]), Some(fp))
        }
        _ => (top_i, None),
    };
    let fused = b.conv_act(g, "fuse", fused_in);
    let skips: Vec<Var> = match (&phi_feats, config.phi_skips) {
        (Some(fp), true) => (0..levels - 1).map(|l| g.concat(fi[l], fp[l])).collect(),
        _ => fi[..levels - 1].to_vec(),
    };
    let d = unet::decode(b, g, "dec", fused, &skips);
    b.conv(g, "head", d)
}

fn probs_from_tensor(t: &Tensor<f32>) -> Vec<ProbMap> {
    let [n, c, h, w] = t.shape();
    let p = softmax_channels(t);
    (0..n)
        .map(|s| ProbMap { height: h, width: w, num_classes: c, data: p.data()[s * c * h * w..(s + 1) * c * h * w].to_vec() })
        .collect()
}

/// Class probabilities for one frame.
pub fn seg_forward(weights: &SegWeights, image: &Image, u_b: &Image, u_s: &Image) -> Result<ProbMap> {
    let sample = SegSample { image: image.clone(), u_b: Some(u_b.clone()), u_s: Some(u_s.clone()), labels: None };
    Ok(seg_forward_batch(weights, &[&sample], false)?.remove(0))
}

/// Batched inference; `ablate_phi` zeroes the uncertainty encoder output.
pub fn seg_forward_batch(weights: &SegWeights, samples: &[&SegSample], ablate_phi: bool) -> Result<Vec<ProbMap>> {
    weights.check_layout()?;
    let Some(first) = samples.first() else { return Ok(Vec::new()) };
    let shape = first.image.shape();
    for s in samples {
        if s.image.shape() != shape {
            return Err(Error::Contract("frames in a batch must share one shape".into()));
        }
        s.check(&weights.config)?;
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let (img, maps) = batch_inputs::<f32>(&weights.config, chunk);
        let mut g = Graph::new();
        let b = unet::Bound::new(&weights.params, &mut g, false);
        let x = g.input(img);
        let m = maps.map(|m| g.input(m));
        let logits = seg_logits(&b, &mut g, &weights.config, x, m, ablate_phi);
        out.extend(probs_from_tensor(g.value(logits)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Smoothing term of the soft Dice loss.
    pub dice_smooth: f64,
}

impl Default for SegHyper {
    fn default() -> Self {
        SegHyper { learning_rate: 1e-3, epochs: 40, batch_size: 8, seed: 0, dice_smooth: 1e-5 }
    }
}

impl SegHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.epochs == 0 || self.batch_size == 0 || !(self.dice_smooth > 0.0) {
            return Err(Error::Config(format!("invalid segmentation hyperparameters {self:?}")));
        }
        Ok(())
    }
}

fn check_training_set(config: &DualEncoderConfig, dataset: &[SegSample]) -> Result<()> {
    let Some(first) = dataset.first() else {
        return Err(Error::Data("segmentation training set is empty".into()));
    };
    let shape = first.image.shape();
    for (k, s) in dataset.iter().enumerate() {
        if s.image.shape() != shape {
            return Err(Error::Contract(format!("sample {k}: frame shape differs")));
        }
        if s.labels.is_none() {
            return Err(Error::Data(format!("sample {k}: labels missing")));
        }
        s.check(config).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("sample {k}: {m}")),
            other => other,
        })?;
        let l = s.labels.as_ref().expect("checked");
        if l.data.iter().any(|&c| c as usize >= config.num_classes) {
            return Err(Error::Data(format!("sample {k}: label outside the {} classes", config.num_classes)));
        }
    }
    Ok(())
}

/// Mean cross-entropy + soft Dice on a batch and the parameter gradients.
pub(crate) fn seg_loss_and_grads<F: Scalar>(
    config: &DualEncoderConfig,
    params: &ParamStore<F>,
    samples: &[&SegSample],
    smooth: f64,
) -> (f64, Vec<Tensor<F>>) {
    let (img, maps) = batch_inputs::<F>(config, samples);
    let labels: Vec<usize> = samples
        .iter()
        .flat_map(|s| s.labels.as_ref().expect("checked").data.iter().map(|&c| c as usize))
        .collect();
    let mut g = Graph::new();
    let b = unet::Bound::new(params, &mut g, true);
    let x = g.input(img);
    let m = maps.map(|m| g.input(m));
    let logits = seg_logits(&b, &mut g, config, x, m, false);
    let loss = g.seg_loss(logits, &labels, smooth);
    let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
    let mut grads = g.backward(loss);
    let vars = b.vars().to_vec();
    (value, params.collect_grads(&vars, &mut grads))
}

pub fn train_seg(
    dataset: &[SegSample],
    config: DualEncoderConfig,
    hyper: &SegHyper,
) -> Result<(SegWeights, TrainingCurve)> {
    let init = build_dual_encoder(config, hyper.seed)?;
    train_seg_from(init, dataset, hyper)
}

/// Adam on cross-entropy + soft Dice, starting from `init`.
pub fn train_seg_from(init: SegWeights, dataset: &[SegSample], hyper: &SegHyper) -> Result<(SegWeights, TrainingCurve)> {
    hyper.validate()?;
    init.check_layout()?;
    check_training_set(&init.config, dataset)?;
    let mut weights = init;
    let mut opt = Adam::new(&weights.params, hyper.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5e9);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = TrainingCurve::default();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&SegSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = seg_loss_and_grads(&weights.config, &weights.params, &batch, hyper.dice_smooth);
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Training { epoch, msg: format!("non-finite segmentation loss {loss}") });
            }
            total += loss * batch.len() as f64;
            opt.step(&mut weights.params, &grads);
        }
        let mean = total / dataset.len() as f64;
        debug!("seg epoch {epoch}: loss {mean:.5}");
        curve.epoch_loss.push(mean);
    }
    Ok((weights, curve))
}

/// Posterior samples of segmentation weights around a trained `init`.
pub fn sghmc_sample_seg(init: &SegWeights, dataset: &[SegSample], smooth: f64, config: &SamplerConfig) -> Result<Vec<SegWeights>> {
    init.check_layout()?;
    check_training_set(&init.config, dataset)?;
    let stores = sghmc_chain(&init.params, dataset.len(), config, |params, batch| {
        let samples: Vec<&SegSample> = batch.iter().map(|&i| &dataset[i]).collect();
        Ok(seg_loss_and_grads(&init.config, params, &samples, smooth))
    })?;
    Ok(stores.into_iter().map(|params| SegWeights { config: init.config, params }).collect())
}

/// Mean segmentation loss over `dataset` without updating anything.
pub fn seg_dataset_loss(weights: &SegWeights, dataset: &[SegSample], smooth: f64) -> Result<f64> {
    check_training_set(&weights.config, dataset)?;
    let mut total = 0.0;
    for chunk in dataset.chunks(16) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (img, maps) = batch_inputs::<f32>(&weights.config, &refs);
        let labels: Vec<usize> = refs
            .iter()
            .flat_map(|s| s.labels.as_ref().expect("checked").data.iter().map(|&c| c as usize))
            .collect();
        let mut g = Graph::new();
        let b = unet::Bound::new(&weights.params, &mut g, false);
        let x = g.input(img);
        let m = maps.map(|m| g.input(m));
        let logits = seg_logits(&b, &mut g, &weights.config, x, m, false);
        let loss = g.seg_loss(logits, &labels, smooth);
        total += g.value(loss).item() as f64 * chunk.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

/// Structure volume in mL: pixel count times voxel size in mm^3, over 1000.
pub fn volume(mask: &LabelMap, class_id: u8, pixel_spacing: (f64, f64), slice_thickness: f64) -> Result<f64> {
    if class_id as usize >= NUM_CLASSES {
        return Err(Error::Contract(format!("unknown class id {class_id}")));
    }
    if !(pixel_spacing.0 > 0.0 && pixel_spacing.1 > 0.0 && slice_thickness > 0.0) {
        return Err(Error::Contract("spacing and thickness must be positive".into()));
    }
    Ok(mask.count(class_id) as f64 * pixel_spacing.0 * pixel_spacing.1 * slice_thickness / 1000.0)
}

/// Population standard deviation.
pub fn population_sd(values: &[f64]) -> f64 {
    if values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegResult {
    pub mean_prob: ProbMap,
    pub member_masks: Vec<LabelMap>,
    /// `volumes_ml[member][class]`.
    pub volumes_ml: Vec<Vec<f64>>,
    /// Per class, population SD of member volumes.
    pub sigma_v_ml: Vec<f64>,
}

impl SegResult {
    pub fn mean_mask(&self) -> LabelMap {
        self.mean_prob.argmax()
    }
}

fn check_ensemble(ensemble: &[SegWeights]) -> Result<()> {
    if ensemble.len() < 2 {
        return Err(Error::Contract(format!("ensemble needs at least 2 members, has {}", ensemble.len())));
    }
    if ensemble.iter().any(|w| w.config != ensemble[0].config) {
        return Err(Error::Contract("ensemble members use different configs".into()));
    }
    Ok(())
}

/// Combine member probability maps into a [`SegResult`].
pub fn aggregate_members(members: &[ProbMap], pixel_spacing: (f64, f64), slice_thickness: f64) -> Result<SegResult> {
    let first = members.first().ok_or_else(|| Error::Contract("no members".into()))?;
    let c = first.num_classes;
    let m = members.len() as f64;
    let mut data = vec![0.0f32; first.data.len()];
    for (k, d) in data.iter_mut().enumerate() {
        *d = (members.iter().map(|p| p.data[k] as f64).sum::<f64>() / m) as f32;
    }
    let member_masks: Vec<LabelMap> = members.iter().map(ProbMap::argmax).collect();
    let mut volumes_ml = Vec::with_capacity(members.len());
    for mask in &member_masks {
        volumes_ml.push(
            (0..c)
                .map(|cl| volume(mask, cl as u8, pixel_spacing, slice_thickness))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    let sigma_v_ml = (0..c)
        .map(|cl| population_sd(&volumes_ml.iter().map(|v| v[cl]).collect::<Vec<_>>()))
        .collect();
    Ok(SegResult { mean_prob: ProbMap { data, ..first.clone() }, member_masks, volumes_ml, sigma_v_ml })
}

pub fn ensemble_predict(
    ensemble: &[SegWeights],
    sample: &SegSample,
    pixel_spacing: (f64, f64),
    slice_thickness: f64,
) -> Result<SegResult> {
    Ok(ensemble_predict_batch(ensemble, &[sample], pixel_spacing, slice_thickness)?.remove(0))
}

/// Ensemble inference over many frames sharing one spacing.
pub fn ensemble_predict_batch(
    ensemble: &[SegWeights],
    samples: &[&SegSample],
    pixel_spacing: (f64, f64),
    slice_thickness: f64,
) -> Result<Vec<SegResult>> {
    check_ensemble(ensemble)?;
    let per_member = ensemble
        .iter()
        .map(|w| seg_forward_batch(w, samples, false))
        .collect::<Result<Vec<_>>>()?;
    (0..samples.len())
        .map(|k| {
            let members: Vec<ProbMap> = per_member.iter().map(|m| m[k].clone()).collect();
            aggregate_members(&members, pixel_spacing, slice_thickness)
        })
        .collect()
}

pub const SEG_ENSEMBLE_VERSION: &str = "v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegEnsembleIndex {
    version: String,
    kind: String,
    members: Vec<String>,
}

pub fn save_seg_ensemble(dir: &Path, ensemble: &[SegWeights]) -> Result<()> {
    check_ensemble(ensemble)?;
    store::ensure_dir(dir)?;
    let mut members = Vec::new();
    for (k, w) in ensemble.iter().enumerate() {
        let name = format!("member_{k:02}");
        w.save(&dir.join(&name))?;
        members.push(name);
    }
    let index = SegEnsembleIndex { version: SEG_ENSEMBLE_VERSION.into(), kind: "seg_ensemble".into(), members };
    store::write_json(&dir.join("index.json"), &index)
}

pub fn load_seg_ensemble(dir: &Path) -> Result<Vec<SegWeights>> {
    let path = dir.join("index.json");
    if !path.is_file() {
        return Err(Error::format(&path, "segmentation ensemble index not found"));
    }
    let index: SegEnsembleIndex = store::read_json(&path)?;
    store::check_version(&path, &index.version, SEG_ENSEMBLE_VERSION)?;
    if index.kind != "seg_ensemble" {
        return Err(Error::format(&path, format!("kind: expected \"seg_ensemble\", found {:?}", index.kind)));
    }
    let members = index.members.iter().map(|m| SegWeights::load(&dir.join(m))).collect::<Result<Vec<_>>>()?;
    check_ensemble(&members).map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(members)
}

/// Named ensemble output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub frame_id: String,
    pub result: SegResult,
}

/// Per frame and class: σ_v and every member's volume.
pub fn volumes_csv(results: &[FrameResult]) -> String {
    let members = results.first().map(|r| r.result.volumes_ml.len()).unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["frame_id".to_string(), "class".into(), "sigma_v_ml".into()];
    header.extend((0..members).map(|k| format!("volume_ml_{k:02}")));
    w.write_record(&header).expect("in-memory write");
    for r in results {
        for (c, sd) in r.result.sigma_v_ml.iter().enumerate() {
            let mut rec = vec![r.frame_id.clone(), class_name(c), sd.to_string()];
            rec.extend(r.result.volumes_ml.iter().map(|v| v[c].to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
}

fn class_name(c: usize) -> String {
    crate::cinedata::CLASS_NAMES.get(c).map(|s| s.to_string()).unwrap_or_else(|| c.to_string())
}

pub const RESULTS_VERSION: &str = "v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultsManifest {
    version: String,
    kind: String,
    frames: Vec<ResultEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultEntry {
    frame_id: String,
    mean_prob: TensorRef,
    member_masks: TensorRef,
    volumes_ml: Vec<Vec<f64>>,
    sigma_v_ml: Vec<f64>,
}

pub fn save_results(dir: &Path, results: &[FrameResult]) -> Result<()> {
    store::ensure_dir(dir)?;
    let mut frames = Vec::new();
    for (k, r) in results.iter().enumerate() {
        let p = &r.result.mean_prob;
        let mean_prob = store::write_f32(dir, &format!("{k:05}_prob.f32"), &[p.num_classes, p.height, p.width], &p.data)?;
        let masks: Vec<f32> = r.result.member_masks.iter().flat_map(|m| m.data.iter().map(|&c| c as f32)).collect();
        let member_masks = store::write_f32(
            dir,
            &format!("{k:05}_masks.f32"),
            &[r.result.member_masks.len(), p.height, p.width],
            &masks,
        )?;
        frames.push(ResultEntry {
            frame_id: r.frame_id.clone(),
            mean_prob,
            member_masks,
            volumes_ml: r.result.volumes_ml.clone(),
            sigma_v_ml: r.result.sigma_v_ml.clone(),
        });
    }
    let manifest = ResultsManifest { version: RESULTS_VERSION.into(), kind: "seg_results".into(), frames };
    store::write_json(&store::manifest_path(dir), &manifest)?;
    std::fs::write(dir.join("volumes.csv"), volumes_csv(results)).map_err(|e| Error::io(dir.join("volumes.csv"), e))
}

pub fn load_results(dir: &Path) -> Result<Vec<FrameResult>> {
    let mpath = store::manifest_path(dir);
    if !mpath.is_file() {
        return Err(Error::format(&mpath, "results manifest not found"));
    }
    let m: ResultsManifest = store::read_json(&mpath)?;
    store::check_version(&mpath, &m.version, RESULTS_VERSION)?;
    if m.kind != "seg_results" {
        return Err(Error::format(&mpath, format!("kind: expected \"seg_results\", found {:?}", m.kind)));
    }
    let mut out = Vec::new();
    for (k, e) in m.frames.into_iter().enumerate() {
        let field = format!("frames[{k}]");
        let [c, h, w] = match e.mean_prob.shape[..] {
            [c, h, w] => [c, h, w],
            _ => return Err(Error::format(&mpath, format!("{field}.mean_prob.shape: expected [C, H, W]"))),
        };
        if e.member_masks.shape.len() != 3 || e.member_masks.shape[1..] != [h, w] {
            return Err(Error::format(&mpath, format!("{field}.member_masks.shape: expected [M, {h}, {w}]")));
        }
        let prob = store::read_f32(dir, &e.mean_prob, &format!("{field}.mean_prob"))?;
        let masks = store::read_f32(dir, &e.member_masks, &format!("{field}.member_masks"))?;
        let member_masks = masks
            .chunks_exact(h * w)
            .map(|ch| LabelMap::new(h, w, ch.iter().map(|&v| v as u8).collect()))
            .collect();
        out.push(FrameResult {
            frame_id: e.frame_id,
            result: SegResult {
                mean_prob: ProbMap { height: h, width: w, num_classes: c, data: prob },
                member_masks,
                volumes_ml: e.volumes_ml,
                sigma_v_ml: e.sigma_v_ml,
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> DualEncoderConfig {
        DualEncoderConfig { levels: 2, base_width: 4, ..Default::default() }
    }

    fn sample(rng: &mut impl Rng, h: usize, w: usize) -> SegSample {
        SegSample {
            image: Image::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0)),
            u_b: Some(Image::from_fn(h, w, |_, _| rng.gen_range(0.0..1.0))),
            u_s: Some(Image::from_fn(h, w, |_, _| rng.gen_range(0.0..1.0))),
            labels: Some(LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..4)).collect())),
        }
    }

    #[test]
    fn shapes_and_simplex() {
        let w = build_dual_encoder(small(), 1).unwrap();
        assert_eq!(w.params.get("enc_unc.l0.a.weight").unwrap().shape()[1], 2);
        let z = Image::zeros(8, 8);
        let p = seg_forward(&w, &z, &z, &z).unwrap();
        assert_eq!((p.height, p.width, p.num_classes), (8, 8, 4));
        for i in 0..8 {
            for j in 0..8 {
                let s: f32 = (0..4).map(|c| p.get(c, i, j)).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
        assert_eq!(seg_forward(&w, &z, &z, &z).unwrap(), p);
    }

    #[test]
    fn invalid_configs() {
        for c in [
            DualEncoderConfig { levels: 1, ..small() },
            DualEncoderConfig { num_classes: 1, ..small() },
            DualEncoderConfig { fusion_kernel: 2, ..small() },
            DualEncoderConfig { uncertainty_channels: 0, phi_skips: true, ..small() },
        ] {
            assert!(matches!(build_dual_encoder(c, 0), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn swapping_maps_with_swapped_weights_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = build_dual_encoder(small(), 3).unwrap();
        let s = sample(&mut rng, 8, 8);
        let mut swapped = w.clone();
        let k = swapped.params.get_mut("enc_unc.l0.a.weight").unwrap();
        let [cout, cin, kh, kw] = k.shape();
        assert_eq!(cin, 2);
        let plane = kh * kw;
        let d = k.data_mut();
        for o in 0..cout {
            for q in 0..plane {
                d.swap((o * cin) * plane + q, (o * cin + 1) * plane + q);
            }
        }
        let a = seg_forward(&w, &s.image, s.u_b.as_ref().unwrap(), s.u_s.as_ref().unwrap()).unwrap();
        let b = seg_forward(&swapped, &s.image, s.u_s.as_ref().unwrap(), s.u_b.as_ref().unwrap()).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn ablation_matches_image_only_network_up_to_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dual = build_dual_encoder(small(), 5).unwrap();
        let s = sample(&mut rng, 8, 8);
        let ablated = seg_forward_batch(&dual, &[&s], true).unwrap().remove(0);
        // Image-only network with the image half of the fusion kernel.
        let mut base = build_dual_encoder(small().baseline(), 0).unwrap();
        for (name, t) in base.params.names().to_vec().into_iter().zip(base.params.tensors_mut()) {
            let src = dual.params.get(&name).unwrap();
            if name == "fuse.weight" {
                let [cout, cin, kh, kw] = t.shape();
                let plane = kh * kw;
                for o in 0..cout {
                    let from = &src.data()[o * 2 * cin * plane..(o * 2 * cin + cin) * plane];
                    t.data_mut()[o * cin * plane..(o + 1) * cin * plane].copy_from_slice(from);
                }
            } else {
                *t = src.clone();
            }
        }
        let plain = seg_forward_batch(&base, &[&s], false).unwrap().remove(0);
        for (x, y) in ablated.data.iter().zip(&plain.data) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn map_or_label_problems_are_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = sample(&mut rng, 8, 8);
        s.u_s = None;
        let hyper = SegHyper { epochs: 1, ..Default::default() };
        assert!(matches!(train_seg(&[s.clone()], small(), &hyper), Err(Error::Data(_))));
        let mut s = sample(&mut rng, 8, 8);
        s.labels = None;
        assert!(matches!(train_seg(&[s], small(), &hyper), Err(Error::Data(_))));
        assert!(matches!(train_seg(&[], small(), &hyper), Err(Error::Data(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = vec![sample(&mut rng, 8, 8), sample(&mut rng, 8, 8)];
        let hyper = SegHyper { learning_rate: 0.0, epochs: 2, batch_size: 1, seed: 3, dice_smooth: 1e-5 };
        let (w, curve) = train_seg(&data, small(), &hyper).unwrap();
        assert_eq!(w, build_dual_encoder(small(), 3).unwrap());
        assert_eq!(curve.epoch_loss.len(), 2);
    }

    #[test]
    fn frozen_sampler_gives_identical_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = vec![sample(&mut rng, 8, 8), sample(&mut rng, 8, 8)];
        let init = build_dual_encoder(small(), 1).unwrap();
        let cfg = SamplerConfig { step_size: 0.0, noise_scale: 0.0, burn_in: 2, thinning: 0, num_samples: 3, ..Default::default() };
        let members = sghmc_sample_seg(&init, &data, 1e-5, &cfg).unwrap();
        assert_eq!(members.len(), 3);
        assert!(members.iter().all(|m| *m == init));
        let r = ensemble_predict(&members, &data[0], (1.5, 1.5), 8.0).unwrap();
        assert!(r.sigma_v_ml.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn volume_examples() {
        let m = LabelMap::new(10, 100, vec![1; 1000]);
        assert!((volume(&m, 1, (1.0, 1.0), 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(volume(&LabelMap::new(4, 4, vec![0; 16]), 1, (1.0, 1.0), 1.0).unwrap(), 0.0);
        let m = LabelMap::new(15, 10, vec![1; 150]);
        assert!((volume(&m, 1, (1.5, 1.5), 8.0).unwrap() - 2.7).abs() < 1e-12);
        assert!(matches!(volume(&m, 9, (1.0, 1.0), 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn sigma_v_closed_form() {
        // Members predicting 10, 12 and 14 mL of RV: 1000 mm^3 per 1 mL at unit spacing.
        let probs: Vec<ProbMap> = [10usize, 12, 14]
            .iter()
            .map(|&ml| {
                let n = 2000;
                let plane = n;
                let mut data = vec![0.0f32; 2 * plane];
                for p in 0..plane {
                    let rv = p < ml * 100;
                    data[p] = if rv { 0.0 } else { 1.0 };
                    data[plane + p] = if rv { 1.0 } else { 0.0 };
                }
                ProbMap { height: 1, width: n, num_classes: 2, data }
            })
            .collect();
        let r = aggregate_members(&probs, (1.0, 1.0), 10.0).unwrap();
        assert!((r.sigma_v_ml[1] - (8.0f64 / 3.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn results_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let members: Vec<SegWeights> = (0..2).map(|k| build_dual_encoder(small(), k).unwrap()).collect();
        let s = sample(&mut rng, 8, 8);
        let r = ensemble_predict(&members, &s, (1.5, 1.5), 8.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let items = vec![FrameResult { frame_id: "seq000:t0".into(), result: r }];
        save_results(dir.path(), &items).unwrap();
        assert_eq!(load_results(dir.path()).unwrap(), items);
        save_seg_ensemble(&dir.path().join("ens"), &members).unwrap();
        assert_eq!(load_seg_ensemble(&dir.path().join("ens")).unwrap(), members);
        let csv = std::fs::read_to_string(dir.path().join("volumes.csv")).unwrap();
        assert!(csv.starts_with("frame_id,class,sigma_v_ml,volume_ml_00,volume_ml_01\n"));
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let config = DualEncoderConfig { levels: 2, base_width: 2, num_classes: 2, ..Default::default() };
        let w = build_dual_encoder(config, 5).unwrap();
        let mut s = sample(&mut rng, 4, 4);
        s.labels = Some(LabelMap::new(4, 4, (0..16).map(|_| rng.gen_range(0..2)).collect()));
        let samples = [&s];
        let params: ParamStore<f64> = w.params.cast();
        let (_, grads) = seg_loss_and_grads(&config, &params, &samples, 1e-5);
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        let total: usize = sizes.iter().sum();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let mut flat = rng.gen_range(0..total);
            let mut ti = 0;
            while flat >= sizes[ti] {
                flat -= sizes[ti];
                ti += 1;
            }
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data_mut()[flat] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data_mut()[flat] -= h;
            let lp = seg_loss_and_grads(&config, &plus, &samples, 1e-5).0;
            let lm = seg_loss_and_grads(&config, &minus, &samples, 1e-5).0;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads[ti].data()[flat];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
