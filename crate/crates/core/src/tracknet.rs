//! Unsupervised deformable registration between cine frames.
//!
//! A small U-Net maps a `(source, target)` pair to a dense displacement
//! field. Training minimizes the warp residual plus `lambda` times the
//! squared-gradient smoothness penalty of the field.

use std::path::Path;

use log::debug;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cinedata::{FramePair, Image};
use crate::error::{Error, Result};
use crate::nn::{grad_reg_value, unet, warp_forward, Adam, Graph, ParamStore, Tensor, Var};
use crate::store;

/// Per-pixel `(dy, dx)` displacements in pixels, stored interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DeformationField {
    pub fn zeros(height: usize, width: usize) -> Self {
        DeformationField { height, width, data: vec![0.0; height * width * 2] }
    }

    /// Build from interleaved `(dy, dx)` data.
    pub fn from_interleaved(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return Err(Error::Contract(format!(
                "field data holds {} values, expected {} for {height}x{width}x2",
                data.len(),
                height * width * 2
            )));
        }
        Ok(DeformationField { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut field = Self::zeros(height, width);
        for i in 0..height {
            for j in 0..width {
                field.set(i, j, f(i, j));
            }
        }
        field
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> (f32, f32) {
        let k = (i * self.width + j) * 2;
        (self.data[k], self.data[k + 1])
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: (f32, f32)) {
        let k = (i * self.width + j) * 2;
        self.data[k] = v.0;
        self.data[k + 1] = v.1;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f32) -> Self {
        DeformationField { data: self.data.iter().map(|v| v * c).collect(), ..self.clone() }
    }

    /// End-point length per pixel.
    pub fn magnitudes(&self) -> Vec<f32> {
        self.data.chunks_exact(2).map(|d| d[0].hypot(d[1])).collect()
    }

    /// Planar `[1, 2, H, W]` tensor (channel 0 = dy, channel 1 = dx).
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.height * self.width;
        let mut data = vec![0.0; 2 * plane];
        for p in 0..plane {
            data[p] = self.data[2 * p];
            data[plane + p] = self.data[2 * p + 1];
        }
        Tensor::from_vec([1, 2, self.height, self.width], data)
    }

    /// Inverse of [`to_tensor`](Self::to_tensor) for sample `n` of a batch.
    pub fn from_tensor(t: &Tensor<f32>, n: usize) -> Self {
        let [_, c, h, w] = t.shape();
        assert_eq!(c, 2, "flow tensor must have 2 channels");
        let plane = h * w;
        let src = &t.data()[n * 2 * plane..(n + 1) * 2 * plane];
        let mut data = vec![0.0; 2 * plane];
        for p in 0..plane {
            data[2 * p] = src[p];
            data[2 * p + 1] = src[plane + p];
        }
        DeformationField { height: h, width: w, data }
    }
}

/// Mean end-point error over pixels selected by `mask` (all pixels when `None`).
pub fn mean_endpoint_error(a: &DeformationField, b: &DeformationField, mask: Option<&[bool]>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, (x, y)) in a.data.chunks_exact(2).zip(b.data.chunks_exact(2)).enumerate() {
        if mask.map(|m| m[p]).unwrap_or(true) {
            sum += ((x[0] - y[0]) as f64).hypot((x[1] - y[1]) as f64);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub(crate) fn image_tensor(img: &Image) -> Tensor<f32> {
    Tensor::from_vec([1, 1, img.height, img.width], img.data.clone())
}

fn check_shapes(image: &Image, field: &DeformationField) -> Result<()> {
    if image.shape() != field.shape() {
        return Err(Error::Contract(format!(
            "image is {:?} but field is {:?}",
            image.shape(),
            field.shape()
        )));
    }
    Ok(())
}

/// `output(p) = image(p + field(p))`, bilinear, clamped to the border.
pub fn warp(image: &Image, field: &DeformationField) -> Result<Image> {
    check_shapes(image, field)?;
    let out = warp_forward(&image_tensor(image), &field.to_tensor());
    Ok(Image::new(image.height, image.width, out.into_vec()))
}

/// Squared forward-difference gradient penalty: the mean over both
/// components of `Δy²` and `Δx²`, each averaged over valid positions, then
/// halved (one term per spatial direction).
pub fn grad_reg(field: &DeformationField) -> f64 {
    let plane = field.height * field.width;
    let mut data = vec![0.0f64; 2 * plane];
    for p in 0..plane {
        data[p] = field.data[2 * p] as f64;
        data[plane + p] = field.data[2 * p + 1] as f64;
    }
    grad_reg_value(&Tensor::from_vec([1, 2, field.height, field.width], data))
}

/// Mean squared residual of `warp(source, field)` against `target`.
pub fn residual_mse(field: &DeformationField, source: &Image, target: &Image) -> Result<f64> {
    if source.shape() != target.shape() {
        return Err(Error::Contract("source and target shapes differ".into()));
    }
    let warped = warp(source, field)?;
    Ok(warped
        .data
        .iter()
        .zip(&target.data)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / warped.data.len() as f64)
}

/// Registration objective: residual MSE plus `lambda * grad_reg(field)`.
pub fn reg_loss(field: &DeformationField, source: &Image, target: &Image, lambda: f64) -> Result<f64> {
    Ok(residual_mse(field, source, target)? + lambda * grad_reg(field))
}

/// `reg_loss` evaluated in double precision on an interleaved `(dy, dx)`
/// field, with its gradient in the same layout.
pub fn reg_loss_and_grad(
    field: &[f64],
    source: &Image,
    target: &Image,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let (h, w) = source.shape();
    if target.shape() != (h, w) || field.len() != 2 * h * w {
        return Err(Error::Contract(format!(
            "field of {} values, source {:?}, target {:?}",
            field.len(),
            source.shape(),
            target.shape()
        )));
    }
    let plane = h * w;
    let mut planar = vec![0.0f64; 2 * plane];
    for p in 0..plane {
        planar[p] = field[2 * p];
        planar[plane + p] = field[2 * p + 1];
    }
    let img = |im: &Image| Tensor::from_vec([1, 1, h, w], im.data.iter().map(|&v| v as f64).collect());
    let mut g = Graph::<f64>::new();
    let src = g.input(img(source));
    let tgt = g.input(img(target));
    let flow = g.leaf(Tensor::from_vec([1, 2, h, w], planar));
    let warped = g.warp(src, flow);
    let sim = g.mse(warped, tgt);
    let reg = g.grad_reg(flow);
    let reg = g.scale(reg, lambda);
    let loss = g.add(sim, reg);
    let value = g.value(loss).item();
    let grads = g.backward(loss);
    let gp = grads.get(flow).expect("flow is a leaf").data();
    let mut out = vec![0.0; 2 * plane];
    for p in 0..plane {
        out[2 * p] = gp[p];
        out[2 * p + 1] = gp[plane + p];
    }
    Ok((value, out))
}

/// Flow-predictor architecture descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerArch {
    pub levels: usize,
    pub base_width: usize,
}

impl Default for TrackerArch {
    fn default() -> Self {
        TrackerArch { levels: 3, base_width: 16 }
    }
}

impl TrackerArch {
    pub const IN_CHANNELS: usize = 2;

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 || self.base_width == 0 {
            return Err(Error::Config(format!("tracker needs levels >= 2 and base_width >= 1, got {self:?}")));
        }
        Ok(())
    }

    fn build_params(&self, seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        unet::register_encoder(&mut ps, "enc", Self::IN_CHANNELS, self.levels, self.base_width, &mut rng);
        let skips: Vec<usize> = (0..self.levels - 1).map(|l| unet::level_width(self.base_width, l)).collect();
        unet::register_decoder(&mut ps, "dec", self.levels, self.base_width, &skips, &mut rng);
        ps.push_zero_conv("flow", self.base_width, 2, 3);
        ps
    }

    /// Spatial sizes must survive `levels - 1` halvings.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = 1 << (self.levels - 1);
        if height % m != 0 || width % m != 0 {
            return Err(Error::Contract(format!("{height}x{width} input is not divisible by {m}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerHyper {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrackerHyper {
    fn default() -> Self {
        TrackerHyper { lambda: 0.1, learning_rate: 1e-3, epochs: 30, batch_size: 8, seed: 0 }
    }
}

impl TrackerHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.learning_rate >= 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("invalid tracker hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Learnable parameters of the flow predictor plus its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerWeights {
    pub arch: TrackerArch,
    pub params: ParamStore<f32>,
}

pub const TRACKER_KIND: &str = "tracker";

impl TrackerWeights {
    pub fn init(arch: TrackerArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(TrackerWeights { arch, params: arch.build_params(seed) })
    }

    /// Parameter names and shapes must match what the descriptor builds.
    pub fn check_layout(&self) -> Result<()> {
        let fresh = self.arch.build_params(0);
        let same = fresh.names() == self.params.names()
            && fresh.tensors().iter().zip(self.params.tensors()).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::Contract("tracker parameters do not match the architecture descriptor".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        store::save_checkpoint(dir, TRACKER_KIND, &self.arch, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (arch, params) = store::load_checkpoint::<TrackerArch>(dir, TRACKER_KIND)?;
        let w = TrackerWeights { arch, params };
        w.check_layout().map_err(|e| Error::format(dir, e.to_string()))?;
        Ok(w)
    }

    pub fn predict_flow(&self, pair: &FramePair) -> Result<DeformationField> {
        Ok(self.predict_flows(&[pair])?.remove(0))
    }

    /// Batched inference; results are identical to one-by-one calls.
    pub fn predict_flows(&self, pairs: &[&FramePair]) -> Result<Vec<DeformationField>> {
        self.check_layout()?;
        let Some(first) = pairs.first() else { return Ok(Vec::new()) };
        let (h, w) = first.source.shape();
        self.arch.check_input(h, w)?;
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(16) {
            let (src, tgt) = batch_tensors(chunk)?;
            let mut g = Graph::new();
            let b = unet::Bound::new(&self.params, &mut g, false);
            let s = g.input(src);
            let t = g.input(tgt);
            let flow = tracker_forward(&b, &mut g, self.arch, s, t);
            let ft = g.value(flow);
            out.extend((0..chunk.len()).map(|n| DeformationField::from_tensor(ft, n)));
        }
        Ok(out)
    }
}

fn batch_tensors(pairs: &[&FramePair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let shape = pairs[0].source.shape();
    for p in pairs {
        if p.source.shape() != shape || p.target.shape() != shape {
            return Err(Error::Contract("frame pairs in a batch must share one shape".into()));
        }
    }
    let src: Vec<Tensor<f32>> = pairs.iter().map(|p| image_tensor(&p.source)).collect();
    let tgt: Vec<Tensor<f32>> = pairs.iter().map(|p| image_tensor(&p.target)).collect();
    Ok((Tensor::stack(&src), Tensor::stack(&tgt)))
}

pub(crate) fn tracker_forward(b: &unet::Bound<'_, f32>, g: &mut Graph<f32>, arch: TrackerArch, src: Var, tgt: Var) -> Var {
    let x = g.concat(src, tgt);
    let feats = unet::encode(b, g, "enc", x, arch.levels);
    let top = *feats.last().expect("at least one level");
    let d = unet::decode(b, g, "dec", top, &feats[..arch.levels - 1]);
    b.conv(g, "flow", d)
}

/// Mean registration loss of a batch and its parameter gradients.
pub(crate) fn tracker_loss_and_grads(
    weights: &TrackerWeights,
    pairs: &[&FramePair],
    lambda: f64,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let (src, tgt) = batch_tensors(pairs)?;
    let mut g = Graph::new();
    let b = unet::Bound::new(&weights.params, &mut g, true);
    let s = g.input(src);
    let t = g.input(tgt);
    let flow = tracker_forward(&b, &mut g, weights.arch, s, t);
    let warped = g.warp(s, flow);
    let sim = g.mse(warped, t);
    let reg = g.grad_reg(flow);
    let reg = g.scale(reg, lambda);
    let loss = g.add(sim, reg);
    let value = g.value(loss).item() as f64;
    let mut grads = g.backward(loss);
    let vars = b.vars().to_vec();
    Ok((value, weights.params.collect_grads(&vars, &mut grads)))
}

/// Mean registration loss over a dataset without updating anything.
pub fn dataset_loss(weights: &TrackerWeights, pairs: &[FramePair], lambda: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let refs: Vec<&FramePair> = pairs.iter().collect();
    let flows = weights.predict_flows(&refs)?;
    let mut sum = 0.0;
    for (f, p) in flows.iter().zip(pairs) {
        sum += reg_loss(f, &p.source, &p.target, lambda)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Mean loss per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epoch_loss: Vec<f64>,
}

pub fn train_tracker(dataset: &[FramePair], hyper: &TrackerHyper, arch: TrackerArch) -> Result<(TrackerWeights, TrainingCurve)> {
    let init = TrackerWeights::init(arch, hyper.seed)?;
    train_tracker_from(init, dataset, hyper)
}

/// Adam on the registration objective, starting from `init`.
pub fn train_tracker_from(
    init: TrackerWeights,
    dataset: &[FramePair],
    hyper: &TrackerHyper,
) -> Result<(TrackerWeights, TrainingCurve)> {
    hyper.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("train_tracker: empty dataset".into()));
    }
    let (h, w) = dataset[0].source.shape();
    init.arch.check_input(h, w)?;
    let mut weights = init;
    let mut opt = Adam::new(&weights.params, hyper.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x7ac4);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = TrainingCurve::default();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&FramePair> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = tracker_loss_and_grads(&weights, &batch, hyper.lambda)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Training { epoch, msg: format!("non-finite registration loss {loss}") });
            }
            total += loss * batch.len() as f64;
            opt.step(&mut weights.params, &grads);
        }
        let mean = total / dataset.len() as f64;
        debug!("tracker epoch {epoch}: loss {mean:.6}");
        curve.epoch_loss.push(mean);
    }
    Ok((weights, curve))
}
