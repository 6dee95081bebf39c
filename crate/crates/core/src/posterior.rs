//! Stochastic-gradient HMC over tracker weights and the two loss-of-tracking
//! maps: `u_s`, the squared warp residual, and `u_b`, the spread of the
//! flows predicted by the posterior samples.

use std::path::Path;

use log::debug;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cinedata::{frame_pair, pair_id, CineSequence, FramePair, Image};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::store::{self, TensorRef};
use crate::tracknet::{self, warp, DeformationField, TrackerWeights};

/// SGHMC settings. The potential is the mean minibatch loss; `noise_scale`
/// scales the injected noise and so acts as a temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub step_size: f64,
    pub friction: f64,
    pub noise_scale: f64,
    pub burn_in: usize,
    pub thinning: usize,
    pub num_samples: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            step_size: 1e-4,
            friction: 0.05,
            noise_scale: 1.0,
            burn_in: 200,
            thinning: 100,
            num_samples: 10,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples < 2 {
            return Err(Error::Config(format!("num_samples must be >= 2, got {}", self.num_samples)));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be >= 0, got {}", self.step_size)));
        }
        if !(0.0..=1.0).contains(&self.friction) {
            return Err(Error::Config(format!("friction must lie in [0, 1], got {}", self.friction)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("noise_scale must be >= 0, got {}", self.noise_scale)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.burn_in + (self.num_samples - 1) * self.thinning
    }
}

/// Run one SGHMC chain from `init`:
///
/// ```text
/// v <- v - step * dU - friction * v + N(0, 2 * friction * step * noise_scale^2)
/// w <- w + v
/// ```
///
/// `loss_grad` returns the mean loss and its gradient on a minibatch of
/// dataset indices. Samples are taken after `burn_in` steps and then every
/// `thinning` steps.
pub(crate) fn sghmc_chain(
    init: &ParamStore<f32>,
    dataset_size: usize,
    config: &SamplerConfig,
    mut loss_grad: impl FnMut(&ParamStore<f32>, &[usize]) -> Result<(f64, Vec<Tensor<f32>>)>,
) -> Result<Vec<ParamStore<f32>>> {
    config.validate()?;
    if dataset_size == 0 {
        return Err(Error::Data("sampler needs a nonempty dataset".into()));
    }
    let mut params = init.clone();
    let mut velocity: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xba7c);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e4d);
    let mut order: Vec<usize> = (0..dataset_size).collect();
    let mut cursor = dataset_size;
    let grad_scale = config.step_size as f32;
    let noise_sd = ((2.0 * config.friction * config.step_size).sqrt() * config.noise_scale) as f32;
    let keep = 1.0 - config.friction as f32;

    let mut samples = Vec::with_capacity(config.num_samples);
    let total = config.total_steps();
    for step in 0..=total {
        if step >= config.burn_in && (step - config.burn_in) % config.thinning.max(1) == 0 {
            // With thinning 0 all samples are collected at the same step.
            let copies = if config.thinning == 0 { config.num_samples } else { 1 };
            for _ in 0..copies {
                samples.push(params.clone());
            }
        }
        if samples.len() >= config.num_samples {
            break;
        }
        if cursor + config.batch_size > dataset_size {
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(dataset_size);
        let batch = &order[cursor..end];
        cursor = end;
        let (loss, grads) = loss_grad(&params, batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Sampler { step, msg: format!("non-finite loss {loss}") });
        }
        for ((p, v), g) in params.tensors_mut().iter_mut().zip(&mut velocity).zip(&grads) {
            for ((w, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let noise = if noise_sd > 0.0 {
                    noise_sd * Distribution::<f32>::sample(&StandardNormal, &mut noise_rng)
                } else {
                    0.0
                };
                *vi = keep * *vi - grad_scale * gi + noise;
                *w += *vi;
            }
        }
        if params.tensors().iter().any(|t| !t.all_finite()) {
            return Err(Error::Sampler { step, msg: "weights became non-finite".into() });
        }
        if step % 50 == 0 {
            debug!("sghmc step {step}: loss {loss:.6}");
        }
    }
    Ok(samples)
}

/// `M` tracker weight samples from one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorEnsemble {
    pub samples: Vec<TrackerWeights>,
    pub sampler_config: SamplerConfig,
}

/// Draw tracker posterior samples starting from a trained mode.
pub fn sghmc_sample(
    init: &TrackerWeights,
    dataset: &[FramePair],
    lambda: f64,
    config: &SamplerConfig,
) -> Result<PosteriorEnsemble> {
    init.check_layout()?;
    let (h, w) = dataset.first().map(|p| p.source.shape()).unwrap_or((0, 0));
    init.arch.check_input(h, w)?;
    let stores = sghmc_chain(&init.params, dataset.len(), config, |params, batch| {
        let weights = TrackerWeights { arch: init.arch, params: params.clone() };
        let pairs: Vec<&FramePair> = batch.iter().map(|&i| &dataset[i]).collect();
        tracknet::tracker_loss_and_grads(&weights, &pairs, lambda)
    })?;
    let samples = stores.into_iter().map(|params| TrackerWeights { arch: init.arch, params }).collect();
    Ok(PosteriorEnsemble { samples, sampler_config: config.clone() })
}

pub const ENSEMBLE_VERSION: &str = "v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleIndex {
    version: String,
    kind: String,
    sampler_config: SamplerConfig,
    members: Vec<String>,
}

impl PosteriorEnsemble {
    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::Contract(format!("ensemble needs at least 2 samples, has {}", self.samples.len())));
        }
        let arch = self.samples[0].arch;
        if self.samples.iter().any(|s| s.arch != arch) {
            return Err(Error::Contract("ensemble members use different architectures".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Directory with `index.json` and one checkpoint per member.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        store::ensure_dir(dir)?;
        let mut members = Vec::new();
        for (k, s) in self.samples.iter().enumerate() {
            let name = format!("member_{k:02}");
            s.save(&dir.join(&name))?;
            members.push(name);
        }
        let index = EnsembleIndex {
            version: ENSEMBLE_VERSION.into(),
            kind: "tracker_ensemble".into(),
            sampler_config: self.sampler_config.clone(),
            members,
        };
        store::write_json(&dir.join("index.json"), &index)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        if !path.is_file() {
            return Err(Error::format(&path, "ensemble index not found"));
        }
        let index: EnsembleIndex = store::read_json(&path)?;
        store::check_version(&path, &index.version, ENSEMBLE_VERSION)?;
        if index.kind != "tracker_ensemble" {
            return Err(Error::format(&path, format!("kind: expected \"tracker_ensemble\", found {:?}", index.kind)));
        }
        let samples = index
            .members
            .iter()
            .map(|m| TrackerWeights::load(&dir.join(m)))
            .collect::<Result<Vec<_>>>()?;
        let e = PosteriorEnsemble { samples, sampler_config: index.sampler_config };
        e.validate().map_err(|err| Error::format(&path, err.to_string()))?;
        Ok(e)
    }

    /// Every member's flow for each pair, member-major.
    pub fn predict_all(&self, pairs: &[&FramePair]) -> Result<Vec<Vec<DeformationField>>> {
        self.samples.iter().map(|s| s.predict_flows(pairs)).collect()
    }

    /// Mean registration loss of each member on `pairs` divided by that of `reference`.
    pub fn loss_ratios(&self, reference: &TrackerWeights, pairs: &[FramePair], lambda: f64) -> Result<Vec<f64>> {
        let base = tracknet::dataset_loss(reference, pairs, lambda)?;
        self.samples
            .iter()
            .map(|s| Ok(tracknet::dataset_loss(s, pairs, lambda)? / base))
            .collect()
    }
}

/// Per-pixel squared residual of `warp(source, field)` against `target`.
pub fn u_s_map(field: &DeformationField, source: &Image, target: &Image) -> Result<Image> {
    if source.shape() != target.shape() {
        return Err(Error::Contract("u_s_map: source and target shapes differ".into()));
    }
    let warped = warp(source, field)?;
    let data = warped.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).collect();
    Ok(Image::new(target.height, target.width, data))
}

/// Per pixel: population SD of each displacement component across the
/// ensemble, combined by Euclidean norm.
pub fn u_b_map(flows: &[DeformationField]) -> Result<Image> {
    if flows.len() < 2 {
        return Err(Error::Contract(format!("u_b_map needs at least 2 fields, got {}", flows.len())));
    }
    let (h, w) = flows[0].shape();
    if flows.iter().any(|f| f.shape() != (h, w)) {
        return Err(Error::Contract("u_b_map: fields differ in shape".into()));
    }
    let m = flows.len() as f64;
    let mut out = vec![0.0f32; h * w];
    for (p, o) in out.iter_mut().enumerate() {
        let mut var = 0.0;
        for c in 0..2 {
            let vals = flows.iter().map(|f| f.data()[2 * p + c] as f64);
            let mean = vals.clone().sum::<f64>() / m;
            var += vals.map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        }
        *o = var.sqrt() as f32;
    }
    Ok(Image::new(h, w, out))
}

/// Rescale to `[0, 1]`; constant maps become zeros.
pub fn min_max_normalize(map: &Image) -> Image {
    let (lo, hi) = map.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let data = if range > 0.0 && range.is_finite() {
        map.data.iter().map(|v| (v - lo) / range).collect()
    } else {
        vec![0.0; map.data.len()]
    };
    Image::new(map.height, map.width, data)
}

/// Loss-of-tracking maps for one frame pair, in target-frame coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMaps {
    pub pair_id: String,
    pub u_b: Image,
    pub u_s: Image,
}

fn mean_field(flows: &[DeformationField]) -> DeformationField {
    let (h, w) = flows[0].shape();
    let m = flows.len() as f64;
    let data = (0..h * w * 2)
        .map(|k| (flows.iter().map(|f| f.data()[k] as f64).sum::<f64>() / m) as f32)
        .collect();
    DeformationField::from_interleaved(h, w, data).expect("matching shapes")
}

/// Unnormalized `(u_b, u_s)` from member flows; `u_s` uses the mean field.
pub fn raw_maps(flows: &[DeformationField], pair: &FramePair) -> Result<(Image, Image)> {
    let u_b = u_b_map(flows)?;
    let u_s = u_s_map(&mean_field(flows), &pair.source, &pair.target)?;
    Ok((u_b, u_s))
}

pub fn compute_uncertainty(ensemble: &PosteriorEnsemble, pair: &FramePair) -> Result<UncertaintyMaps> {
    Ok(compute_uncertainty_batch(ensemble, &[pair])?.remove(0))
}

pub fn compute_uncertainty_batch(ensemble: &PosteriorEnsemble, pairs: &[&FramePair]) -> Result<Vec<UncertaintyMaps>> {
    ensemble.validate()?;
    let per_member = ensemble.predict_all(pairs)?;
    pairs
        .iter()
        .enumerate()
        .map(|(k, pair)| {
            let flows: Vec<DeformationField> = per_member.iter().map(|m| m[k].clone()).collect();
            let (u_b, u_s) = raw_maps(&flows, pair)?;
            Ok(UncertaintyMaps { pair_id: pair.pair_id(), u_b: min_max_normalize(&u_b), u_s: min_max_normalize(&u_s) })
        })
        .collect()
}

/// Maps for every frame of a sequence. Frame `t` gets the maps of the pair
/// whose target is `t`, i.e. source `(t - delta_t) mod T`, so the maps are
/// aligned with the frame they annotate.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceUncertainty {
    pub seq_id: String,
    pub delta_t: usize,
    pub maps: Vec<UncertaintyMaps>,
}

/// Pairs feeding the maps of each frame of `seq`.
pub fn pairs_for_frames(seq: &CineSequence, delta_t: usize) -> Result<Vec<FramePair>> {
    let n = seq.num_frames();
    if delta_t == 0 || delta_t >= n {
        return Err(Error::Config(format!("delta_t must lie in [1, {n}), got {delta_t}")));
    }
    (0..n).map(|t| frame_pair(seq, (t + n - delta_t) % n, delta_t as isize)).collect()
}

pub fn sequence_uncertainty(ensemble: &PosteriorEnsemble, seq: &CineSequence, delta_t: usize) -> Result<SequenceUncertainty> {
    let pairs = pairs_for_frames(seq, delta_t)?;
    let refs: Vec<&FramePair> = pairs.iter().collect();
    Ok(SequenceUncertainty { seq_id: seq.id.clone(), delta_t, maps: compute_uncertainty_batch(ensemble, &refs)? })
}

pub const UNCERTAINTY_VERSION: &str = "v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UncertaintyManifest {
    version: String,
    kind: String,
    sequences: Vec<UncertaintyEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UncertaintyEntry {
    seq_id: String,
    delta_t: usize,
    pair_ids: Vec<String>,
    u_b: TensorRef,
    u_s: TensorRef,
}

pub fn save_uncertainty(dir: &Path, items: &[SequenceUncertainty]) -> Result<()> {
    store::ensure_dir(dir)?;
    let mut entries = Vec::new();
    for (k, s) in items.iter().enumerate() {
        let Some(first) = s.maps.first() else {
            return Err(Error::Contract(format!("{}: no maps", s.seq_id)));
        };
        let (h, w) = first.u_b.shape();
        let t = s.maps.len();
        let stack = |f: &dyn Fn(&UncertaintyMaps) -> &Image| -> Vec<f32> {
            s.maps.iter().flat_map(|m| f(m).data.iter().copied()).collect()
        };
        let stem = format!("{k:04}_{}", s.seq_id.replace(|c: char| !c.is_ascii_alphanumeric(), "_"));
        let u_b = store::write_f32(dir, &format!("{stem}_u_b.f32"), &[t, h, w], &stack(&|m| &m.u_b))?;
        let u_s = store::write_f32(dir, &format!("{stem}_u_s.f32"), &[t, h, w], &stack(&|m| &m.u_s))?;
        entries.push(UncertaintyEntry {
            seq_id: s.seq_id.clone(),
            delta_t: s.delta_t,
            pair_ids: s.maps.iter().map(|m| m.pair_id.clone()).collect(),
            u_b,
            u_s,
        });
    }
    let manifest = UncertaintyManifest { version: UNCERTAINTY_VERSION.into(), kind: "uncertainty".into(), sequences: entries };
    store::write_json(&store::manifest_path(dir), &manifest)
}

pub fn load_uncertainty(dir: &Path) -> Result<Vec<SequenceUncertainty>> {
    let mpath = store::manifest_path(dir);
    if !mpath.is_file() {
        return Err(Error::format(&mpath, "uncertainty manifest not found"));
    }
    let m: UncertaintyManifest = store::read_json(&mpath)?;
    store::check_version(&mpath, &m.version, UNCERTAINTY_VERSION)?;
    if m.kind != "uncertainty" {
        return Err(Error::format(&mpath, format!("kind: expected \"uncertainty\", found {:?}", m.kind)));
    }
    let mut out = Vec::new();
    for (k, e) in m.sequences.into_iter().enumerate() {
        let field = format!("sequences[{k}]");
        if e.u_b.shape.len() != 3 || e.u_b.shape != e.u_s.shape || e.u_b.shape[0] != e.pair_ids.len() {
            return Err(Error::format(&mpath, format!("{field}: inconsistent map shapes {:?} / {:?}", e.u_b.shape, e.u_s.shape)));
        }
        let (h, w) = (e.u_b.shape[1], e.u_b.shape[2]);
        let ub = store::read_f32(dir, &e.u_b, &format!("{field}.u_b"))?;
        let us = store::read_f32(dir, &e.u_s, &format!("{field}.u_s"))?;
        let maps = e
            .pair_ids
            .into_iter()
            .zip(ub.chunks_exact(h * w).zip(us.chunks_exact(h * w)))
            .map(|(pair_id, (b, s))| UncertaintyMaps {
                pair_id,
                u_b: Image::new(h, w, b.to_vec()),
                u_s: Image::new(h, w, s.to_vec()),
            })
            .collect();
        out.push(SequenceUncertainty { seq_id: e.seq_id, delta_t: e.delta_t, maps });
    }
    Ok(out)
}

/// Expected pair id for the maps annotating frame `t`.
pub fn frame_pair_id(seq_id: &str, t: usize, num_frames: usize, delta_t: usize) -> String {
    pair_id(seq_id, (t + num_frames - delta_t % num_frames) % num_frames, delta_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracknet::TrackerArch;
    use rand::Rng;

    fn random_field(rng: &mut impl Rng, h: usize, w: usize) -> DeformationField {
        DeformationField::from_fn(h, w, |_, _| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
    }

    #[test]
    fn u_s_examples() {
        let src = Image::from_fn(5, 5, |i, j| (i + 2 * j) as f32);
        let zero = DeformationField::zeros(5, 5);
        assert!(u_s_map(&zero, &src, &src).unwrap().data.iter().all(|&v| v == 0.0));
        let tgt = Image::new(5, 5, src.data.iter().map(|v| v + 2.0).collect());
        assert!(u_s_map(&zero, &src, &tgt).unwrap().data.iter().all(|&v| v == 4.0));
        assert!(matches!(u_s_map(&zero, &src, &Image::zeros(5, 4)), Err(Error::Contract(_))));
    }

    #[test]
    fn u_s_sum_matches_mse_times_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = Image::from_fn(8, 8, |_, _| rng.gen_range(0.0..1.0));
        let tgt = Image::from_fn(8, 8, |_, _| rng.gen_range(0.0..1.0));
        let f = random_field(&mut rng, 8, 8);
        let sum: f64 = u_s_map(&f, &src, &tgt).unwrap().data.iter().map(|&v| v as f64).sum();
        let mse = tracknet::residual_mse(&f, &src, &tgt).unwrap();
        assert!((sum - 64.0 * mse).abs() < 1e-4);
    }

    #[test]
    fn u_b_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_field(&mut rng, 4, 4);
        assert!(u_b_map(&[f.clone(), f.clone(), f.clone()]).unwrap().data.iter().all(|&v| v == 0.0));
        let a = DeformationField::from_fn(1, 1, |_, _| (0.0, 1.0));
        let b = DeformationField::from_fn(1, 1, |_, _| (0.0, 3.0));
        assert_eq!(u_b_map(&[a, b]).unwrap().data, vec![1.0]);
        assert!(matches!(u_b_map(&[f]), Err(Error::Contract(_))));
    }

    #[test]
    fn u_b_matches_pointwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let flows: Vec<DeformationField> = (0..5).map(|_| random_field(&mut rng, 6, 7)).collect();
        let map = u_b_map(&flows).unwrap();
        for i in 0..6 {
            for j in 0..7 {
                let ys: Vec<f64> = flows.iter().map(|f| f.get(i, j).0 as f64).collect();
                let xs: Vec<f64> = flows.iter().map(|f| f.get(i, j).1 as f64).collect();
                let sd = |v: &[f64]| {
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
                };
                let want = sd(&ys).hypot(sd(&xs));
                assert!((map.at(i, j) as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn normalization_cases() {
        assert!(min_max_normalize(&Image::new(1, 3, vec![2.0; 3])).data.iter().all(|&v| v == 0.0));
        assert_eq!(min_max_normalize(&Image::new(1, 3, vec![1.0, 3.0, 2.0])).data, vec![0.0, 1.0, 0.5]);
    }

    fn toy_pairs(n: usize) -> Vec<FramePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..n)
            .map(|k| {
                let src = Image::from_fn(8, 8, |i, j| ((i as f32) * 0.5).sin() + ((j as f32) * 0.3).cos());
                let tgt = Image::from_fn(8, 8, |_, _| rng.gen_range(-0.2..0.2));
                let tgt = Image::new(8, 8, src.data.iter().zip(&tgt.data).map(|(a, b)| a + b).collect());
                FramePair { seq_id: format!("p{k}"), source: src, target: tgt, t: 0, target_index: 1, delta_t: 1 }
            })
            .collect()
    }

    fn small_init() -> TrackerWeights {
        let mut w = TrackerWeights::init(TrackerArch { levels: 2, base_width: 2 }, 1).unwrap();
        // Nonzero flow head so gradients reach every layer.
        for (name, t) in w.params.names().to_vec().into_iter().zip(w.params.tensors_mut()) {
            if name.starts_with("flow") {
                for (k, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.01 * ((k % 7) as f32 - 3.0);
                }
            }
        }
        w
    }

    #[test]
    fn frozen_dynamics_give_identical_samples() {
        let cfg = SamplerConfig { step_size: 0.0, noise_scale: 0.0, burn_in: 3, thinning: 0, num_samples: 2, ..Default::default() };
        let e = sghmc_sample(&small_init(), &toy_pairs(4), 0.1, &cfg).unwrap();
        assert_eq!(e.samples.len(), 2);
        assert_eq!(e.samples[0], e.samples[1]);
    }

    #[test]
    fn momentum_sgd_limit_keeps_moving() {
        let cfg = SamplerConfig {
            step_size: 1e-3,
            friction: 1.0,
            noise_scale: 0.0,
            burn_in: 0,
            thinning: 1,
            num_samples: 3,
            batch_size: 2,
            seed: 0,
        };
        let e = sghmc_sample(&small_init(), &toy_pairs(4), 0.1, &cfg).unwrap();
        assert_ne!(e.samples[0], e.samples[1]);
        assert_ne!(e.samples[1], e.samples[2]);
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let cfg = SamplerConfig { step_size: 1e-5, burn_in: 2, thinning: 2, num_samples: 2, batch_size: 2, ..Default::default() };
        let a = sghmc_sample(&small_init(), &toy_pairs(4), 0.1, &cfg).unwrap();
        let b = sghmc_sample(&small_init(), &toy_pairs(4), 0.1, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.samples[0], a.samples[1]);
    }

    #[test]
    fn divergence_names_the_step() {
        let cfg = SamplerConfig { step_size: 1e30, burn_in: 5, thinning: 1, num_samples: 2, ..Default::default() };
        match sghmc_sample(&small_init(), &toy_pairs(4), 0.1, &cfg) {
            Err(Error::Sampler { .. }) => {}
            other => panic!("expected sampler error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_sampler_configs() {
        let bad = [
            SamplerConfig { num_samples: 1, ..Default::default() },
            SamplerConfig { friction: 1.5, ..Default::default() },
            SamplerConfig { step_size: -1.0, ..Default::default() },
            SamplerConfig { batch_size: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn identical_members_have_zero_u_b() {
        let w = small_init();
        let e = PosteriorEnsemble { samples: vec![w.clone(), w], sampler_config: SamplerConfig::default() };
        let maps = compute_uncertainty(&e, &toy_pairs(1)[0]).unwrap();
        assert!(maps.u_b.data.iter().all(|&v| v == 0.0));
        assert!(maps.u_s.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(maps.pair_id, "p0:t0:dt1");
    }

    #[test]
    fn ensemble_and_maps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = small_init();
        let mut w2 = w.clone();
        w2.params.tensors_mut()[0].data_mut()[0] += 0.5;
        let e = PosteriorEnsemble { samples: vec![w, w2], sampler_config: SamplerConfig::default() };
        e.save(&dir.path().join("ens")).unwrap();
        assert_eq!(PosteriorEnsemble::load(&dir.path().join("ens")).unwrap(), e);

        let pairs = toy_pairs(3);
        let refs: Vec<&FramePair> = pairs.iter().collect();
        let su = SequenceUncertainty { seq_id: "p".into(), delta_t: 1, maps: compute_uncertainty_batch(&e, &refs).unwrap() };
        save_uncertainty(&dir.path().join("unc"), std::slice::from_ref(&su)).unwrap();
        assert_eq!(load_uncertainty(&dir.path().join("unc")).unwrap(), vec![su]);
    }

    #[test]
    fn frame_maps_target_their_frame() {
        assert_eq!(frame_pair_id("s", 0, 12, 1), "s:t11:dt1");
        assert_eq!(frame_pair_id("s", 5, 12, 2), "s:t3:dt2");
    }
}
