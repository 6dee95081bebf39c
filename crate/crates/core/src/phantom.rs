//! Synthetic 2D+t cine phantom with exact ground-truth motion.
//!
//! Each study has three slices (base, mid, apex). A slice shows a ring-shaped
//! LV/MYO, a crescent RV and a smooth textured background, all deformed by a
//! cyclic radial contraction plus twist around the LV centre. Frames are
//! rendered by pulling template coordinates back through the analytic motion
//! map, so ground-truth flows between any two frames are exact.
//!
//! With `incoherence_flag` set, basal slices also carry an ambiguous blob
//! that looks exactly like RV in a single frame. In half of the studies it is
//! an outflow extension of the RV (moves with the tissue, labelled RV); in
//! the other half it is through-plane content (texture redrawn every frame,
//! labelled background). Only temporal behaviour separates the two.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cinedata::{CineSequence, Image, LabelMap, Region, CLASS_BG, CLASS_LV, CLASS_MYO, CLASS_RV};
use crate::error::{Error, Result};
use crate::eval::region_split;
use crate::tracknet::DeformationField;

pub const SLICES_PER_STUDY: usize = 3;
pub const PIXEL_SPACING_MM: f64 = 1.5;
pub const SLICE_THICKNESS_MM: f64 = 8.0;

const EDGE_SOFTNESS: f64 = 0.25;
const BG_LEVEL: f64 = 0.12;
const LV_LEVEL: f64 = 0.85;
const MYO_LEVEL: f64 = 0.35;
const RV_LEVEL: f64 = 0.7;
const RV_TEXTURE_SD: f64 = 0.12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// (H, W) in pixels.
    pub image_size: (usize, usize),
    pub num_frames: usize,
    pub num_sequences: usize,
    /// Peak radial displacement (pixels) relative to end-diastole.
    pub motion_amplitude: f64,
    pub incoherence_flag: bool,
    /// Probability that a basal ambiguous region carries the wrong label.
    pub label_noise: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            image_size: (64, 64),
            num_frames: 12,
            num_sequences: 12,
            motion_amplitude: 3.0,
            incoherence_flag: true,
            label_noise: 0.0,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 32 || w < 32 {
            return Err(Error::Config(format!("image_size must be at least 32x32, got {h}x{w}")));
        }
        if self.num_frames < 8 {
            return Err(Error::Config(format!("num_frames must be >= 8, got {}", self.num_frames)));
        }
        if self.num_sequences == 0 {
            return Err(Error::Config("num_sequences must be >= 1".into()));
        }
        let limit = h.min(w) as f64 / 8.0;
        if !(self.motion_amplitude >= 0.0 && self.motion_amplitude < limit) {
            return Err(Error::Config(format!(
                "motion_amplitude must lie in [0, {limit}), got {}",
                self.motion_amplitude
            )));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!("label_noise must lie in [0, 1], got {}", self.label_noise)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// What the basal ambiguous blob is in a given sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmbiguousKind {
    /// RV outflow tract: trackable, truly RV.
    Outflow,
    /// Valve/atrium passing through the plane: untrackable, truly background.
    ThroughPlane,
}

impl AmbiguousKind {
    pub fn true_label(self) -> u8 {
        match self {
            AmbiguousKind::Outflow => CLASS_RV,
            AmbiguousKind::ThroughPlane => CLASS_BG,
        }
    }
}

/// Random plane-wave texture with a fixed standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    waves: Vec<(f64, f64, f64)>,
    scale: f64,
}

impl Texture {
    const WAVES: usize = 6;

    pub fn random(rng: &mut impl Rng, sd: f64, min_wavelength: f64, max_wavelength: f64) -> Self {
        let waves = (0..Self::WAVES)
            .map(|_| {
                let lambda = rng.gen_range(min_wavelength..max_wavelength);
                let theta = rng.gen_range(0.0..PI);
                let k = 2.0 * PI / lambda;
                (k * theta.sin(), k * theta.cos(), rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        Texture { waves, scale: sd * (2.0 / Self::WAVES as f64).sqrt() }
    }

    pub fn eval(&self, y: f64, x: f64) -> f64 {
        self.scale * self.waves.iter().map(|&(ky, kx, ph)| (ky * y + kx * x + ph).cos()).sum::<f64>()
    }
}

/// Cyclic contraction-plus-twist about a centre. Template point at radius `r`
/// moves to radius `r - a(t) g(r)` and rotates by `theta(t) w(r)`, with
/// `g(r) = (r/rho) exp((1 - (r/rho)^2)/2)` peaking at 1 for `r = rho` and
/// `w(r) = exp(-(r/rho)^2 / 4)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionModel {
    pub center: (f64, f64),
    pub amplitude: f64,
    pub twist: f64,
    pub rho: f64,
    pub num_frames: usize,
}

impl MotionModel {
    /// Cycle phase weight: 0 at end-diastole (t = 0), 1 at end-systole (t = T/2).
    pub fn phase(&self, t: usize) -> f64 {
        (1.0 - (2.0 * PI * t as f64 / self.num_frames as f64).cos()) / 2.0
    }

    fn g(&self, r: f64) -> f64 {
        let s = r / self.rho;
        s * ((1.0 - s * s) / 2.0).exp()
    }

    fn dg(&self, r: f64) -> f64 {
        let s = r / self.rho;
        (1.0 - s * s) * ((1.0 - s * s) / 2.0).exp() / self.rho
    }

    fn w(&self, r: f64) -> f64 {
        let s = r / self.rho;
        (-s * s / 4.0).exp()
    }

    fn is_identity(&self, t: usize) -> bool {
        let ph = self.phase(t);
        ph == 0.0 || (self.amplitude == 0.0 && self.twist == 0.0)
    }

    /// Template point -> position in frame `t`.
    pub fn forward(&self, t: usize, q: (f64, f64)) -> (f64, f64) {
        if self.is_identity(t) {
            return q;
        }
        let ph = self.phase(t);
        let (dy, dx) = (q.0 - self.center.0, q.1 - self.center.1);
        let r = dy.hypot(dx);
        let rn = r - ph * self.amplitude * self.g(r);
        let ang = dy.atan2(dx) + ph * self.twist * self.w(r);
        (self.center.0 + rn * ang.sin(), self.center.1 + rn * ang.cos())
    }

    /// Position in frame `t` -> template point (radial equation solved by Newton).
    pub fn inverse(&self, t: usize, p: (f64, f64)) -> (f64, f64) {
        if self.is_identity(t) {
            return p;
        }
        let ph = self.phase(t);
        let a = ph * self.amplitude;
        let (dy, dx) = (p.0 - self.center.0, p.1 - self.center.1);
        let rp = dy.hypot(dx);
        let mut r = rp;
        for _ in 0..50 {
            let f = r - a * self.g(r) - rp;
            let step = f / (1.0 - a * self.dg(r));
            r -= step;
            if step.abs() < 1e-13 {
                break;
            }
        }
        let ang = dy.atan2(dx) - ph * self.twist * self.w(r);
        (self.center.0 + r * ang.sin(), self.center.1 + r * ang.cos())
    }

    /// Field that warps frame `from` onto frame `to`:
    /// `warp(frame_from, flow)(p) = frame_to(p)`.
    pub fn flow_between(&self, from: usize, to: usize, height: usize, width: usize) -> DeformationField {
        let mut field = DeformationField::zeros(height, width);
        for i in 0..height {
            for j in 0..width {
                let p = (i as f64, j as f64);
                let q = self.inverse(to, p);
                let s = self.forward(from, q);
                field.set(i, j, ((s.0 - p.0) as f32, (s.1 - p.1) as f32));
            }
        }
        field
    }
}

/// Circle in template coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Disk {
    cy: f64,
    cx: f64,
    r: f64,
}

impl Disk {
    /// Signed distance, positive inside.
    fn depth(&self, q: (f64, f64)) -> f64 {
        self.r - (q.0 - self.cy).hypot(q.1 - self.cx)
    }
}

fn soft(depth: f64) -> f64 {
    1.0 / (1.0 + (-depth / EDGE_SOFTNESS).exp())
}

/// Everything needed to render one sequence and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceModel {
    pub region: Region,
    pub motion: MotionModel,
    lv: Disk,
    myo: Disk,
    rv: Disk,
    blob: Option<Disk>,
    pub ambiguous: Option<AmbiguousKind>,
    /// Label written for the ambiguous blob (after label noise).
    pub blob_label: u8,
    bg_tex: Texture,
    lv_tex: Texture,
    myo_tex: Texture,
    rv_tex: Texture,
    blob_tex: Texture,
    seed: u64,
    index: u64,
    noise_sigma: f64,
    height: usize,
    width: usize,
}

fn texture_wavelengths(size: f64) -> (f64, f64) {
    (5.0_f64.max(size * 0.11), 9.0_f64.max(size * 0.2))
}

impl SequenceModel {
    fn texture_for_frame(&self, t: usize) -> Texture {
        match self.ambiguous {
            Some(AmbiguousKind::ThroughPlane) => {
                let mut rng = frame_rng(self.seed, self.index, t as u64, 1);
                let (lo, hi) = texture_wavelengths(self.height.min(self.width) as f64);
                Texture::random(&mut rng, RV_TEXTURE_SD, lo, hi)
            }
            _ => self.blob_tex.clone(),
        }
    }

    fn classify(&self, q: (f64, f64)) -> u8 {
        let mut label = CLASS_BG;
        if self.rv.depth(q) > 0.0 {
            label = CLASS_RV;
        }
        if let Some(b) = &self.blob {
            if b.depth(q) > 0.0 {
                label = self.blob_label;
            }
        }
        if self.myo.depth(q) > 0.0 {
            label = CLASS_MYO;
        }
        if self.lv.depth(q) > 0.0 {
            label = CLASS_LV;
        }
        label
    }

    fn in_blob(&self, q: (f64, f64)) -> bool {
        match &self.blob {
            Some(b) => b.depth(q) > 0.0 && self.myo.depth(q) <= 0.0,
            None => false,
        }
    }

    fn intensity(&self, q: (f64, f64), blob_tex: &Texture) -> f64 {
        let (y, x) = q;
        let mut v = BG_LEVEL + self.bg_tex.eval(y, x);
        let m = soft(self.rv.depth(q));
        v = (1.0 - m) * v + m * (RV_LEVEL + self.rv_tex.eval(y, x));
        if let Some(b) = &self.blob {
            let m = soft(b.depth(q));
            v = (1.0 - m) * v + m * (RV_LEVEL + blob_tex.eval(y, x));
        }
        let m = soft(self.myo.depth(q));
        v = (1.0 - m) * v + m * (MYO_LEVEL + self.myo_tex.eval(y, x));
        let m = soft(self.lv.depth(q));
        (1.0 - m) * v + m * (LV_LEVEL + self.lv_tex.eval(y, x))
    }

    /// Noise-free frame `t`, optionally sampled at `p + offset`.
    pub fn render_clean(&self, t: usize, offset: (f64, f64)) -> Image {
        let tex = self.texture_for_frame(t);
        Image::from_fn(self.height, self.width, |i, j| {
            let q = self.motion.inverse(t, (i as f64 + offset.0, j as f64 + offset.1));
            self.intensity(q, &tex) as f32
        })
    }

    pub fn render(&self, t: usize) -> Image {
        let mut img = self.render_clean(t, (0.0, 0.0));
        if self.noise_sigma > 0.0 {
            let mut rng = frame_rng(self.seed, self.index, t as u64, 2);
            let normal = Normal::new(0.0, self.noise_sigma).expect("valid sigma");
            for v in img.data.iter_mut() {
                *v += normal.sample(&mut rng) as f32;
            }
        }
        img
    }

    pub fn labels(&self, t: usize) -> LabelMap {
        let mut data = Vec::with_capacity(self.height * self.width);
        for i in 0..self.height {
            for j in 0..self.width {
                data.push(self.classify(self.motion.inverse(t, (i as f64, j as f64))));
            }
        }
        LabelMap::new(self.height, self.width, data)
    }

    /// Pixels of frame `t` whose content cannot be tracked into other frames.
    pub fn incoherence_mask(&self, t: usize) -> Vec<bool> {
        let mut mask = vec![false; self.height * self.width];
        if self.ambiguous != Some(AmbiguousKind::ThroughPlane) {
            return mask;
        }
        for i in 0..self.height {
            for j in 0..self.width {
                mask[i * self.width + j] = self.in_blob(self.motion.inverse(t, (i as f64, j as f64)));
            }
        }
        mask
    }

    /// Ambiguous-blob pixels of frame `t`, whatever their kind.
    pub fn ambiguous_mask(&self, t: usize) -> Vec<bool> {
        let mut mask = vec![false; self.height * self.width];
        if self.blob.is_none() {
            return mask;
        }
        for i in 0..self.height {
            for j in 0..self.width {
                mask[i * self.width + j] = self.in_blob(self.motion.inverse(t, (i as f64, j as f64)));
            }
        }
        mask
    }
}

fn frame_rng(seed: u64, index: u64, t: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d_0000_0000);
    rng.set_stream((index << 24) | (t << 4) | purpose);
    rng
}

/// Ground truth for one generated sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomTruth {
    pub seq_id: String,
    pub masks: Vec<LabelMap>,
    /// `flows[t]` warps frame `t` onto frame `(t + 1) mod T`.
    pub flows: Vec<DeformationField>,
    pub incoherence: Vec<Vec<bool>>,
    pub ambiguous: Vec<Vec<bool>>,
    pub ambiguous_kind: Option<AmbiguousKind>,
    pub label_flipped: bool,
    pub model: SequenceModel,
}

impl PhantomTruth {
    /// Exact field warping frame `from` onto frame `to`.
    pub fn flow_between(&self, from: usize, to: usize) -> DeformationField {
        let (h, w) = (self.masks[0].height, self.masks[0].width);
        self.model.motion.flow_between(from, to, h, w)
    }

    /// Untrackable pixels for the pair `(t, s)`, in target coordinates.
    pub fn pair_incoherence(&self, t: usize, s: usize) -> Vec<bool> {
        self.incoherence[t].iter().zip(&self.incoherence[s]).map(|(&a, &b)| a || b).collect()
    }
}

fn build_model(config: &PhantomConfig, index: usize) -> SequenceModel {
    let (h, w) = config.image_size;
    let size = h.min(w) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let study = index / SLICES_PER_STUDY;
    let slice = index % SLICES_PER_STUDY;
    let region = region_split(SLICES_PER_STUDY).expect("three slices")[slice];

    let (heart_scale, rv_scale) = match region {
        Region::Base => (1.0, 0.8),
        Region::Mid => (0.95, 1.0),
        Region::Apex | Region::Unknown => (0.75, 0.8),
    };
    let cy = h as f64 / 2.0 + rng.gen_range(-0.03..0.03) * size;
    let cx = w as f64 / 2.0 + 0.08 * size + rng.gen_range(-0.03..0.03) * size;
    let r_lv = 0.12 * size * heart_scale * rng.gen_range(0.92..1.08);
    let r_myo = r_lv + 0.07 * size * heart_scale;
    let lv = Disk { cy, cx, r: r_lv };
    let myo = Disk { cy, cx, r: r_myo };
    let rv_r = r_myo * 1.05 * rv_scale * rng.gen_range(0.95..1.05);
    let rv = Disk { cy: cy + rng.gen_range(-0.05..0.05) * size, cx: cx - 0.75 * r_myo, r: rv_r };

    let blob_geom = Disk {
        cy: cy - r_myo * rng.gen_range(0.85..1.0),
        cx: cx - r_myo * rng.gen_range(1.05..1.2),
        r: 0.2 * size * rng.gen_range(0.95..1.05),
    };
    let (lo, hi) = texture_wavelengths(size);
    let bg_tex = Texture::random(&mut rng, 0.08, lo, hi);
    let lv_tex = Texture::random(&mut rng, 0.08, lo, hi);
    let myo_tex = Texture::random(&mut rng, 0.06, lo, hi);
    let rv_tex = Texture::random(&mut rng, RV_TEXTURE_SD, lo, hi);
    let blob_tex = Texture::random(&mut rng, RV_TEXTURE_SD, lo, hi);

    let ambiguous = (config.incoherence_flag && region == Region::Base).then(|| {
        if study % 2 == 0 {
            AmbiguousKind::ThroughPlane
        } else {
            AmbiguousKind::Outflow
        }
    });
    // Label noise uses its own stream so images do not depend on it.
    let mut label_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x1abe_1000);
    label_rng.set_stream(index as u64);
    let flipped = ambiguous.is_some() && label_rng.gen::<f64>() < config.label_noise;
    let blob_label = match ambiguous {
        Some(kind) if flipped => {
            if kind.true_label() == CLASS_RV {
                CLASS_BG
            } else {
                CLASS_RV
            }
        }
        Some(kind) => kind.true_label(),
        None => CLASS_BG,
    };

    let amplitude = config.motion_amplitude;
    let motion = MotionModel {
        center: (cy, cx),
        amplitude,
        twist: if amplitude > 0.0 { 0.25 * amplitude / r_myo } else { 0.0 },
        rho: r_myo.max(2.0 * amplitude),
        num_frames: config.num_frames,
    };
    SequenceModel {
        region,
        motion,
        lv,
        myo,
        rv,
        blob: ambiguous.map(|_| blob_geom),
        ambiguous,
        blob_label,
        bg_tex,
        lv_tex,
        myo_tex,
        rv_tex,
        blob_tex,
        seed: config.seed,
        index: index as u64,
        noise_sigma: config.noise_sigma,
        height: h,
        width: w,
    }
}

pub fn sequence_id(index: usize) -> String {
    format!("seq{index:03}")
}

pub fn study_id(index: usize) -> String {
    format!("study{:03}", index / SLICES_PER_STUDY)
}

/// Generate sequences and ground truth; a pure function of `config`.
pub fn generate_phantom(config: &PhantomConfig) -> Result<(Vec<CineSequence>, Vec<PhantomTruth>)> {
    config.validate()?;
    let (h, w) = config.image_size;
    let t_count = config.num_frames;
    let mut seqs = Vec::with_capacity(config.num_sequences);
    let mut truths = Vec::with_capacity(config.num_sequences);
    for k in 0..config.num_sequences {
        let model = build_model(config, k);
        let frames: Vec<Image> = (0..t_count).map(|t| model.render(t)).collect();
        let masks: Vec<LabelMap> = (0..t_count).map(|t| model.labels(t)).collect();
        let flows = (0..t_count)
            .map(|t| model.motion.flow_between(t, (t + 1) % t_count, h, w))
            .collect();
        let incoherence = (0..t_count).map(|t| model.incoherence_mask(t)).collect();
        let ambiguous = (0..t_count).map(|t| model.ambiguous_mask(t)).collect();
        let flipped = model.ambiguous.map(|k| k.true_label() != model.blob_label).unwrap_or(false);
        seqs.push(CineSequence {
            id: sequence_id(k),
            study_id: study_id(k),
            frames,
            pixel_spacing: (PIXEL_SPACING_MM, PIXEL_SPACING_MM),
            slice_thickness: SLICE_THICKNESS_MM,
            region: model.region,
            labels: Some(masks.clone()),
            ed_frame: 0,
            es_frame: t_count / 2,
        });
        truths.push(PhantomTruth {
            seq_id: sequence_id(k),
            masks,
            flows,
            incoherence,
            ambiguous,
            ambiguous_kind: model.ambiguous,
            label_flipped: flipped,
            model,
        });
    }
    Ok((seqs, truths))
}

/// Rebuild the truth for sequences of a saved phantom bundle from the config
/// that produced it.
pub fn regenerate_truth(config: &PhantomConfig, seq_id: &str) -> Result<PhantomTruth> {
    let (_, truths) = generate_phantom(config)?;
    truths
        .into_iter()
        .find(|t| t.seq_id == seq_id)
        .ok_or_else(|| Error::Data(format!("sequence {seq_id} is not part of this phantom")))
}

/// Disjoint train/test split by study; deterministic in `seed`.
pub fn split_phantom<T: Clone>(
    items: &[T],
    study_of: impl Fn(&T) -> String,
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    let (ftrain, ftest) = fractions;
    if ftrain < 0.0 || ftest < 0.0 || ((ftrain + ftest) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must be non-negative and sum to 1, got ({ftrain}, {ftest})")));
    }
    let mut studies: Vec<String> = Vec::new();
    for it in items {
        let s = study_of(it);
        if !studies.contains(&s) {
            studies.push(s);
        }
    }
    let n = studies.len();
    let n_train = (ftrain * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "split ({ftrain}, {ftest}) of {n} studies leaves an empty partition"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let train_studies: Vec<&String> = order[..n_train].iter().map(|&i| &studies[i]).collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for it in items {
        if train_studies.contains(&&study_of(it)) {
            train.push(it.clone());
        } else {
            test.push(it.clone());
        }
    }
    Ok((train, test))
}
