//! Cine sequences, frame pairing and the on-disk bundle format.
//!
//! A bundle is a directory holding `manifest.json` plus one raw
//! little-endian f32 file per tensor (row-major). Labels are stored as f32
//! class ids.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{self, TensorRef};

pub const BUNDLE_VERSION: &str = "v1";

pub const CLASS_BG: u8 = 0;
pub const CLASS_RV: u8 = 1;
pub const CLASS_MYO: u8 = 2;
pub const CLASS_LV: u8 = 3;
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["BG", "RV", "MYO", "LV"];

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(height * width, data.len(), "image data length");
        Image { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Image { height, width, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.width + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Per-pixel class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(height * width, data.len(), "label map length");
        LabelMap { height, width, data }
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Base,
    Mid,
    Apex,
    Unknown,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Base => "base",
            Region::Mid => "mid",
            Region::Apex => "apex",
            Region::Unknown => "unknown",
        }
    }
}

/// One short-axis slice over the cardiac cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct CineSequence {
    pub id: String,
    pub study_id: String,
    pub frames: Vec<Image>,
    /// (row, column) spacing in mm.
    pub pixel_spacing: (f64, f64),
    pub slice_thickness: f64,
    pub region: Region,
    pub labels: Option<Vec<LabelMap>>,
    pub ed_frame: usize,
    pub es_frame: usize,
}

impl CineSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        self.frames.first().map(Image::shape).unwrap_or((0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::Contract(format!("sequence {}: needs at least 2 frames", self.id)));
        }
        let shape = self.frame_shape();
        if self.frames.iter().any(|f| f.shape() != shape) {
            return Err(Error::Contract(format!("sequence {}: frames differ in shape", self.id)));
        }
        let (sy, sx) = self.pixel_spacing;
        if !(sy > 0.0 && sx > 0.0 && self.slice_thickness > 0.0) {
            return Err(Error::Contract(format!("sequence {}: spacing and thickness must be positive", self.id)));
        }
        if self.ed_frame >= self.frames.len() || self.es_frame >= self.frames.len() {
            return Err(Error::Contract(format!("sequence {}: ED/ES frame index out of range", self.id)));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.frames.len() {
                return Err(Error::Contract(format!("sequence {}: label frame count differs", self.id)));
            }
            for l in labels {
                if (l.height, l.width) != shape {
                    return Err(Error::Contract(format!("sequence {}: label shape differs from frames", self.id)));
                }
                if let Some(bad) = l.data.iter().find(|&&c| c as usize >= NUM_CLASSES) {
                    return Err(Error::Contract(format!("sequence {}: undeclared class id {bad}", self.id)));
                }
            }
        }
        Ok(())
    }
}

/// Source/target frames `I_t`, `I_{t+δt}` from one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub seq_id: String,
    pub source: Image,
    pub target: Image,
    pub t: usize,
    pub target_index: usize,
    pub delta_t: usize,
}

impl FramePair {
    pub fn pair_id(&self) -> String {
        pair_id(&self.seq_id, self.t, self.delta_t)
    }
}

pub fn pair_id(seq_id: &str, t: usize, delta_t: usize) -> String {
    format!("{seq_id}:t{t}:dt{delta_t}")
}

/// Pair frame `t` with frame `(t + delta_t) mod T`; the cycle wraps.
pub fn frame_pair(seq: &CineSequence, t: usize, delta_t: isize) -> Result<FramePair> {
    if delta_t <= 0 {
        return Err(Error::Config(format!("delta_t must be >= 1, got {delta_t}")));
    }
    let n = seq.num_frames();
    if t >= n {
        return Err(Error::Contract(format!("frame index {t} out of range for {n} frames")));
    }
    let dt = delta_t as usize;
    let target_index = (t + dt) % n;
    Ok(FramePair {
        seq_id: seq.id.clone(),
        source: seq.frames[t].clone(),
        target: seq.frames[target_index].clone(),
        t,
        target_index,
        delta_t: dt,
    })
}

/// Zero-mean, unit-variance rescaling of one frame. Constant frames become zeros.
pub fn normalize(image: &Image) -> Result<Image> {
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("normalize: image contains non-finite values".into()));
    }
    let n = image.data.len() as f64;
    let mean = image.mean();
    let var = image.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let data = if sd <= f64::EPSILON * mean.abs().max(1.0) {
        vec![0.0; image.data.len()]
    } else {
        image.data.iter().map(|&v| ((v as f64 - mean) / sd) as f32).collect()
    };
    Ok(Image::new(image.height, image.width, data))
}

/// Normalize every frame of a sequence in place.
pub fn normalize_sequence(seq: &CineSequence) -> Result<CineSequence> {
    let frames = seq.frames.iter().map(normalize).collect::<Result<Vec<_>>>()?;
    Ok(CineSequence { frames, ..seq.clone() })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: String,
    kind: String,
    class_map: BTreeMap<String, String>,
    sequences: Vec<SequenceEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceEntry {
    id: String,
    study_id: String,
    region: Region,
    pixel_spacing: [f64; 2],
    slice_thickness: f64,
    ed_frame: usize,
    es_frame: usize,
    frames: TensorRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<TensorRef>,
}

fn class_map() -> BTreeMap<String, String> {
    CLASS_NAMES.iter().enumerate().map(|(i, n)| (i.to_string(), n.to_string())).collect()
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn save_bundle(dir: &Path, sequences: &[CineSequence]) -> Result<()> {
    store::ensure_dir(dir)?;
    let mut entries = Vec::with_capacity(sequences.len());
    for (k, seq) in sequences.iter().enumerate() {
        seq.validate()?;
        let (h, w) = seq.frame_shape();
        let t = seq.num_frames();
        let stem = format!("{k:04}_{}", file_stem(&seq.id));
        let frames: Vec<f32> = seq.frames.iter().flat_map(|f| f.data.iter().copied()).collect();
        let frames = store::write_f32(dir, &format!("{stem}_frames.f32"), &[t, h, w], &frames)?;
        let labels = match &seq.labels {
            Some(ls) => {
                let data: Vec<f32> = ls.iter().flat_map(|l| l.data.iter().map(|&c| c as f32)).collect();
                Some(store::write_f32(dir, &format!("{stem}_labels.f32"), &[t, h, w], &data)?)
            }
            None => None,
        };
        entries.push(SequenceEntry {
            id: seq.id.clone(),
            study_id: seq.study_id.clone(),
            region: seq.region,
            pixel_spacing: [seq.pixel_spacing.0, seq.pixel_spacing.1],
            slice_thickness: seq.slice_thickness,
            ed_frame: seq.ed_frame,
            es_frame: seq.es_frame,
            frames,
            labels,
        });
    }
    let manifest = Manifest {
        version: BUNDLE_VERSION.into(),
        kind: "cine".into(),
        class_map: class_map(),
        sequences: entries,
    };
    store::write_json(&store::manifest_path(dir), &manifest)
}

pub fn load_bundle(dir: &Path) -> Result<Vec<CineSequence>> {
    let mpath = store::manifest_path(dir);
    if !mpath.is_file() {
        return Err(Error::format(&mpath, "bundle manifest not found"));
    }
    let manifest: Manifest = store::read_json(&mpath)?;
    store::check_version(&mpath, &manifest.version, BUNDLE_VERSION)?;
    if manifest.kind != "cine" {
        return Err(Error::format(&mpath, format!("kind: expected \"cine\", found {:?}", manifest.kind)));
    }
    if manifest.class_map != class_map() {
        return Err(Error::format(&mpath, "class_map: does not match {0=BG, 1=RV, 2=MYO, 3=LV}"));
    }
    let mut out = Vec::with_capacity(manifest.sequences.len());
    for (k, e) in manifest.sequences.into_iter().enumerate() {
        let field = format!("sequences[{k}]");
        if e.frames.shape.len() != 3 {
            return Err(Error::format(&mpath, format!("{field}.frames.shape: expected [T, H, W], found {:?}", e.frames.shape)));
        }
        let (t, h, w) = (e.frames.shape[0], e.frames.shape[1], e.frames.shape[2]);
        let data = store::read_f32(dir, &e.frames, &format!("{field}.frames"))?;
        let frames = data.chunks_exact(h * w).map(|c| Image::new(h, w, c.to_vec())).collect();
        let labels = match &e.labels {
            Some(r) => {
                if r.shape != e.frames.shape {
                    return Err(Error::format(
                        &mpath,
                        format!("{field}.labels.shape: {:?} does not match frames {:?}", r.shape, e.frames.shape),
                    ));
                }
                let data = store::read_f32(dir, r, &format!("{field}.labels"))?;
                let mut maps = Vec::with_capacity(t);
                for c in data.chunks_exact(h * w) {
                    let ids = c
                        .iter()
                        .map(|&v| {
                            if v.fract() == 0.0 && v >= 0.0 && (v as usize) < NUM_CLASSES {
                                Ok(v as u8)
                            } else {
                                Err(Error::format(&mpath, format!("{field}.labels: invalid class id {v}")))
                            }
                        })
                        .collect::<Result<Vec<u8>>>()?;
                    maps.push(LabelMap::new(h, w, ids));
                }
                Some(maps)
            }
            None => None,
        };
        let seq = CineSequence {
            id: e.id,
            study_id: e.study_id,
            frames,
            pixel_spacing: (e.pixel_spacing[0], e.pixel_spacing[1]),
            slice_thickness: e.slice_thickness,
            region: e.region,
            labels,
            ed_frame: e.ed_frame,
            es_frame: e.es_frame,
        };
        seq.validate().map_err(|err| Error::format(&mpath, format!("{field}: {err}")))?;
        out.push(seq);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: usize) -> CineSequence {
        CineSequence {
            id: "s0".into(),
            study_id: "study0".into(),
            frames: (0..t).map(|k| Image::from_fn(4, 5, |i, j| (k * 100 + i * 5 + j) as f32 * 0.25)).collect(),
            pixel_spacing: (1.5, 1.25),
            slice_thickness: 8.0,
            region: Region::Base,
            labels: Some((0..t).map(|k| LabelMap::new(4, 5, (0..20).map(|p| ((p + k) % 4) as u8).collect())).collect()),
            ed_frame: 0,
            es_frame: t / 2,
        }
    }

    #[test]
    fn frame_pair_wraps_cycle() {
        let s = seq(12);
        assert_eq!(frame_pair(&s, 10, 4).unwrap().target_index, 2);
        assert_eq!(frame_pair(&s, 0, 4).unwrap().target_index, 4);
        assert_eq!(frame_pair(&s, 5, 12).unwrap().target_index, 5);
        assert!(matches!(frame_pair(&s, 0, 0), Err(Error::Config(_))));
        assert!(matches!(frame_pair(&s, 0, -3), Err(Error::Config(_))));
        assert!(frame_pair(&s, 12, 1).is_err());
    }

    #[test]
    fn normalize_cases() {
        let c = normalize(&Image::new(2, 2, vec![3.0; 4])).unwrap();
        assert_eq!(c.data, vec![0.0; 4]);
        let two = normalize(&Image::new(2, 2, vec![0.0, 2.0, 2.0, 0.0])).unwrap();
        assert_eq!(two.data, vec![-1.0, 1.0, 1.0, -1.0]);
        assert!(matches!(normalize(&Image::new(1, 2, vec![0.0, f32::NAN])), Err(Error::Data(_))));
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = seq(3);
        b.id = "s/1".into();
        b.labels = None;
        b.region = Region::Apex;
        let seqs = vec![seq(3), b];
        save_bundle(dir.path(), &seqs).unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap(), seqs);
    }

    #[test]
    fn missing_and_truncated_tensors() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &[seq(3)]).unwrap();
        let frames = dir.path().join("0000_s0_frames.f32");
        let bytes = std::fs::read(&frames).unwrap();
        std::fs::write(&frames, &bytes[..bytes.len() - 8]).unwrap();
        let msg = load_bundle(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("expected 240 bytes") && msg.contains("found 232"), "{msg}");
        std::fs::remove_file(&frames).unwrap();
        let msg = load_bundle(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("does not exist") && msg.contains("frames"), "{msg}");
    }

    #[test]
    fn rejects_unknown_version_and_fields() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &[seq(2)]).unwrap();
        let mpath = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&mpath).unwrap();
        std::fs::write(&mpath, text.replace("\"v1\"", "\"v9\"")).unwrap();
        let msg = load_bundle(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("version"), "{msg}");
        std::fs::write(&mpath, text.replace("\"study_id\"", "\"studyid\"")).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_bad_label_ids() {
        let mut s = seq(2);
        s.labels.as_mut().unwrap()[0].data[0] = 7;
        assert!(s.validate().is_err());
    }
}
