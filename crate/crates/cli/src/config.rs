//! Run configuration: one TOML file, every key optional, unknown keys
//! rejected. `LOTSEG_<SECTION>__<KEY>` environment variables (and
//! `LOTSEG_SEED`) override file values before validation.

use std::collections::BTreeMap;
use std::path::Path;

use lotseg_core::phantom::PhantomConfig;
use lotseg_core::posterior::SamplerConfig;
use lotseg_core::segnet::{DualEncoderConfig, SegHyper};
use lotseg_core::tracknet::{TrackerArch, TrackerHyper};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ENV_PREFIX: &str = "LOTSEG_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub image_size: [usize; 2],
    pub num_frames: usize,
    pub num_sequences: usize,
    pub motion_amplitude: f64,
    pub incoherence_flag: bool,
    pub label_noise: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let d = PhantomConfig::default();
        PhantomSection {
            image_size: [d.image_size.0, d.image_size.1],
            num_frames: d.num_frames,
            num_sequences: d.num_sequences,
            motion_amplitude: d.motion_amplitude,
            incoherence_flag: d.incoherence_flag,
            label_noise: d.label_noise,
            noise_sigma: d.noise_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerSection {
    pub levels: usize,
    pub base_width: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Frame offsets used to build training pairs.
    pub train_delta_t: Vec<usize>,
}

impl Default for TrackerSection {
    fn default() -> Self {
        let a = TrackerArch::default();
        let h = TrackerHyper::default();
        TrackerSection {
            levels: a.levels,
            base_width: a.base_width,
            lambda: h.lambda,
            learning_rate: h.learning_rate,
            epochs: h.epochs,
            batch_size: h.batch_size,
            train_delta_t: vec![1, 2, 4, 6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub step_size: f64,
    pub friction: f64,
    pub noise_scale: f64,
    pub burn_in: usize,
    pub thinning: usize,
    pub num_samples: usize,
    pub batch_size: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection::from_core(&SamplerConfig::default())
    }
}

impl SamplerSection {
    fn from_core(d: &SamplerConfig) -> Self {
        SamplerSection {
            step_size: d.step_size,
            friction: d.friction,
            noise_scale: d.noise_scale,
            burn_in: d.burn_in,
            thinning: d.thinning,
            num_samples: d.num_samples,
            batch_size: d.batch_size,
        }
    }

    pub fn to_core(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            step_size: self.step_size,
            friction: self.friction,
            noise_scale: self.noise_scale,
            burn_in: self.burn_in,
            thinning: self.thinning,
            num_samples: self.num_samples,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintySection {
    pub delta_t: usize,
}

impl Default for UncertaintySection {
    fn default() -> Self {
        UncertaintySection { delta_t: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationSection {
    pub levels: usize,
    pub base_width: usize,
    pub fusion_kernel: usize,
    pub phi_skips: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dice_smooth: f64,
}

impl Default for SegmentationSection {
    fn default() -> Self {
        let c = DualEncoderConfig::default();
        let h = SegHyper::default();
        SegmentationSection {
            levels: c.levels,
            base_width: c.base_width,
            fusion_kernel: c.fusion_kernel,
            phi_skips: c.phi_skips,
            learning_rate: h.learning_rate,
            epochs: h.epochs,
            batch_size: h.batch_size,
            dice_smooth: h.dice_smooth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train_fraction: 0.67 }
    }
}

/// Whole-pipeline configuration. A single master seed feeds every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub phantom: PhantomSection,
    pub split: SplitSection,
    pub tracker: TrackerSection,
    pub sampler: SamplerSection,
    pub uncertainty: UncertaintySection,
    pub segmentation: SegmentationSection,
    pub seg_sampler: SamplerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            phantom: PhantomSection { num_sequences: 48, ..PhantomSection::default() },
            split: SplitSection::default(),
            tracker: TrackerSection { epochs: 4, ..TrackerSection::default() },
            // Minibatch gradient noise does most of the exploring at this step size.
            sampler: SamplerSection { step_size: 3e-2, noise_scale: 3e-5, ..SamplerSection::default() },
            uncertainty: UncertaintySection::default(),
            segmentation: SegmentationSection {
                base_width: 8,
                learning_rate: 3e-3,
                epochs: 6,
                ..SegmentationSection::default()
            },
            seg_sampler: SamplerSection {
                step_size: 1e-2,
                noise_scale: 1e-4,
                burn_in: 50,
                thinning: 10,
                ..SamplerSection::default()
            },
        }
    }
}

/// Stage offsets added to the master seed.
const SEED_PHANTOM: u64 = 0;
const SEED_SPLIT: u64 = 1;
const SEED_TRACKER: u64 = 2;
const SEED_SAMPLER: u64 = 3;
const SEED_SEG: u64 = 4;
const SEED_SEG_SAMPLER: u64 = 5;

impl RunConfig {
    pub fn phantom_config(&self) -> PhantomConfig {
        let p = &self.phantom;
        PhantomConfig {
            image_size: (p.image_size[0], p.image_size[1]),
            num_frames: p.num_frames,
            num_sequences: p.num_sequences,
            motion_amplitude: p.motion_amplitude,
            incoherence_flag: p.incoherence_flag,
            label_noise: p.label_noise,
            noise_sigma: p.noise_sigma,
            seed: self.seed.wrapping_add(SEED_PHANTOM),
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(SEED_SPLIT)
    }

    pub fn tracker_arch(&self) -> TrackerArch {
        TrackerArch { levels: self.tracker.levels, base_width: self.tracker.base_width }
    }

    pub fn tracker_hyper(&self) -> TrackerHyper {
        let t = &self.tracker;
        TrackerHyper {
            lambda: t.lambda,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed.wrapping_add(SEED_TRACKER),
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        self.sampler.to_core(self.seed.wrapping_add(SEED_SAMPLER))
    }

    pub fn seg_config(&self, with_uncertainty: bool) -> DualEncoderConfig {
        let s = &self.segmentation;
        DualEncoderConfig {
            levels: s.levels,
            base_width: s.base_width,
            num_classes: lotseg_core::cinedata::NUM_CLASSES,
            fusion_kernel: s.fusion_kernel,
            uncertainty_channels: if with_uncertainty { 2 } else { 0 },
            phi_skips: with_uncertainty && s.phi_skips,
        }
    }

    pub fn seg_hyper(&self) -> SegHyper {
        let s = &self.segmentation;
        SegHyper {
            learning_rate: s.learning_rate,
            epochs: s.epochs,
            batch_size: s.batch_size,
            seed: self.seed.wrapping_add(SEED_SEG),
            dice_smooth: s.dice_smooth,
        }
    }

    pub fn seg_sampler_config(&self) -> SamplerConfig {
        self.seg_sampler.to_core(self.seed.wrapping_add(SEED_SEG_SAMPLER))
    }

    /// Check every section before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: lotseg_core::Error| CliError::Validation(e.to_string());
        self.phantom_config().validate().map_err(wrap)?;
        let f = self.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Validation(format!("split.train_fraction must lie in (0, 1), got {f}")));
        }
        self.tracker_arch().validate().map_err(wrap)?;
        self.tracker_hyper().validate().map_err(wrap)?;
        let (h, w) = self.phantom_config().image_size;
        self.tracker_arch().check_input(h, w).map_err(wrap)?;
        if self.tracker.train_delta_t.is_empty() {
            return Err(CliError::Validation("tracker.train_delta_t must not be empty".into()));
        }
        let frames = self.phantom.num_frames;
        for &dt in self.tracker.train_delta_t.iter().chain([&self.uncertainty.delta_t]) {
            if dt == 0 || dt >= frames {
                return Err(CliError::Validation(format!("frame offset {dt} must lie in [1, {frames})")));
            }
        }
        self.sampler_config().validate().map_err(wrap)?;
        self.seg_config(true).validate().map_err(wrap)?;
        self.seg_config(true).check_input(h, w).map_err(wrap)?;
        self.seg_hyper().validate().map_err(wrap)?;
        self.seg_sampler_config().validate().map_err(wrap)?;
        Ok(())
    }

    /// Canonical JSON used for hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Read the file (if any), apply environment overrides, deserialize, validate.
pub fn load_config(path: Option<&Path>, env: &BTreeMap<String, String>) -> Result<RunConfig, CliError> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    apply_env_overrides(&mut value, env)?;
    let config: RunConfig = toml::Value::Table(value)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Validation(format!("config: {}", e.message())))?;
    config.validate()?;
    Ok(config)
}

/// `LOTSEG_SEED=3` sets `seed`; `LOTSEG_PHANTOM__NUM_FRAMES=16` sets
/// `phantom.num_frames`. Values are parsed as TOML literals, falling back to
/// plain strings.
pub fn apply_env_overrides(table: &mut toml::Table, env: &BTreeMap<String, String>) -> Result<(), CliError> {
    for (key, raw) in env {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
        let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(CliError::Validation(format!("malformed override variable {key}")));
        }
        let value = parse_literal(raw);
        let mut node = &mut *table;
        for section in &path[..path.len() - 1] {
            let entry = node.entry(section.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| CliError::Validation(format!("{key}: {section} is not a section")))?;
        }
        node.insert(path[path.len() - 1].clone(), value);
    }
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// `LOTSEG_*` variables from the process environment.
pub fn process_env() -> BTreeMap<String, String> {
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(load_config(None, &env(&[])).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_apply_by_path() {
        let c = load_config(None, &env(&[("LOTSEG_SEED", "7"), ("LOTSEG_PHANTOM__NUM_FRAMES", "16")])).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.phantom.num_frames, 16);
        assert_eq!(c.phantom_config().seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[phantom]\nnum_frame = 3\n").unwrap();
        assert!(matches!(load_config(Some(&p), &env(&[])), Err(CliError::Validation(_))));
        assert!(matches!(load_config(None, &env(&[("LOTSEG_TRACKER__DEPTH", "3")])), Err(CliError::Validation(_))));
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(load_config(None, &env(&[("LOTSEG_PHANTOM__NUM_FRAMES", "3")])).is_err());
        assert!(load_config(None, &env(&[("LOTSEG_SPLIT__TRAIN_FRACTION", "1.0")])).is_err());
        assert!(load_config(None, &env(&[("LOTSEG_SAMPLER__NUM_SAMPLES", "1")])).is_err());
    }
}
