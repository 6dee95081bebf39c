//! Glue between stages: splits, pair and sample construction, method runs.

use std::collections::BTreeMap;

use lotseg_core::cinedata::{frame_pair, normalize_sequence, CineSequence, FramePair, CLASS_RV};
use lotseg_core::eval::{evaluate_run, EvalCase, MethodPredictions, Phase, RegionalReport, Spacing};
use lotseg_core::phantom::split_phantom;
use lotseg_core::posterior::{frame_pair_id, SequenceUncertainty};
use lotseg_core::segnet::{
    build_dual_encoder, ensemble_predict_batch, sghmc_sample_seg, train_seg_from, DualEncoderConfig, FrameResult,
    SegHyper, SegSample, SegWeights,
};
use lotseg_core::posterior::SamplerConfig;
use lotseg_core::tracknet::TrainingCurve;
use lotseg_core::{Error, Result};

pub const METHOD_BASELINE: &str = "baseline";
pub const METHOD_DUAL: &str = "dual";
pub const METHODS: [&str; 2] = [METHOD_BASELINE, METHOD_DUAL];

pub fn normalize_all(seqs: &[CineSequence]) -> Result<Vec<CineSequence>> {
    seqs.iter().map(normalize_sequence).collect()
}

/// Train/test sequences, split by study.
pub fn split(seqs: &[CineSequence], train_fraction: f64, seed: u64) -> Result<(Vec<CineSequence>, Vec<CineSequence>)> {
    split_phantom(seqs, |s| s.study_id.clone(), (train_fraction, 1.0 - train_fraction), seed)
}

/// Every `(t, t + dt)` pair for each offset.
pub fn training_pairs(seqs: &[CineSequence], offsets: &[usize]) -> Result<Vec<FramePair>> {
    let mut out = Vec::new();
    for s in seqs {
        for t in 0..s.num_frames() {
            for &dt in offsets {
                out.push(frame_pair(s, t, dt as isize)?);
            }
        }
    }
    Ok(out)
}

/// Frame samples of `seqs` with their maps; labels attached when present.
pub fn seg_samples(
    seqs: &[CineSequence],
    maps: &[SequenceUncertainty],
    frames: Option<&dyn Fn(&CineSequence) -> Vec<usize>>,
) -> Result<Vec<(String, usize, SegSample)>> {
    let by_id: BTreeMap<&str, &SequenceUncertainty> = maps.iter().map(|m| (m.seq_id.as_str(), m)).collect();
    let mut out = Vec::new();
    for s in seqs {
        let m = by_id
            .get(s.id.as_str())
            .ok_or_else(|| Error::Data(format!("no uncertainty maps for sequence {}", s.id)))?;
        if m.maps.len() != s.num_frames() {
            return Err(Error::Data(format!("{}: {} map frames for {} image frames", s.id, m.maps.len(), s.num_frames())));
        }
        let ts = frames.map(|f| f(s)).unwrap_or_else(|| (0..s.num_frames()).collect());
        for t in ts {
            let maps_t = &m.maps[t];
            let want = frame_pair_id(&s.id, t, s.num_frames(), m.delta_t);
            if maps_t.pair_id != want {
                return Err(Error::Data(format!("{}: frame {t} has maps for {}, expected {want}", s.id, maps_t.pair_id)));
            }
            out.push((
                s.id.clone(),
                t,
                SegSample {
                    image: s.frames[t].clone(),
                    u_b: Some(maps_t.u_b.clone()),
                    u_s: Some(maps_t.u_s.clone()),
                    labels: s.labels.as_ref().map(|l| l[t].clone()),
                },
            ));
        }
    }
    Ok(out)
}

/// Adam to a mode, then SGHMC around it.
pub fn train_seg_ensemble(
    dataset: &[SegSample],
    config: DualEncoderConfig,
    hyper: &SegHyper,
    sampler: &SamplerConfig,
) -> Result<(Vec<SegWeights>, TrainingCurve)> {
    let init = build_dual_encoder(config, hyper.seed)?;
    let (mode, curve) = train_seg_from(init, dataset, hyper)?;
    let members = sghmc_sample_seg(&mode, dataset, hyper.dice_smooth, sampler)?;
    Ok((members, curve))
}

pub fn frame_id(seq_id: &str, t: usize) -> String {
    format!("{seq_id}:t{t}")
}

pub fn parse_frame_id(id: &str) -> Option<(&str, usize)> {
    let (seq, t) = id.rsplit_once(":t")?;
    Some((seq, t.parse().ok()?))
}

/// Ensemble predictions for every frame of `samples`, grouped by spacing.
pub fn predict_frames(
    ensemble: &[SegWeights],
    samples: &[(String, usize, SegSample)],
    seqs: &[CineSequence],
) -> Result<Vec<FrameResult>> {
    let spacing: BTreeMap<&str, (f64, f64, f64)> = seqs
        .iter()
        .map(|s| (s.id.as_str(), (s.pixel_spacing.0, s.pixel_spacing.1, s.slice_thickness)))
        .collect();
    let mut out = Vec::with_capacity(samples.len());
    for (seq_id, t, sample) in samples {
        let (sy, sx, th) = *spacing
            .get(seq_id.as_str())
            .ok_or_else(|| Error::Data(format!("no spacing for {seq_id}")))?;
        let r = ensemble_predict_batch(ensemble, &[sample], (sy, sx), th)?.remove(0);
        out.push(FrameResult { frame_id: frame_id(seq_id, *t), result: r });
    }
    Ok(out)
}

/// RV report over the ED and ES frames of `gt` for each method's results.
pub fn rv_report(gt: &[CineSequence], methods: &[(String, Vec<FrameResult>)]) -> Result<RegionalReport> {
    let mut truth = Vec::new();
    let mut spacings = BTreeMap::new();
    let mut wanted: BTreeMap<(String, usize), Phase> = BTreeMap::new();
    for s in gt {
        let labels = s.labels.as_ref().ok_or_else(|| Error::Data(format!("{}: no ground-truth labels", s.id)))?;
        spacings.insert(s.id.clone(), Spacing { pixel_spacing: s.pixel_spacing, slice_thickness: s.slice_thickness });
        for (phase, t) in [(Phase::ED, s.ed_frame), (Phase::ES, s.es_frame)] {
            truth.push(EvalCase {
                seq_id: s.id.clone(),
                study_id: s.study_id.clone(),
                region: s.region,
                phase,
                mask: labels[t].clone(),
                sigma_v_ml: None,
            });
            wanted.insert((s.id.clone(), t), phase);
        }
    }
    let study: BTreeMap<&str, (&str, lotseg_core::cinedata::Region)> =
        gt.iter().map(|s| (s.id.as_str(), (s.study_id.as_str(), s.region))).collect();
    let mut preds = Vec::new();
    for (method, results) in methods {
        let mut cases = Vec::new();
        for r in results {
            let (seq, t) = parse_frame_id(&r.frame_id)
                .ok_or_else(|| Error::Data(format!("malformed frame id {}", r.frame_id)))?;
            let Some(&phase) = wanted.get(&(seq.to_string(), t)) else { continue };
            let (study_id, region) = study[seq];
            cases.push(EvalCase {
                seq_id: seq.to_string(),
                study_id: study_id.to_string(),
                region,
                phase,
                mask: r.result.mean_mask(),
                sigma_v_ml: Some(r.result.sigma_v_ml[CLASS_RV as usize]),
            });
        }
        preds.push(MethodPredictions { method: method.clone(), cases });
    }
    evaluate_run(&preds, &truth, &spacings, CLASS_RV)
}
