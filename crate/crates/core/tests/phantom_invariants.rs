//! Generator-level properties of the synthetic phantom.

use lotseg_core::cinedata::{Region, CLASS_RV};
use lotseg_core::phantom::{generate_phantom, AmbiguousKind, PhantomConfig};
use lotseg_core::tracknet::warp;

/// Two-sample Kolmogorov-Smirnov statistic.
fn ks_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Pixels of `mask` whose 4-neighbours are all in `mask`; boundary pixels
/// mix two tissues and belong to neither histogram.
fn interior(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    (0..h * w)
        .map(|k| {
            let (i, j) = (k / w, k % w);
            mask[k]
                && i > 0
                && j > 0
                && i + 1 < h
                && j + 1 < w
                && mask[k - 1]
                && mask[k + 1]
                && mask[k - w]
                && mask[k + w]
        })
        .collect()
}

#[test]
fn ambiguous_region_matches_rv_intensities() {
    let config = PhantomConfig { num_sequences: 240, ..Default::default() };
    let (seqs, truths) = generate_phantom(&config).unwrap();
    let (mut blob, mut rv) = (Vec::new(), Vec::new());
    for (s, tr) in seqs.iter().zip(&truths) {
        if tr.ambiguous_kind.is_none() {
            continue;
        }
        let (h, w) = s.frame_shape();
        for t in 0..s.num_frames() {
            let is_rv: Vec<bool> =
                tr.masks[t].data.iter().zip(&tr.ambiguous[t]).map(|(&c, &a)| c == CLASS_RV && !a).collect();
            let in_blob = interior(&tr.ambiguous[t], h, w);
            let in_rv = interior(&is_rv, h, w);
            for (k, &v) in s.frames[t].data.iter().enumerate() {
                if in_blob[k] {
                    blob.push(v as f64);
                } else if in_rv[k] {
                    rv.push(v as f64);
                }
            }
        }
    }
    assert!(blob.len() > 10_000 && rv.len() > 10_000);
    let d = ks_statistic(&mut blob, &mut rv);
    assert!(d < 0.05, "KS statistic {d}");
}

#[test]
fn ground_truth_flow_reproduces_next_frame() {
    let config = PhantomConfig { num_sequences: 6, ..Default::default() };
    let (seqs, truths) = generate_phantom(&config).unwrap();
    for (s, tr) in seqs.iter().zip(&truths) {
        let n = s.num_frames();
        for t in 0..n {
            let next = (t + 1) % n;
            let warped = warp(&s.frames[t], &tr.flows[t]).unwrap();
            let mask = tr.pair_incoherence(t, next);
            let (mut sum, mut count) = (0.0, 0);
            for k in 0..warped.data.len() {
                if !mask[k] {
                    sum += (warped.data[k] as f64 - s.frames[next].data[k] as f64).powi(2);
                    count += 1;
                }
            }
            let mse = sum / count as f64;
            assert!(mse < 1e-3, "{} frame {t}: mse {mse}", s.id);
        }
    }
}

#[test]
fn label_noise_flip_frequency() {
    let p = 0.3;
    let config = PhantomConfig {
        image_size: (32, 32),
        num_frames: 8,
        num_sequences: 630,
        label_noise: p,
        ..Default::default()
    };
    let (seqs, truths) = generate_phantom(&config).unwrap();
    let ambiguous: Vec<_> = truths.iter().filter(|t| t.ambiguous_kind.is_some()).collect();
    assert!(ambiguous.len() >= 200);
    let flipped = ambiguous.iter().filter(|t| t.label_flipped).count();
    let freq = flipped as f64 / ambiguous.len() as f64;
    assert!((freq - p).abs() <= 0.05, "flip frequency {freq}");
    // The written labels agree with the flip flags.
    for (s, tr) in seqs.iter().zip(&truths) {
        let Some(kind) = tr.ambiguous_kind else { continue };
        assert_eq!(s.region, Region::Base);
        let k = tr.ambiguous[0].iter().position(|&b| b).unwrap();
        let label = s.labels.as_ref().unwrap()[0].data[k];
        assert_eq!(label != kind.true_label(), tr.label_flipped);
        assert_eq!(tr.ambiguous_kind == Some(AmbiguousKind::ThroughPlane), tr.incoherence[0].iter().any(|&b| b));
    }
}
