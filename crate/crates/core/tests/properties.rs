//! Property tests against independent oracles.

use std::collections::BTreeSet;

use lotseg_core::cinedata::{Image, LabelMap, Region};
use lotseg_core::eval::{dice, region_split, wilcoxon_signed_rank_with, WilcoxonMethod};
use lotseg_core::posterior::u_b_map;
use lotseg_core::segnet::{aggregate_members, volume, ProbMap};
use lotseg_core::tracknet::{grad_reg, warp, DeformationField};
use proptest::prelude::*;

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0u8..4, h * w).prop_map(move |d| LabelMap::new(h, w, d))
}

fn set_of(m: &LabelMap, class: u8) -> BTreeSet<usize> {
    m.data.iter().enumerate().filter(|(_, &c)| c == class).map(|(i, _)| i).collect()
}

/// Two-sided p-value by enumerating all 2^n sign patterns over midranks.
fn wilcoxon_enumerated(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|x| x.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&a| {
            let below = abs.iter().filter(|&&b| b < a).count() as f64;
            let equal = abs.iter().filter(|&&b| b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = nz.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let mu = ranks.iter().sum::<f64>() / 2.0;
    let dev = (observed - mu).abs();
    let mut hits = 0u64;
    for signs in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|k| signs >> k & 1 == 1).map(|k| ranks[k]).sum();
        if (w - mu).abs() >= dev - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

fn field_strategy(h: usize, w: usize) -> impl Strategy<Value = DeformationField> {
    prop::collection::vec(-3.0f32..3.0, 2 * h * w).prop_map(move |d| DeformationField::from_interleaved(h, w, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dice_matches_set_oracle(a in mask_strategy(6, 7), b in mask_strategy(6, 7), class in 0u8..4) {
        let (sa, sb) = (set_of(&a, class), set_of(&b, class));
        let expected = if sa.is_empty() && sb.is_empty() {
            1.0
        } else {
            2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
        };
        let got = dice(&a, &b, class).unwrap();
        prop_assert!((got - expected).abs() < 1e-12);
        prop_assert_eq!(got, dice(&b, &a, class).unwrap());
        if !sa.is_empty() {
            prop_assert_eq!(dice(&a, &a, class).unwrap(), 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn wilcoxon_exact_matches_enumeration(d in prop::collection::vec((-6i32..=6).prop_filter("nonzero", |x| *x != 0), 5..=12)) {
        let d: Vec<f64> = d.into_iter().map(f64::from).collect();
        let p = wilcoxon_signed_rank_with(&d, WilcoxonMethod::Exact).unwrap();
        let oracle = wilcoxon_enumerated(&d);
        prop_assert!((p - oracle).abs() < 1e-12, "{d:?}: {p} vs {oracle}");
    }

    #[test]
    fn dice_grows_with_overlap(size_a in 1usize..20, size_b in 1usize..20, k in 0usize..20) {
        let k = k.min(size_a.min(size_b));
        prop_assume!(k < size_a.min(size_b));
        // A = [0, size_a); B shares k (then k + 1) pixels with A.
        let n = 64;
        let make = |shared: usize| {
            let mut a = vec![0u8; n];
            let mut b = vec![0u8; n];
            a[..size_a].iter_mut().for_each(|v| *v = 1);
            for i in 0..size_b {
                let idx = if i < shared { i } else { size_a + (i - shared) };
                b[idx] = 1;
            }
            (LabelMap::new(8, 8, a), LabelMap::new(8, 8, b))
        };
        let (a0, b0) = make(k);
        let (a1, b1) = make(k + 1);
        prop_assert!(dice(&a1, &b1, 1).unwrap() > dice(&a0, &b0, 1).unwrap());
    }

    #[test]
    fn region_split_partitions_slices(n in 3usize..200) {
        let r = region_split(n).unwrap();
        prop_assert_eq!(r.len(), n);
        let rank = |x: &Region| match x {
            Region::Base => 0,
            Region::Mid => 1,
            Region::Apex => 2,
            Region::Unknown => 3,
        };
        prop_assert!(r.windows(2).all(|w| rank(&w[0]) <= rank(&w[1])));
        for want in [Region::Base, Region::Mid, Region::Apex] {
            prop_assert!(r.contains(&want));
        }
    }

    #[test]
    fn u_b_is_permutation_invariant_and_scales(
        fields in prop::collection::vec(field_strategy(5, 4), 2..6),
        rot in 0usize..6,
        c in -3.0f32..3.0,
    ) {
        let base = u_b_map(&fields).unwrap();
        let mut perm = fields.clone();
        perm.rotate_left(rot % fields.len());
        perm.reverse();
        let p = u_b_map(&perm).unwrap();
        for (x, y) in base.data.iter().zip(&p.data) {
            prop_assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()));
        }
        let scaled: Vec<DeformationField> = fields.iter().map(|f| f.scaled(c)).collect();
        let s = u_b_map(&scaled).unwrap();
        for (x, y) in base.data.iter().zip(&s.data) {
            prop_assert!((c.abs() * x - y).abs() <= 1e-4 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn volume_is_additive_over_disjoint_masks(assign in prop::collection::vec(0u8..3, 48), sy in 0.5f64..2.0, sx in 0.5f64..2.0, th in 1.0f64..10.0) {
        // Class-1 pixels of `a` and `b` are disjoint by construction; `u` is their union.
        let a = LabelMap::new(6, 8, assign.iter().map(|&k| (k == 1) as u8).collect());
        let b = LabelMap::new(6, 8, assign.iter().map(|&k| (k == 2) as u8).collect());
        let u = LabelMap::new(6, 8, assign.iter().map(|&k| (k != 0) as u8).collect());
        let va = volume(&a, 1, (sy, sx), th).unwrap();
        let vb = volume(&b, 1, (sy, sx), th).unwrap();
        let vu = volume(&u, 1, (sy, sx), th).unwrap();
        let voxel = sy * sx * th / 1000.0;
        prop_assert!((vu - (a.count(1) + b.count(1)) as f64 * voxel).abs() <= 1e-12 * vu.max(1.0));
        prop_assert!((vu - (va + vb)).abs() <= 1e-12 * vu.max(1.0));
    }

    #[test]
    fn ensemble_summary_ignores_member_order(raw in prop::collection::vec(prop::collection::vec(0.01f32..1.0, 3 * 16), 2..5), rot in 1usize..5) {
        let members: Vec<ProbMap> = raw
            .iter()
            .map(|r| {
                let mut data = r.clone();
                for p in 0..16 {
                    let s: f32 = (0..3).map(|c| data[c * 16 + p]).sum();
                    (0..3).for_each(|c| data[c * 16 + p] /= s);
                }
                ProbMap { height: 4, width: 4, num_classes: 3, data }
            })
            .collect();
        let mut perm = members.clone();
        perm.rotate_left(rot % members.len());
        let a = aggregate_members(&members, (1.25, 1.25), 8.0).unwrap();
        let b = aggregate_members(&perm, (1.25, 1.25), 8.0).unwrap();
        for (x, y) in a.mean_prob.data.iter().zip(&b.mean_prob.data) {
            prop_assert!((x - y).abs() <= 1e-7);
        }
        for cl in 0..3 {
            prop_assert!((a.sigma_v_ml[cl] - b.sigma_v_ml[cl]).abs() <= 1e-12);
            // Independent SD over the reported member volumes.
            let v: Vec<f64> = a.volumes_ml.iter().map(|m| m[cl]).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt();
            prop_assert!((a.sigma_v_ml[cl] - sd).abs() <= 1e-9 * (sd + mean.abs()));
        }
    }

    #[test]
    fn warp_of_zero_field_is_identity(data in prop::collection::vec(-10.0f32..10.0, 30)) {
        let img = Image::new(5, 6, data);
        prop_assert_eq!(warp(&img, &DeformationField::zeros(5, 6)).unwrap(), img);
    }

    #[test]
    fn grad_reg_is_nonnegative_and_zero_only_when_constant(f in field_strategy(4, 5), dy in -2.0f32..2.0, dx in -2.0f32..2.0) {
        let r = grad_reg(&f);
        prop_assert!(r > 0.0);
        prop_assert_eq!(grad_reg(&DeformationField::from_fn(4, 5, |_, _| (dy, dx))), 0.0);
    }
}
