//! Segmentation network behaviour on phantom frames.

use lotseg_core::cinedata::{normalize_sequence, CLASS_RV};
use lotseg_core::eval::dice;
use lotseg_core::phantom::{generate_phantom, PhantomConfig};
use lotseg_core::segnet::{seg_forward_batch, train_seg, DualEncoderConfig, SegHyper, SegSample};
use lotseg_core::cinedata::Image;

#[test]
fn overfits_two_frames() {
    let config = PhantomConfig { num_sequences: 2, ..Default::default() };
    let (seqs, _) = generate_phantom(&config).unwrap();
    let samples: Vec<SegSample> = seqs
        .iter()
        .map(|s| {
            let s = normalize_sequence(s).unwrap();
            let (h, w) = s.frame_shape();
            SegSample {
                image: s.frames[0].clone(),
                u_b: Some(Image::zeros(h, w)),
                u_s: Some(Image::zeros(h, w)),
                labels: Some(s.labels.as_ref().unwrap()[0].clone()),
            }
        })
        .collect();
    let hyper = SegHyper { epochs: 200, batch_size: 2, ..Default::default() };
    let (weights, curve) = train_seg(&samples, DualEncoderConfig::default(), &hyper).unwrap();
    assert!(curve.epoch_loss.last().unwrap() < &curve.epoch_loss[0]);
    let refs: Vec<&SegSample> = samples.iter().collect();
    for (p, s) in seg_forward_batch(&weights, &refs, false).unwrap().iter().zip(&samples) {
        let d = dice(&p.argmax(), s.labels.as_ref().unwrap(), CLASS_RV).unwrap();
        assert!(d >= 0.95, "training RV Dice {d}");
    }
}
