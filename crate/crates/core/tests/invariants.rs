mod common;

use common::*;
use dgseg::losses::{class_consistency, contrastive_loss, partition_batch, SampleKind};
use dgseg::perturb::{apply_perturbation, sample_perturbation, PerturbRanges};
use dgseg::trainer::{fit_on, TrainState};
use dgseg::Tape;
use proptest::prelude::*;
use SampleKind::{Augmented as A, Original as O};

#[test]
fn frozen_parameters_never_move() {
    let cfg = tiny_train_config(3, 2);
    let before = TrainState::<f64>::new(cfg.clone()).unwrap();
    let data = source_samples::<f64>(&tiny_family(3), 4);
    let after = fit_on(cfg, &data).unwrap().state;
    assert_eq!(before.model.frozen.hash(), after.model.frozen.hash());
    assert_ne!(before.model.train.tensors(), after.model.train.tensors());
}

#[test]
fn perturbation_keeps_labels_bit_identical() {
    let ranges = PerturbRanges::default();
    for (i, x) in source_samples::<f32>(&tiny_family(1), 6).iter().enumerate() {
        let y = apply_perturbation(x, &sample_perturbation(i as u64, &ranges).unwrap());
        assert_eq!(y.label, x.label);
        assert_ne!(y.image, x.image);
    }
}

/// Every anchor of every batch size, checked against the rule written out
/// directly.
#[test]
fn partition_rules_enumerated() {
    for b in 2..=4 {
        let orders: [Vec<SampleKind>; 2] = [
            (0..2 * b).map(|i| if i < b { O } else { A }).collect(),
            (0..2 * b).map(|i| if i % 2 == 0 { O } else { A }).collect(),
        ];
        for kinds in orders {
            let p = partition_batch(&kinds, b).unwrap();
            for i in 0..2 * b {
                let (want_pos, want_neg): (Vec<usize>, Vec<usize>) = match kinds[i] {
                    O => (
                        (0..2 * b).filter(|&j| j != i && kinds[j] == O).collect(),
                        (0..2 * b).filter(|&j| kinds[j] == A).collect(),
                    ),
                    A => (vec![i], (0..2 * b).filter(|&j| j != i).collect()),
                };
                assert_eq!(p.positives[i], want_pos, "B={b} anchor {i}");
                assert_eq!(p.negatives[i], want_neg, "B={b} anchor {i}");
                assert_eq!(p.positives[i].len(), if kinds[i] == O { b - 1 } else { 1 });
                assert_eq!(p.negatives[i].len(), if kinds[i] == O { b } else { 2 * b - 1 });
            }
        }
    }
    assert!(partition_batch(&[O, A], 1).is_err());
    assert!(partition_batch(&[O, O, A], 2).is_err());
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, cols), rows)
}

proptest! {
    #[test]
    fn jsd_is_bounded(a in matrix(3, 4), b in matrix(3, 4)) {
        let mut t = Tape::new();
        let (x, y) = (t.constant(to_tensor(&a)), t.constant(to_tensor(&b)));
        let v = class_consistency(&mut t, x, y).unwrap();
        let j = t.value(v).item();
        prop_assert!((-1e-12..=std::f64::consts::LN_2 + 1e-12).contains(&j), "{}", j);
    }

    #[test]
    fn contrastive_ignores_row_scale(
        pi in matrix(6, 4).prop_filter("nonzero rows", |m| m.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3))),
        scales in prop::collection::vec(0.01f64..100.0, 6),
    ) {
        let b = 3;
        let kinds: Vec<_> = (0..6).map(|i| if i < b { O } else { A }).collect();
        let part = partition_batch(&kinds, b).unwrap();
        let loss = |m: &Vec<Vec<f64>>| {
            let mut t = Tape::new();
            let x = t.constant(to_tensor(m));
            let v = contrastive_loss(&mut t, x, &part, 0.5).unwrap();
            t.value(v).item()
        };
        let scaled: Vec<Vec<f64>> = pi.iter().zip(&scales).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
        prop_assert!((loss(&pi) - loss(&scaled)).abs() < 1e-10);
    }
}
