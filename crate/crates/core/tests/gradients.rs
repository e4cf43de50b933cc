mod common;

use common::*;
use dgseg::losses::{
    block_segmentation_loss, class_consistency, contrastive_between, contrastive_loss, dice_loss, mask_consistency,
    partition_batch, reg_language, reg_vision, reg_vision_language, LabelTargets, LossWeights, SampleKind,
};
use dgseg::scenegen::IGNORE;
use dgseg::Tensor;
use rand::Rng;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 5;

fn kinds(b: usize) -> Vec<SampleKind> {
    (0..2 * b)
        .map(|i| if i < b { SampleKind::Original } else { SampleKind::Augmented })
        .collect()
}

fn assert_small(err: f64, what: &str, seed: u64) {
    assert!(err < TOL, "{what} seed {seed}: max relative error {err:e}");
}

#[test]
fn contrastive_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let b = r.random_range(2..=4);
        let part = partition_batch(&kinds(b), b).unwrap();
        let pi = to_tensor(&rand_mat(&mut r, 2 * b, 5, 1.0));
        let other = to_tensor(&rand_mat(&mut r, 2 * b, 5, 1.0));
        assert_small(grad_error(&pi, |t, x| contrastive_loss(t, x, &part, 0.3).unwrap()), "contrastive", seed);
        let e = grad_error(&pi, |t, x| {
            let c = t.constant(other.clone());
            contrastive_between(t, x, c, &part, 0.3).unwrap()
        });
        assert_small(e, "contrastive anchors", seed);
        let e = grad_error(&other, |t, c| {
            let a = t.constant(pi.clone());
            contrastive_between(t, a, c, &part, 0.3).unwrap()
        });
        assert_small(e, "contrastive candidates", seed);
    }
}

#[test]
fn consistency_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(10 + seed);
        let a = to_tensor(&rand_mat(&mut r, 3, 4, 3.0));
        let b = to_tensor(&rand_mat(&mut r, 3, 4, 3.0));
        let e = grad_error(&a, |t, x| {
            let y = t.constant(b.clone());
            class_consistency(t, x, y).unwrap()
        });
        assert_small(e, "class consistency", seed);
        let ma = to_tensor(&rand_mat(&mut r, 3, 16, 4.0));
        let mb = to_tensor(&rand_mat(&mut r, 3, 16, 4.0));
        let e = grad_error(&ma, |t, x| {
            let y = t.constant(mb.clone());
            mask_consistency(t, x, y).unwrap()
        });
        assert_small(e, "mask consistency", seed);
    }
}

#[test]
fn segmentation_gradients() {
    let w = LossWeights::default();
    for seed in 0..SEEDS {
        let mut r = rng(20 + seed);
        let k = 3;
        let lab: Vec<u8> = (0..16)
            .map(|_| if r.random_bool(0.1) { IGNORE } else { r.random_range(0..k) as u8 })
            .collect();
        let targets = LabelTargets::<f64>::new(&label(4, 4, &lab), k).unwrap();
        let probs = Tensor::from_fn(k, 16, |_, _| r.random_range(0.05..0.95));
        assert_small(grad_error(&probs, |t, p| dice_loss(t, p, &targets)), "dice", seed);

        let cls = to_tensor(&rand_mat(&mut r, k, k, 2.0));
        let masks = to_tensor(&rand_mat(&mut r, k, 16, 3.0));
        let e = grad_error(&cls, |t, c| {
            let m = t.constant(masks.clone());
            block_segmentation_loss(t, c, m, &targets, &w)
        });
        assert_small(e, "segmentation wrt class logits", seed);
        let e = grad_error(&masks, |t, m| {
            let c = t.constant(cls.clone());
            block_segmentation_loss(t, c, m, &targets, &w)
        });
        assert_small(e, "segmentation wrt mask logits", seed);
    }
}

#[test]
fn regularizer_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(30 + seed);
        let t0 = to_tensor(&rand_mat(&mut r, 3, 6, 1.0));
        let t1 = to_tensor(&rand_mat(&mut r, 3, 6, 1.0));
        let e = grad_error(&t1, |t, x| {
            let y = t.constant(t0.clone());
            reg_language(t, x, y).unwrap()
        });
        assert_small(e, "reg_language", seed);

        let v = to_tensor(&rand_mat(&mut r, 8, 6, 1.0));
        let labels: Vec<Option<usize>> = (0..8).map(|_| r.random_bool(0.8).then(|| r.random_range(0..3))).collect();
        let e = grad_error(&v, |t, x| {
            let y = t.constant(t1.clone());
            reg_vision_language(t, x, y, &labels, 0.2).unwrap()
        });
        assert_small(e, "reg_vision_language wrt patches", seed);
        let e = grad_error(&t1, |t, y| {
            let x = t.constant(v.clone());
            reg_vision_language(t, x, y, &labels, 0.2).unwrap()
        });
        assert_small(e, "reg_vision_language wrt text", seed);

        let c = to_tensor(&rand_mat(&mut r, 1, 6, 1.0));
        let c0 = to_tensor(&rand_mat(&mut r, 1, 6, 1.0));
        let e = grad_error(&c, |t, x| {
            let y = t.constant(c0.clone());
            reg_vision(t, x, y).unwrap()
        });
        assert_small(e, "reg_vision", seed);
    }
}

#[test]
fn end_to_end_total_loss_gradients() {
    for seed in 0..SEEDS {
        let (err, at) = end_to_end_gradient_error(seed, 1 + (seed as usize % 2));
        assert!(err < TOL, "seed {seed}: {at} relative error {err:e}");
    }
}
