//! Mask-classification supervision under fixed query-to-class matching.

use std::sync::Arc;

use super::{soft_bce_with_logits, LossWeights, DICE_SMOOTH};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scenegen::{LabelMap, IGNORE};
use crate::segnet::DecoderTrace;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Dense per-class targets derived from a label map.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTargets<T> {
    /// `(K, n)` binary masks, zero on ignored pixels.
    pub onehot: Tensor<T>,
    /// `(K, n)` validity weights, identical rows; `None` when every pixel is valid.
    pub valid: Option<Tensor<T>>,
    pub n_valid: usize,
    /// Whether class `k` occurs on any valid pixel.
    pub present: Vec<bool>,
}

impl<T: Scalar> LabelTargets<T> {
    pub fn new(label: &LabelMap, k: usize) -> Result<Self> {
        label.validate(k)?;
        let n = label.len();
        let mut onehot = Tensor::zeros(k, n);
        let mut present = vec![false; k];
        let mut n_valid = 0;
        for (i, &v) in label.data.iter().enumerate() {
            if v != IGNORE {
                onehot.set(v as usize, i, T::one());
                present[v as usize] = true;
                n_valid += 1;
            }
        }
        let valid = (n_valid < n).then(|| {
            Tensor::from_fn(k, n, |_, i| if label.data[i] == IGNORE { T::zero() } else { T::one() })
        });
        Ok(LabelTargets {
            onehot,
            valid,
            n_valid,
            present,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.onehot.rows()
    }
}

/// Mean over queries of `1 - (2I + s)/(P + G + s)` on valid pixels, where
/// `probs` are mask probabilities `(K, n)`.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, targets: &LabelTargets<T>) -> Var {
    let smooth = T::of(DICE_SMOOTH);
    let p = match &targets.valid {
        Some(v) => {
            let v = tape.constant(v.clone());
            tape.mul(probs, v)
        }
        None => probs,
    };
    let y = tape.constant(targets.onehot.clone());
    let py = tape.mul(p, y);
    let inter = tape.sum_rows(py);
    let num = tape.scale(inter, T::of(2.0));
    let num = tape.add_scalar(num, smooth);
    let ps = tape.sum_rows(p);
    let g = Tensor::from_fn(targets.num_classes(), 1, |k, _| targets.onehot.row(k).iter().copied().sum::<T>() + smooth);
    let g = tape.constant(g);
    let den = tape.add(ps, g);
    let ratio = tape.div(num, den);
    let loss = tape.neg(ratio);
    let loss = tape.add_scalar(loss, T::one());
    tape.mean(loss)
}

/// `L_cls + λ_bce·L_bce + λ_dice·L_dice` for one block's predictions.
pub fn block_segmentation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    class_logits: Var,
    mask_logits: Var,
    targets: &LabelTargets<T>,
    w: &LossWeights,
) -> Var {
    let k = targets.num_classes();
    let mut terms = Vec::with_capacity(3);

    let present: Vec<usize> = (0..k).filter(|&c| targets.present[c]).collect();
    if !present.is_empty() {
        let ls = tape.log_softmax_rows(class_logits);
        let idx: Vec<usize> = present.iter().map(|&c| c * k + c).collect();
        let picked = tape.gather(ls, Arc::new(idx), present.len(), 1);
        let m = tape.mean(picked);
        terms.push(tape.neg(m));
    }

    if targets.n_valid > 0 {
        let y = tape.constant(targets.onehot.clone());
        let e = soft_bce_with_logits(tape, mask_logits, y);
        let e = match &targets.valid {
            Some(v) => {
                let v = tape.constant(v.clone());
                tape.mul(e, v)
            }
            None => e,
        };
        let s = tape.sum(e);
        terms.push(tape.scale(s, T::of(w.bce / (k * targets.n_valid) as f64)));

        let probs = tape.sigmoid(mask_logits);
        let d = dice_loss(tape, probs, targets);
        terms.push(tape.scale(d, T::of(w.dice)));
    }

    match terms.as_slice() {
        [] => tape.constant(Tensor::scalar(T::zero())),
        _ => {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t);
            }
            acc
        }
    }
}

/// Segmentation loss summed over every decoder block.
pub fn segmentation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    trace: &DecoderTrace,
    targets: &LabelTargets<T>,
    w: &LossWeights,
) -> Result<Var> {
    let k = targets.num_classes();
    if trace.blocks.is_empty() {
        return Err(Error::invalid("trace", "no decoder blocks"));
    }
    let mut per_block = Vec::with_capacity(trace.blocks.len());
    for b in &trace.blocks {
        let (cs, ms) = (tape.value(b.class_logits).shape(), tape.value(b.mask_logits).shape());
        if cs != (k, k) || ms != (k, targets.onehot.cols()) {
            return Err(Error::shape(
                "segmentation_loss",
                format!("class {cs:?}, mask {ms:?} for K={k}, {} pixels", targets.onehot.cols()),
            ));
        }
        per_block.push(block_segmentation_loss(tape, b.class_logits, b.mask_logits, targets, w));
    }
    let mut total = per_block[0];
    for &b in &per_block[1..] {
        total = tape.add(total, b);
    }
    Ok(total)
}
