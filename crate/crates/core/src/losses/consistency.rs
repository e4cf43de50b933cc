//! Per-block agreement between the predictions for an image and its
//! perturbed copy.

use super::{LossWeights, LOG_EPS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::segnet::DecoderTrace;
use crate::tape::{Tape, Unary, Var};

fn same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape()),
        ));
    }
    Ok(())
}

/// Elementwise `-[y·ln σ(x) + (1-y)·ln σ(-x)]` with both logarithms floored
/// at `ln LOG_EPS`; `y` is a probability.
pub fn soft_bce_with_logits<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: Var) -> Var {
    tape.bce_with_logits(logits, target, T::of(LOG_EPS.ln()))
}

/// Symmetric mean BCE between the sigmoid masks of two logit maps.
pub fn mask_consistency<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "mask_consistency")?;
    let pa = tape.sigmoid(a);
    let pb = tape.sigmoid(b);
    let ab = soft_bce_with_logits(tape, a, pb);
    let ba = soft_bce_with_logits(tape, b, pa);
    let s = tape.add(ab, ba);
    let m = tape.mean(s);
    Ok(tape.scale(m, T::half()))
}

/// Mean over rows of the Jensen-Shannon divergence (nats) between the row
/// softmaxes of two logit matrices.
pub fn class_consistency<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "class_consistency")?;
    let eps = T::of(LOG_EPS);
    let p = tape.softmax_rows(a);
    let q = tape.softmax_rows(b);
    let m = tape.add(p, q);
    let m = tape.scale(m, T::half());
    let lm = tape.unary(m, Unary::LogClamp(eps));
    let kl = |tape: &mut Tape<T>, x: Var| {
        let lx = tape.unary(x, Unary::LogClamp(eps));
        let d = tape.sub(lx, lm);
        tape.mul(x, d)
    };
    let kp = kl(tape, p);
    let kq = kl(tape, q);
    let s = tape.add(kp, kq);
    let total = tape.sum(s);
    let rows = tape.value(a).rows().max(1);
    Ok(tape.scale(total, T::half() / T::of(rows as f64)))
}

/// `Σ_s λ_mc·L_mc(s) + λ_cc·L_cc(s)` over all decoder blocks.
pub fn consistency_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x: &DecoderTrace,
    x_aug: &DecoderTrace,
    w: &LossWeights,
) -> Result<Var> {
    if x.blocks.len() != x_aug.blocks.len() || x.blocks.is_empty() {
        return Err(Error::invalid(
            "trace",
            format!("block counts differ: {} vs {}", x.blocks.len(), x_aug.blocks.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (a, b) in x.blocks.iter().zip(&x_aug.blocks) {
        let mc = mask_consistency(tape, a.mask_logits, b.mask_logits)?;
        let cc = class_consistency(tape, a.class_logits, b.class_logits)?;
        let mc = tape.scale(mc, T::of(w.mc));
        let cc = tape.scale(cc, T::of(w.cc));
        let block = tape.add(mc, cc);
        total = Some(match total {
            Some(t) => tape.add(t, block),
            None => block,
        });
    }
    Ok(total.expect("at least one block"))
}
