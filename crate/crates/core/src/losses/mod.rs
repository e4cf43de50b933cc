//! Training objectives and their weighted combination.

mod consistency;
mod contrastive;
mod regularize;
mod segmentation;

pub use consistency::{class_consistency, consistency_loss, mask_consistency, soft_bce_with_logits};
pub use contrastive::{contrastive_between, contrastive_loss, partition_batch, BatchPartition, SampleKind};
pub use regularize::{downsample_labels, reg_language, reg_vision, reg_vision_language};
pub use segmentation::{block_segmentation_loss, dice_loss, segmentation_loss, LabelTargets};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Floor applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-8;
/// Additive smoothing of the dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub reg: f64,
    pub contra: f64,
    pub cons: f64,
    pub mc: f64,
    pub cc: f64,
    pub bce: f64,
    pub dice: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Temperature of the vision-language score map.
    pub tau_vl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            reg: 1.0,
            contra: 1.0,
            cons: 10.0,
            mc: 1.0,
            cc: 1.0,
            bce: 5.0,
            dice: 5.0,
            tau: 0.5,
            tau_vl: 0.07,
        }
    }
}

impl LossWeights {
    /// Weights may be zero (to disable a term); temperatures must be positive.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.reg", self.reg),
            ("loss.contra", self.contra),
            ("loss.cons", self.cons),
            ("loss.mc", self.mc),
            ("loss.cc", self.cc),
            ("loss.bce", self.bce),
            ("loss.dice", self.dice),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(name, format!("{v} must be finite and >= 0")));
            }
        }
        for (name, v) in [("loss.tau", self.tau), ("loss.tau_vl", self.tau_vl)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(name, format!("{v} must be finite and > 0")));
            }
        }
        Ok(())
    }
}

/// Scalar values of the four top-level terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    pub seg: f64,
    pub reg: f64,
    pub contra: f64,
    pub cons: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `seg + λ_reg·reg + λ_contra·contra + λ_cons·cons`
    pub fn weighted(seg: f64, reg: f64, contra: f64, cons: f64, w: &LossWeights) -> Result<Self> {
        let named = [("L_seg", seg), ("L_reg", reg), ("L_contra", contra), ("L_cons", cons)];
        if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: name.to_string(),
                breakdown: format!("L_seg={seg} L_reg={reg} L_contra={contra} L_cons={cons}"),
            });
        }
        Ok(LossBreakdown {
            seg,
            reg,
            contra,
            cons,
            total: seg + w.reg * reg + w.contra * contra + w.cons * cons,
        })
    }
}

/// Loss terms on a tape; absent terms count as zero.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub seg: Var,
    pub reg: Option<Var>,
    pub contra: Option<Var>,
    pub cons: Option<Var>,
}

/// Weighted total on the tape, with a non-finite check on every component.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, parts: LossParts, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let val = |tape: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().f64());
    let breakdown = LossBreakdown::weighted(
        val(tape, Some(parts.seg)),
        val(tape, parts.reg),
        val(tape, parts.contra),
        val(tape, parts.cons),
        w,
    )?;
    let mut total = parts.seg;
    for (v, weight) in [(parts.reg, w.reg), (parts.contra, w.contra), (parts.cons, w.cons)] {
        if let Some(v) = v {
            let s = tape.scale(v, T::of(weight));
            total = tape.add(total, s);
        }
    }
    Ok((total, breakdown))
}

/// Mean of scalar nodes; zero for an empty list.
pub(crate) fn mean_of<T: Scalar>(tape: &mut Tape<T>, vals: &[Var]) -> Var {
    match vals {
        [] => tape.constant(crate::tensor::Tensor::scalar(T::zero())),
        [one] => *one,
        _ => {
            let mut acc = vals[0];
            for &v in &vals[1..] {
                acc = tape.add(acc, v);
            }
            tape.scale(acc, T::one() / T::of(vals.len() as f64))
        }
    }
}
