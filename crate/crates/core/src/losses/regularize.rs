//! Regularizers that keep the tuned model close to its frozen counterparts.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scenegen::{LabelMap, IGNORE};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

fn nonzero_rows<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        if t.row(r).iter().all(|v| *v == T::zero()) {
            return Err(Error::invalid(what, format!("row {r} is zero")));
        }
    }
    Ok(())
}

/// Cross-entropy of `softmax(cos(t_k, T0_j))` against the identity.
pub fn reg_language<T: Scalar>(tape: &mut Tape<T>, t: Var, t0: Var) -> Result<Var> {
    let (ts, t0s) = (tape.value(t).shape(), tape.value(t0).shape());
    if ts != t0s {
        return Err(Error::shape("reg_language", format!("{ts:?} vs {t0s:?}")));
    }
    nonzero_rows(tape.value(t), "text features")?;
    nonzero_rows(tape.value(t0), "template text features")?;
    let k = ts.0;
    let a = tape.normalize_rows(t, T::of(NORM_EPS));
    let b = tape.normalize_rows(t0, T::of(NORM_EPS));
    let s = tape.matmul_nt(a, b);
    let ls = tape.log_softmax_rows(s);
    let diag = tape.gather(ls, Arc::new((0..k).map(|i| i * k + i).collect()), k, 1);
    let m = tape.mean(diag);
    Ok(tape.neg(m))
}

/// Majority label of every `ps×ps` patch over non-ignored pixels; ties go to
/// the smallest class id, all-ignored patches give `None`.
pub fn downsample_labels(gt: &LabelMap, ps: usize, k: usize) -> Result<Vec<Option<usize>>> {
    gt.validate(k)?;
    if ps == 0 || !gt.height.is_multiple_of(ps) || !gt.width.is_multiple_of(ps) {
        return Err(Error::invalid("patch", format!("{ps} does not tile {}x{}", gt.height, gt.width)));
    }
    let (gh, gw) = (gt.height / ps, gt.width / ps);
    let mut out = Vec::with_capacity(gh * gw);
    let mut counts = vec![0usize; k];
    for gy in 0..gh {
        for gx in 0..gw {
            counts.fill(0);
            for dy in 0..ps {
                for dx in 0..ps {
                    let v = gt.data[(gy * ps + dy) * gt.width + gx * ps + dx];
                    if v != IGNORE {
                        counts[v as usize] += 1;
                    }
                }
            }
            let best = (0..k).fold(None, |best: Option<usize>, c| match best {
                _ if counts[c] == 0 => best,
                Some(b) if counts[b] >= counts[c] => Some(b),
                _ => Some(c),
            });
            out.push(best);
        }
    }
    Ok(out)
}

/// Per-patch cross-entropy of `softmax(cos(v_p, t_k) / τ_vl)` against the
/// patch labels; unlabeled patches are skipped, and no labels gives 0.
pub fn reg_vision_language<T: Scalar>(
    tape: &mut Tape<T>,
    v: Var,
    t: Var,
    patch_labels: &[Option<usize>],
    tau_vl: f64,
) -> Result<Var> {
    if !(tau_vl > 0.0 && tau_vl.is_finite()) {
        return Err(Error::invalid("tau_vl", format!("{tau_vl} must be > 0")));
    }
    let (vs, ts) = (tape.value(v).shape(), tape.value(t).shape());
    if vs.1 != ts.1 || vs.0 != patch_labels.len() {
        return Err(Error::shape(
            "reg_vision_language",
            format!("patches {vs:?}, text {ts:?}, {} labels", patch_labels.len()),
        ));
    }
    let k = ts.0;
    let idx: Vec<usize> = patch_labels
        .iter()
        .enumerate()
        .filter_map(|(p, l)| l.map(|c| p * k + c))
        .collect();
    if idx.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    if let Some(bad) = patch_labels.iter().flatten().find(|&&c| c >= k) {
        return Err(Error::invalid("patch label", format!("{bad} >= {k}")));
    }
    let a = tape.normalize_rows(v, T::of(NORM_EPS));
    let b = tape.normalize_rows(t, T::of(NORM_EPS));
    let s = tape.matmul_nt(a, b);
    let s = tape.scale(s, T::one() / T::of(tau_vl));
    let ls = tape.log_softmax_rows(s);
    let n = idx.len();
    let picked = tape.gather(ls, Arc::new(idx), n, 1);
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

/// `‖v − v0‖₂`; `v0` is treated as a constant.
pub fn reg_vision<T: Scalar>(tape: &mut Tape<T>, v: Var, v0: Var) -> Result<Var> {
    let (a, b) = (tape.value(v).shape(), tape.value(v0).shape());
    if a != b {
        return Err(Error::shape("reg_vision", format!("{a:?} vs {b:?}")));
    }
    let v0 = tape.detach(v0);
    let d = tape.sub(v, v0);
    Ok(tape.norm(d))
}
