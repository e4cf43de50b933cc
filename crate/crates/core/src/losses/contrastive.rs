//! Domain-aware contrastive objective over original and perturbed samples.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    Original,
    Augmented,
}

/// Positive and negative index sets for every anchor of a `2B` batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPartition {
    pub kinds: Vec<SampleKind>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

/// Original anchors: positives are the other originals, negatives every
/// augmented sample. Augmented anchors: the anchor itself is the only
/// positive, everything else is negative.
pub fn partition_batch(kinds: &[SampleKind], b: usize) -> Result<BatchPartition> {
    let n_orig = kinds.iter().filter(|&&k| k == SampleKind::Original).count();
    let n_aug = kinds.len() - n_orig;
    if n_orig != b || n_aug != b {
        return Err(Error::invalid(
            "batch",
            format!("expected {b} originals and {b} augmented, got {n_orig} and {n_aug}"),
        ));
    }
    if b < 2 {
        return Err(Error::invalid("batch", "contrastive loss requires at least 2 originals"));
    }
    let n = kinds.len();
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for (i, &k) in kinds.iter().enumerate() {
        match k {
            SampleKind::Original => {
                positives.push((0..n).filter(|&j| j != i && kinds[j] == SampleKind::Original).collect());
                negatives.push((0..n).filter(|&j| kinds[j] == SampleKind::Augmented).collect());
            }
            SampleKind::Augmented => {
                positives.push(vec![i]);
                negatives.push((0..n).filter(|&j| j != i).collect());
            }
        }
    }
    Ok(BatchPartition {
        kinds: kinds.to_vec(),
        positives,
        negatives,
    })
}

impl BatchPartition {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Row-major `(n, n)` membership masks of `P_i` and `P_i ∪ N_i`.
    fn masks(&self) -> (Vec<bool>, Vec<bool>) {
        let n = self.len();
        let mut pos = vec![false; n * n];
        let mut all = vec![false; n * n];
        for i in 0..n {
            for &j in &self.positives[i] {
                pos[i * n + j] = true;
                all[i * n + j] = true;
            }
            for &j in &self.negatives[i] {
                all[i * n + j] = true;
            }
        }
        (pos, all)
    }
}

/// `-(1/n) Σ_i log( Σ_{P_i} e^{s_ij/τ} / Σ_{P_i ∪ N_i} e^{s_ij/τ} )` with
/// `s_ij = cos(anchor_i, candidate_j)`.
pub fn contrastive_between<T: Scalar>(
    tape: &mut Tape<T>,
    anchors: Var,
    candidates: Var,
    part: &BatchPartition,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau", format!("{tau} must be > 0")));
    }
    let n = part.len();
    let (ra, rc) = (tape.value(anchors).rows(), tape.value(candidates).rows());
    if ra != n || rc != n || tape.value(anchors).cols() != tape.value(candidates).cols() {
        return Err(Error::shape(
            "contrastive_loss",
            format!(
                "anchors {:?}, candidates {:?}, batch {n}",
                tape.value(anchors).shape(),
                tape.value(candidates).shape()
            ),
        ));
    }
    let eps = T::of(1e-12);
    let a = tape.normalize_rows(anchors, eps);
    let c = tape.normalize_rows(candidates, eps);
    let sim = tape.matmul_nt(a, c);
    let logits = tape.scale(sim, T::one() / T::of(tau));
    let (pos, all) = part.masks();
    let num = tape.masked_logsumexp_rows(logits, Arc::new(pos));
    let den = tape.masked_logsumexp_rows(logits, Arc::new(all));
    let per_anchor = tape.sub(den, num);
    Ok(tape.mean(per_anchor))
}

/// Contrastive loss among the rows of `pi` themselves.
pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<T>, pi: Var, part: &BatchPartition, tau: f64) -> Result<Var> {
    contrastive_between(tape, pi, pi, part, tau)
}
