//! Confusion matrices, IoU and precision-recall.

use crate::error::{Error, Result};
use crate::scenegen::{LabelMap, IGNORE};

/// `(K, K)` pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not [`IGNORE`].
    pub fn accumulate(&mut self, pred: &[u8], gt: &LabelMap) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "ConfusionMatrix::accumulate",
                format!("{} predictions for {} labels", pred.len(), gt.len()),
            ));
        }
        let k = self.k;
        if let Some(i) = pred.iter().position(|&p| p as usize >= k) {
            return Err(Error::invalid("prediction", format!("class {} at pixel {i} is not < {k}", pred[i])));
        }
        gt.validate(k)?;
        for (&p, &g) in pred.iter().zip(&gt.data) {
            if g != IGNORE {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("ConfusionMatrix::merge", format!("K={} and K={}", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn merged(mut self, other: &ConfusionMatrix) -> Result<Self> {
        self.merge(other)?;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn iou_from_confusion(cm: &ConfusionMatrix) -> Result<IouReport> {
    let k = cm.num_classes();
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..k).map(|j| cm.get(c, j)).sum();
            let col: u64 = (0..k).map(|i| cm.get(i, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::invalid("confusion matrix", "every class has an empty union"));
    }
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(IouReport { per_class, miou })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point per distinct score, thresholds descending. Recall is 0 when the
/// mask has no positives; AP is then undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: Option<f64>,
}

/// Pixel `i` is predicted positive at threshold `t` when `scores[i] >= t`.
pub fn pr_curve_and_ap(scores: &[f64], positive: &[bool]) -> Result<PrCurve> {
    if scores.len() != positive.len() {
        return Err(Error::shape(
            "pr_curve_and_ap",
            format!("{} scores for {} labels", scores.len(), positive.len()),
        ));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::invalid("score", format!("{s} is outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let n_pos = positive.iter().filter(|&&p| p).count();

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold: t,
            precision: tp as f64 / (tp + fp) as f64,
            recall: if n_pos == 0 { 0.0 } else { tp as f64 / n_pos as f64 },
        });
    }

    let ap = (n_pos > 0).then(|| {
        // Precision envelope from the low-threshold end, then sum over recall steps.
        let mut env: Vec<f64> = points.iter().map(|p| p.precision).collect();
        for j in (0..env.len().saturating_sub(1)).rev() {
            env[j] = env[j].max(env[j + 1]);
        }
        let mut prev = 0.0;
        let mut area = 0.0;
        for (p, e) in points.iter().zip(&env) {
            area += (p.recall - prev) * e;
            prev = p.recall;
        }
        area
    });
    Ok(PrCurve { points, ap })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(data: &[u8]) -> LabelMap {
        LabelMap::new(1, data.len(), data.to_vec()).unwrap()
    }

    #[test]
    fn ignored_pixels_are_skipped_and_bad_ids_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1], &lm(&[IGNORE, IGNORE, IGNORE])).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.accumulate(&[2, 0, 0], &lm(&[0, 0, 0])).is_err());
        assert!(cm.accumulate(&[0, 0, 0], &lm(&[0, 3, 0])).is_err());
        assert!(cm.accumulate(&[0, 0], &lm(&[0, 0, 0])).is_err());
    }

    #[test]
    fn all_undefined_is_an_error() {
        assert!(iou_from_confusion(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn separable_scores_give_unit_ap() {
        let c = pr_curve_and_ap(&[1.0, 0.0, 1.0, 0.0], &[true, false, true, false]).unwrap();
        assert_eq!(c.ap, Some(1.0));
        assert_eq!(c.points.len(), 2);
        assert!(pr_curve_and_ap(&[0.5], &[false]).unwrap().ap.is_none());
        assert!(pr_curve_and_ap(&[1.5], &[true]).is_err());
    }
}
