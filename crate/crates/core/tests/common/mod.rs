//! Scalar loop oracles and small fixtures shared by the integration tests.
//!
//! The oracles work on plain `Vec<Vec<f64>>` and never call into the crate's
//! tape, so they check the implementation rather than restate it.

#![allow(dead_code)]

use dgseg::scenegen::{render_scene_in_domain, DomainStyle, LabelMap, LabeledImage, SceneFamily, Split, IGNORE};
use dgseg::segnet::ModelConfig;
use dgseg::trainer::TrainConfig;
use dgseg::gradcheck::{max_rel_error, numeric_gradient, relative_error, STEP};
use dgseg::trainer::TrainState;
use dgseg::{Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub type Mat = Vec<Vec<f64>>;

pub const EPS: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| r.random_range(-scale..scale)).collect()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor<f64> {
    let cols = m.first().map_or(0, |r| r.len());
    Tensor::from_vec(m.len(), cols, m.concat()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ln_floor(x: f64) -> f64 {
    x.max(EPS).ln()
}

/// Anchors `0..b` are originals, `b..2b` their perturbed copies.
pub fn contrastive(anchors: &Mat, candidates: &Mat, b: usize, tau: f64) -> f64 {
    let n = 2 * b;
    let mut total = 0.0;
    for i in 0..n {
        let (pos, neg): (Vec<usize>, Vec<usize>) = if i < b {
            ((0..b).filter(|&j| j != i).collect(), (b..n).collect())
        } else {
            (vec![i], (0..n).filter(|&j| j != i).collect())
        };
        let e = |j: usize| (cos(&anchors[i], &candidates[j]) / tau).exp();
        let num: f64 = pos.iter().map(|&j| e(j)).sum();
        let den: f64 = pos.iter().chain(&neg).map(|&j| e(j)).sum();
        total -= (num / den).ln();
    }
    total / n as f64
}

/// Jensen-Shannon divergence between two probability vectors, logs floored
/// at `ln EPS`.
pub fn jsd_probs(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        s += a * (ln_floor(a) - ln_floor(m)) + b * (ln_floor(b) - ln_floor(m));
    }
    0.5 * s
}

pub fn class_consistency(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b).map(|(x, y)| jsd_probs(&softmax(x), &softmax(y))).sum::<f64>() / a.len() as f64
}

pub fn bce(p: f64, y: f64) -> f64 {
    -(y * ln_floor(p) + (1.0 - y) * ln_floor(1.0 - p))
}

pub fn mask_consistency(a: &Mat, b: &Mat) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for (ra, rb) in a.iter().zip(b) {
        for (&x, &y) in ra.iter().zip(rb) {
            s += bce(sigmoid(x), sigmoid(y)) + bce(sigmoid(y), sigmoid(x));
            n += 1;
        }
    }
    0.5 * s / n as f64
}

/// Mean over classes of `1 - (2I + 1)/(P + G + 1)` on non-ignored pixels.
pub fn dice(probs: &Mat, label: &[u8]) -> f64 {
    let k = probs.len();
    let mut total = 0.0;
    for c in 0..k {
        let (mut i, mut p, mut g) = (0.0, 0.0, 0.0);
        for (j, &l) in label.iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let y = if l as usize == c { 1.0 } else { 0.0 };
            i += probs[c][j] * y;
            p += probs[c][j];
            g += y;
        }
        total += 1.0 - (2.0 * i + 1.0) / (p + g + 1.0);
    }
    total / k as f64
}

pub fn reg_language(t: &Mat, t0: &Mat) -> f64 {
    let k = t.len();
    let mut s = 0.0;
    for i in 0..k {
        let row: Vec<f64> = (0..k).map(|j| cos(&t[i], &t0[j])).collect();
        s -= softmax(&row)[i].ln();
    }
    s / k as f64
}

pub fn reg_vision_language(v: &Mat, t: &Mat, labels: &[Option<usize>], tau: f64) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for (p, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            let row: Vec<f64> = t.iter().map(|tk| cos(&v[p], tk) / tau).collect();
            s -= softmax(&row)[*c].ln();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Tiny end-to-end configuration: 16×16 images, K=3, 2 decoder blocks.
pub fn tiny_model(seed: u64, mask_stride: usize) -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        height: 16,
        width: 16,
        patch: 4,
        d_v: 8,
        d: 8,
        c: 6,
        c_tok: 6,
        l: 8,
        blocks: 2,
        context_tokens: 2,
        pixel_channels: 4,
        prompt_hidden: 6,
        text_layers: 1,
        mask_stride,
        seed,
        ..ModelConfig::default()
    }
}

pub fn tiny_train_config(seed: u64, mask_stride: usize) -> TrainConfig {
    TrainConfig {
        iterations: 6,
        batch: 2,
        warmup_iters: 2,
        seed,
        model: tiny_model(seed, mask_stride),
        ..TrainConfig::default()
    }
}

pub fn tiny_family(seed: u64) -> SceneFamily {
    SceneFamily {
        base_seed: seed,
        num_classes: 3,
        height: 16,
        width: 16,
        patch: 4,
    }
}

pub fn source_samples<T: dgseg::Scalar>(family: &SceneFamily, n: usize) -> Vec<LabeledImage<T>> {
    let style = DomainStyle::source(family.num_classes);
    (0..n)
        .map(|i| render_scene_in_domain(&family.spec(Split::Train, "source", i), &style).unwrap())
        .collect()
}

pub fn label(h: usize, w: usize, data: &[u8]) -> LabelMap {
    LabelMap::new(h, w, data.to_vec()).unwrap()
}

/// Max relative error of d out / d x for a graph built by `build`.
pub fn grad_error(x0: &Tensor<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let out = build(&mut tape, x);
    let analytic = tape
        .backward(out)
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(x0.rows(), x0.cols()));
    let numeric = numeric_gradient(
        |xv| {
            let mut t = Tape::new();
            let x = t.constant(xv.clone());
            let out = build(&mut t, x);
            t.value(out).item()
        },
        x0,
        STEP,
    );
    max_rel_error(&analytic, &numeric)
}

/// Worst relative error over `PER_TENSOR` random coordinates of every
/// trainable tensor of a 16×16, K=3, two-block model, against central
/// differences of the total loss.
pub fn end_to_end_gradient_error(seed: u64, mask_stride: usize) -> (f64, String) {
    const PER_TENSOR: usize = 6;
    let cfg = tiny_train_config(seed, mask_stride);
    let mut state = TrainState::<f64>::new(cfg).unwrap();
    let batch = source_samples::<f64>(&tiny_family(seed), 2);
    // At initialization the encoder equals its frozen copy, which puts the
    // vision regularizer on the kink of the norm; step away from it first.
    for _ in 0..2 {
        state.step(&batch).unwrap();
    }
    let mode = state.prompt_mode();
    let g = state.loss_graph(&batch, mode).unwrap();
    let mut grads = g.tape.backward(g.total);
    let analytic: Vec<Option<Tensor<f64>>> = g.train_vars.iter().map(|&v| grads.take(v)).collect();

    let loss_at = |s: &TrainState<f64>| {
        let g = s.loss_graph(&batch, mode).unwrap();
        g.tape.value(g.total).item()
    };
    let mut r = rng(1000 + seed);
    let mut worst = (0.0, String::new());
    let mut probe = state.clone();
    for (i, a) in analytic.iter().enumerate() {
        let len = state.model.train.tensors()[i].len();
        for j in sample(&mut r, len, PER_TENSOR.min(len)) {
            let orig = probe.model.train.tensors()[i].data()[j];
            probe.model.train.tensors_mut()[i].data_mut()[j] = orig + STEP;
            let up = loss_at(&probe);
            probe.model.train.tensors_mut()[i].data_mut()[j] = orig - STEP;
            let down = loss_at(&probe);
            probe.model.train.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let an = a.as_ref().map_or(0.0, |t| t.data()[j]);
            let e = relative_error(an, numeric);
            if e >= worst.0 {
                let name = &state.model.train.names()[i];
                worst = (e, format!("{name}[{j}] analytic {an:e} numeric {numeric:e}"));
            }
        }
    }
    worst
}

/// IoU per class straight from the pixel sets; `None` for an empty union.
pub fn iou_oracle(pred: &[u8], gt: &[u8], k: usize) -> (Vec<Option<f64>>, Option<f64>) {
    let per: Vec<Option<f64>> = (0..k as u8)
        .map(|c| {
            let valid = || pred.iter().zip(gt).filter(|(_, &g)| g != IGNORE);
            let inter = valid().filter(|(&p, &g)| p == c && g == c).count();
            let union = valid().filter(|(&p, &g)| p == c || g == c).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let def: Vec<f64> = per.iter().flatten().copied().collect();
    let m = (!def.is_empty()).then(|| def.iter().sum::<f64>() / def.len() as f64);
    (per, m)
}

/// Thresholds at every distinct score, precision envelope taken over all
/// points with at least the same recall.
pub fn ap_oracle(scores: &[f64], gt: &[bool]) -> Option<f64> {
    let n_pos = gt.iter().filter(|&&g| g).count();
    if n_pos == 0 {
        return None;
    }
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| {
            let tp = scores.iter().zip(gt).filter(|(&s, &g)| s >= t && g).count() as f64;
            let fp = scores.iter().zip(gt).filter(|(&s, &g)| s >= t && !g).count() as f64;
            (tp / (tp + fp), tp / n_pos as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &(_, r) in &pts {
        let best = pts.iter().filter(|(_, r2)| *r2 >= r).map(|(p, _)| *p).fold(0.0, f64::max);
        ap += (r - prev_r) * best;
        prev_r = r;
    }
    Some(ap)
}

pub fn decode(mut code: usize, n: usize, base: usize) -> Vec<u8> {
    (0..n)
        .map(|_| {
            let d = code % base;
            code /= base;
            d as u8
        })
        .collect()
}
