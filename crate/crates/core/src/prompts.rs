//! Domain-aware context prompts: a shallow generator maps the frozen class
//! token of an image to an offset that is broadcast-added to every learnable
//! context token before text encoding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::segnet::params::{Bound, Init, PRef};
use crate::segnet::{SegNet, TextFeatureSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How the context prompt of each image is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    /// One shared learnable prompt; no generator involved.
    Fixed,
    /// Learnable prompt plus the image's domain embedding.
    DomainAware,
    /// Generator evaluated, then its output replaced by zeros.
    ClampedZero,
}

/// Normalization statistics used by the generator's input layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Running,
}

#[derive(Clone, Debug)]
pub(crate) struct PromptParams {
    pub context: PRef,
    pub bn_gamma: PRef,
    pub bn_beta: PRef,
    pub w1: PRef,
    pub b1: PRef,
    pub w2: PRef,
    pub b2: PRef,
}

impl PromptParams {
    /// The context starts from a copy of the template prompt.
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, template: &Tensor<T>, d_v: usize, hidden: usize, c_tok: usize) -> Self {
        let context = PRef::Train(init.train.push("prompt.context", template.clone()));
        PromptParams {
            context,
            bn_gamma: init.ones("bn_gamma", 1, d_v),
            bn_beta: init.zeros("bn_beta", 1, d_v),
            w1: init.weight("w1", d_v, hidden),
            b1: init.zeros("b1", 1, hidden),
            w2: init.normal("w2", hidden, c_tok, 0.5 / (hidden as f64).sqrt()),
            b2: init.zeros("b2", 1, c_tok),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub count: usize,
}

/// Running normalization statistics of the generator input.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(dim: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(1, dim),
            var: Tensor::full(1, dim, T::one()),
        }
    }

    /// Exponential update; the variance uses the unbiased batch estimate.
    pub fn update(&mut self, s: &BatchStats<T>) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        let unbias = if s.count > 1 {
            T::of(s.count as f64 / (s.count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &b) in self.mean.data_mut().iter_mut().zip(s.mean.data()) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(s.var.data()) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

/// Standardizes the rows of `x` with batch (biased) or running statistics.
pub fn standardize<T: Scalar>(x: &Tensor<T>, norm: NormMode, running: &RunningStats<T>) -> (Tensor<T>, Option<BatchStats<T>>) {
    let (n, d) = x.shape();
    let (mean, var, stats) = match norm {
        NormMode::Running => (running.mean.clone(), running.var.clone(), None),
        NormMode::Batch => {
            let nn = T::of(n as f64);
            let mean = Tensor::from_fn(1, d, |_, j| (0..n).map(|i| x.get(i, j)).sum::<T>() / nn);
            let var = Tensor::from_fn(1, d, |_, j| {
                (0..n).map(|i| (x.get(i, j) - mean.get(0, j)).powi(2)).sum::<T>() / nn
            });
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                count: n,
            };
            (mean, var, Some(stats))
        }
    };
    let eps = T::of(BN_EPS);
    let out = Tensor::from_fn(n, d, |i, j| (x.get(i, j) - mean.get(0, j)) / (var.get(0, j) + eps).sqrt());
    (out, stats)
}

/// Domain embeddings `(N, C_tok)` of frozen class tokens `(N, D_v)`.
pub fn domain_embedding<T: Scalar>(
    tape: &mut Tape<T>,
    model: &SegNet<T>,
    b: &Bound,
    frozen_cls: &Tensor<T>,
    norm: NormMode,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let d_v = model.cfg.d_v;
    if frozen_cls.cols() != d_v || frozen_cls.rows() == 0 {
        return Err(Error::invalid(
            "frozen class token",
            format!("expected (N>0, {d_v}), got {:?}", frozen_cls.shape()),
        ));
    }
    let p = &model.prompt;
    let (xhat, stats) = standardize(frozen_cls, norm, &model.bn);
    let x = tape.constant(xhat);
    let x = tape.mul_row(x, b.get(p.bn_gamma));
    let x = tape.add_row(x, b.get(p.bn_beta));
    let h = tape.linear(x, b.get(p.w1), b.get(p.b1));
    let h = tape.relu(h);
    Ok((tape.linear(h, b.get(p.w2), b.get(p.b2)), stats))
}

/// `p_x[m] = p[m] + π` for every context token.
pub fn compose_prompt<T: Scalar>(tape: &mut Tape<T>, p: Var, pi: Var) -> Result<Var> {
    let (ps, qs) = (tape.value(p).shape(), tape.value(pi).shape());
    if qs != (1, ps.1) {
        return Err(Error::invalid("domain embedding", format!("shape {qs:?} for prompt {ps:?}")));
    }
    Ok(tape.add_row(p, pi))
}

/// Text features of one image under its own domain-aware prompt, with
/// running normalization statistics.
pub fn domain_aware_text_features<T: Scalar>(
    tape: &mut Tape<T>,
    model: &SegNet<T>,
    b: &Bound,
    image: &Tensor<T>,
) -> Result<TextFeatureSet> {
    let frozen = model.frozen_class_tokens(&[image])?;
    let (pi, _) = domain_embedding(tape, model, b, &frozen, NormMode::Running)?;
    let prompt = compose_prompt(tape, b.get(model.prompt.context), pi)?;
    model.encode_text(tape, b, prompt)
}
