//! Batch composition, the optimization loop and checkpoint persistence.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadOptions, CHECKPOINT_MAGIC};
pub use config::{ContraFeatures, TrainConfig};
pub use optim::{lr_at, AdamW};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::losses::{
    consistency_loss, contrastive_between, contrastive_loss, downsample_labels, mean_of, partition_batch,
    reg_language, reg_vision, reg_vision_language, segmentation_loss, total_loss, LabelTargets, LossBreakdown,
    LossParts, SampleKind,
};
use crate::perturb::{apply_perturbation, sample_perturbation};
use crate::prompts::{BatchStats, NormMode, PromptMode};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use crate::scenegen::{load_manifest, LabeledImage, Split};
use crate::segnet::params::Bound;
use crate::segnet::{BatchForward, SegNet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "iter,lr,L_seg,L_reg,L_contra,L_cons,L_total";

/// A recorded training objective; `train_vars[i]` is the tape variable of
/// trainable tensor `i`.
pub struct LossGraph<T> {
    pub tape: Tape<T>,
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub train_vars: Vec<Var>,
    pub batch_stats: Option<BatchStats<T>>,
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub cfg: TrainConfig,
    pub model: SegNet<T>,
    pub opt: AdamW<T>,
    /// Number of completed optimizer steps.
    pub iter: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let cfg = cfg.finish()?;
        let model = SegNet::new(cfg.model.clone())?;
        let opt = AdamW::new(model.train.tensors(), cfg.weight_decay);
        Ok(TrainState { cfg, model, opt, iter: 0 })
    }

    /// Prompt mode implied by the model configuration.
    pub fn prompt_mode(&self) -> PromptMode {
        if self.cfg.model.domain_prompts {
            PromptMode::DomainAware
        } else {
            PromptMode::Fixed
        }
    }

    pub fn step(&mut self, batch: &[LabeledImage<T>]) -> Result<LossBreakdown> {
        self.step_with(batch, self.prompt_mode())
    }

    /// One optimizer update on `batch`, with the prompt mode given explicitly.
    pub fn step_with(&mut self, batch: &[LabeledImage<T>], mode: PromptMode) -> Result<LossBreakdown> {
        let g = self.loss_graph(batch, mode)?;
        let mut grads = g.tape.backward(g.total);
        let grads: Vec<_> = g.train_vars.iter().map(|&v| grads.take(v)).collect();
        let lr = lr_at(self.iter, &self.cfg);
        self.opt.update(self.model.train.tensors_mut(), &grads, lr)?;
        if let Some(stats) = &g.batch_stats {
            self.model.bn.update(stats);
        }
        self.iter += 1;
        Ok(g.breakdown)
    }

    /// The full training objective on `batch` at the current iteration,
    /// without touching any state.
    pub fn loss_graph(&self, batch: &[LabeledImage<T>], mode: PromptMode) -> Result<LossGraph<T>> {
        let cfg = &self.cfg;
        let b = batch.len();
        if b < 2 {
            return Err(Error::invalid("batch", format!("{b} images, need at least 2")));
        }
        let k = cfg.model.num_classes;
        for x in batch {
            x.validate(k)?;
        }
        let mut samples: Vec<&LabeledImage<T>> = batch.iter().collect();
        let augmented: Vec<LabeledImage<T>> = if cfg.perturb {
            batch
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let seed = derive_seed(cfg.seed, &format!("perturb:{}:{i}", self.iter));
                    Ok(apply_perturbation(x, &sample_perturbation(seed, &cfg.ranges)?))
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        samples.extend(augmented.iter());

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let out = self.model.forward(&mut tape, &bound, &images, mode, NormMode::Batch)?;

        let supervised = if cfg.seg_on_aug { samples.len() } else { b };
        let targets: Vec<LabelTargets<T>> = batch
            .iter()
            .map(|x| LabelTargets::new(&self.model.mask_labels(&x.label)?, k))
            .collect::<Result<_>>()?;
        let patch_labels: Vec<_> = batch
            .iter()
            .map(|x| downsample_labels(&x.label, cfg.model.patch, k))
            .collect::<Result<_>>()?;

        let mut seg = Vec::with_capacity(supervised);
        let mut reg = Vec::with_capacity(supervised);
        let mut lang: HashMap<Var, Var> = HashMap::new();
        for i in 0..supervised {
            let src = i % b;
            seg.push(segmentation_loss(&mut tape, &out.traces[i], &targets[src], &cfg.weights)?);
            reg.push(self.regularizer(&mut tape, &bound, &out, i, &patch_labels[src], &mut lang)?);
        }
        let seg = mean_of(&mut tape, &seg);
        let reg = mean_of(&mut tape, &reg);

        let cons = if cfg.cons {
            let pairs = (0..b)
                .map(|i| consistency_loss(&mut tape, &out.traces[i], &out.traces[b + i], &cfg.weights))
                .collect::<Result<Vec<_>>>()?;
            Some(mean_of(&mut tape, &pairs))
        } else {
            None
        };
        let contra = if cfg.contra {
            Some(self.contrastive(&mut tape, &bound, &out, b)?)
        } else {
            None
        };

        let parts = LossParts {
            seg,
            reg: Some(reg),
            contra,
            cons,
        };
        let (total, breakdown) = total_loss(&mut tape, parts, &cfg.weights)?;
        Ok(LossGraph {
            total,
            breakdown,
            train_vars: bound.train_vars().to_vec(),
            batch_stats: out.batch_stats,
            tape,
        })
    }

    /// Language, vision-language and vision regularizers of sample `i`.
    fn regularizer(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        out: &BatchForward<T>,
        i: usize,
        patch_labels: &[Option<usize>],
        lang: &mut HashMap<Var, Var>,
    ) -> Result<Var> {
        let t = out.text[i].t;
        let ll = match lang.get(&t) {
            Some(&v) => v,
            None => {
                let v = reg_language(tape, t, out.template.t)?;
                lang.insert(t, v);
                v
            }
        };
        let f = &out.features[i];
        let v = self.model.project_visual(tape, bound, f.tokens);
        let lvl = reg_vision_language(tape, v, t, patch_labels, self.cfg.weights.tau_vl)?;
        let v0 = tape.constant(Tensor::from_vec(1, self.cfg.model.d_v, out.frozen_cls.row(i).to_vec())?);
        let lv = reg_vision(tape, f.class_token, v0)?;
        let s = tape.add(ll, lvl);
        Ok(tape.add(s, lv))
    }

    fn contrastive(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        out: &BatchForward<T>,
        b: usize,
    ) -> Result<Var> {
        let kinds: Vec<SampleKind> = (0..2 * b)
            .map(|i| if i < b { SampleKind::Original } else { SampleKind::Augmented })
            .collect();
        let part = partition_batch(&kinds, b)?;
        let tau = self.cfg.weights.tau;
        match self.cfg.contra_features {
            ContraFeatures::Embedding => {
                let pi = out
                    .pi
                    .ok_or_else(|| Error::invalid("train.contra_features", "no domain embeddings in this prompt mode"))?;
                contrastive_loss(tape, pi, &part, tau)
            }
            ContraFeatures::Text => {
                let rows: Vec<Var> = out
                    .text
                    .iter()
                    .map(|t| {
                        let (r, c) = tape.value(t.t).shape();
                        tape.reshape(t.t, 1, r * c)
                    })
                    .collect();
                let x = tape.concat_rows(&rows);
                contrastive_loss(tape, x, &part, tau)
            }
            ContraFeatures::TextVisual => {
                let text: Vec<Var> = out.text.iter().map(|t| tape.sum_cols(t.t)).collect();
                let vis: Vec<Var> = out
                    .features
                    .iter()
                    .map(|f| self.model.project_visual(tape, bound, f.class_token))
                    .collect();
                let a = tape.concat_rows(&text);
                let c = tape.concat_rows(&vis);
                contrastive_between(tape, a, c, &part, tau)
            }
        }
    }
}

/// One CSV line of the metrics log.
pub fn metrics_line(iter: usize, lr: f64, l: &LossBreakdown) -> String {
    format!("{iter},{lr},{},{},{},{},{}", l.seg, l.reg, l.contra, l.cons, l.total)
}

/// Result of a training run.
#[derive(Debug)]
pub struct FitOutcome<T> {
    pub state: TrainState<T>,
    /// CSV text starting with [`METRICS_HEADER`].
    pub metrics: String,
    pub losses: Vec<LossBreakdown>,
}

/// Sample order for every step: a fresh deterministic shuffle per epoch.
pub fn batch_indices(n: usize, batch: usize, seed: u64, iter: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut epoch_cache: Option<(usize, Vec<usize>)> = None;
    for j in 0..batch {
        let pos = iter * batch + j;
        let (epoch, at) = (pos / n, pos % n);
        if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream(seed, &format!("epoch:{epoch}")));
            epoch_cache = Some((epoch, order));
        }
        out.push(epoch_cache.as_ref().unwrap().1[at]);
    }
    out
}

/// Trains on in-memory samples; writes the metrics log and checkpoints when
/// `checkpoint_dir` is set.
pub fn fit_on<T: Scalar>(cfg: TrainConfig, data: &[LabeledImage<T>]) -> Result<FitOutcome<T>> {
    let mut state = TrainState::new(cfg)?;
    if data.is_empty() {
        return Err(Error::invalid("dataset", "no training samples"));
    }
    let k = state.cfg.model.num_classes;
    for x in data {
        x.validate(k)?;
        if (x.height(), x.width()) != (state.cfg.model.height, state.cfg.model.width) {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "{}x{} sample, model expects {}x{}",
                    x.height(),
                    x.width(),
                    state.cfg.model.height,
                    state.cfg.model.width
                ),
            ));
        }
    }
    let dir = state.cfg.checkpoint_dir.clone();
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut losses = Vec::with_capacity(state.cfg.iterations);
    while state.iter < state.cfg.iterations {
        let it = state.iter;
        let idx = batch_indices(data.len(), state.cfg.batch, state.cfg.seed, it);
        let batch: Vec<LabeledImage<T>> = idx.iter().map(|&i| data[i].clone()).collect();
        let lr = lr_at(it, &state.cfg);
        let l = state.step(&batch)?;
        let _ = writeln!(metrics, "{}", metrics_line(it, lr, &l));
        losses.push(l);
        let every = state.cfg.checkpoint_every;
        if let Some(d) = &dir {
            if every > 0 && state.iter % every == 0 && state.iter < state.cfg.iterations {
                save_checkpoint(&state, &d.join(format!("step_{:06}.ckpt", state.iter)))?;
            }
        }
    }
    if let Some(d) = &dir {
        save_checkpoint(&state, &d.join("final.ckpt"))?;
        let p = d.join("metrics.csv");
        std::fs::write(&p, &metrics).map_err(|e| Error::io(&p, e))?;
    }
    Ok(FitOutcome { state, metrics, losses })
}

/// Loads the training split named by `data.manifest` and trains on it.
pub fn fit<T: Scalar>(cfg: TrainConfig) -> Result<FitOutcome<T>> {
    let cfg = cfg.finish()?;
    let path = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::invalid("data.manifest", "not set"))?;
    let data = load_training_data(&path, &cfg)?;
    fit_on(cfg, &data)
}

/// Training split of a manifest, checked against the model's class count.
pub fn load_training_data<T: Scalar>(path: &Path, cfg: &TrainConfig) -> Result<Vec<LabeledImage<T>>> {
    let manifest = load_manifest(path)?;
    if manifest.num_classes != cfg.model.num_classes {
        return Err(Error::ConfigMismatch {
            found: format!("dataset K={}", manifest.num_classes),
            expected: format!("model.num_classes={}", cfg.model.num_classes),
        });
    }
    let dom = manifest.train_domain()?;
    manifest.load_split(Split::Train, &dom)
}
