//! Flat `key = value` training configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Interval values such
//! as `perturb.brightness` are written `lo,hi`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::perturb::PerturbRanges;
use crate::segnet::ModelConfig;

/// Feature pair compared by the contrastive objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContraFeatures {
    /// Domain embeddings against domain embeddings.
    Embedding,
    /// Flattened text features against text features.
    Text,
    /// Mean text feature against the projected class token.
    TextVisual,
}

impl ContraFeatures {
    pub fn name(self) -> &'static str {
        match self {
            ContraFeatures::Embedding => "pi",
            ContraFeatures::Text => "text",
            ContraFeatures::TextVisual => "text-visual",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "pi" => Some(ContraFeatures::Embedding),
            "text" => Some(ContraFeatures::Text),
            "text-visual" => Some(ContraFeatures::TextVisual),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub perturb: bool,
    pub cons: bool,
    pub contra: bool,
    pub seg_on_aug: bool,
    pub contra_features: ContraFeatures,
    /// Zero disables periodic checkpoints; a final one is always written.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub weights: LossWeights,
    pub ranges: PerturbRanges,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch: 4,
            base_lr: 1e-3,
            warmup_iters: 150,
            seed: 0,
            weight_decay: 0.01,
            perturb: true,
            cons: true,
            contra: true,
            seg_on_aug: true,
            contra_features: ContraFeatures::Embedding,
            checkpoint_every: 0,
            checkpoint_dir: None,
            manifest: None,
            weights: LossWeights::default(),
            ranges: PerturbRanges::default(),
            model: ModelConfig::default(),
        }
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::invalid(key, format!("cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::invalid(key, format!("expected a boolean, got {v:?}"))),
    }
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::invalid(key, format!("expected lo,hi, got {v:?}")))?;
    Ok((parse_num(key, a.trim())?, parse_num(key, b.trim())?))
}

impl TrainConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let w = &mut self.weights;
        let r = &mut self.ranges;
        match key.trim() {
            "train.iterations" => self.iterations = parse_num(key, v)?,
            "train.batch" => self.batch = parse_num(key, v)?,
            "train.lr" => self.base_lr = parse_num(key, v)?,
            "train.warmup" => self.warmup_iters = parse_num(key, v)?,
            "train.seed" => self.seed = parse_num(key, v)?,
            "train.weight_decay" => self.weight_decay = parse_num(key, v)?,
            "train.perturb" => self.perturb = parse_bool(key, v)?,
            "train.cons" => self.cons = parse_bool(key, v)?,
            "train.contra" => self.contra = parse_bool(key, v)?,
            "train.seg_on_aug" => self.seg_on_aug = parse_bool(key, v)?,
            "train.contra_features" => {
                self.contra_features = ContraFeatures::parse(v)
                    .ok_or_else(|| Error::invalid(key, format!("expected pi, text or text-visual, got {v:?}")))?
            }
            "train.checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "train.checkpoint_dir" => self.checkpoint_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "loss.reg" => w.reg = parse_num(key, v)?,
            "loss.contra" => w.contra = parse_num(key, v)?,
            "loss.cons" => w.cons = parse_num(key, v)?,
            "loss.mc" => w.mc = parse_num(key, v)?,
            "loss.cc" => w.cc = parse_num(key, v)?,
            "loss.bce" => w.bce = parse_num(key, v)?,
            "loss.dice" => w.dice = parse_num(key, v)?,
            "loss.tau" => w.tau = parse_num(key, v)?,
            "loss.tau_vl" => w.tau_vl = parse_num(key, v)?,
            "perturb.brightness" => r.brightness = parse_pair(key, v)?,
            "perturb.contrast" => r.contrast = parse_pair(key, v)?,
            "perturb.saturation" => r.saturation = parse_pair(key, v)?,
            "perturb.hue" => r.hue = parse_pair(key, v)?,
            "perturb.blur_sigma" => r.blur_sigma = parse_pair(key, v)?,
            "perturb.noise_sigma" => r.noise_sigma = parse_pair(key, v)?,
            "model.num_classes" => m.num_classes = parse_num(key, v)?,
            "model.height" => m.height = parse_num(key, v)?,
            "model.width" => m.width = parse_num(key, v)?,
            "model.patch" => m.patch = parse_num(key, v)?,
            "model.d_v" => m.d_v = parse_num(key, v)?,
            "model.d" => m.d = parse_num(key, v)?,
            "model.c" => m.c = parse_num(key, v)?,
            "model.c_tok" => m.c_tok = parse_num(key, v)?,
            "model.l" => m.l = parse_num(key, v)?,
            "model.blocks" => m.blocks = parse_num(key, v)?,
            "model.context_tokens" => m.context_tokens = parse_num(key, v)?,
            "model.pixel_channels" => m.pixel_channels = parse_num(key, v)?,
            "model.prompt_hidden" => m.prompt_hidden = parse_num(key, v)?,
            "model.text_layers" => m.text_layers = parse_num(key, v)?,
            "model.text_seed" => m.text_seed = parse_num(key, v)?,
            "model.mask_stride" => m.mask_stride = parse_num(key, v)?,
            "model.domain_prompts" => m.domain_prompts = parse_bool(key, v)?,
            other => return Err(Error::invalid(other, "unknown configuration key")),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::invalid("override", format!("expected key=value, got {kv:?}")))?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid("config", format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Ties the model seed to the training seed and validates.
    pub fn finish(mut self) -> Result<Self> {
        self.model.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::invalid("train.batch", format!("{} < 2", self.batch)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("train.lr", format!("{} must be > 0", self.base_lr)));
        }
        if self.warmup_iters > self.iterations {
            return Err(Error::invalid(
                "train.warmup",
                format!("{} exceeds train.iterations {}", self.warmup_iters, self.iterations),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("train.weight_decay", "must be finite and >= 0"));
        }
        if (self.cons || self.contra) && !self.perturb {
            return Err(Error::invalid(
                "train.perturb",
                "consistency and contrastive terms need perturbed samples",
            ));
        }
        if self.contra && self.contra_features == ContraFeatures::Embedding && !self.model.domain_prompts {
            return Err(Error::invalid("model.domain_prompts", "the contrastive term on embeddings needs domain prompts"));
        }
        self.weights.validate()?;
        self.ranges.validate()?;
        self.model.validate()
    }

    /// Canonical serialization covering every key; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let pair = |(a, b): (f64, f64)| format!("{a},{b}");
        let (m, w, r) = (&self.model, &self.weights, &self.ranges);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("train.iterations", self.iterations.to_string());
        kv("train.batch", self.batch.to_string());
        kv("train.lr", self.base_lr.to_string());
        kv("train.warmup", self.warmup_iters.to_string());
        kv("train.seed", self.seed.to_string());
        kv("train.weight_decay", self.weight_decay.to_string());
        kv("train.perturb", self.perturb.to_string());
        kv("train.cons", self.cons.to_string());
        kv("train.contra", self.contra.to_string());
        kv("train.seg_on_aug", self.seg_on_aug.to_string());
        kv("train.contra_features", self.contra_features.name().to_string());
        kv("train.checkpoint_every", self.checkpoint_every.to_string());
        kv("train.checkpoint_dir", path(&self.checkpoint_dir));
        kv("data.manifest", path(&self.manifest));
        kv("loss.reg", w.reg.to_string());
        kv("loss.contra", w.contra.to_string());
        kv("loss.cons", w.cons.to_string());
        kv("loss.mc", w.mc.to_string());
        kv("loss.cc", w.cc.to_string());
        kv("loss.bce", w.bce.to_string());
        kv("loss.dice", w.dice.to_string());
        kv("loss.tau", w.tau.to_string());
        kv("loss.tau_vl", w.tau_vl.to_string());
        kv("perturb.brightness", pair(r.brightness));
        kv("perturb.contrast", pair(r.contrast));
        kv("perturb.saturation", pair(r.saturation));
        kv("perturb.hue", pair(r.hue));
        kv("perturb.blur_sigma", pair(r.blur_sigma));
        kv("perturb.noise_sigma", pair(r.noise_sigma));
        kv("model.num_classes", m.num_classes.to_string());
        kv("model.height", m.height.to_string());
        kv("model.width", m.width.to_string());
        kv("model.patch", m.patch.to_string());
        kv("model.d_v", m.d_v.to_string());
        kv("model.d", m.d.to_string());
        kv("model.c", m.c.to_string());
        kv("model.c_tok", m.c_tok.to_string());
        kv("model.l", m.l.to_string());
        kv("model.blocks", m.blocks.to_string());
        kv("model.context_tokens", m.context_tokens.to_string());
        kv("model.pixel_channels", m.pixel_channels.to_string());
        kv("model.prompt_hidden", m.prompt_hidden.to_string());
        kv("model.text_layers", m.text_layers.to_string());
        kv("model.text_seed", m.text_seed.to_string());
        kv("model.mask_stride", m.mask_stride.to_string());
        kv("model.domain_prompts", m.domain_prompts.to_string());
        s
    }

    /// SHA-256 of [`TrainConfig::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
