//! Miniature mask-classification segmenter.
//!
//! Layouts: images `(3, H*W)`, patch tokens `(P, D_v)` with `P = (H/ps)(W/ps)`,
//! text features `(K, C)`, queries `(K, L)`, mask logits `(K, H*W)`, class
//! logits `(K, K)`. Query `k` is matched to class `k`.

mod decoder;
mod encoder;
pub mod params;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::prompts::{self, BatchStats, NormMode, PromptMode, PromptParams, RunningStats};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::scenegen::{LabelMap, IGNORE};
use crate::tape::{SparseMap, Tape, Var};
use crate::tensor::Tensor;

pub use decoder::{attention_mask, bilinear_upsample_map, PixelFeatureMap};
use decoder::{DecoderParams, PixelDecoderParams, QueryInitParams};
use encoder::{ImageEncoderParams, TextConstants, TextEncoderParams};
use params::{Bound, Init, PRef, ParamSet};

/// Default seed of the frozen text encoder.
pub const TEXT_SEED: u64 = 42;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub d_v: usize,
    pub d: usize,
    pub c: usize,
    pub c_tok: usize,
    pub l: usize,
    pub blocks: usize,
    pub context_tokens: usize,
    pub pixel_channels: usize,
    pub prompt_hidden: usize,
    pub text_layers: usize,
    pub text_seed: u64,
    /// Mask logits are predicted on a grid `mask_stride` times coarser than
    /// the image and upsampled for inference.
    pub mask_stride: usize,
    /// Initialization seed of every trainable parameter.
    pub seed: u64,
    /// Whether prediction uses image-conditioned prompts.
    pub domain_prompts: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 5,
            height: 64,
            width: 64,
            patch: 8,
            d_v: 64,
            d: 64,
            c: 32,
            c_tok: 32,
            l: 64,
            blocks: 3,
            context_tokens: 4,
            pixel_channels: 8,
            prompt_hidden: 32,
            text_layers: 2,
            text_seed: TEXT_SEED,
            mask_stride: 2,
            seed: 0,
            domain_prompts: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("model.num_classes", "must be >= 2"));
        }
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || self.height < self.patch {
            return Err(Error::invalid("model.height", format!("{} not a multiple of patch {}", self.height, self.patch)));
        }
        if !self.width.is_multiple_of(self.patch) || self.width < self.patch {
            return Err(Error::invalid("model.width", format!("{} not a multiple of patch {}", self.width, self.patch)));
        }
        if self.mask_stride == 0 || !self.patch.is_multiple_of(self.mask_stride) {
            return Err(Error::invalid(
                "model.mask_stride",
                format!("{} must divide patch {}", self.mask_stride, self.patch),
            ));
        }
        for (name, v) in [
            ("model.d_v", self.d_v),
            ("model.d", self.d),
            ("model.c", self.c),
            ("model.c_tok", self.c_tok),
            ("model.l", self.l),
            ("model.blocks", self.blocks),
            ("model.context_tokens", self.context_tokens),
            ("model.pixel_channels", self.pixel_channels),
            ("model.prompt_hidden", self.prompt_hidden),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be > 0"));
            }
        }
        if !self.d_v.is_multiple_of(2) {
            return Err(Error::invalid("model.d_v", "must be even"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// `(rows, cols)` of the mask-logit grid.
    pub fn mask_size(&self) -> (usize, usize) {
        (self.height / self.mask_stride, self.width / self.mask_stride)
    }

    pub fn mask_pixels(&self) -> usize {
        let (h, w) = self.mask_size();
        h * w
    }
}

/// Patch tokens and class token of one image.
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatures {
    /// `(P, D_v)`
    pub tokens: Var,
    /// `(1, D_v)`
    pub class_token: Var,
}

/// `(K, C)` per-class text features.
#[derive(Clone, Copy, Debug)]
pub struct TextFeatureSet {
    pub t: Var,
}

/// `(K, L)` queries; row `k` belongs to class `k`.
#[derive(Clone, Copy, Debug)]
pub struct QuerySet {
    pub q: Var,
}

#[derive(Clone, Debug)]
pub struct BlockOutput {
    /// `(K, H*W)`
    pub mask_logits: Var,
    /// `(K, K)`
    pub class_logits: Var,
    /// Patch mask the block attended with; `None` for unmasked attention.
    pub attn_mask: Option<Arc<Vec<bool>>>,
    /// `(K, D)` attention readout before the output projection.
    pub readout: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderTrace {
    pub blocks: Vec<BlockOutput>,
    /// `(K, D)` mask embeddings of the last block.
    pub mask_embed: Var,
}

/// Concrete tensors of a [`DecoderTrace`].
#[derive(Clone, Debug, PartialEq)]
pub struct TraceValues<T> {
    pub mask_logits: Vec<Tensor<T>>,
    pub class_logits: Vec<Tensor<T>>,
}

impl DecoderTrace {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> TraceValues<T> {
        TraceValues {
            mask_logits: self.blocks.iter().map(|b| tape.value(b.mask_logits).clone()).collect(),
            class_logits: self.blocks.iter().map(|b| tape.value(b.class_logits).clone()).collect(),
        }
    }
}

/// Everything one batched forward pass produces.
pub struct BatchForward<T> {
    pub features: Vec<ImageFeatures>,
    /// `(N, D_v)` class tokens of the frozen encoder copy.
    pub frozen_cls: Tensor<T>,
    /// `(N, C_tok)` domain embeddings; `None` for fixed prompts.
    pub pi: Option<Var>,
    pub text: Vec<TextFeatureSet>,
    /// Text features of the frozen template prompt.
    pub template: TextFeatureSet,
    pub traces: Vec<DecoderTrace>,
    pub batch_stats: Option<BatchStats<T>>,
}

#[derive(Clone, Debug)]
pub struct SegNet<T> {
    pub cfg: ModelConfig,
    pub train: ParamSet<T>,
    pub frozen: ParamSet<T>,
    /// Running normalization statistics of the prompt generator.
    pub bn: RunningStats<T>,
    image: ImageEncoderParams,
    frozen_image: ImageEncoderParams,
    text: TextEncoderParams,
    pixel: PixelDecoderParams,
    query: QueryInitParams,
    decoder: DecoderParams,
    pub(crate) prompt: PromptParams,
    pub(crate) w_vl: PRef,
    text_consts: TextConstants<T>,
    pos: Tensor<T>,
    up: Arc<SparseMap<T>>,
    up_full: Arc<SparseMap<T>>,
}

impl<T: Scalar> SegNet<T> {
    /// Deterministic construction: every component draws from its own named
    /// stream, so the frozen encoder copy equals the trainable encoder at init.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut train = ParamSet::default();
        let mut frozen = ParamSet::default();
        let c = &cfg;
        let patch_dim = 3 * c.patch * c.patch;
        let image = ImageEncoderParams::init(
            &mut make_init(c.seed, "init:image", "image", false, &mut train, &mut frozen),
            patch_dim,
            c.d_v,
        );
        let frozen_image = ImageEncoderParams::init(
            &mut make_init(c.seed, "init:image", "frozen_image", true, &mut train, &mut frozen),
            patch_dim,
            c.d_v,
        );
        let text = TextEncoderParams::init(
            &mut make_init(c.text_seed, "init:text", "text", true, &mut train, &mut frozen),
            c.num_classes,
            c.context_tokens,
            c.c_tok,
            c.c,
            c.text_layers,
        );
        let template = match text.template {
            PRef::Frozen(i) => frozen.tensors()[i].clone(),
            PRef::Train(_) => unreachable!("template prompt is frozen"),
        };
        let pixel = PixelDecoderParams::init(
            &mut make_init(c.seed, "init:pixel", "pixel", false, &mut train, &mut frozen),
            c.d_v,
            c.d,
            c.c,
            c.pixel_channels,
        );
        let query = QueryInitParams::init(
            &mut make_init(c.seed, "init:query", "query", false, &mut train, &mut frozen),
            c.c,
            c.l,
        );
        let decoder = DecoderParams::init(
            &mut make_init(c.seed, "init:decoder", "decoder", false, &mut train, &mut frozen),
            c.l,
            c.d,
            c.num_classes,
            c.blocks,
        );
        let prompt = PromptParams::init(
            &mut make_init(c.seed, "init:prompt", "prompt_gen", false, &mut train, &mut frozen),
            &template,
            c.d_v,
            c.prompt_hidden,
            c.c_tok,
        );
        let w_vl = make_init(c.seed, "init:vl", "reg", false, &mut train, &mut frozen).weight("w_vl", c.d_v, c.c);

        let text_consts = TextConstants::new(&text, frozen.tensors(), c.num_classes, c.context_tokens, c.c_tok);
        let (gh, gw) = c.grid();
        let pos = encoder::grid_position_code(gh, gw, c.d_v, 0.5);
        let (mh, mw) = c.mask_size();
        let up = Arc::new(bilinear_upsample_map(gh, gw, mh, mw));
        let up_full = Arc::new(bilinear_upsample_map(mh, mw, c.height, c.width));
        Ok(SegNet {
            bn: RunningStats::new(c.d_v),
            cfg,
            train,
            frozen,
            image,
            frozen_image,
            text,
            pixel,
            query,
            decoder,
            prompt,
            w_vl,
            text_consts,
            pos,
            up,
            up_full,
        })
    }
}

fn make_init<'a, T: Scalar>(
    seed: u64,
    tag: &str,
    prefix: &str,
    freeze: bool,
    train: &'a mut ParamSet<T>,
    frozen: &'a mut ParamSet<T>,
) -> Init<'a, T> {
    Init {
        rng: stream(seed, tag),
        train,
        frozen,
        prefix: prefix.to_string(),
        freeze,
    }
}

impl<T: Scalar> SegNet<T> {
    /// Places all parameters on `tape`; with `trainable = false` nothing
    /// receives a gradient.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound::new(tape, &self.train, &self.frozen, trainable)
    }

    pub fn upsample_map(&self) -> &Arc<SparseMap<T>> {
        &self.up
    }

    fn check_image(&self, x: &Tensor<T>) -> Result<()> {
        let c = &self.cfg;
        if x.shape() != (3, c.pixels()) {
            return Err(Error::invalid(
                "image",
                format!("shape {:?}, model expects (3, {}x{})", x.shape(), c.height, c.width),
            ));
        }
        Ok(())
    }

    fn encode_with(&self, tape: &mut Tape<T>, b: &Bound, p: &ImageEncoderParams, x: &Tensor<T>) -> Result<ImageFeatures> {
        self.check_image(x)?;
        let c = &self.cfg;
        let patches = encoder::patchify(x, c.height, c.width, c.patch);
        let (tokens, class_token) = encoder::encode_patches(tape, b, p, &patches, &self.pos);
        Ok(ImageFeatures { tokens, class_token })
    }

    /// Trainable image encoder.
    pub fn encode_image(&self, tape: &mut Tape<T>, b: &Bound, x: &Tensor<T>) -> Result<ImageFeatures> {
        self.encode_with(tape, b, &self.image, x)
    }

    /// Frozen encoder copy on `tape`; its outputs never carry gradients.
    pub fn encode_image_frozen(&self, tape: &mut Tape<T>, b: &Bound, x: &Tensor<T>) -> Result<ImageFeatures> {
        self.encode_with(tape, b, &self.frozen_image, x)
    }

    /// `(N, D_v)` frozen class tokens, evaluated off-tape.
    pub fn frozen_class_tokens(&self, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let mut data = Vec::with_capacity(images.len() * self.cfg.d_v);
        for x in images {
            let f = self.encode_image_frozen(&mut tape, &b, x)?;
            data.extend_from_slice(tape.value(f.class_token).data());
        }
        Tensor::from_vec(images.len(), self.cfg.d_v, data)
    }

    /// Frozen text encoder applied to an `(M, C_tok)` prompt.
    pub fn encode_text(&self, tape: &mut Tape<T>, b: &Bound, prompt: Var) -> Result<TextFeatureSet> {
        let want = (self.cfg.context_tokens, self.cfg.c_tok);
        if tape.value(prompt).shape() != want {
            return Err(Error::invalid("prompt", format!("shape {:?}, expected {want:?}", tape.value(prompt).shape())));
        }
        Ok(TextFeatureSet {
            t: encoder::encode_prompt(tape, b, &self.text, &self.text_consts, prompt),
        })
    }

    /// Text features of the frozen template prompt.
    pub fn template_features(&self, tape: &mut Tape<T>, b: &Bound) -> TextFeatureSet {
        let p = b.get(self.text.template);
        TextFeatureSet {
            t: encoder::encode_prompt(tape, b, &self.text, &self.text_consts, p),
        }
    }

    /// Patch tokens projected into the text feature space, `(P, C)`.
    pub fn project_visual(&self, tape: &mut Tape<T>, b: &Bound, tokens: Var) -> Var {
        tape.matmul(tokens, b.get(self.w_vl))
    }

    /// The learnable context prompt `(M, C_tok)`.
    pub fn context_prompt(&self, b: &Bound) -> Var {
        b.get(self.prompt.context)
    }

    pub fn pixel_decode(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        feats: &ImageFeatures,
        t: &TextFeatureSet,
        image: &Tensor<T>,
    ) -> Result<PixelFeatureMap> {
        self.check_image(image)?;
        let c = &self.cfg;
        if tape.value(t.t).shape() != (c.num_classes, c.c) {
            return Err(Error::shape("pixel_decode", format!("text features {:?}", tape.value(t.t).shape())));
        }
        let (h, w) = (c.height, c.width);
        let pooled = decoder::average_pool(image, h, w, c.mask_stride);
        Ok(decoder::pixel_decode(tape, b, &self.pixel, feats.tokens, t.t, &pooled))
    }

    /// Textual query initialization through a two-layer perceptron.
    pub fn init_queries(&self, tape: &mut Tape<T>, b: &Bound, t: &TextFeatureSet) -> QuerySet {
        QuerySet {
            q: decoder::init_queries(tape, b, &self.query, t.t),
        }
    }

    /// Masked cross-attention readout of block `s` (0-based).
    pub fn attend(&self, tape: &mut Tape<T>, b: &Bound, s: usize, q: Var, low: Var, mask: Option<Arc<Vec<bool>>>) -> Var {
        decoder::attend(tape, b, &self.decoder.blocks[s], q, low, mask)
    }

    pub fn transformer_decode(&self, tape: &mut Tape<T>, b: &Bound, z: &PixelFeatureMap, q0: &QuerySet) -> DecoderTrace {
        let c = &self.cfg;
        let mut q = q0.q;
        let mut blocks: Vec<BlockOutput> = Vec::with_capacity(c.blocks);
        let mut mask_embed = q;
        for bp in &self.decoder.blocks {
            let attn_mask = blocks
                .last()
                .map(|prev| {
                    let (mh, mw) = c.mask_size();
                    Arc::new(attention_mask(tape.value(prev.mask_logits), mh, mw, c.patch / c.mask_stride))
                });
            let readout = decoder::attend(tape, b, bp, q, z.low, attn_mask.clone());
            q = decoder::block_update(tape, b, bp, q, readout);
            let (class_logits, m) = decoder::heads(tape, b, &self.decoder.head, q);
            let mask_logits = z.project(tape, m, &self.up);
            mask_embed = m;
            blocks.push(BlockOutput {
                mask_logits,
                class_logits,
                attn_mask,
                readout,
            });
        }
        DecoderTrace { blocks, mask_embed }
    }

    /// Forward pass over a batch of images.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        images: &[&Tensor<T>],
        mode: PromptMode,
        norm: NormMode,
    ) -> Result<BatchForward<T>> {
        if images.is_empty() {
            return Err(Error::invalid("batch", "no images"));
        }
        let frozen_cls = self.frozen_class_tokens(images)?;
        let template = self.template_features(tape, b);
        let context = self.context_prompt(b);
        let (pi, batch_stats) = match mode {
            PromptMode::Fixed => (None, None),
            PromptMode::DomainAware => {
                let (pi, stats) = prompts::domain_embedding(tape, self, b, &frozen_cls, norm)?;
                (Some(pi), stats)
            }
            PromptMode::ClampedZero => {
                let (pi, stats) = prompts::domain_embedding(tape, self, b, &frozen_cls, norm)?;
                let zeros = Tensor::zeros(tape.value(pi).rows(), tape.value(pi).cols());
                (Some(tape.constant(zeros)), stats)
            }
        };
        let shared = match pi {
            None => Some(self.encode_text(tape, b, context)?),
            Some(_) => None,
        };
        let mut features = Vec::with_capacity(images.len());
        let mut text = Vec::with_capacity(images.len());
        let mut traces = Vec::with_capacity(images.len());
        for (i, x) in images.iter().enumerate() {
            let t = match (pi, shared) {
                (_, Some(t)) => t,
                (Some(pi), None) => {
                    let row = tape.slice_rows(pi, i, i + 1);
                    let prompt = prompts::compose_prompt(tape, context, row)?;
                    self.encode_text(tape, b, prompt)?
                }
                (None, None) => unreachable!(),
            };
            let f = self.encode_image(tape, b, x)?;
            let z = self.pixel_decode(tape, b, &f, &t, x)?;
            let q0 = self.init_queries(tape, b, &t);
            traces.push(self.transformer_decode(tape, b, &z, &q0));
            features.push(f);
            text.push(t);
        }
        Ok(BatchForward {
            features,
            frozen_cls,
            pi,
            text,
            template,
            traces,
            batch_stats,
        })
    }

    /// Bilinear upsampling of `(N, mask grid)` maps to `(N, H*W)`.
    pub fn upsample_to_image(&self, maps: &Tensor<T>) -> Result<Tensor<T>> {
        if maps.cols() != self.cfg.mask_pixels() {
            return Err(Error::shape("upsample_to_image", format!("{:?} for a {:?} grid", maps.shape(), self.cfg.mask_size())));
        }
        if self.cfg.mask_stride == 1 {
            return Ok(maps.clone());
        }
        let mut tape = Tape::new();
        let x = tape.constant(maps.clone());
        let y = tape.sparse(x, self.up_full.clone());
        Ok(tape.value(y).clone())
    }

    /// Labels on the mask grid by majority vote over each `stride×stride`
    /// block; blocks with no labeled pixel become ignored.
    pub fn mask_labels(&self, label: &LabelMap) -> Result<LabelMap> {
        let c = &self.cfg;
        if (label.height, label.width) != (c.height, c.width) {
            return Err(Error::invalid(
                "label",
                format!("{}x{}, model expects {}x{}", label.height, label.width, c.height, c.width),
            ));
        }
        let (mh, mw) = c.mask_size();
        let votes = crate::losses::downsample_labels(label, c.mask_stride, c.num_classes)?;
        LabelMap::new(mh, mw, votes.into_iter().map(|v| v.map_or(IGNORE, |k| k as u8)).collect())
    }

    /// Semantic scores `(K, H*W)` of the last block, inference mode.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let mode = if self.cfg.domain_prompts {
            PromptMode::DomainAware
        } else {
            PromptMode::Fixed
        };
        let out = self.forward(&mut tape, &b, &[image], mode, NormMode::Running)?;
        let y = assemble_semantic_map(&out.traces[0].values(&tape), self.cfg.blocks)?;
        self.upsample_to_image(&y)
    }

    /// Per-pixel argmax of [`SegNet::predict`].
    pub fn predict_labels(&self, image: &Tensor<T>) -> Result<Vec<u8>> {
        let y = self.predict(image)?;
        Ok(y.argmax_cols().into_iter().map(|k| k as u8).collect())
    }
}

/// `ŷ[k] = Σ_q softmax(ĉ_q)_k · σ(mask_q)` for 1-based `block`.
pub fn assemble_semantic_map<T: Scalar>(trace: &TraceValues<T>, block: usize) -> Result<Tensor<T>> {
    let s = trace.mask_logits.len();
    if block == 0 || block > s {
        return Err(Error::invalid("block", format!("{block} outside 1..={s}")));
    }
    let c = &trace.class_logits[block - 1];
    let m = &trace.mask_logits[block - 1];
    let mut tape = Tape::new();
    let cv = tape.constant(c.clone());
    let mv = tape.constant(m.clone());
    let y = assemble_on_tape(&mut tape, cv, mv);
    Ok(tape.value(y).clone())
}

/// Differentiable form of [`assemble_semantic_map`].
pub fn assemble_on_tape<T: Scalar>(tape: &mut Tape<T>, class_logits: Var, mask_logits: Var) -> Var {
    let p = tape.softmax_rows(class_logits);
    let pt = tape.transpose(p);
    let s = tape.sigmoid(mask_logits);
    tape.matmul(pt, s)
}
