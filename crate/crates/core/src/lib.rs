//! Domain-generalized semantic segmentation on procedural scenes: a small
//! mask-classification network with image-conditioned prompts, texture
//! perturbation, consistency and contrastive losses, and the tooling to train
//! and evaluate it. Everything is generic over `f32`/`f64`.

pub mod ablation;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod perturb;
pub mod prompts;
pub mod rng;
pub mod scalar;
pub mod scenegen;
pub mod segnet;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type SegNet32 = segnet::SegNet<f32>;
pub type SegNet64 = segnet::SegNet<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
pub type LabeledImage32 = scenegen::LabeledImage<f32>;
pub type LabeledImage64 = scenegen::LabeledImage<f64>;
