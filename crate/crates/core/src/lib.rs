//! GenMark: a watermarking system that protects image subjects against
//! unauthorized subject-driven synthesis.
//!
//! A watermark generator and a binary detector are trained jointly on a large
//! clean corpus (phase 1). The generator produces an additive, perceptually
//! bounded pattern; the detector learns to spot it. Each protected subject then
//! fine-tunes a private copy of the detector on images synthesized from their
//! clean and watermarked originals (phase 2), so the detector recognizes the
//! watermark *as it survives synthesis*.
//!
//! The crate ships a desk-scale synthesis proxy (a toy diffusion model plus a
//! prompt-keyed content transform) standing in for real subject-driven
//! fine-tuning, an ingestion adapter for externally synthesized images, and an
//! evaluation harness covering the four knowledge scenarios, watermark
//! uniqueness, synthesis-quality impact, and forgery/removal countermeasures.
//!
//! All numeric code is generic over the scalar type via [`Scalar`]; `f32` is
//! the default for experiment runs, `f64` is used where tests want headroom.

pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod finetune;
pub mod image;
pub mod imagery;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pretrain;
pub mod registry;
pub mod seeds;
pub mod synthesis;
pub mod watermark;

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub use error::{Error, Result};

/// Floating-point scalar the whole pipeline is generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Tag stored in checkpoints so a file is never reinterpreted at the
    /// wrong width.
    const KIND: ScalarKind;
}

impl Scalar for f32 {
    const KIND: ScalarKind = ScalarKind::F32;
}
impl Scalar for f64 {
    const KIND: ScalarKind = ScalarKind::F64;
}

/// Scalar width marker used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScalarKind {
    F32,
    F64,
}

/// Shorthand for pulling an `f64` constant into the working scalar type.
#[inline]
pub fn sc<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 constant representable in scalar type")
}

/// Scalar used by experiment runs and the CLI.
pub type DefaultScalar = f32;

/// Concrete aliases for the default experiment scalar.
pub type Image32 = image::ImageTensor<f32>;
pub type Generator32 = watermark::GeneratorModel<f32>;
pub type Detector32 = watermark::DetectorModel<f32>;
pub type Extractor32 = metrics::FeatureExtractor<f32>;
