//! Learned caption evaluation from intrinsic sentence vectors.
//!
//! A GRU auto-encoder is trained to reconstruct reference captions, with an
//! optional semantic term (in-batch margin or triplet loss) shaping the
//! encoder's final state. A candidate caption is scored by the cosine of its
//! intrinsic vector with each reference's, pooled over the top `k`.
//!
//! Numeric code is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix the scalar type.

pub mod autodiff;
pub mod baselines;
pub mod model;
pub mod objectives;
pub mod scalar;
pub mod scoring;
pub mod stats;
pub mod text;
pub mod trainer;

pub use scalar::Real;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type AutoEncoder64 = model::AutoEncoder<f64>;
pub type AutoEncoder32 = model::AutoEncoder<f32>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
