//! Domain-adaptive stereo matching at desk scale.
//!
//! [`tensor`] is a small reverse-mode autodiff engine. The adaptation
//! mechanisms live in [`color`] (progressive LAB color transfer), [`cost`]
//! (parameter-free cost normalization) and [`recon`] (occlusion-aware
//! self-supervised reconstruction). [`model`] holds the toy correlation
//! network; [`data`], [`train`] and [`ablation`] form the harness.

pub mod ablation;
pub mod error;
pub mod checkpoint;
pub mod color;
pub mod cost;
pub mod data;
pub mod model;
pub mod recon;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor4, Var};
