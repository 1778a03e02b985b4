//! Decoupled dual-stream audio-visual active speaker detection.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`graph`], [`params`]: a small `f64` tensor type and a
//!   tape-based reverse-mode differentiation engine.
//! - [`attention`]: self- and cross-attention interaction layers.
//! - [`encoder`]: toy visual/audio encoders and bidirectional cross-modal fusion.
//! - [`dual_stream`]: speaker and temporal interaction streams, their mutual
//!   cross-attention, and the scoring head.
//! - [`voice_gate`]: audio-only speech confidence and the score-correction rule.
//! - [`losses`], [`model`], [`optim`], [`train`]: objectives and training.
//! - [`data`]: seeded synthetic multi-speaker scenarios and the corpus format.
//! - [`eval`]: average precision, per-speaker F1, false-positive accounting.
//! - [`checkpoint`], [`config`], [`gradcheck`], [`cli`]: operator tooling.

pub mod attention;
mod binio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dual_stream;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod voice_gate;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, ParamTensor};
pub use tensor::{AxisRole, Tensor};
