//! Dual-level cross-modal differential attention for 3D visual grounding,
//! built on a small deterministic f64 tensor tape.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, the gradient tape, gradient checking, dumps.
//! - [`diffattn`]: multi-head cross-modal differential attention.
//! - [`plda`]: point-level bidirectional attention and multi-scale fusion.
//! - [`clda`]: cluster spatial-relation modeling and the filter-then-enhance blocks.
//! - [`geomloss`]: box IoU, Dice and the box/mask conversions.
//! - [`dgtl`]: task weighting, conflict penalty and geometry consistency.
//! - [`model`]: the toy grounding network, training and evaluation.
//! - [`scenes`]: synthetic scenes, referring expressions and metrics.
//! - [`implicit`]: rule-first implicit-relation filtering with an LLM fallback.
//! - [`config`]: flat key=value run configuration.
//! - [`gradsuite`]: central-difference checks over every differentiable part.

pub mod clda;
pub mod config;
pub mod dgtl;
pub mod diffattn;
pub mod geomloss;
pub mod gradsuite;
pub mod implicit;
pub mod model;
pub mod optim;
pub mod params;
pub mod plda;
pub mod rng;
pub mod scenes;
pub mod tensor;

pub use geomloss::{Box3D, PointMask};
pub use params::{Binding, ParamId, ParamStore};
pub use rng::SplitMix64;
pub use tensor::{Tape, Tensor, TensorError, Var};
