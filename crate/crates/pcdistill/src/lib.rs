//! Progressive consistency distillation for token-compressed toy multimodal
//! transformers.
//!
//! The crate bundles four related pieces:
//!
//! * a small f64 reverse-mode autodiff engine ([`tensor`]) and a toy
//!   multimodal decoder built on it ([`model`]);
//! * pluggable visual-token compressors ([`compress`]) and the progressive
//!   compression schedulers that drive them during training ([`schedule`],
//!   [`distill`]);
//! * a numerical lab certifying the scalar-path total-variation bound that
//!   motivates progressive schedules ([`scalarlab`]);
//! * an analytic prefill FLOPs / KV-cache estimator ([`effmodel`]) and an
//!   experiment harness with a synthetic grid task ([`harness`]).

pub mod compress;
pub mod config;
pub mod distill;
pub mod effmodel;
pub mod error;
pub mod harness;
pub mod model;
pub mod scalarlab;
pub mod schedule;
pub mod selfcheck;
pub mod tensor;

pub use error::{Error, Result};
