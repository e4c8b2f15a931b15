//! Numerical laboratory for approximately normalized transformers.
//!
//! The crate bundles three interchangeable transformer variants
//! ([`arch::Variant::GptPlus`], [`arch::Variant::Ngpt`],
//! [`arch::Variant::Angpt`]) on top of a small reverse-mode autodiff
//! engine ([`ndmath`]), the calculus of scalar normalization factors
//! ([`normfactor`]), Adam/AdamW with row-norm constraints ([`optim`]),
//! byte-level data plumbing ([`data`]) and the diagnostics used to check
//! norm invariants during training ([`instrument`]).
//!
//! The `anlab` binary ([`cli`]) wires everything into reproducible,
//! file-driven experiments.

pub mod arch;
pub mod cli;
pub mod data;
pub mod error;
pub mod instrument;
pub mod ndmath;
pub mod normfactor;
pub mod optim;

pub use error::{Error, Result};
