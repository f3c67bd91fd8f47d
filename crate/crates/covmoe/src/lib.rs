//! Covariate-guided sparse mixture-of-experts forecasting, desk scale.
//!
//! The crate is organized around a small dense numeric kernel with
//! tape-based reverse-mode gradients ([`numkit`]), a data pipeline for
//! hourly multivariate series ([`datahub`]), the covariate-aware sparse
//! expert layer itself ([`smoe`]) sandwiched between a projection
//! tokenizer ([`tokenizer`]) and a frozen quantile-forecast head
//! ([`backbone`]), a deterministic trainer ([`trainer`]), forecast
//! metrics and robustness harnesses ([`evalkit`]), and an in-process
//! federated simulator with exact communication accounting ([`fedsim`]).
//!
//! Everything is seeded: identical seeds and configs reproduce every
//! report byte for byte.

pub mod backbone;
pub mod datahub;
pub mod error;
pub mod evalkit;
pub mod fedsim;
pub mod model;
pub mod numkit;
pub mod smoe;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use numkit::{GradTape, Matrix, Rng, VarId};
