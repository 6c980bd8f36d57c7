//! Conditional optimal transport (COT) with MMD-regularized transport plans.
//!
//! The crate is organised bottom-up:
//!
//! * [`kernels`]: characteristic kernels, Gram matrices and V-statistic MMD².
//! * [`diffengine`]: a small reverse-mode autodiff tape over dense matrices.
//! * [`models`]: MLP-backed implicit generators and explicit softmax conditionals.
//! * [`objectives`]: every COT loss variant plus the Adam training loop.
//! * [`synthdata`]: seeded samplers for the synthetic verification settings.
//! * [`oracles`]: closed-form Gaussian OT, analytic barycenters, exact assignment OT.
//! * [`harness`]: experiment runners, CSV reports and SVG plots behind the `cot` CLI.

pub mod diffengine;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod models;
pub mod objectives;
pub mod oracles;
pub mod rng;
pub mod synthdata;

pub use error::{CotError, Result};
