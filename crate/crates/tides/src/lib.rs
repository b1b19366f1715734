//! TIDES: a selective state-space sequence model whose input-dependence
//! lives on the diagonal state matrix (decay rates and input/output
//! projections) while the discretization timestep keeps its physical
//! meaning, so irregular observation times are handled by the
//! discretization rule rather than learned from data.
//!
//! The crate contains:
//!
//! - [`autodiff`]: a minimal reverse-mode AD engine over dense `f64`
//!   tensors, with Adam and finite-difference checking;
//! - [`ssm`]: diagonal spectra, selectivity heads, ZOH/bilinear
//!   discretization with physical timesteps, and the parallel scan;
//! - [`block`]: the residual sequence-model block (BatchNorm, SSM, GELU,
//!   GLU, dropout) and full classification/regression models;
//! - [`flash`]: the Fading Flash diagnostic: data generator, closed-form
//!   targets, three parameter-matched toy models, training and the
//!   time-dilation evaluation grid;
//! - [`dropharness`]: random-drop subsampling with preserved timestamps
//!   and the six-variant input-dependence sweep;
//! - [`cli`]: config parsing, run manifests, CSV/SVG emission, the
//!   verification suite, and a linear-scaling micro-benchmark.
//!
//! See the `examples/` directory for one runnable entry point per
//! capability, and the `tides` binary for the batch experiment drivers.

pub mod autodiff;
pub mod error;
pub mod flash;
pub mod rng;
pub mod block;
pub mod ssm;

pub use error::{Error, Result};
