//! Continuous-depth residual networks whose residual vector fields live in a
//! random-Fourier-feature approximation of a Matérn (or Gaussian) RKHS.
//!
//! The crate is organised bottom-up:
//!
//! * [`kernels`]: the Matérn/Gaussian kernel family, its admissibility
//!   constant and decay radii.
//! * [`rff`]: sampled frequency banks and the finite-dimensional feature map.
//! * [`embedding`]: the fixed input/output matrices `A` and `B`.
//! * [`flow`]: Euler discretisation of the flow, empirical risk and exact
//!   discrete-adjoint gradients.
//! * [`diagnostics`]: kernel spectra, Polyak-Lojasiewicz constants and the
//!   local convergence condition.
//! * [`trainer`]: full-batch gradient descent with backtracking.
//! * [`experiment`]: synthetic data, sweeps and the diagnostics/self-test
//!   drivers used by the command line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod diagnostics;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod io;
pub mod kernels;
pub mod quadrature;
pub mod rff;
pub mod trainer;

pub use diagnostics::{KernelSource, PlContext, PlReport};
pub use embedding::{EmbeddingPair, EmbeddingVariant};
pub use error::{Error, Result};
pub use flow::{ControlPath, Dataset, FlowModel, Gradient, TrajectoryBundle};
pub use kernels::KernelSpec;
pub use rff::FeatureBank;
pub use trainer::{TrainConfig, TrainLog, TrainOutcome, TrainStatus};
