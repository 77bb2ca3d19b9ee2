//! Solvers for the one-dimensional semiconductor Boltzmann equation and its
//! Boltzmann–Poisson coupling, from the kinetic regime down to the
//! drift-diffusion limit.
//!
//! The crate is `no_std` (with `alloc`) and contains no I/O. It provides:
//!
//! - [`spectral`]: Gauss–Hermite quadrature, the renormalized Hermite basis,
//!   the collision operator and the diffusion coefficient.
//! - [`reference`]: classical solvers (micro-macro asymptotic-preserving
//!   scheme, implicit drift-diffusion, 1D Poisson).
//! - [`net`], [`tape`], [`bundle`]: tanh networks with exact input
//!   derivatives, and a reverse-mode tape that differentiates losses built on
//!   top of them.
//! - [`collocation`], [`losses`]: collocation grids and every physics-informed
//!   empirical loss (PINN, APNN, bi-fidelity APNN, diffusion, data, Poisson).
//! - [`optim`], [`train`]: Adam, learning-rate schedules and the forward and
//!   inverse training workflows.
#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod bundle;
pub mod collocation;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod net;
pub mod optim;
pub mod problem;
pub mod reference;
pub mod spectral;
pub mod tape;
pub mod train;

pub use bundle::{Method, NetSlot, NetworkBundle};
pub use collocation::{CollocationSet, ObservationSet, PenaltyWeights};
pub use error::{Error, Result};
pub use losses::LossBreakdown;
pub use net::{DenseNet, OutputTransform};
pub use optim::{AdamState, LrSchedule};
pub use problem::{ProblemKind, ProblemSpec};
pub use reference::{KineticField, PoissonProblem, SpatialGrid};
pub use spectral::HermiteBasis;
pub use train::{TrainingLog, TrainingSettings};
