//! Learning optimal control through reduced Hamiltonian flows.
//!
//! The pipeline has two phases. Phase 1 fits a reduced Hamiltonian network
//! h and an adjoint predictor P so that the symplectic flow of h, started
//! from (q0, P(q0)), satisfies the boundary and consistency conditions of
//! the maximum principle. Phase 2 freezes those nets and trains a
//! variational autoencoder whose decoder is a second Hamiltonian net
//! integrated backwards in time, mapping terminal phase points to initial
//! ones through a Gaussian latent.
//!
//! Modules:
//! - [`autodiff`]: reverse-mode tape over small dense tensors.
//! - [`nets`]: multilayer perceptrons with tanh hidden layers, plain and
//!   on-tape evaluation, and an exact on-tape input gradient.
//! - [`dynamics`]: phase points, symplectic fields, fixed-step RK4 rollouts.
//! - [`environments`]: the four control problems (lq, cartpole, mountaincar,
//!   shape) behind one black-box interface.
//! - [`training`]: phase-1 and phase-2 losses, Adam, training loops.
//! - [`oracle`]: analytic LQ solution, cost evaluation under the true
//!   dynamics, direct trajectory optimization.
//! - [`checkpoint`], [`metrics`], [`render`]: serialized artifacts.
//! - [`cli`]: the `hamopt` command-line front end.
//!
//! The numeric core is generic over [`scalar::Scalar`]; the aliases below fix
//! the f64 instantiation used by every shipped artifact.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod dynamics;
pub mod environments;
pub mod error;
mod fmtnum;
pub mod metrics;
pub mod nets;
pub mod oracle;
pub mod render;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the shipped binaries and file formats.
pub type Real = f64;
/// Differentiation tape over [`Real`].
pub type Tape = autodiff::DiffTape<Real>;
/// Dense tensor over [`Real`].
pub type RealTensor = autodiff::Tensor<Real>;
/// Network over [`Real`].
pub type Net = nets::Mlp<Real>;
