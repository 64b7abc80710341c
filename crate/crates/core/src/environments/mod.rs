//! The four control problems, each exposed as a set of black boxes:
//! dynamics f(q, v), state running cost l1(q), terminal cost g(q) and its
//! gradient, an initial-state sampler, and a renderer.
//!
//! Dynamics must be affine in the control, f(q, v) = f0(q) + f_u(q) v,
//! which is what makes the optimal control recoverable in closed form
//! from the costate. Nothing here assumes a particular f_u shape though;
//! callers probe it (see [`crate::dynamics::extract_control_jacobian`]).
//!
//! Every operation also has an on-tape variant so the direct trajectory
//! optimizer and the training losses can differentiate through it.

pub mod cart_pole;
pub mod lq;
pub mod mountain_car;
pub mod shape;

pub use cart_pole::CartPole;
pub use lq::Lq;
pub use mountain_car::MountainCar;
pub use shape::ShapeOpt;

use crate::autodiff::{DiffTape, NodeId};
use crate::error::{Error, Result};
use crate::render::Frame;
use crate::scalar::Scalar;

/// A control problem. `q` vectors must have `state_dim()` entries and `v`
/// vectors `control_dim()`; implementations reject anything else with
/// `ShapeError`.
pub trait Environment<S: Scalar> {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// Dynamics black box: q-dot = f(q, v), affine in v.
    fn flow(&self, q: &[S], v: &[S]) -> Result<Vec<S>>;

    /// State part of the running cost, l1(q) >= 0 where defined.
    fn running_cost(&self, q: &[S]) -> Result<S>;

    /// Terminal cost g(q).
    fn terminal_cost(&self, q: &[S]) -> Result<S>;

    /// Gradient of the terminal cost, used as the costate boundary target.
    fn grad_terminal(&self, q: &[S]) -> Result<Vec<S>>;

    /// Deterministic initial-state draw for a seed.
    fn sample_q0(&self, seed: u64) -> Result<Vec<S>>;

    fn render(&self, q: &[S]) -> Result<Frame>;

    /// Dynamics as tape operations; `q` is a (batch, n) node and `v` a
    /// (batch, m) node.
    fn flow_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId, v: NodeId) -> Result<NodeId>;

    /// Running cost as tape operations, (batch, n) -> (batch, 1).
    fn running_cost_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId>;

    /// Terminal cost as tape operations, (batch, n) -> (batch, 1).
    fn terminal_cost_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId>;

    /// Terminal-cost gradient as tape operations, (batch, n) -> (batch, n).
    /// Environments whose gradient is only available by finite differences
    /// emit it as a detached constant of the current value of `q`.
    fn grad_terminal_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId>;
}

pub(crate) fn expect_len<S>(v: &[S], want: usize, what: &str) -> Result<()> {
    if v.len() != want {
        return Err(Error::shape(format!("{what} needs {want} entries, got {}", v.len())));
    }
    Ok(())
}

pub const ENV_NAMES: [&str; 4] = ["lq", "cartpole", "mountaincar", "shape"];

/// Looks up an environment by registry name.
pub fn by_name<S: Scalar>(name: &str) -> Result<Box<dyn Environment<S>>> {
    match name {
        "lq" => Ok(Box::new(Lq::default())),
        "cartpole" => Ok(Box::new(CartPole::new())),
        "mountaincar" => Ok(Box::new(MountainCar::new())),
        "shape" => Ok(Box::new(ShapeOpt::new())),
        _ => Err(Error::UnknownEnvironment { name: name.to_string() }),
    }
}

/// Per-environment network sizing: hidden widths for each net in both
/// training phases plus the latent dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkPlan {
    pub state_dim: usize,
    pub adjoint_hidden: Vec<usize>,
    pub hamiltonian_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub hamiltonian2_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub encoder_share: Vec<usize>,
    pub encoder_mean_hidden: Vec<usize>,
    pub encoder_logvar_hidden: Vec<usize>,
}

impl NetworkPlan {
    fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut d = Vec::with_capacity(hidden.len() + 2);
        d.push(input);
        d.extend_from_slice(hidden);
        d.push(output);
        d
    }

    /// h net: (q, p) concatenated to a scalar.
    pub fn hamiltonian_dims(&self) -> Vec<usize> {
        Self::dims(2 * self.state_dim, &self.hamiltonian_hidden, 1)
    }

    /// Adjoint predictor: q0 to p0.
    pub fn adjoint_dims(&self) -> Vec<usize> {
        Self::dims(self.state_dim, &self.adjoint_hidden, self.state_dim)
    }

    /// Refinement-phase h net, same signature as the first.
    pub fn hamiltonian2_dims(&self) -> Vec<usize> {
        Self::dims(2 * self.state_dim, &self.hamiltonian2_hidden, 1)
    }

    /// Decoder: latent to (q, p).
    pub fn decoder_dims(&self) -> Vec<usize> {
        Self::dims(self.latent_dim, &self.decoder_hidden, 2 * self.state_dim)
    }

    /// Shared encoder trunk: (q, p) in, last listed width out. The trunk
    /// output passes through tanh before the mean/log-variance heads.
    pub fn encoder_share_dims(&self) -> Vec<usize> {
        let mut d = vec![2 * self.state_dim];
        d.extend_from_slice(&self.encoder_share);
        d
    }

    pub fn encoder_mean_dims(&self) -> Vec<usize> {
        Self::dims(*self.encoder_share.last().unwrap(), &self.encoder_mean_hidden, self.latent_dim)
    }

    pub fn encoder_logvar_dims(&self) -> Vec<usize> {
        Self::dims(
            *self.encoder_share.last().unwrap(),
            &self.encoder_logvar_hidden,
            self.latent_dim,
        )
    }
}

/// Network sizing per environment. The LQ problem is not in the sizing
/// tables; it shares the mountain-car row since both have a 2-dim state.
pub fn network_plan(name: &str) -> Result<NetworkPlan> {
    match name {
        "lq" | "mountaincar" => Ok(NetworkPlan {
            state_dim: 2,
            adjoint_hidden: vec![8, 16, 32],
            hamiltonian_hidden: vec![8, 16, 32],
            latent_dim: 2,
            hamiltonian2_hidden: vec![8, 16, 32],
            decoder_hidden: vec![8, 32],
            encoder_share: vec![32],
            encoder_mean_hidden: vec![8],
            encoder_logvar_hidden: vec![8],
        }),
        "cartpole" => Ok(NetworkPlan {
            state_dim: 4,
            adjoint_hidden: vec![16, 32, 32],
            hamiltonian_hidden: vec![16, 32, 64, 8],
            latent_dim: 4,
            hamiltonian2_hidden: vec![16, 32, 64, 8],
            decoder_hidden: vec![16, 64],
            encoder_share: vec![64],
            encoder_mean_hidden: vec![16],
            encoder_logvar_hidden: vec![16],
        }),
        "shape" => Ok(NetworkPlan {
            state_dim: 16,
            adjoint_hidden: vec![32, 64],
            hamiltonian_hidden: vec![64, 8],
            latent_dim: 4,
            hamiltonian2_hidden: vec![64, 8],
            decoder_hidden: vec![8, 16, 64],
            encoder_share: vec![64],
            encoder_mean_hidden: vec![16, 8],
            encoder_logvar_hidden: vec![16, 8],
        }),
        _ => Err(Error::UnknownEnvironment { name: name.to_string() }),
    }
}
