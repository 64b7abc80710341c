//! The two training phases.
//!
//! Phase 1 fits a Hamiltonian network h and an adjoint predictor P on
//! freshly sampled start states. For each q0 the flow of h is integrated
//! from (q0, P(q0)) and the loss ties three knots: P(q0) to the terminal
//! cost gradient at q0, the evolved costate to the terminal cost gradient
//! at the evolved state, and h itself to the value the control Hamiltonian
//! takes at the closed-form optimal control.
//!
//! Phase 2 freezes those nets and uses them only to label data: x = (q0,
//! P(q0)) and y its time-T image under h. A variational autoencoder then
//! learns the terminal distribution: y encodes to a Gaussian latent,
//! decodes to y-hat, and a second Hamiltonian net integrates y-hat
//! backward to x-hat. The loss is a KL term plus both reconstruction
//! errors; the backward rollout makes the refined net a generative model
//! of whole optimal trajectories, not just endpoints.
//!
//! Batches are resampled every iteration from a dedicated stream, and all
//! network seeds derive from the config seed, so a (config, environment)
//! pair fixes the entire run bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffTape, NodeId, Tensor};
use crate::dynamics::{control_jacobian_tensor, rollout_batch, rollout_on_tape, Direction, LearnedHamiltonian};
use crate::environments::{Environment, NetworkPlan};
use crate::error::{Error, Result};
use crate::nets::{Mlp, MlpVars};
use crate::scalar::Scalar;

/// How the consistency term reconstructs the dynamics at t = 0: from the
/// environment's black-box flow at the recovered optimal control, or from
/// the network's own dh/dp.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FhatMode {
    Blackbox,
    Dhdp,
}

impl std::str::FromStr for FhatMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blackbox" => Ok(FhatMode::Blackbox),
            "dhdp" => Ok(FhatMode::Dhdp),
            _ => Err(Error::SchemaError {
                reason: format!("fhat must be \"blackbox\" or \"dhdp\", got {s:?}"),
            }),
        }
    }
}

/// Phase-1 hyperparameters. Deserializes from TOML with every field
/// optional; serialized checkpoints always carry the full set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight on |P(q0) - grad g(q0)|^2.
    pub alpha1: f64,
    /// Weight on |p_T - grad g(q_T)|^2.
    pub alpha2: f64,
    /// Weight on the Hamiltonian consistency term.
    pub beta: f64,
    pub t_horizon: f64,
    pub integrator_steps: usize,
    pub batch: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub fhat: FhatMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha1: 1.0,
            alpha2: 1.0,
            beta: 1.0,
            t_horizon: 1.0,
            integrator_steps: 50,
            batch: 32,
            iterations: 2000,
            learning_rate: 1e-3,
            seed: 0,
            fhat: FhatMode::Blackbox,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.integrator_steps == 0 {
            return Err(Error::InvalidSteps);
        }
        validate_common(self.t_horizon, self.learning_rate, &[self.alpha1, self.alpha2, self.beta])
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(s).map_err(|e| Error::SchemaError { reason: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Phase-2 hyperparameters. `latent_dim = 0` means "use the environment's
/// network plan"; training resolves it before anything is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    /// Weight on the KL term.
    pub alpha1: f64,
    /// Weight on the x reconstruction (backward-rollout endpoint).
    pub alpha2: f64,
    pub t_horizon: f64,
    pub integrator_steps: usize,
    pub batch: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 0,
            alpha1: 1.0,
            alpha2: 1.0,
            t_horizon: 1.0,
            integrator_steps: 50,
            batch: 32,
            iterations: 3000,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.integrator_steps == 0 {
            return Err(Error::InvalidSteps);
        }
        validate_common(self.t_horizon, self.learning_rate, &[self.alpha1, self.alpha2])
    }

    /// Copy with `latent_dim` filled in from the plan when left at 0.
    pub fn resolved(&self, plan: &NetworkPlan) -> VaeConfig {
        let mut cfg = self.clone();
        if cfg.latent_dim == 0 {
            cfg.latent_dim = plan.latent_dim;
        }
        cfg
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: VaeConfig =
            toml::from_str(s).map_err(|e| Error::SchemaError { reason: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn validate_common(t_horizon: f64, learning_rate: f64, weights: &[f64]) -> Result<()> {
    if !(t_horizon > 0.0) || !t_horizon.is_finite() {
        return Err(Error::SchemaError { reason: "t_horizon must be > 0".into() });
    }
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::SchemaError { reason: "learning_rate must be > 0".into() });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::SchemaError { reason: "loss weights must be finite and >= 0".into() });
    }
    Ok(())
}

/// Adam with the standard moment decays (0.9, 0.999) and bias correction.
/// Parameter order must stay stable across calls; moment buffers build on
/// first use.
pub struct Adam<S: Scalar> {
    lr: S,
    steps: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Adam<S> {
        Adam { lr, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "optimizer got {} parameter tensors and {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape("optimizer parameter count changed between steps"));
        }
        self.steps += 1;
        let b1 = S::of(0.9);
        let b2 = S::of(0.999);
        let eps = S::of(1e-8);
        let c1 = S::one() - b1.powi(self.steps as i32);
        let c2 = S::one() - b2.powi(self.steps as i32);
        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if param.len() != grad.len() {
                return Err(Error::shape(format!(
                    "parameter {i} has {} entries, gradient has {}",
                    param.len(),
                    grad.len()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, g) in grad.data().iter().enumerate() {
                m[j] = b1 * m[j] + (S::one() - b1) * *g;
                v[j] = b2 * v[j] + (S::one() - b2) * *g * *g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                let slot = &mut param.data_mut()[j];
                *slot = *slot - self.lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// KL divergence of a diagonal Gaussian from the standard normal:
/// sum(mu^2 + e^logvar - 1 - logvar) / 2. Zero exactly at (0, 0).
pub fn kl_gaussian<S: Scalar>(mean: &[S], logvar: &[S]) -> S {
    let half = S::of(0.5);
    mean.iter()
        .zip(logvar)
        .fold(S::zero(), |acc, (&m, &lv)| acc + half * (m * m + lv.exp() - S::one() - lv))
}

fn stack_rows<S: Scalar>(rows: &[Vec<S>]) -> Result<Tensor<S>> {
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Tensor::from_rows(rows)
}

fn mean_of_row_sq_norm<S: Scalar>(
    tape: &mut DiffTape<S>,
    a: NodeId,
    b: NodeId,
    batch: usize,
) -> Result<NodeId> {
    let d = tape.sub(a, b)?;
    let d2 = tape.mul(d, d)?;
    let rows = tape.row_sum(d2)?;
    let total = tape.sum(rows)?;
    tape.scale(total, S::one() / S::of(batch as f64))
}

/// Phase-1 loss over a batch of start states, as tape nodes. Returns the
/// weighted loss and the three unweighted terms (boundary at 0, boundary
/// at T, Hamiltonian consistency) for metrics.
pub fn phase1_loss_on_tape<S: Scalar>(
    env: &dyn Environment<S>,
    tape: &mut DiffTape<S>,
    h_net: &Mlp<S>,
    h_vars: &MlpVars,
    p_net: &Mlp<S>,
    p_vars: &MlpVars,
    q0_rows: &[Vec<S>],
    cfg: &TrainConfig,
) -> Result<(NodeId, [NodeId; 3])> {
    let batch = q0_rows.len();
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = env.state_dim();
    for row in q0_rows {
        if row.len() != n {
            return Err(Error::shape(format!(
                "start states need {n} entries, got {}",
                row.len()
            )));
        }
    }
    let q0 = tape.constant(stack_rows(q0_rows)?)?;
    let p0 = p_net.forward_on_tape(tape, p_vars, q0)?;
    // the start-state boundary target is data, not a function of anything
    // being trained
    let grad0_rows: Vec<Vec<S>> =
        q0_rows.iter().map(|q| env.grad_terminal(q)).collect::<Result<_>>()?;
    let grad0 = tape.constant(stack_rows(&grad0_rows)?)?;
    let term1 = mean_of_row_sq_norm(tape, p0, grad0, batch)?;

    let (qt, pt) = rollout_on_tape(
        tape,
        h_net,
        h_vars,
        q0,
        p0,
        S::of(cfg.t_horizon),
        cfg.integrator_steps,
        Direction::Forward,
    )?;
    let gradt = env.grad_terminal_on_tape(tape, qt)?;
    let term2 = mean_of_row_sq_norm(tape, pt, gradt, batch)?;

    // consistency at t = 0: h(q0, p0) against <p0, fhat> + l1(q0) + |u|^2/2
    // with u = -F(q0)^T p0
    let x0 = tape.concat_cols(q0, p0)?;
    let (h_vals, h_grad) = match cfg.fhat {
        FhatMode::Blackbox => (h_net.forward_on_tape(tape, h_vars, x0)?, None),
        FhatMode::Dhdp => {
            let (y, g) = h_net.forward_and_input_grad_on_tape(tape, h_vars, x0)?;
            (y, Some(g))
        }
    };
    let mut term3_sum: Option<NodeId> = None;
    for (i, q_row) in q0_rows.iter().enumerate() {
        let (f0, f) = control_jacobian_tensor(env, q_row)?;
        let l1 = env.running_cost(q_row)?;
        let fc = tape.constant(f)?;
        let p_row = tape.slice_rows(p0, i, 1)?;
        let u_pos = tape.matmul(p_row, fc, false, false)?;
        let u = tape.neg(u_pos)?;
        let fhat = match h_grad {
            None => {
                let f0c = tape.constant(f0)?;
                let uf = tape.matmul(u, fc, false, true)?;
                tape.add(f0c, uf)?
            }
            Some(g) => {
                let g_row = tape.slice_rows(g, i, 1)?;
                tape.slice_cols(g_row, n, n)?
            }
        };
        let pf = tape.mul(p_row, fhat)?;
        let dot = tape.row_sum(pf)?;
        let u2 = tape.mul(u, u)?;
        let unorm = tape.row_sum(u2)?;
        let ucost = tape.affine(unorm, S::of(0.5), S::zero())?;
        let running = tape.add(dot, ucost)?;
        let target = tape.affine(running, S::one(), l1)?;
        let h_row = tape.slice_rows(h_vals, i, 1)?;
        let r = tape.sub(h_row, target)?;
        let r2 = tape.mul(r, r)?;
        term3_sum = Some(match term3_sum {
            Some(acc) => tape.add(acc, r2)?,
            None => r2,
        });
    }
    let term3_total = tape.sum(term3_sum.expect("batch checked nonempty"))?;
    let term3 = tape.scale(term3_total, S::one() / S::of(batch as f64))?;

    let w1 = tape.affine(term1, S::of(cfg.alpha1), S::zero())?;
    let w2 = tape.affine(term2, S::of(cfg.alpha2), S::zero())?;
    let w3 = tape.affine(term3, S::of(cfg.beta), S::zero())?;
    let partial = tape.add(w1, w2)?;
    let loss = tape.add(partial, w3)?;
    Ok((loss, [term1, term2, term3]))
}

/// [`phase1_loss_on_tape`] on a throwaway tape with frozen parameters.
/// Returns (loss, [term1, term2, term3]).
pub fn phase1_loss_value<S: Scalar>(
    env: &dyn Environment<S>,
    h_net: &Mlp<S>,
    p_net: &Mlp<S>,
    q0_rows: &[Vec<S>],
    cfg: &TrainConfig,
) -> Result<(f64, [f64; 3])> {
    let mut tape = DiffTape::new();
    let h_vars = h_net.consts_on_tape(&mut tape)?;
    let p_vars = p_net.consts_on_tape(&mut tape)?;
    let (loss, terms) =
        phase1_loss_on_tape(env, &mut tape, h_net, &h_vars, p_net, &p_vars, q0_rows, cfg)?;
    let val = tape.value(loss).data()[0].widen();
    let t = [
        tape.value(terms[0]).data()[0].widen(),
        tape.value(terms[1]).data()[0].widen(),
        tape.value(terms[2]).data()[0].widen(),
    ];
    Ok((val, t))
}

pub struct Phase1Result<S> {
    pub hamiltonian: Mlp<S>,
    pub adjoint: Mlp<S>,
    /// One row per step: step, loss, term1, term2, term3.
    pub metrics: Vec<[f64; 5]>,
}

pub const PHASE1_METRIC_HEADER: [&str; 5] = ["step", "loss", "term1", "term2", "term3"];
pub const PHASE2_METRIC_HEADER: [&str; 5] = ["step", "loss", "kl", "x_recon", "y_recon"];

fn fresh_batch<S: Scalar>(
    env: &dyn Environment<S>,
    rng: &mut ChaCha8Rng,
    batch: usize,
) -> Result<Vec<Vec<S>>> {
    (0..batch).map(|_| env.sample_q0(rng.gen())).collect()
}

fn grads_in_order<S: Scalar>(
    grads: &mut crate::autodiff::Gradients<S>,
    ids: &[NodeId],
    shapes: &[Vec<usize>],
) -> Result<Vec<Tensor<S>>> {
    ids.iter()
        .zip(shapes)
        .map(|(id, shape)| match grads.take(*id) {
            Some(g) => Ok(g),
            None => {
                let len = shape.iter().product();
                Tensor::new(shape.clone(), vec![S::zero(); len])
            }
        })
        .collect()
}

/// Runs phase 1: fresh nets, resampled batches, Adam, loss metrics per
/// step. Network seeds derive from `cfg.seed` (+1 Hamiltonian, +2 adjoint,
/// +3 batch stream).
pub fn train_phase1<S: Scalar>(
    env: &dyn Environment<S>,
    plan: &NetworkPlan,
    cfg: &TrainConfig,
) -> Result<Phase1Result<S>> {
    cfg.validate()?;
    if plan.state_dim != env.state_dim() {
        return Err(Error::shape(format!(
            "plan is for {}-dim states, environment has {}",
            plan.state_dim,
            env.state_dim()
        )));
    }
    let mut h = Mlp::<S>::init(&plan.hamiltonian_dims(), cfg.seed.wrapping_add(1))?;
    let mut p = Mlp::<S>::init(&plan.adjoint_dims(), cfg.seed.wrapping_add(2))?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut adam = Adam::new(S::of(cfg.learning_rate));
    let shapes: Vec<Vec<usize>> =
        h.params().chain(p.params()).map(|t| t.shape().to_vec()).collect();
    let mut metrics = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let q0_rows = fresh_batch(env, &mut batch_rng, cfg.batch)?;
        let mut tape = DiffTape::new();
        let h_vars = h.vars_on_tape(&mut tape)?;
        let p_vars = p.vars_on_tape(&mut tape)?;
        let built =
            phase1_loss_on_tape(env, &mut tape, &h, &h_vars, &p, &p_vars, &q0_rows, cfg);
        let (loss, terms) = match built {
            Err(Error::NonFiniteValue { .. }) => {
                return Err(Error::TrainingDiverged { step: step as u64 })
            }
            other => other?,
        };
        let lval = tape.value(loss).data()[0].widen();
        if !lval.is_finite() {
            return Err(Error::TrainingDiverged { step: step as u64 });
        }
        metrics.push([
            step as f64,
            lval,
            tape.value(terms[0]).data()[0].widen(),
            tape.value(terms[1]).data()[0].widen(),
            tape.value(terms[2]).data()[0].widen(),
        ]);
        let mut grads = tape.backward(loss)?;
        let ids: Vec<NodeId> = h_vars.ids().chain(p_vars.ids()).collect();
        let grad_list = grads_in_order(&mut grads, &ids, &shapes)?;
        let mut params: Vec<&mut Tensor<S>> = h.params_mut().chain(p.params_mut()).collect();
        adam.step(&mut params, &grad_list)?;
    }
    Ok(Phase1Result { hamiltonian: h, adjoint: p, metrics })
}

/// The five networks phase 2 trains.
pub struct VaeNets<S> {
    pub hamiltonian_refined: Mlp<S>,
    pub encoder_share: Mlp<S>,
    pub encoder_mean: Mlp<S>,
    pub encoder_logvar: Mlp<S>,
    pub decoder: Mlp<S>,
}

pub struct VaeVars {
    pub hamiltonian_refined: MlpVars,
    pub encoder_share: MlpVars,
    pub encoder_mean: MlpVars,
    pub encoder_logvar: MlpVars,
    pub decoder: MlpVars,
}

impl<S: Scalar> VaeNets<S> {
    /// Fresh nets per the plan; seeds derive from the config seed
    /// (+4 refined Hamiltonian, +5 trunk, +6 mean, +7 logvar, +8 decoder).
    pub fn init(plan: &NetworkPlan, seed: u64) -> Result<Self> {
        Ok(VaeNets {
            hamiltonian_refined: Mlp::init(&plan.hamiltonian2_dims(), seed.wrapping_add(4))?,
            encoder_share: Mlp::init(&plan.encoder_share_dims(), seed.wrapping_add(5))?,
            encoder_mean: Mlp::init(&plan.encoder_mean_dims(), seed.wrapping_add(6))?,
            encoder_logvar: Mlp::init(&plan.encoder_logvar_dims(), seed.wrapping_add(7))?,
            decoder: Mlp::init(&plan.decoder_dims(), seed.wrapping_add(8))?,
        })
    }

    pub fn vars_on_tape(&self, tape: &mut DiffTape<S>) -> Result<VaeVars> {
        Ok(VaeVars {
            hamiltonian_refined: self.hamiltonian_refined.vars_on_tape(tape)?,
            encoder_share: self.encoder_share.vars_on_tape(tape)?,
            encoder_mean: self.encoder_mean.vars_on_tape(tape)?,
            encoder_logvar: self.encoder_logvar.vars_on_tape(tape)?,
            decoder: self.decoder.vars_on_tape(tape)?,
        })
    }

    fn params(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.hamiltonian_refined
            .params()
            .chain(self.encoder_share.params())
            .chain(self.encoder_mean.params())
            .chain(self.encoder_logvar.params())
            .chain(self.decoder.params())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.hamiltonian_refined
            .params_mut()
            .chain(self.encoder_share.params_mut())
            .chain(self.encoder_mean.params_mut())
            .chain(self.encoder_logvar.params_mut())
            .chain(self.decoder.params_mut())
    }
}

impl VaeVars {
    fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.hamiltonian_refined
            .ids()
            .chain(self.encoder_share.ids())
            .chain(self.encoder_mean.ids())
            .chain(self.encoder_logvar.ids())
            .chain(self.decoder.ids())
    }
}

/// Labels a batch with the frozen phase-1 nets: x = (q0, P(q0)) and
/// y = its image under the learned flow at time T. Both (batch, 2n).
pub fn phase_points_from_phase1<S: Scalar>(
    hamiltonian: &Mlp<S>,
    adjoint: &Mlp<S>,
    q0_rows: &[Vec<S>],
    t_span: S,
    steps: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let q0 = stack_rows(q0_rows)?;
    let p0 = adjoint.forward_batch(&q0)?;
    let ham = LearnedHamiltonian::new(hamiltonian)?;
    let history = rollout_batch(&ham, &q0, &p0, t_span, steps, Direction::Forward)?;
    let (qt, pt) = history.last().expect("rollout history is never empty");
    let hstack = |a: &Tensor<S>, b: &Tensor<S>| -> Result<Tensor<S>> {
        let (rows, ca) = a.dims2();
        let (_, cb) = b.dims2();
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        Tensor::matrix(rows, ca + cb, data)
    };
    Ok((hstack(&q0, &p0)?, hstack(qt, pt)?))
}

/// Phase-2 loss as tape nodes. `x` and `y` are the frozen phase-1 labels,
/// `eps` the (batch, latent) standard-normal draws for reparameterization.
/// Returns the weighted loss and the unweighted (kl, x_recon, y_recon).
pub fn phase2_loss_on_tape<S: Scalar>(
    tape: &mut DiffTape<S>,
    nets: &VaeNets<S>,
    vars: &VaeVars,
    x: &Tensor<S>,
    y: &Tensor<S>,
    eps: &Tensor<S>,
    cfg: &VaeConfig,
) -> Result<(NodeId, [NodeId; 3])> {
    let (batch, width) = y.dims2();
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    if width % 2 != 0 || x.dims2() != (batch, width) {
        return Err(Error::shape(format!(
            "phase points must be matching (batch, 2n) tensors, got {:?} and {:?}",
            x.dims2(),
            y.dims2()
        )));
    }
    let n = width / 2;
    let y_node = tape.constant(y.clone())?;
    let x_node = tape.constant(x.clone())?;
    // encoder: shared trunk, tanh, then the two Gaussian heads
    let trunk = nets.encoder_share.forward_on_tape(tape, &vars.encoder_share, y_node)?;
    let trunk = tape.tanh(trunk)?;
    let mean = nets.encoder_mean.forward_on_tape(tape, &vars.encoder_mean, trunk)?;
    let logvar = nets.encoder_logvar.forward_on_tape(tape, &vars.encoder_logvar, trunk)?;
    let (_, latent) = tape.value(mean).dims2();
    if eps.dims2() != (batch, latent) {
        return Err(Error::shape(format!(
            "noise must be (batch, latent) = ({batch}, {latent}), got {:?}",
            eps.dims2()
        )));
    }
    // z = mean + exp(logvar / 2) * eps
    let half_lv = tape.affine(logvar, S::of(0.5), S::zero())?;
    let sigma = tape.exp(half_lv)?;
    let eps_node = tape.constant(eps.clone())?;
    let noise = tape.mul(sigma, eps_node)?;
    let z = tape.add(mean, noise)?;
    let y_hat = nets.decoder.forward_on_tape(tape, &vars.decoder, z)?;
    // x-hat: integrate the refined Hamiltonian backward from y-hat
    let q_hat = tape.slice_cols(y_hat, 0, n)?;
    let p_hat = tape.slice_cols(y_hat, n, n)?;
    let (q0_hat, p0_hat) = rollout_on_tape(
        tape,
        &nets.hamiltonian_refined,
        &vars.hamiltonian_refined,
        q_hat,
        p_hat,
        S::of(cfg.t_horizon),
        cfg.integrator_steps,
        Direction::Backward,
    )?;
    let x_hat = tape.concat_cols(q0_hat, p0_hat)?;

    // kl = mean over the batch of sum(mu^2 + e^lv - 1 - lv) / 2
    let mu2 = tape.mul(mean, mean)?;
    let elv = tape.exp(logvar)?;
    let quad = tape.add(mu2, elv)?;
    let lin = tape.affine(logvar, -S::one(), -S::one())?;
    let inner = tape.add(quad, lin)?;
    let row_kl = tape.row_sum(inner)?;
    let kl_total = tape.sum(row_kl)?;
    let kl = tape.scale(kl_total, S::of(0.5) / S::of(batch as f64))?;

    let x_recon = mean_of_row_sq_norm(tape, x_node, x_hat, batch)?;
    let y_recon = mean_of_row_sq_norm(tape, y_node, y_hat, batch)?;

    let w1 = tape.affine(kl, S::of(cfg.alpha1), S::zero())?;
    let w2 = tape.affine(x_recon, S::of(cfg.alpha2), S::zero())?;
    let partial = tape.add(w1, w2)?;
    let loss = tape.add(partial, y_recon)?;
    Ok((loss, [kl, x_recon, y_recon]))
}

pub struct Phase2Result<S> {
    pub nets: VaeNets<S>,
    /// One row per step: step, loss, kl, x_recon, y_recon.
    pub metrics: Vec<[f64; 5]>,
}

/// Runs phase 2 against frozen phase-1 nets. The batch stream reuses the
/// +3 seed derivation; per-sample noise comes from the same stream.
pub fn train_phase2<S: Scalar>(
    env: &dyn Environment<S>,
    plan: &NetworkPlan,
    hamiltonian: &Mlp<S>,
    adjoint: &Mlp<S>,
    cfg: &VaeConfig,
) -> Result<Phase2Result<S>> {
    cfg.validate()?;
    let cfg = cfg.resolved(plan);
    let mut plan = plan.clone();
    plan.latent_dim = cfg.latent_dim;
    if plan.state_dim != env.state_dim() {
        return Err(Error::shape(format!(
            "plan is for {}-dim states, environment has {}",
            plan.state_dim,
            env.state_dim()
        )));
    }
    if hamiltonian.input_dim() != 2 * plan.state_dim
        || adjoint.input_dim() != plan.state_dim
        || adjoint.output_dim() != plan.state_dim
    {
        return Err(Error::InvalidArchitecture {
            reason: "frozen phase-1 nets do not fit the environment's state size".into(),
        });
    }
    let mut nets = VaeNets::<S>::init(&plan, cfg.seed)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut adam = Adam::new(S::of(cfg.learning_rate));
    let shapes: Vec<Vec<usize>> = nets.params().map(|t| t.shape().to_vec()).collect();
    let mut metrics = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let q0_rows = fresh_batch(env, &mut batch_rng, cfg.batch)?;
        let eps_data: Vec<S> = (0..cfg.batch * cfg.latent_dim)
            .map(|_| S::of(batch_rng.sample(StandardNormal)))
            .collect();
        let eps = Tensor::matrix(cfg.batch, cfg.latent_dim, eps_data)?;
        let (x, y) = phase_points_from_phase1(
            hamiltonian,
            adjoint,
            &q0_rows,
            S::of(cfg.t_horizon),
            cfg.integrator_steps,
        )?;
        let mut tape = DiffTape::new();
        let vars = nets.vars_on_tape(&mut tape)?;
        let built = phase2_loss_on_tape(&mut tape, &nets, &vars, &x, &y, &eps, &cfg);
        let (loss, terms) = match built {
            Err(Error::NonFiniteValue { .. }) => {
                return Err(Error::TrainingDiverged { step: step as u64 })
            }
            other => other?,
        };
        let lval = tape.value(loss).data()[0].widen();
        if !lval.is_finite() {
            return Err(Error::TrainingDiverged { step: step as u64 });
        }
        metrics.push([
            step as f64,
            lval,
            tape.value(terms[0]).data()[0].widen(),
            tape.value(terms[1]).data()[0].widen(),
            tape.value(terms[2]).data()[0].widen(),
        ]);
        let mut grads = tape.backward(loss)?;
        let ids: Vec<NodeId> = vars.ids().collect();
        let grad_list = grads_in_order(&mut grads, &ids, &shapes)?;
        let mut params: Vec<&mut Tensor<S>> = nets.params_mut().collect();
        adam.step(&mut params, &grad_list)?;
    }
    Ok(Phase2Result { nets, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{by_name, network_plan};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { batch: 4, iterations: 5, integrator_steps: 10, ..TrainConfig::default() }
    }

    #[test]
    fn zero_networks_give_a_known_lq_loss() {
        // with h = 0 and P = 0 from q0 = (1, 0): the flow stays put, both
        // boundary terms are |grad g(q0)|^2 = 1, and the consistency term
        // is l1(q0)^2 = 1/4, so the loss is exactly 2.25 in both modes
        let env = by_name::<f64>("lq").unwrap();
        let plan = network_plan("lq").unwrap();
        let h = Mlp::<f64>::zeros(&plan.hamiltonian_dims()).unwrap();
        let p = Mlp::<f64>::zeros(&plan.adjoint_dims()).unwrap();
        for fhat in [FhatMode::Blackbox, FhatMode::Dhdp] {
            let cfg = TrainConfig { fhat, ..TrainConfig::default() };
            let (loss, terms) =
                phase1_loss_value(env.as_ref(), &h, &p, &[vec![1.0, 0.0]], &cfg).unwrap();
            assert!((loss - 2.25).abs() < 1e-12, "{fhat:?}: {loss}");
            assert!((terms[0] - 1.0).abs() < 1e-12);
            assert!((terms[1] - 1.0).abs() < 1e-12);
            assert!((terms[2] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn phase1_gradients_reach_both_networks() {
        let env = by_name::<f64>("lq").unwrap();
        let plan = network_plan("lq").unwrap();
        let h = Mlp::<f64>::init(&plan.hamiltonian_dims(), 1).unwrap();
        let p = Mlp::<f64>::init(&plan.adjoint_dims(), 2).unwrap();
        let cfg = tiny_cfg();
        let q0s = vec![vec![0.3, -0.4], vec![-0.1, 0.5]];
        let mut tape = DiffTape::new();
        let h_vars = h.vars_on_tape(&mut tape).unwrap();
        let p_vars = p.vars_on_tape(&mut tape).unwrap();
        let (loss, _) =
            phase1_loss_on_tape(env.as_ref(), &mut tape, &h, &h_vars, &p, &p_vars, &q0s, &cfg)
                .unwrap();
        let grads = tape.backward(loss).unwrap();
        let h_norm: f64 = h_vars
            .ids()
            .filter_map(|id| grads.wrt(id))
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum();
        let p_norm: f64 = p_vars
            .ids()
            .filter_map(|id| grads.wrt(id))
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum();
        assert!(h_norm > 0.0, "no gradient reached the Hamiltonian net");
        assert!(p_norm > 0.0, "no gradient reached the adjoint net");
    }

    #[test]
    fn short_phase1_run_descends_and_repeats_exactly() {
        let env = by_name::<f64>("lq").unwrap();
        let plan = network_plan("lq").unwrap();
        let cfg = TrainConfig {
            batch: 8,
            iterations: 40,
            integrator_steps: 10,
            ..TrainConfig::default()
        };
        let a = train_phase1(env.as_ref(), &plan, &cfg).unwrap();
        let b = train_phase1(env.as_ref(), &plan, &cfg).unwrap();
        assert_eq!(a.metrics.len(), 40);
        assert!(a.metrics[39][1] < a.metrics[0][1], "loss did not descend");
        assert_eq!(a.hamiltonian.serialize(), b.hamiltonian.serialize());
        assert_eq!(a.adjoint.serialize(), b.adjoint.serialize());
        assert_eq!(a.metrics, b.metrics);
        let c = train_phase1(env.as_ref(), &plan, &TrainConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.hamiltonian.serialize(), c.hamiltonian.serialize());
    }

    #[test]
    fn kl_helper_is_zero_at_the_prior_and_positive_off_it() {
        assert_eq!(kl_gaussian::<f64>(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!(kl_gaussian::<f64>(&[0.5, 0.0], &[0.0, 0.0]) > 0.0);
        assert!(kl_gaussian::<f64>(&[0.0], &[1.0]) > 0.0);
        assert!(kl_gaussian::<f64>(&[0.0], &[-1.0]) > 0.0);
    }

    #[test]
    fn tape_kl_matches_the_plain_helper() {
        let env = by_name::<f64>("lq").unwrap();
        let plan = network_plan("lq").unwrap();
        let cfg = VaeConfig { batch: 3, integrator_steps: 5, ..VaeConfig::default() }
            .resolved(&plan);
        let nets = VaeNets::<f64>::init(&plan, cfg.seed).unwrap();
        let q0s: Vec<Vec<f64>> = (0..3).map(|s| env.sample_q0(s).unwrap()).collect();
        let h = Mlp::<f64>::init(&plan.hamiltonian_dims(), 11).unwrap();
        let p = Mlp::<f64>::init(&plan.adjoint_dims(), 12).unwrap();
        let (x, y) = phase_points_from_phase1(&h, &p, &q0s, 1.0, 5).unwrap();
        let eps = Tensor::matrix(3, cfg.latent_dim, vec![0.1; 3 * cfg.latent_dim]).unwrap();
        let mut tape = DiffTape::new();
        let vars = nets.vars_on_tape(&mut tape).unwrap();
        let (_, terms) =
            phase2_loss_on_tape(&mut tape, &nets, &vars, &x, &y, &eps, &cfg).unwrap();
        // recompute the kl by hand from the encoder outputs
        let trunk = nets.encoder_share.forward_batch(&y).unwrap();
        let trunk = Tensor::matrix(3, trunk.dims2().1, trunk.data().iter().map(|v| v.tanh()).collect()).unwrap();
        let mean = nets.encoder_mean.forward_batch(&trunk).unwrap();
        let logvar = nets.encoder_logvar.forward_batch(&trunk).unwrap();
        let expected: f64 = (0..3)
            .map(|r| kl_gaussian(mean.row(r), logvar.row(r)))
            .sum::<f64>()
            / 3.0;
        let got = tape.value(terms[0]).data()[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(got >= 0.0);
    }

    #[test]
    fn short_phase2_run_descends_and_repeats_exactly() {
        let env = by_name::<f64>("lq").unwrap();
        let plan = network_plan("lq").unwrap();
        let p1 = train_phase1(
            env.as_ref(),
            &plan,
            &TrainConfig {
                batch: 8,
                iterations: 30,
                integrator_steps: 10,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let cfg = VaeConfig {
            batch: 8,
            iterations: 40,
            integrator_steps: 10,
            ..VaeConfig::default()
        };
        let a = train_phase2(env.as_ref(), &plan, &p1.hamiltonian, &p1.adjoint, &cfg).unwrap();
        let b = train_phase2(env.as_ref(), &plan, &p1.hamiltonian, &p1.adjoint, &cfg).unwrap();
        assert_eq!(a.metrics.len(), 40);
        assert!(a.metrics[39][1] < a.metrics[0][1], "loss did not descend");
        assert!(a.metrics.iter().all(|row| row[2] >= 0.0), "kl went negative");
        assert_eq!(a.nets.decoder.serialize(), b.nets.decoder.serialize());
        assert_eq!(
            a.nets.hamiltonian_refined.serialize(),
            b.nets.hamiltonian_refined.serialize()
        );
    }

    #[test]
    fn configs_validate_and_read_partial_toml() {
        let cfg = TrainConfig::from_toml_str("batch = 4\nlearning_rate = 0.01\n").unwrap();
        assert_eq!(cfg.batch, 4);
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.alpha1, 1.0);
        assert!(matches!(
            TrainConfig { batch: 0, ..TrainConfig::default() }.validate(),
            Err(Error::EmptyBatch)
        ));
        assert!(matches!(
            TrainConfig { integrator_steps: 0, ..TrainConfig::default() }.validate(),
            Err(Error::InvalidSteps)
        ));
        assert!(matches!(
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate(),
            Err(Error::SchemaError { .. })
        ));
        assert!(matches!(
            TrainConfig::from_toml_str("no_such_knob = 1\n"),
            Err(Error::SchemaError { .. })
        ));
        let vae = VaeConfig::from_toml_str("fhat = \"blackbox\"\n");
        assert!(matches!(vae, Err(Error::SchemaError { .. })), "vae config has no fhat knob");
        assert_eq!("dhdp".parse::<FhatMode>().unwrap(), FhatMode::Dhdp);
        assert!("sideways".parse::<FhatMode>().is_err());
    }

    #[test]
    fn exploding_start_states_diverge_loudly() {
        use crate::autodiff::{DiffTape as Dt, NodeId as Nid};
        use crate::render::Frame;

        struct Hot;
        impl Environment<f64> for Hot {
            fn name(&self) -> &'static str {
                "hot"
            }
            fn state_dim(&self) -> usize {
                2
            }
            fn control_dim(&self) -> usize {
                2
            }
            fn flow(&self, _q: &[f64], v: &[f64]) -> Result<Vec<f64>> {
                Ok(v.to_vec())
            }
            fn running_cost(&self, q: &[f64]) -> Result<f64> {
                Ok(0.5 * q.iter().map(|x| x * x).sum::<f64>())
            }
            fn terminal_cost(&self, q: &[f64]) -> Result<f64> {
                self.running_cost(q)
            }
            fn grad_terminal(&self, q: &[f64]) -> Result<Vec<f64>> {
                Ok(q.to_vec())
            }
            fn sample_q0(&self, _seed: u64) -> Result<Vec<f64>> {
                Ok(vec![1e200, 0.0])
            }
            fn render(&self, _q: &[f64]) -> Result<Frame> {
                unimplemented!()
            }
            fn flow_on_tape(&self, _t: &mut Dt<f64>, _q: Nid, v: Nid) -> Result<Nid> {
                Ok(v)
            }
            fn running_cost_on_tape(&self, t: &mut Dt<f64>, q: Nid) -> Result<Nid> {
                let q2 = t.mul(q, q)?;
                let s = t.row_sum(q2)?;
                t.affine(s, 0.5, 0.0)
            }
            fn terminal_cost_on_tape(&self, t: &mut Dt<f64>, q: Nid) -> Result<Nid> {
                self.running_cost_on_tape(t, q)
            }
            fn grad_terminal_on_tape(&self, _t: &mut Dt<f64>, q: Nid) -> Result<Nid> {
                Ok(q)
            }
        }

        let plan = network_plan("lq").unwrap();
        let cfg = tiny_cfg();
        let err = train_phase1(&Hot, &plan, &cfg).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { step: 0 }), "{err:?}");
    }
}
