//! Phase-space flow: reduced Hamiltonians, their symplectic fields, and
//! fixed-step RK4 rollouts in three flavors (single, batched, on-tape).
//!
//! For dynamics affine in the control, f(q, v) = f0(q) + F(q) v, and a
//! running cost l1(q) + |v|^2 / 2, minimizing the control Hamiltonian
//! <p, f> + l over v gives u* = -F^T p and the reduced Hamiltonian
//!
//!   h(q, p) = <p, f0(q)> - |F(q)^T p|^2 / 2 + l1(q).
//!
//! Trajectories of the optimality system are integral curves of the
//! symplectic field (dh/dp, -dh/dq). Nothing downstream needs F in closed
//! form: [`extract_control_jacobian`] recovers it by probing the flow with
//! unit controls, and verifies affinity while it is at it.

use crate::autodiff::{DiffTape, NodeId, Tensor};
use crate::environments::{expect_len, Environment};
use crate::error::{Error, Result};
use crate::fmtnum::fmt_f64;
use crate::nets::{Mlp, MlpVars};
use crate::scalar::Scalar;

/// Integration direction. Backward flips the sign of the field, so a
/// backward rollout retraces a forward one from its endpoint.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn sign<S: Scalar>(self) -> S {
        match self {
            Direction::Forward => S::one(),
            Direction::Backward => -S::one(),
        }
    }
}

/// One state of the optimality system: position q and costate p.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint<S> {
    pub q: Vec<S>,
    pub p: Vec<S>,
}

/// A sampled integral curve. `times` and `points` have equal length;
/// backward rollouts record decreasing times.
#[derive(Clone, Debug)]
pub struct Trajectory<S> {
    pub times: Vec<S>,
    pub points: Vec<PhasePoint<S>>,
}

impl<S: Scalar> Trajectory<S> {
    pub fn first(&self) -> &PhasePoint<S> {
        &self.points[0]
    }

    pub fn last(&self) -> &PhasePoint<S> {
        self.points.last().expect("trajectory is never empty")
    }

    /// CSV with header `t,q_0..q_{n-1},p_0..p_{n-1}`, one row per sample.
    pub fn to_csv(&self) -> String {
        let n = self.points[0].q.len();
        let mut out = String::from("t");
        for i in 0..n {
            out.push_str(&format!(",q_{i}"));
        }
        for i in 0..n {
            out.push_str(&format!(",p_{i}"));
        }
        out.push('\n');
        for (t, pt) in self.times.iter().zip(&self.points) {
            out.push_str(&fmt_f64(t.widen()));
            for v in pt.q.iter().chain(&pt.p) {
                out.push(',');
                out.push_str(&fmt_f64(v.widen()));
            }
            out.push('\n');
        }
        out
    }
}

/// A scalar function of (q, p) together with its symplectic field.
pub trait Hamiltonian<S: Scalar> {
    /// State dimension n; q and p both have n entries.
    fn dim(&self) -> usize;

    fn value(&self, q: &[S], p: &[S]) -> Result<S>;

    /// (dq/dt, dp/dt) = (dh/dp, -dh/dq).
    fn field(&self, q: &[S], p: &[S]) -> Result<(Vec<S>, Vec<S>)>;

    /// Batched field over (batch, n) tensors. The default loops rows;
    /// implementations with a vectorized form override it.
    fn field_batch(&self, q: &Tensor<S>, p: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let (rows, n) = q.dims2();
        let (prows, pn) = p.dims2();
        if rows != prows || n != self.dim() || pn != n {
            return Err(Error::shape(format!(
                "field_batch needs matching (batch, {}) tensors, got ({rows}, {n}) and ({prows}, {pn})",
                self.dim()
            )));
        }
        let mut dq = Vec::with_capacity(rows * n);
        let mut dp = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let (fq, fp) = self.field(q.row(r), p.row(r))?;
            dq.extend(fq);
            dp.extend(fp);
        }
        Ok((Tensor::matrix(rows, n, dq)?, Tensor::matrix(rows, n, dp)?))
    }
}

/// Probes f(q, v) = f0(q) + F(q) v with unit controls. Returns f0 and the
/// columns of F, and rejects dynamics that fail superposition on two fixed
/// dense control vectors.
pub fn extract_control_jacobian<S: Scalar>(
    env: &dyn Environment<S>,
    q: &[S],
) -> Result<(Vec<S>, Vec<Vec<S>>)> {
    let n = env.state_dim();
    let m = env.control_dim();
    expect_len(q, n, "state")?;
    let zero = vec![S::zero(); m];
    let f0 = env.flow(q, &zero)?;
    let mut cols = Vec::with_capacity(m);
    let mut probe = zero.clone();
    for j in 0..m {
        probe[j] = S::one();
        let fj = env.flow(q, &probe)?;
        probe[j] = S::zero();
        cols.push(fj.iter().zip(&f0).map(|(&a, &b)| a - b).collect::<Vec<S>>());
    }
    // two dense probes catch nonlinearity the unit vectors cannot see
    let v1: Vec<S> = (0..m).map(|j| S::of(0.6 - 0.05 * j as f64)).collect();
    let v2: Vec<S> = (0..m).map(|j| S::of(-0.3 + 0.07 * j as f64)).collect();
    let mut residual = 0.0f64;
    for v in [&v1, &v2] {
        let actual = env.flow(q, v)?;
        for i in 0..n {
            let mut predicted = f0[i];
            for j in 0..m {
                predicted = predicted + cols[j][i] * v[j];
            }
            residual = residual.max((actual[i] - predicted).widen().abs());
        }
    }
    if residual > 1e-6 {
        return Err(Error::NotAffineInControl { residual });
    }
    Ok((f0, cols))
}

/// [`extract_control_jacobian`] packaged for tape use: f0 as a (1, n) row
/// and F as an (n, m) matrix, so that u = -p F and f0 + u F^T are direct
/// matrix products on (1, n) rows.
pub fn control_jacobian_tensor<S: Scalar>(
    env: &dyn Environment<S>,
    q: &[S],
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (f0, cols) = extract_control_jacobian(env, q)?;
    let n = f0.len();
    let m = cols.len();
    let mut f = vec![S::zero(); n * m];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..n {
            f[i * m + j] = col[i];
        }
    }
    Ok((Tensor::matrix(1, n, f0)?, Tensor::matrix(n, m, f)?))
}

/// Closed-form minimizer of the control Hamiltonian: u* = -F(q)^T p.
pub fn optimal_control<S: Scalar>(env: &dyn Environment<S>, q: &[S], p: &[S]) -> Result<Vec<S>> {
    expect_len(p, env.state_dim(), "costate")?;
    let (_, cols) = extract_control_jacobian(env, q)?;
    Ok(cols
        .iter()
        .map(|col| -col.iter().zip(p).fold(S::zero(), |acc, (&a, &b)| acc + a * b))
        .collect())
}

/// The control Hamiltonian at its minimizer:
/// h(q, p) = <p, f0> - |F^T p|^2 / 2 + l1(q).
pub fn reduced_hamiltonian<S: Scalar>(env: &dyn Environment<S>, q: &[S], p: &[S]) -> Result<S> {
    expect_len(p, env.state_dim(), "costate")?;
    let (f0, cols) = extract_control_jacobian(env, q)?;
    let mut h = env.running_cost(q)?;
    for (&pi, &fi) in p.iter().zip(&f0) {
        h = h + pi * fi;
    }
    for col in &cols {
        let c = col.iter().zip(p).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
        h = h - S::of(0.5) * c * c;
    }
    Ok(h)
}

/// The reduced Hamiltonian of an environment as a [`Hamiltonian`].
/// dh/dp is analytic (f0 - F F^T p); dh/dq falls back to central
/// differences with a per-coordinate step scaled to the state.
pub struct EnvHamiltonian<'a, S: Scalar> {
    env: &'a dyn Environment<S>,
}

impl<'a, S: Scalar> EnvHamiltonian<'a, S> {
    pub fn new(env: &'a dyn Environment<S>) -> Self {
        EnvHamiltonian { env }
    }
}

impl<S: Scalar> Hamiltonian<S> for EnvHamiltonian<'_, S> {
    fn dim(&self) -> usize {
        self.env.state_dim()
    }

    fn value(&self, q: &[S], p: &[S]) -> Result<S> {
        reduced_hamiltonian(self.env, q, p)
    }

    fn field(&self, q: &[S], p: &[S]) -> Result<(Vec<S>, Vec<S>)> {
        let n = self.dim();
        expect_len(q, n, "state")?;
        expect_len(p, n, "costate")?;
        let (f0, cols) = extract_control_jacobian(self.env, q)?;
        let mut dq = f0;
        for col in &cols {
            let c = col.iter().zip(p).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
            for (d, &ci) in dq.iter_mut().zip(col) {
                *d = *d - ci * c;
            }
        }
        let mut dp = vec![S::zero(); n];
        let mut probe = q.to_vec();
        for i in 0..n {
            let step = S::of(1e-6) * S::one().max(q[i].abs());
            probe[i] = q[i] + step;
            let hi = reduced_hamiltonian(self.env, &probe, p)?;
            probe[i] = q[i] - step;
            let lo = reduced_hamiltonian(self.env, &probe, p)?;
            probe[i] = q[i];
            dp[i] = -(hi - lo) / (S::of(2.0) * step);
        }
        Ok((dq, dp))
    }
}

/// A scalar-output network over the concatenated (q, p) vector as a
/// [`Hamiltonian`]; the field comes from the network's input gradient.
pub struct LearnedHamiltonian<'a, S> {
    net: &'a Mlp<S>,
    dim: usize,
}

impl<'a, S: Scalar> LearnedHamiltonian<'a, S> {
    pub fn new(net: &'a Mlp<S>) -> Result<Self> {
        if net.output_dim() != 1 || net.input_dim() % 2 != 0 || net.input_dim() == 0 {
            return Err(Error::InvalidArchitecture {
                reason: format!(
                    "a phase-space network needs an even input and scalar output, got {} -> {}",
                    net.input_dim(),
                    net.output_dim()
                ),
            });
        }
        Ok(LearnedHamiltonian { net, dim: net.input_dim() / 2 })
    }
}

impl<S: Scalar> Hamiltonian<S> for LearnedHamiltonian<'_, S> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, q: &[S], p: &[S]) -> Result<S> {
        expect_len(q, self.dim, "state")?;
        expect_len(p, self.dim, "costate")?;
        let mut x = q.to_vec();
        x.extend_from_slice(p);
        Ok(self.net.forward(&x)?[0])
    }

    fn field(&self, q: &[S], p: &[S]) -> Result<(Vec<S>, Vec<S>)> {
        expect_len(q, self.dim, "state")?;
        expect_len(p, self.dim, "costate")?;
        let mut x = q.to_vec();
        x.extend_from_slice(p);
        let input = Tensor::matrix(1, 2 * self.dim, x)?;
        let (_, grad) = self.net.input_grad_batch(&input)?;
        let g = grad.data();
        let dq = g[self.dim..].to_vec();
        let dp = g[..self.dim].iter().map(|&v| -v).collect();
        Ok((dq, dp))
    }

    fn field_batch(&self, q: &Tensor<S>, p: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let (rows, n) = q.dims2();
        let (prows, pn) = p.dims2();
        if rows != prows || n != self.dim || pn != n {
            return Err(Error::shape(format!(
                "field_batch needs matching (batch, {}) tensors, got ({rows}, {n}) and ({prows}, {pn})",
                self.dim
            )));
        }
        let mut x = Vec::with_capacity(rows * 2 * n);
        for r in 0..rows {
            x.extend_from_slice(q.row(r));
            x.extend_from_slice(p.row(r));
        }
        let input = Tensor::matrix(rows, 2 * n, x)?;
        let (_, grad) = self.net.input_grad_batch(&input)?;
        let mut dq = Vec::with_capacity(rows * n);
        let mut dp = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let g = grad.row(r);
            dq.extend_from_slice(&g[n..]);
            dp.extend(g[..n].iter().map(|&v| -v));
        }
        Ok((Tensor::matrix(rows, n, dq)?, Tensor::matrix(rows, n, dp)?))
    }
}

fn check_finite_point<S: Scalar>(q: &[S], p: &[S], step: usize) -> Result<()> {
    if q.iter().chain(p).any(|v| !v.widen().is_finite()) {
        return Err(Error::non_finite(format!("rollout step {step}")));
    }
    Ok(())
}

/// Fixed-step RK4 integration of the symplectic field over [0, t_span].
/// Backward runs negate the field, so they retrace a forward rollout from
/// its endpoint; their recorded times run from t_span down to 0.
pub fn rollout<S: Scalar>(
    ham: &dyn Hamiltonian<S>,
    q0: &[S],
    p0: &[S],
    t_span: S,
    steps: usize,
    direction: Direction,
) -> Result<Trajectory<S>> {
    if steps == 0 {
        return Err(Error::InvalidSteps);
    }
    if !(t_span > S::zero()) {
        return Err(Error::shape("rollout needs a positive time span"));
    }
    let n = ham.dim();
    expect_len(q0, n, "state")?;
    expect_len(p0, n, "costate")?;
    let dt = t_span / S::of(steps as f64);
    let sign = direction.sign::<S>();
    let eval = |q: &[S], p: &[S]| -> Result<(Vec<S>, Vec<S>)> {
        let (mut dq, mut dp) = ham.field(q, p)?;
        for v in dq.iter_mut().chain(dp.iter_mut()) {
            *v = *v * sign;
        }
        Ok((dq, dp))
    };
    let shift = |base: &[S], dir: &[S], a: S| -> Vec<S> {
        base.iter().zip(dir).map(|(&b, &d)| b + a * d).collect()
    };
    let mut times = Vec::with_capacity(steps + 1);
    let mut points = Vec::with_capacity(steps + 1);
    let time_at = |k: usize| -> S {
        let t = dt * S::of(k as f64);
        match direction {
            Direction::Forward => t,
            Direction::Backward => t_span - t,
        }
    };
    check_finite_point(q0, p0, 0)?;
    times.push(time_at(0));
    points.push(PhasePoint { q: q0.to_vec(), p: p0.to_vec() });
    let (mut q, mut p) = (q0.to_vec(), p0.to_vec());
    let half = dt * S::of(0.5);
    let sixth = dt / S::of(6.0);
    for k in 0..steps {
        let (k1q, k1p) = eval(&q, &p)?;
        let (k2q, k2p) = eval(&shift(&q, &k1q, half), &shift(&p, &k1p, half))?;
        let (k3q, k3p) = eval(&shift(&q, &k2q, half), &shift(&p, &k2p, half))?;
        let (k4q, k4p) = eval(&shift(&q, &k3q, dt), &shift(&p, &k3p, dt))?;
        for i in 0..n {
            let two = S::of(2.0);
            q[i] = q[i] + sixth * (k1q[i] + two * k2q[i] + two * k3q[i] + k4q[i]);
            p[i] = p[i] + sixth * (k1p[i] + two * k2p[i] + two * k3p[i] + k4p[i]);
        }
        check_finite_point(&q, &p, k + 1)?;
        times.push(time_at(k + 1));
        points.push(PhasePoint { q: q.clone(), p: p.clone() });
    }
    Ok(Trajectory { times, points })
}

fn lin<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, s: S) -> Result<Tensor<S>> {
    let (r, c) = a.dims2();
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + s * y).collect();
    Tensor::matrix(r, c, data)
}

/// Batched [`rollout`]: all rows advance together. Returns the history of
/// (q, p) tensors, `steps + 1` entries.
pub fn rollout_batch<S: Scalar>(
    ham: &dyn Hamiltonian<S>,
    q0: &Tensor<S>,
    p0: &Tensor<S>,
    t_span: S,
    steps: usize,
    direction: Direction,
) -> Result<Vec<(Tensor<S>, Tensor<S>)>> {
    if steps == 0 {
        return Err(Error::InvalidSteps);
    }
    if !(t_span > S::zero()) {
        return Err(Error::shape("rollout needs a positive time span"));
    }
    let dt = t_span / S::of(steps as f64);
    let sign = direction.sign::<S>();
    let eval = |q: &Tensor<S>, p: &Tensor<S>| -> Result<(Tensor<S>, Tensor<S>)> {
        let (mut dq, mut dp) = ham.field_batch(q, p)?;
        for v in dq.data_mut().iter_mut().chain(dp.data_mut().iter_mut()) {
            *v = *v * sign;
        }
        Ok((dq, dp))
    };
    let half = dt * S::of(0.5);
    let sixth = dt / S::of(6.0);
    let two = S::of(2.0);
    let mut history = Vec::with_capacity(steps + 1);
    let (mut q, mut p) = (q0.clone(), p0.clone());
    history.push((q.clone(), p.clone()));
    for k in 0..steps {
        let (k1q, k1p) = eval(&q, &p)?;
        let (k2q, k2p) = eval(&lin(&q, &k1q, half)?, &lin(&p, &k1p, half)?)?;
        let (k3q, k3p) = eval(&lin(&q, &k2q, half)?, &lin(&p, &k2p, half)?)?;
        let (k4q, k4p) = eval(&lin(&q, &k3q, dt)?, &lin(&p, &k3p, dt)?)?;
        let combine = |z: &Tensor<S>,
                       k1: &Tensor<S>,
                       k2: &Tensor<S>,
                       k3: &Tensor<S>,
                       k4: &Tensor<S>|
         -> Result<Tensor<S>> {
            let (r, c) = z.dims2();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r * c {
                let inc = k1.data()[i] + two * k2.data()[i] + two * k3.data()[i] + k4.data()[i];
                data.push(z.data()[i] + sixth * inc);
            }
            Tensor::matrix(r, c, data)
        };
        q = combine(&q, &k1q, &k2q, &k3q, &k4q)?;
        p = combine(&p, &k1p, &k2p, &k3p, &k4p)?;
        if q.data().iter().chain(p.data()).any(|v| !v.widen().is_finite()) {
            return Err(Error::non_finite(format!("rollout step {}", k + 1)));
        }
        history.push((q.clone(), p.clone()));
    }
    Ok(history)
}

fn learned_field_on_tape<S: Scalar>(
    tape: &mut DiffTape<S>,
    net: &Mlp<S>,
    vars: &MlpVars,
    q: NodeId,
    p: NodeId,
    n: usize,
    sign: S,
) -> Result<(NodeId, NodeId)> {
    let x = tape.concat_cols(q, p)?;
    let (_, grad) = net.forward_and_input_grad_on_tape(tape, vars, x)?;
    let gq = tape.slice_cols(grad, 0, n)?;
    let gp = tape.slice_cols(grad, n, n)?;
    let dq = tape.scale(gp, sign)?;
    let dp = tape.scale(gq, -sign)?;
    Ok((dq, dp))
}

/// RK4 rollout unrolled as tape operations over a learned Hamiltonian, so
/// the endpoint differentiates w.r.t. the network parameters (and the
/// start state if it is tracked). Returns the final (q, p) nodes.
pub fn rollout_on_tape<S: Scalar>(
    tape: &mut DiffTape<S>,
    net: &Mlp<S>,
    vars: &MlpVars,
    q0: NodeId,
    p0: NodeId,
    t_span: S,
    steps: usize,
    direction: Direction,
) -> Result<(NodeId, NodeId)> {
    if steps == 0 {
        return Err(Error::InvalidSteps);
    }
    if !(t_span > S::zero()) {
        return Err(Error::shape("rollout needs a positive time span"));
    }
    let (_, n) = tape.value(q0).dims2();
    if net.input_dim() != 2 * n {
        return Err(Error::shape(format!(
            "network expects {} inputs, rollout state has {n}",
            net.input_dim()
        )));
    }
    let dt = t_span / S::of(steps as f64);
    let sign = direction.sign::<S>();
    let half = dt * S::of(0.5);
    let sixth = dt / S::of(6.0);
    let axpy = |tape: &mut DiffTape<S>, y: NodeId, x: NodeId, a: S| -> Result<NodeId> {
        let ax = tape.affine(x, a, S::zero())?;
        tape.add(y, ax)
    };
    let (mut q, mut p) = (q0, p0);
    for _ in 0..steps {
        let (k1q, k1p) = learned_field_on_tape(tape, net, vars, q, p, n, sign)?;
        let q2 = axpy(tape, q, k1q, half)?;
        let p2 = axpy(tape, p, k1p, half)?;
        let (k2q, k2p) = learned_field_on_tape(tape, net, vars, q2, p2, n, sign)?;
        let q3 = axpy(tape, q, k2q, half)?;
        let p3 = axpy(tape, p, k2p, half)?;
        let (k3q, k3p) = learned_field_on_tape(tape, net, vars, q3, p3, n, sign)?;
        let q4 = axpy(tape, q, k3q, dt)?;
        let p4 = axpy(tape, p, k3p, dt)?;
        let (k4q, k4p) = learned_field_on_tape(tape, net, vars, q4, p4, n, sign)?;
        let combine = |tape: &mut DiffTape<S>,
                       z: NodeId,
                       k1: NodeId,
                       k2: NodeId,
                       k3: NodeId,
                       k4: NodeId|
         -> Result<NodeId> {
            let mid = tape.add(k2, k3)?;
            let mid2 = tape.affine(mid, S::of(2.0), S::zero())?;
            let ends = tape.add(k1, k4)?;
            let inc = tape.add(ends, mid2)?;
            axpy(tape, z, inc, sixth)
        };
        q = combine(tape, q, k1q, k2q, k3q, k4q)?;
        p = combine(tape, p, k1p, k2p, k3p, k4p)?;
    }
    if tape.value(q).data().iter().chain(tape.value(p).data()).any(|v| !v.widen().is_finite()) {
        return Err(Error::non_finite("rollout on tape"));
    }
    Ok((q, p))
}
