//! Ground truth to grade learned controllers against: the closed-form LQ
//! solution, cost evaluation under the true dynamics, and a direct
//! trajectory optimizer that needs no networks at all.
//!
//! Everything here deliberately avoids the learned machinery. Costs are
//! integrated with the same fixed-step RK4 and trapezoid rule everywhere,
//! so numbers from different controllers are comparable.

use crate::autodiff::{DiffTape, NodeId, Tensor};
use crate::dynamics::{optimal_control, Trajectory};
use crate::environments::{expect_len, Environment};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::training::Adam;

/// Piecewise-constant control over [0, t_span]: `controls[k]` applies on
/// the k-th of `controls.len()` equal segments.
#[derive(Clone, Debug)]
pub struct ControlSchedule<S> {
    t_span: S,
    controls: Vec<Vec<S>>,
}

impl<S: Scalar> ControlSchedule<S> {
    pub fn new(t_span: S, controls: Vec<Vec<S>>) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::InvalidSteps);
        }
        if !(t_span > S::zero()) {
            return Err(Error::shape("control schedule needs a positive time span"));
        }
        let m = controls[0].len();
        if controls.iter().any(|c| c.len() != m) {
            return Err(Error::shape("control schedule segments must have equal width"));
        }
        Ok(ControlSchedule { t_span, controls })
    }

    pub fn zeros(t_span: S, segments: usize, control_dim: usize) -> Result<Self> {
        ControlSchedule::new(t_span, vec![vec![S::zero(); control_dim]; segments])
    }

    pub fn t_span(&self) -> S {
        self.t_span
    }

    pub fn segments(&self) -> usize {
        self.controls.len()
    }

    pub fn control_dim(&self) -> usize {
        self.controls[0].len()
    }

    /// Control on the evaluation grid: node k of `steps` steps falls in
    /// segment `k * segments / steps`; the final node reuses the last
    /// segment (the schedule is right-open).
    pub fn at_node(&self, k: usize, steps: usize) -> &[S] {
        let j = (k * self.controls.len() / steps).min(self.controls.len() - 1);
        &self.controls[j]
    }
}

/// Closed-form solution of the LQ problem: dynamics q-dot = v, running
/// cost (|q|^2 + |v|^2) / 2, terminal cost c |q(T)|^2 / 2. Coordinates
/// decouple; each follows q(t) = A cosh t + B sinh t with A = q0 and
/// B = -p0, where the optimality system fixes
/// p0 = q0 (c cosh T + sinh T) / (cosh T + c sinh T).
#[derive(Clone, Debug)]
pub struct LqSolution<S> {
    pub p0: Vec<S>,
    pub j_star: S,
    a: Vec<S>,
    b: Vec<S>,
}

impl<S: Scalar> LqSolution<S> {
    /// Optimal (q, p) at time t.
    pub fn at(&self, t: S) -> (Vec<S>, Vec<S>) {
        let (ch, sh) = (t.cosh(), t.sinh());
        let q = self.a.iter().zip(&self.b).map(|(&a, &b)| a * ch + b * sh).collect();
        let p = self.a.iter().zip(&self.b).map(|(&a, &b)| -(a * sh + b * ch)).collect();
        (q, p)
    }

    /// The optimal control at time t is -p(t).
    pub fn control_at(&self, t: S) -> Vec<S> {
        self.at(t).1.into_iter().map(|v| -v).collect()
    }
}

pub fn lq_analytic<S: Scalar>(q0: &[S], t_span: S, terminal_weight: S) -> Result<LqSolution<S>> {
    if q0.is_empty() {
        return Err(Error::shape("lq solution needs a nonempty state"));
    }
    if !(t_span > S::zero()) {
        return Err(Error::shape("lq solution needs a positive time span"));
    }
    let c = terminal_weight;
    let (ch, sh) = (t_span.cosh(), t_span.sinh());
    let gain = (c * ch + sh) / (ch + c * sh);
    let p0: Vec<S> = q0.iter().map(|&q| q * gain).collect();
    let a = q0.to_vec();
    let b: Vec<S> = p0.iter().map(|&p| -p).collect();
    let (ch2, sh2) = ((t_span + t_span).cosh(), (t_span + t_span).sinh());
    let quarter = S::of(0.25);
    let half = S::of(0.5);
    let mut j = S::zero();
    for (&ai, &bi) in a.iter().zip(&b) {
        let run = (ai * ai + bi * bi) * sh2 * quarter + ai * bi * (ch2 - S::one()) * half;
        let q_end = ai * ch + bi * sh;
        j = j + run + half * c * q_end * q_end;
    }
    Ok(LqSolution { p0, j_star: j, a, b })
}

/// Integrates the true dynamics under a piecewise-constant control and
/// returns the total cost: trapezoid rule on l1(q) + |v|^2 / 2 over
/// `steps` RK4 steps, plus the terminal cost.
pub fn evaluate_cost<S: Scalar>(
    env: &dyn Environment<S>,
    q0: &[S],
    schedule: &ControlSchedule<S>,
    steps: usize,
) -> Result<S> {
    if steps == 0 {
        return Err(Error::InvalidSteps);
    }
    let n = env.state_dim();
    expect_len(q0, n, "state")?;
    if schedule.control_dim() != env.control_dim() {
        return Err(Error::shape(format!(
            "schedule controls have {} entries, environment wants {}",
            schedule.control_dim(),
            env.control_dim()
        )));
    }
    let t_span = schedule.t_span();
    let dt = t_span / S::of(steps as f64);
    let half = S::of(0.5);
    let node_cost = |q: &[S], v: &[S]| -> Result<S> {
        let vnorm = v.iter().fold(S::zero(), |acc, &x| acc + x * x);
        Ok(env.running_cost(q)? + half * vnorm)
    };
    let mut q = q0.to_vec();
    let mut j = half * dt * node_cost(&q, schedule.at_node(0, steps))?;
    for k in 0..steps {
        let v = schedule.at_node(k, steps);
        let shift = |base: &[S], dir: &[S], a: S| -> Vec<S> {
            base.iter().zip(dir).map(|(&b, &d)| b + a * d).collect()
        };
        let k1 = env.flow(&q, v)?;
        let k2 = env.flow(&shift(&q, &k1, half * dt), v)?;
        let k3 = env.flow(&shift(&q, &k2, half * dt), v)?;
        let k4 = env.flow(&shift(&q, &k3, dt), v)?;
        let sixth = dt / S::of(6.0);
        let two = S::of(2.0);
        for i in 0..n {
            q[i] = q[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
        }
        if q.iter().any(|x| !x.widen().is_finite()) {
            return Err(Error::non_finite(format!("cost evaluation step {}", k + 1)));
        }
        // interior nodes weigh dt, the end node dt / 2; the end node reuses
        // the final segment's control
        let weight = if k + 1 == steps { half * dt } else { dt };
        j = j + weight * node_cost(&q, schedule.at_node(k + 1, steps))?;
    }
    Ok(j + env.terminal_cost(&q)?)
}

/// Reads the control schedule a learned flow implies: at every interior
/// trajectory node, the closed-form optimal control -F(q)^T p.
pub fn schedule_from_trajectory<S: Scalar>(
    env: &dyn Environment<S>,
    traj: &Trajectory<S>,
) -> Result<ControlSchedule<S>> {
    if traj.points.len() < 2 {
        return Err(Error::InvalidSteps);
    }
    let t_span = (traj.times[traj.times.len() - 1] - traj.times[0]).abs();
    let mut controls = Vec::with_capacity(traj.points.len() - 1);
    for pt in &traj.points[..traj.points.len() - 1] {
        controls.push(optimal_control(env, &pt.q, &pt.p)?);
    }
    ControlSchedule::new(t_span, controls)
}

fn unroll_cost_on_tape<S: Scalar>(
    env: &dyn Environment<S>,
    tape: &mut DiffTape<S>,
    q0: &[S],
    v_var: NodeId,
    t_span: S,
    steps: usize,
) -> Result<NodeId> {
    let n = env.state_dim();
    let dt = t_span / S::of(steps as f64);
    let half = S::of(0.5);
    let mut q = tape.constant(Tensor::matrix(1, n, q0.to_vec())?)?;
    let mut total: Option<NodeId> = None;
    let mut add_node_cost = |tape: &mut DiffTape<S>,
                             total: &mut Option<NodeId>,
                             q: NodeId,
                             v: NodeId,
                             weight: S|
     -> Result<()> {
        let l1 = env.running_cost_on_tape(tape, q)?;
        let v2 = tape.mul(v, v)?;
        let vnorm = tape.row_sum(v2)?;
        let vcost = tape.affine(vnorm, half, S::zero())?;
        let node = tape.add(l1, vcost)?;
        let weighted = tape.affine(node, weight, S::zero())?;
        *total = Some(match *total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
        Ok(())
    };
    let v0 = tape.slice_rows(v_var, 0, 1)?;
    add_node_cost(tape, &mut total, q, v0, half * dt)?;
    for k in 0..steps {
        let v = tape.slice_rows(v_var, k, 1)?;
        let k1 = env.flow_on_tape(tape, q, v)?;
        let q2 = axpy(tape, q, k1, half * dt)?;
        let k2 = env.flow_on_tape(tape, q2, v)?;
        let q3 = axpy(tape, q, k2, half * dt)?;
        let k3 = env.flow_on_tape(tape, q3, v)?;
        let q4 = axpy(tape, q, k3, dt)?;
        let k4 = env.flow_on_tape(tape, q4, v)?;
        let mid = tape.add(k2, k3)?;
        let mid2 = tape.affine(mid, S::of(2.0), S::zero())?;
        let ends = tape.add(k1, k4)?;
        let inc = tape.add(ends, mid2)?;
        q = axpy(tape, q, inc, dt / S::of(6.0))?;
        let weight = if k + 1 == steps { half * dt } else { dt };
        let v_node = tape.slice_rows(v_var, (k + 1).min(steps - 1), 1)?;
        add_node_cost(tape, &mut total, q, v_node, weight)?;
    }
    let g = env.terminal_cost_on_tape(tape, q)?;
    tape.add(total.expect("at least one node cost"), g)
}

fn axpy<S: Scalar>(tape: &mut DiffTape<S>, y: NodeId, x: NodeId, a: S) -> Result<NodeId> {
    let ax = tape.affine(x, a, S::zero())?;
    tape.add(y, ax)
}

/// Optimizes a piecewise-constant control schedule directly against the
/// true dynamics: one control per RK4 step, Adam on the discretized cost.
/// Returns the best schedule seen and its [`evaluate_cost`] value, which
/// by construction never exceeds the zero-schedule cost.
pub fn direct_optimize<S: Scalar>(
    env: &dyn Environment<S>,
    q0: &[S],
    t_span: S,
    steps: usize,
    iters: usize,
    lr: S,
) -> Result<(ControlSchedule<S>, S)> {
    if steps == 0 {
        return Err(Error::InvalidSteps);
    }
    if !(lr > S::zero()) {
        return Err(Error::SchemaError { reason: "learning rate must be > 0".into() });
    }
    expect_len(q0, env.state_dim(), "state")?;
    let m = env.control_dim();
    let mut sched = Tensor::matrix(steps, m, vec![S::zero(); steps * m])?;
    let mut best = ControlSchedule::zeros(t_span, steps, m)?;
    let mut best_cost = evaluate_cost(env, q0, &best, steps)?;
    let mut adam = Adam::new(lr);
    for _ in 0..iters {
        let mut tape = DiffTape::new();
        let v_var = tape.var(sched.clone())?;
        let cost = unroll_cost_on_tape(env, &mut tape, q0, v_var, t_span, steps)?;
        let mut grads = tape.backward(cost)?;
        let grad = grads.take(v_var).ok_or(Error::EmptyBatch)?;
        adam.step(&mut [&mut sched], &[grad])?;
        let candidate = ControlSchedule::new(
            t_span,
            (0..steps).map(|k| sched.row(k).to_vec()).collect(),
        )?;
        let cost_now = evaluate_cost(env, q0, &candidate, steps)?;
        if cost_now < best_cost {
            best_cost = cost_now;
            best = candidate;
        }
    }
    Ok((best, best_cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{by_name, Lq};

    #[test]
    fn unit_horizon_unit_weight_solution_is_the_identity() {
        // with c = 1, T = 1 the gain collapses to 1: p0 = q0, J = |q0|^2 / 2
        let sol = lq_analytic(&[0.8, -0.6], 1.0, 1.0).unwrap();
        assert!((sol.p0[0] - 0.8).abs() < 1e-14);
        assert!((sol.p0[1] + 0.6).abs() < 1e-14);
        assert!((sol.j_star - 0.5).abs() < 1e-14);
        let (q1, p1) = sol.at(1.0);
        // q(T) = q0 e^{-T} on this branch
        assert!((q1[0] - 0.8 * (-1.0f64).exp()).abs() < 1e-14);
        assert!((p1[0] - q1[0]).abs() < 1e-14);
    }

    #[test]
    fn analytic_control_replayed_through_the_integrator_hits_j_star() {
        let env = Lq::default();
        let q0 = [0.9, -0.4];
        let sol = lq_analytic(&q0, 1.0, 1.0).unwrap();
        let steps = 200;
        let controls: Vec<Vec<f64>> = (0..steps)
            .map(|k| sol.control_at((k as f64 + 0.5) / steps as f64))
            .collect();
        let sched = ControlSchedule::new(1.0, controls).unwrap();
        let j = evaluate_cost(&env, &q0, &sched, steps).unwrap();
        let rel = (j - sol.j_star).abs() / sol.j_star;
        assert!(rel < 5e-3, "replayed cost {j} vs {}", sol.j_star);
    }

    #[test]
    fn piecewise_control_cost_matches_hand_integration() {
        // 1-dim double ramp: v = +1 then -1 from q0 = 0 gives
        // J = 1/24 + 1/2 exactly (terminal state returns to 0)
        let env = Lq::new(1, 1.0);
        let sched = ControlSchedule::new(1.0, vec![vec![1.0], vec![-1.0]]).unwrap();
        let j = evaluate_cost(&env, &[0.0], &sched, 100).unwrap();
        let exact = 1.0 / 24.0 + 0.5;
        assert!((j - exact).abs() < 1e-4, "{j} vs {exact}");
    }

    #[test]
    fn zero_steps_and_empty_schedules_are_rejected() {
        let env = Lq::default();
        let sched = ControlSchedule::zeros(1.0, 4, 2).unwrap();
        assert!(matches!(
            evaluate_cost(&env, &[0.1, 0.2], &sched, 0),
            Err(Error::InvalidSteps)
        ));
        assert!(matches!(ControlSchedule::<f64>::new(1.0, vec![]), Err(Error::InvalidSteps)));
    }

    #[test]
    fn direct_optimization_recovers_the_lq_optimum() {
        let env = Lq::default();
        let q0 = [0.7, -0.5];
        let sol = lq_analytic(&q0, 1.0, 1.0).unwrap();
        let (sched, j) = direct_optimize(&env, &q0, 1.0, 50, 2000, 0.02).unwrap();
        let rel = (j - sol.j_star).abs() / sol.j_star;
        assert!(rel < 0.01, "direct cost {j} vs analytic {}", sol.j_star);
        // the first control should approximate -p0
        for i in 0..2 {
            let rel = (sched.at_node(0, 50)[i] + sol.p0[i]).abs() / sol.p0[i].abs();
            assert!(rel < 0.02, "control coord {i}: {} vs {}", sched.at_node(0, 50)[i], -sol.p0[i]);
        }
    }

    #[test]
    fn optimizer_never_returns_worse_than_doing_nothing() {
        let env = by_name::<f64>("cartpole").unwrap();
        let q0 = env.sample_q0(1).unwrap();
        let zero = ControlSchedule::zeros(1.0, 25, 1).unwrap();
        let j_zero = evaluate_cost(env.as_ref(), &q0, &zero, 25).unwrap();
        let (_, j) = direct_optimize(env.as_ref(), &q0, 1.0, 25, 40, 0.05).unwrap();
        assert!(j <= j_zero + 1e-12, "{j} vs zero-schedule {j_zero}");
    }

    #[test]
    fn zero_iterations_return_the_zero_schedule() {
        let env = Lq::default();
        let q0 = [0.4, 0.1];
        let (sched, j) = direct_optimize(&env, &q0, 1.0, 10, 0, 0.01).unwrap();
        assert!(sched.at_node(0, 10).iter().all(|v| *v == 0.0));
        let zero = ControlSchedule::zeros(1.0, 10, 2).unwrap();
        let j_zero = evaluate_cost(&env, &q0, &zero, 10).unwrap();
        assert_eq!(j, j_zero);
    }

    #[test]
    fn schedules_resample_to_coarser_and_finer_grids() {
        let sched = ControlSchedule::new(1.0, vec![vec![1.0], vec![2.0]]).unwrap();
        // 10 evaluation steps: nodes 0..4 read segment 0, 5..10 segment 1
        assert_eq!(sched.at_node(0, 10)[0], 1.0);
        assert_eq!(sched.at_node(4, 10)[0], 1.0);
        assert_eq!(sched.at_node(5, 10)[0], 2.0);
        assert_eq!(sched.at_node(10, 10)[0], 2.0);
        // 1 evaluation step: both nodes read some segment without panicking
        assert_eq!(sched.at_node(0, 1)[0], 1.0);
        assert_eq!(sched.at_node(1, 1)[0], 2.0);
    }

    #[test]
    fn trajectory_extraction_reads_controls_at_interior_nodes() {
        use crate::dynamics::{rollout, Direction, EnvHamiltonian};
        let env = Lq::default();
        let ham = EnvHamiltonian::new(&env);
        let q0 = [0.5, -0.2];
        let sol = lq_analytic(&q0, 1.0, 1.0).unwrap();
        let traj = rollout(&ham, &q0, &sol.p0, 1.0, 50, Direction::Forward).unwrap();
        let sched = schedule_from_trajectory(&env, &traj).unwrap();
        assert_eq!(sched.segments(), 50);
        // first extracted control is -p0 up to integrator error
        for i in 0..2 {
            assert!((sched.at_node(0, 50)[i] + sol.p0[i]).abs() < 1e-9);
        }
        // replaying the extracted schedule lands within a percent of J*
        let j = evaluate_cost(&env, &q0, &sched, 50).unwrap();
        assert!((j - sol.j_star).abs() / sol.j_star < 0.01, "{j} vs {}", sol.j_star);
    }
}
