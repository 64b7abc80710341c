//! Continuous mountain car: a weak engine climbing out of a valley.
//!
//! State (x, x-dot). The hill profile is sin(3x), so gravity pulls with
//! -cos(3x) along the track; the engine adds a scaled continuous thrust.
//! The cost pulls toward crossing the right crest at speed, which makes
//! reaching the flag the cheap option rather than idling in the valley.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{expect_len, Environment};
use crate::autodiff::{DiffTape, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::render::{draw_mountain_car, Frame};
use crate::scalar::Scalar;

const THRUST_GAIN: f64 = 4.0;
const GRAVITY_GAIN: f64 = 2.5;
const GOAL_X: f64 = 0.45;
const GOAL_XD: f64 = 1.5;

#[derive(Clone, Debug, Default)]
pub struct MountainCar;

impl MountainCar {
    pub fn new() -> MountainCar {
        MountainCar
    }

    pub fn goal_position(&self) -> f64 {
        GOAL_X
    }
}

fn target_cost<S: Scalar>(q: &[S]) -> S {
    let dx = q[0] - S::of(GOAL_X);
    let dv = q[1] - S::of(GOAL_XD);
    dx * dx + dv * dv
}

impl<S: Scalar> Environment<S> for MountainCar {
    fn name(&self) -> &'static str {
        "mountaincar"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn flow(&self, q: &[S], v: &[S]) -> Result<Vec<S>> {
        expect_len(q, 2, "mountain car state")?;
        expect_len(v, 1, "mountain car control")?;
        let acc = S::of(THRUST_GAIN) * v[0] - S::of(GRAVITY_GAIN) * (S::of(3.0) * q[0]).cos();
        Ok(vec![q[1], acc])
    }

    fn running_cost(&self, q: &[S]) -> Result<S> {
        expect_len(q, 2, "mountain car state")?;
        Ok(target_cost(q))
    }

    fn terminal_cost(&self, q: &[S]) -> Result<S> {
        expect_len(q, 2, "mountain car state")?;
        Ok(target_cost(q))
    }

    fn grad_terminal(&self, q: &[S]) -> Result<Vec<S>> {
        expect_len(q, 2, "mountain car state")?;
        Ok(vec![
            S::of(2.0) * (q[0] - S::of(GOAL_X)),
            S::of(2.0) * (q[1] - S::of(GOAL_XD)),
        ])
    }

    fn sample_q0(&self, seed: u64) -> Result<Vec<S>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(vec![S::of(rng.gen_range(-0.6..-0.4)), S::zero()])
    }

    fn render(&self, q: &[S]) -> Result<Frame> {
        let q64: Vec<f64> = q.iter().map(|v| v.widen()).collect();
        draw_mountain_car(&q64)
    }

    fn flow_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId, v: NodeId) -> Result<NodeId> {
        let (_, n) = tape.value(q).dims2();
        let (_, m) = tape.value(v).dims2();
        if n != 2 || m != 1 {
            return Err(Error::shape(format!(
                "mountain car flow needs 2-dim state and scalar control, got {n} and {m}"
            )));
        }
        let x = tape.slice_cols(q, 0, 1)?;
        let xd = tape.slice_cols(q, 1, 1)?;
        let x3 = tape.affine(x, S::of(3.0), S::zero())?;
        let slope = tape.cos(x3)?;
        let pull = tape.affine(slope, S::of(-GRAVITY_GAIN), S::zero())?;
        let push = tape.affine(v, S::of(THRUST_GAIN), S::zero())?;
        let acc = tape.add(push, pull)?;
        tape.concat_cols(xd, acc)
    }

    fn running_cost_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId> {
        let goal = tape.constant(Tensor::matrix(
            1,
            2,
            vec![S::of(GOAL_X), S::of(GOAL_XD)],
        )?)?;
        let d = tape.sub(q, goal)?;
        let d2 = tape.mul(d, d)?;
        tape.row_sum(d2)
    }

    fn terminal_cost_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId> {
        self.running_cost_on_tape(tape, q)
    }

    fn grad_terminal_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId> {
        let goal = tape.constant(Tensor::matrix(
            1,
            2,
            vec![S::of(GOAL_X), S::of(GOAL_XD)],
        )?)?;
        let d = tape.sub(q, goal)?;
        tape.affine(d, S::of(2.0), S::zero())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valley_floor_pulls_nothing_sideways() {
        // cos(3x) = 0 at x = -pi/6: gravity term vanishes there
        let env = MountainCar::new();
        let x = -std::f64::consts::PI / 6.0;
        let f = Environment::<f64>::flow(&env, &[x, 0.0], &[0.0]).unwrap();
        assert!(f[1].abs() < 1e-15);
    }

    #[test]
    fn thrust_is_scaled_linearly() {
        let env = MountainCar::new();
        let base = Environment::<f64>::flow(&env, &[-0.5, 0.1], &[0.0]).unwrap();
        let pushed = Environment::<f64>::flow(&env, &[-0.5, 0.1], &[1.0]).unwrap();
        assert!((pushed[1] - base[1] - 4.0).abs() < 1e-12);
        assert_eq!(base[0], 0.1);
    }

    #[test]
    fn cost_is_zero_exactly_at_the_goal() {
        let env = MountainCar::new();
        assert_eq!(Environment::<f64>::terminal_cost(&env, &[0.45, 1.5]).unwrap(), 0.0);
        assert!(Environment::<f64>::terminal_cost(&env, &[-0.5, 0.0]).unwrap() > 0.9);
    }

    #[test]
    fn samples_start_parked_in_the_valley() {
        let env = MountainCar::new();
        for seed in 0..200 {
            let q: Vec<f64> = env.sample_q0(seed).unwrap();
            assert!(q[0] >= -0.6 && q[0] <= -0.4);
            assert_eq!(q[1], 0.0);
        }
    }

    #[test]
    fn tape_flow_and_costs_differentiate_correctly() {
        let env = MountainCar::new();
        let q = vec![-0.52, 0.37];
        let h = 1e-6;
        let mut tape = DiffTape::new();
        let qn = tape.var(Tensor::matrix(1, 2, q.clone()).unwrap()).unwrap();
        let cost = Environment::<f64>::running_cost_on_tape(&env, &mut tape, qn).unwrap();
        let loss = tape.sum(cost).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(qn).unwrap().clone();
        for i in 0..2 {
            let mut hi = q.clone();
            hi[i] += h;
            let mut lo = q.clone();
            lo[i] -= h;
            let fd = (Environment::<f64>::running_cost(&env, &hi).unwrap()
                - Environment::<f64>::running_cost(&env, &lo).unwrap())
                / (2.0 * h);
            assert!((g.data()[i] - fd).abs() < 1e-7);
        }
        let analytic = Environment::<f64>::grad_terminal(&env, &q).unwrap();
        assert!((g.data()[0] - analytic[0]).abs() < 1e-12);
        assert!((g.data()[1] - analytic[1]).abs() < 1e-12);
    }
}
