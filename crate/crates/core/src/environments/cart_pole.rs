//! Continuous cart pole: a pole balancing on a force-driven cart.
//!
//! State (x, x-dot, theta, theta-dot) with theta measured from vertical.
//! The ODE is the frictionless cart-pole of the classic control suites,
//! with the force as a continuous scalar control. For a fixed state the
//! acceleration terms are exactly affine in the force, so the affinity
//! probe recovers f_u without error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{expect_len, Environment};
use crate::autodiff::{DiffTape, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::render::{draw_cart_pole, Frame};
use crate::scalar::Scalar;

const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
const HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = MASS_POLE * HALF_LENGTH;

#[derive(Clone, Debug, Default)]
pub struct CartPole;

impl CartPole {
    pub fn new() -> CartPole {
        CartPole
    }
}

impl<S: Scalar> Environment<S> for CartPole {
    fn name(&self) -> &'static str {
        "cartpole"
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn flow(&self, q: &[S], v: &[S]) -> Result<Vec<S>> {
        expect_len(q, 4, "cart pole state")?;
        expect_len(v, 1, "cart pole control")?;
        let (xd, th, thd) = (q[1], q[2], q[3]);
        let force = v[0];
        let (sin, cos) = (th.sin(), th.cos());
        let temp = (force + S::of(POLE_MASS_LENGTH) * thd * thd * sin) / S::of(TOTAL_MASS);
        let th_acc = (S::of(GRAVITY) * sin - cos * temp)
            / (S::of(HALF_LENGTH)
                * (S::of(4.0 / 3.0) - S::of(MASS_POLE) * cos * cos / S::of(TOTAL_MASS)));
        let x_acc = temp - S::of(POLE_MASS_LENGTH) * th_acc * cos / S::of(TOTAL_MASS);
        Ok(vec![xd, x_acc, thd, th_acc])
    }

    fn running_cost(&self, q: &[S]) -> Result<S> {
        expect_len(q, 4, "cart pole state")?;
        Ok(q[2] * q[2])
    }

    fn terminal_cost(&self, q: &[S]) -> Result<S> {
        expect_len(q, 4, "cart pole state")?;
        Ok(q[2] * q[2] + S::of(0.1) * q[3] * q[3])
    }

    fn grad_terminal(&self, q: &[S]) -> Result<Vec<S>> {
        expect_len(q, 4, "cart pole state")?;
        Ok(vec![S::zero(), S::zero(), S::of(2.0) * q[2], S::of(0.2) * q[3]])
    }

    fn sample_q0(&self, seed: u64) -> Result<Vec<S>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..4).map(|_| S::of(rng.gen_range(-0.05..0.05))).collect())
    }

    fn render(&self, q: &[S]) -> Result<Frame> {
        let q64: Vec<f64> = q.iter().map(|v| v.widen()).collect();
        draw_cart_pole(&q64)
    }

    fn flow_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId, v: NodeId) -> Result<NodeId> {
        let (_, n) = tape.value(q).dims2();
        let (_, m) = tape.value(v).dims2();
        if n != 4 || m != 1 {
            return Err(Error::shape(format!(
                "cart pole flow needs 4-dim state and scalar control, got {n} and {m}"
            )));
        }
        let xd = tape.slice_cols(q, 1, 1)?;
        let th = tape.slice_cols(q, 2, 1)?;
        let thd = tape.slice_cols(q, 3, 1)?;
        let sin = tape.sin(th)?;
        let cos = tape.cos(th)?;
        let thd2 = tape.mul(thd, thd)?;
        let swing = tape.mul(thd2, sin)?;
        let swing = tape.affine(swing, S::of(POLE_MASS_LENGTH), S::zero())?;
        let pushed = tape.add(v, swing)?;
        let temp = tape.affine(pushed, S::of(1.0 / TOTAL_MASS), S::zero())?;
        let cos2 = tape.mul(cos, cos)?;
        let denom = tape.affine(
            cos2,
            S::of(-HALF_LENGTH * MASS_POLE / TOTAL_MASS),
            S::of(HALF_LENGTH * 4.0 / 3.0),
        )?;
        let grav = tape.affine(sin, S::of(GRAVITY), S::zero())?;
        let lean = tape.mul(cos, temp)?;
        let numer = tape.sub(grav, lean)?;
        let th_acc = tape.div(numer, denom)?;
        let react = tape.mul(th_acc, cos)?;
        let react = tape.affine(react, S::of(POLE_MASS_LENGTH / TOTAL_MASS), S::zero())?;
        let x_acc = tape.sub(temp, react)?;
        let front = tape.concat_cols(xd, x_acc)?;
        let back = tape.concat_cols(thd, th_acc)?;
        tape.concat_cols(front, back)
    }

    fn running_cost_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId> {
        let th = tape.slice_cols(q, 2, 1)?;
        tape.mul(th, th)
    }

    fn terminal_cost_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId> {
        let th = tape.slice_cols(q, 2, 1)?;
        let thd = tape.slice_cols(q, 3, 1)?;
        let a = tape.mul(th, th)?;
        let b = tape.mul(thd, thd)?;
        let b = tape.affine(b, S::of(0.1), S::zero())?;
        tape.add(a, b)
    }

    fn grad_terminal_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId> {
        // (0, 0, 2 theta, 0.2 theta-dot) as one diagonal matrix product
        let diag = Tensor::matrix(
            4,
            4,
            vec![
                S::zero(), S::zero(), S::zero(), S::zero(),
                S::zero(), S::zero(), S::zero(), S::zero(),
                S::zero(), S::zero(), S::of(2.0), S::zero(),
                S::zero(), S::zero(), S::zero(), S::of(0.2),
            ],
        )?;
        let d = tape.constant(diag)?;
        tape.matmul(q, d, false, true)
    }
}
