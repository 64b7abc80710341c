//! Linear-quadratic validation problem: integrator dynamics q-dot = v,
//! running cost (|q|^2 + |v|^2) / 2, terminal cost c |q|^2 / 2.
//!
//! Everything about it has a closed form (see [`crate::oracle`]), which is
//! why it anchors most of the end-to-end checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{expect_len, Environment};
use crate::autodiff::{DiffTape, NodeId, Tensor};
use crate::error::Result;
use crate::render::{draw_point_mass, Frame};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Lq {
    dim: usize,
    terminal_weight: f64,
}

impl Lq {
    pub fn new(dim: usize, terminal_weight: f64) -> Lq {
        Lq { dim, terminal_weight }
    }

    pub fn terminal_weight(&self) -> f64 {
        self.terminal_weight
    }
}

impl Default for Lq {
    fn default() -> Lq {
        Lq::new(2, 1.0)
    }
}

impl<S: Scalar> Environment<S> for Lq {
    fn name(&self) -> &'static str {
        "lq"
    }

    fn state_dim(&self) -> usize {
        self.dim
    }

    fn control_dim(&self) -> usize {
        self.dim
    }

    fn flow(&self, q: &[S], v: &[S]) -> Result<Vec<S>> {
        expect_len(q, self.dim, "lq state")?;
        expect_len(v, self.dim, "lq control")?;
        Ok(v.to_vec())
    }

    fn running_cost(&self, q: &[S]) -> Result<S> {
        expect_len(q, self.dim, "lq state")?;
        let half = S::of(0.5);
        Ok(half * q.iter().map(|&x| x * x).fold(S::zero(), |a, b| a + b))
    }

    fn terminal_cost(&self, q: &[S]) -> Result<S> {
        let l1 = self.running_cost(q)?;
        Ok(S::of(self.terminal_weight) * l1)
    }

    fn grad_terminal(&self, q: &[S]) -> Result<Vec<S>> {
        expect_len(q, self.dim, "lq state")?;
        let c = S::of(self.terminal_weight);
        Ok(q.iter().map(|&x| c * x).collect())
    }

    fn sample_q0(&self, seed: u64) -> Result<Vec<S>> {
        // uniform on the unit ball by rejection from the cube
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let q: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if q.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                return Ok(q.into_iter().map(S::of).collect());
            }
        }
    }

    fn render(&self, q: &[S]) -> Result<Frame> {
        let q64: Vec<f64> = q.iter().map(|v| v.widen()).collect();
        draw_point_mass(&q64)
    }

    fn flow_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId, v: NodeId) -> Result<NodeId> {
        let (_, n) = tape.value(q).dims2();
        let (_, m) = tape.value(v).dims2();
        if n != self.dim || m != self.dim {
            return Err(crate::error::Error::shape(format!(
                "lq flow needs {0}-dim state and control, got {n} and {m}",
                self.dim
            )));
        }
        Ok(v)
    }

    fn running_cost_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId> {
        let qq = tape.mul(q, q)?;
        let s = tape.row_sum(qq)?;
        tape.affine(s, S::of(0.5), S::zero())
    }

    fn terminal_cost_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId> {
        let l1 = self.running_cost_on_tape(tape, q)?;
        tape.affine(l1, S::of(self.terminal_weight), S::zero())
    }

    fn grad_terminal_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId> {
        tape.affine(q, S::of(self.terminal_weight), S::zero())
    }

    // field is trivial to keep identical to flow(); nothing q-dependent
    // exists to differentiate, so no override hooks are needed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow_is_the_control() {
        let env = Lq::default();
        let f = Environment::<f64>::flow(&env, &[3.0, -1.0], &[0.5, 2.0]).unwrap();
        assert_eq!(f, vec![0.5, 2.0]);
    }

    #[test]
    fn costs_and_gradient_have_the_quadratic_forms() {
        let env = Lq::new(2, 1.0);
        assert_eq!(Environment::<f64>::running_cost(&env, &[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(Environment::<f64>::terminal_cost(&env, &[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(Environment::<f64>::grad_terminal(&env, &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let half = Lq::new(2, 0.5);
        assert_eq!(
            Environment::<f64>::grad_terminal(&half, &[2.0, -2.0]).unwrap(),
            vec![1.0, -1.0]
        );
    }

    #[test]
    fn samples_stay_in_the_unit_ball() {
        let env = Lq::default();
        for seed in 0..1000 {
            let q: Vec<f64> = env.sample_q0(seed).unwrap();
            assert!(q.iter().map(|x| x * x).sum::<f64>() <= 1.0);
        }
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let env = Lq::default();
        assert!(Environment::<f64>::flow(&env, &[1.0], &[1.0, 2.0]).is_err());
        assert!(Environment::<f64>::running_cost(&env, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn tape_terminal_gradient_matches_plain() {
        let env = Lq::new(2, 0.7);
        let q = vec![0.4, -1.1];
        let plain: Vec<f64> = Environment::<f64>::grad_terminal(&env, &q).unwrap();
        let mut tape = DiffTape::new();
        let qn = tape.constant(Tensor::matrix(1, 2, q).unwrap()).unwrap();
        let g = Environment::<f64>::grad_terminal_on_tape(&env, &mut tape, qn).unwrap();
        assert_eq!(tape.value(g).data(), plain.as_slice());
    }
}
