//! Shape optimization on a level set: drive a 2-D region toward a disk.
//!
//! The state is 16 coefficients on a 4x4 lattice over the unit square.
//! Tensor-product cubic Lagrange interpolation (knots 0, 1/3, 2/3, 1)
//! extends them to a smooth field phi on a 64x64 vertex grid; the shape
//! is the region phi > 0. Grid spacing is 1/63, so lattice nodes land
//! exactly on grid vertices and the dense field reproduces the
//! coefficients there bit for bit.
//!
//! Cost is the normalized perimeter Peri / sqrt(Area), minimized by a
//! disk (value 2 sqrt(pi)). Perimeter comes from marching squares with
//! linear edge crossings; ambiguous saddle cells are split by the sign
//! of the corner average. Area counts vertices with phi > 0 times the
//! cell area. Both commute exactly with scaling phi by a power of two,
//! so the ratio is invariant under it bit for bit; that matters because
//! training shrinks nothing by inflating the field.
//!
//! The functional has no closed-form gradient; it enters tapes through a
//! custom node whose derivative is a central finite difference.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{expect_len, Environment};
use crate::autodiff::{CustomFn, DiffTape, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::render::{draw_level_set, Frame};
use crate::scalar::Scalar;

/// Lattice nodes per axis; the control vector has LATTICE * LATTICE entries.
pub const LATTICE: usize = 4;
/// Dense evaluation grid has FIELD_SIDE x FIELD_SIDE vertices.
pub const FIELD_SIDE: usize = 64;
/// Central-difference step for the functional's gradient.
pub const FD_STEP: f64 = 1e-4;

const CONTROLS: usize = LATTICE * LATTICE;
const SAMPLE_ATTEMPTS: u32 = 1000;

/// Values of the four cubic Lagrange basis polynomials at t.
fn lagrange4(t: f64) -> [f64; 4] {
    let knots = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    let mut out = [0.0; 4];
    for (j, o) in out.iter_mut().enumerate() {
        let mut v = 1.0;
        for (k, &tk) in knots.iter().enumerate() {
            if k != j {
                v *= (t - tk) / (knots[j] - tk);
            }
        }
        *o = v;
    }
    out
}

#[derive(Clone, Debug)]
pub struct ShapeOpt {
    // basis[i] holds the four Lagrange weights at grid coordinate i / 63
    basis: Vec<[f64; 4]>,
}

impl Default for ShapeOpt {
    fn default() -> Self {
        ShapeOpt::new()
    }
}

impl ShapeOpt {
    pub fn new() -> ShapeOpt {
        let basis = (0..FIELD_SIDE)
            .map(|i| lagrange4(i as f64 / (FIELD_SIDE - 1) as f64))
            .collect();
        ShapeOpt { basis }
    }

    /// Interpolates lattice coefficients to the dense vertex grid.
    /// Index layout: `field[iy * FIELD_SIDE + ix]` with iy increasing
    /// upward; coefficient (i, j) of the lattice is `q[j * LATTICE + i]`.
    pub fn dense_field(&self, q: &[f64]) -> Result<Vec<f64>> {
        expect_len(q, CONTROLS, "lattice coefficients")?;
        let m = FIELD_SIDE;
        let mut field = vec![0.0; m * m];
        for iy in 0..m {
            let wy = self.basis[iy];
            // contract over the lattice y axis once per row
            let mut col = [0.0f64; LATTICE];
            for (a, c) in col.iter_mut().enumerate() {
                let mut s = 0.0;
                for (b, w) in wy.iter().enumerate() {
                    s += q[b * LATTICE + a] * w;
                }
                *c = s;
            }
            for ix in 0..m {
                let wx = self.basis[ix];
                let mut s = 0.0;
                for a in 0..LATTICE {
                    s += wx[a] * col[a];
                }
                field[iy * m + ix] = s;
            }
        }
        Ok(field)
    }

    /// Normalized perimeter of the lattice-interpolated shape.
    pub fn isoperimetric_ratio(&self, q: &[f64]) -> Result<f64> {
        let field = self.dense_field(q)?;
        isoperimetric_ratio_field(&field, FIELD_SIDE)
    }

    /// Central finite difference of the functional in each coefficient.
    pub fn fd_functional_grad(&self, q: &[f64], step: f64) -> Result<Vec<f64>> {
        if !(step > 0.0) {
            return Err(Error::InvalidStep);
        }
        expect_len(q, CONTROLS, "lattice coefficients")?;
        let mut probe = q.to_vec();
        let mut grad = vec![0.0; CONTROLS];
        for (i, g) in grad.iter_mut().enumerate() {
            probe[i] = q[i] + step;
            let hi = self.isoperimetric_ratio(&probe)?;
            probe[i] = q[i] - step;
            let lo = self.isoperimetric_ratio(&probe)?;
            probe[i] = q[i];
            *g = (hi - lo) / (2.0 * step);
        }
        Ok(grad)
    }
}

/// Perimeter / sqrt(Area) of the region `field > 0` on an m x m vertex
/// grid spanning the unit square. Errors with [`Error::EmptyShape`] /
/// [`Error::FullShape`] when there is no boundary to measure.
pub fn isoperimetric_ratio_field(field: &[f64], m: usize) -> Result<f64> {
    if m < 2 || field.len() != m * m {
        return Err(Error::shape(format!(
            "level-set field needs {} values for side {m}, got {}",
            m * m,
            field.len()
        )));
    }
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("level-set field"));
    }
    let kept = field.iter().filter(|&&v| v > 0.0).count();
    if kept == 0 {
        return Err(Error::EmptyShape);
    }
    if kept == m * m {
        return Err(Error::FullShape);
    }
    let delta = 1.0 / (m as f64 - 1.0);
    let area = delta * delta * kept as f64;
    let mut peri = 0.0;
    for iy in 0..m - 1 {
        for ix in 0..m - 1 {
            let a = field[iy * m + ix]; // bottom left
            let b = field[iy * m + ix + 1]; // bottom right
            let c = field[(iy + 1) * m + ix + 1]; // top right
            let d = field[(iy + 1) * m + ix]; // top left
            let case = (a > 0.0) as usize
                | (((b > 0.0) as usize) << 1)
                | (((c > 0.0) as usize) << 2)
                | (((d > 0.0) as usize) << 3);
            if case == 0 || case == 15 {
                continue;
            }
            // edge crossings in cell-local coordinates, computed only for
            // edges the case actually crosses (the interpolation is 0/0
            // on uncrossed edges)
            let bottom = || (a / (a - b), 0.0);
            let right = || (1.0, b / (b - c));
            let top = || (d / (d - c), 1.0);
            let left = || (0.0, a / (a - d));
            let seg = |p: (f64, f64), q: (f64, f64)| {
                let (dx, dy) = (q.0 - p.0, q.1 - p.1);
                (dx * dx + dy * dy).sqrt()
            };
            peri += delta
                * match case {
                    1 | 14 => seg(bottom(), left()),
                    2 | 13 => seg(bottom(), right()),
                    3 | 12 => seg(left(), right()),
                    4 | 11 => seg(right(), top()),
                    6 | 9 => seg(bottom(), top()),
                    7 | 8 => seg(left(), top()),
                    5 | 10 => {
                        // saddle: the corner average decides whether the
                        // positive diagonal is connected through the middle
                        let center_in = (a + b + c + d) * 0.25 > 0.0;
                        if (case == 5) == center_in {
                            seg(bottom(), right()) + seg(left(), top())
                        } else {
                            seg(bottom(), left()) + seg(right(), top())
                        }
                    }
                    _ => unreachable!(),
                };
        }
    }
    if !peri.is_finite() {
        return Err(Error::non_finite("perimeter"));
    }
    Ok(peri / area.sqrt())
}

fn widen_row<S: Scalar>(row: &[S]) -> Vec<f64> {
    row.iter().map(|v| v.widen()).collect()
}

/// The functional as a tape node: (batch, 16) -> (batch, 1), derivative
/// by per-row central differences.
struct RatioOnTape {
    env: ShapeOpt,
}

impl<S: Scalar> CustomFn<S> for RatioOnTape {
    fn name(&self) -> &'static str {
        "isoperimetric_ratio"
    }

    fn forward(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let x = inputs[0];
        let (rows, cols) = x.dims2();
        if cols != CONTROLS {
            return Err(Error::shape(format!("shape cost needs {CONTROLS} columns, got {cols}")));
        }
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            out.push(S::of(self.env.isoperimetric_ratio(&widen_row(x.row(r)))?));
        }
        Tensor::matrix(rows, 1, out)
    }

    fn vjp(&self, inputs: &[&Tensor<S>], out_grad: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let x = inputs[0];
        let (rows, cols) = x.dims2();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let g = self.env.fd_functional_grad(&widen_row(x.row(r)), FD_STEP)?;
            let up = out_grad.data()[r].widen();
            data.extend(g.iter().map(|v| S::of(v * up)));
        }
        Ok(vec![Tensor::matrix(rows, cols, data)?])
    }
}

impl<S: Scalar> Environment<S> for ShapeOpt {
    fn name(&self) -> &'static str {
        "shape"
    }

    fn state_dim(&self) -> usize {
        CONTROLS
    }

    fn control_dim(&self) -> usize {
        CONTROLS
    }

    fn flow(&self, q: &[S], v: &[S]) -> Result<Vec<S>> {
        // coefficients move at the control rate: f0 = 0, f_u = identity
        expect_len(q, CONTROLS, "shape state")?;
        expect_len(v, CONTROLS, "shape control")?;
        Ok(v.to_vec())
    }

    fn running_cost(&self, q: &[S]) -> Result<S> {
        expect_len(q, CONTROLS, "shape state")?;
        Ok(S::of(self.isoperimetric_ratio(&widen_row(q))?))
    }

    fn terminal_cost(&self, q: &[S]) -> Result<S> {
        self.running_cost(q)
    }

    fn grad_terminal(&self, q: &[S]) -> Result<Vec<S>> {
        expect_len(q, CONTROLS, "shape state")?;
        let g = self.fd_functional_grad(&widen_row(q), FD_STEP)?;
        Ok(g.into_iter().map(S::of).collect())
    }

    fn sample_q0(&self, seed: u64) -> Result<Vec<S>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..SAMPLE_ATTEMPTS {
            let q: Vec<f64> = (0..CONTROLS).map(|_| rng.gen_range(-0.5..0.5)).collect();
            if self.isoperimetric_ratio(&q).is_ok() {
                return Ok(q.into_iter().map(S::of).collect());
            }
        }
        Err(Error::SamplingFailed { attempts: SAMPLE_ATTEMPTS })
    }

    fn render(&self, q: &[S]) -> Result<Frame> {
        expect_len(q, CONTROLS, "shape state")?;
        let field = self.dense_field(&widen_row(q))?;
        draw_level_set(&field, FIELD_SIDE)
    }

    fn flow_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId, v: NodeId) -> Result<NodeId> {
        let (_, n) = tape.value(q).dims2();
        let (_, m) = tape.value(v).dims2();
        if n != CONTROLS || m != CONTROLS {
            return Err(Error::shape(format!(
                "shape flow needs {CONTROLS}-dim state and control, got {n} and {m}"
            )));
        }
        Ok(v)
    }

    fn running_cost_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId> {
        tape.custom(&[q], Rc::new(RatioOnTape { env: self.clone() }))
    }

    fn terminal_cost_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId> {
        self.running_cost_on_tape(tape, q)
    }

    fn grad_terminal_on_tape(&self, tape: &mut DiffTape<S>, q: NodeId) -> Result<NodeId> {
        // finite differences do not propagate; emit a detached constant
        let x = tape.value(q).clone();
        let (rows, cols) = x.dims2();
        if cols != CONTROLS {
            return Err(Error::shape(format!(
                "shape terminal gradient needs {CONTROLS} columns, got {cols}"
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let g = self.fd_functional_grad(&widen_row(x.row(r)), FD_STEP)?;
            data.extend(g.into_iter().map(S::of));
        }
        tape.constant(Tensor::matrix(rows, cols, data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_field(cx: f64, cy: f64, r: f64) -> Vec<f64> {
        let m = FIELD_SIDE;
        let mut field = vec![0.0; m * m];
        for iy in 0..m {
            for ix in 0..m {
                let x = ix as f64 / (m - 1) as f64;
                let y = iy as f64 / (m - 1) as f64;
                field[iy * m + ix] = r - ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            }
        }
        field
    }

    #[test]
    fn disk_scores_the_isoperimetric_optimum() {
        let field = disk_field(0.5, 0.5, 0.35);
        let ratio = isoperimetric_ratio_field(&field, FIELD_SIDE).unwrap();
        let ideal = 2.0 * std::f64::consts::PI.sqrt();
        assert!((ratio - ideal).abs() / ideal < 0.01, "disk ratio {ratio} vs {ideal}");
    }

    #[test]
    fn square_scores_close_to_four() {
        let m = FIELD_SIDE;
        let mut field = vec![0.0; m * m];
        for iy in 0..m {
            for ix in 0..m {
                let x = ix as f64 / (m - 1) as f64;
                let y = iy as f64 / (m - 1) as f64;
                let inset = (x - 0.25).min(0.75 - x).min(y - 0.25).min(0.75 - y);
                field[iy * m + ix] = inset;
            }
        }
        let ratio = isoperimetric_ratio_field(&field, m).unwrap();
        assert!((ratio - 4.0).abs() / 4.0 < 0.05, "square ratio {ratio}");
    }

    #[test]
    fn ratio_is_bit_invariant_under_doubling_the_field() {
        let env = ShapeOpt::new();
        for seed in 0..20 {
            let q: Vec<f64> = Environment::<f64>::sample_q0(&env, seed).unwrap();
            let base = env.isoperimetric_ratio(&q).unwrap();
            let doubled: Vec<f64> = q.iter().map(|v| 2.0 * v).collect();
            let scaled = env.isoperimetric_ratio(&doubled).unwrap();
            assert_eq!(base.to_bits(), scaled.to_bits(), "seed {seed}");
        }
    }

    #[test]
    fn dense_field_reproduces_coefficients_at_lattice_nodes() {
        let env = ShapeOpt::new();
        let q: Vec<f64> = Environment::<f64>::sample_q0(&env, 11).unwrap();
        let field = env.dense_field(&q).unwrap();
        let stride = (FIELD_SIDE - 1) / (LATTICE - 1);
        for j in 0..LATTICE {
            for i in 0..LATTICE {
                let v = field[(j * stride) * FIELD_SIDE + i * stride];
                assert_eq!(v.to_bits(), q[j * LATTICE + i].to_bits(), "node ({i}, {j})");
            }
        }
    }

    #[test]
    fn degenerate_fields_are_rejected() {
        let env = ShapeOpt::new();
        assert!(matches!(env.isoperimetric_ratio(&[-1.0; 16]), Err(Error::EmptyShape)));
        assert!(matches!(env.isoperimetric_ratio(&[1.0; 16]), Err(Error::FullShape)));
    }

    #[test]
    fn fd_gradient_descent_direction_lowers_the_ratio() {
        let env = ShapeOpt::new();
        let q: Vec<f64> = Environment::<f64>::sample_q0(&env, 3).unwrap();
        let before = env.isoperimetric_ratio(&q).unwrap();
        let g = env.fd_functional_grad(&q, FD_STEP).unwrap();
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0);
        let stepped: Vec<f64> =
            q.iter().zip(&g).map(|(qi, gi)| qi - 0.01 * gi / norm).collect();
        let after = env.isoperimetric_ratio(&stepped).unwrap();
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn tape_cost_matches_plain_and_backward_matches_fd() {
        let env = ShapeOpt::new();
        let q: Vec<f64> = Environment::<f64>::sample_q0(&env, 5).unwrap();
        let mut tape = DiffTape::new();
        let qn = tape.var(Tensor::matrix(1, 16, q.clone()).unwrap()).unwrap();
        let cost = Environment::<f64>::running_cost_on_tape(&env, &mut tape, qn).unwrap();
        let plain = env.isoperimetric_ratio(&q).unwrap();
        assert_eq!(tape.value(cost).data()[0], plain);
        // scale by 2 so the test catches a missing upstream factor
        let scaled = tape.scale(cost, 2.0).unwrap();
        let loss = tape.sum(scaled).unwrap();
        let grads = tape.backward(loss).unwrap();
        let got = grads.wrt(qn).unwrap().clone();
        let fd = env.fd_functional_grad(&q, FD_STEP).unwrap();
        for i in 0..16 {
            assert!((got.data()[i] - 2.0 * fd[i]).abs() < 1e-12, "coord {i}");
        }
    }

    #[test]
    fn terminal_gradient_on_tape_is_detached() {
        let env = ShapeOpt::new();
        let q: Vec<f64> = Environment::<f64>::sample_q0(&env, 9).unwrap();
        let mut tape = DiffTape::new();
        let qn = tape.var(Tensor::matrix(1, 16, q.clone()).unwrap()).unwrap();
        let g = Environment::<f64>::grad_terminal_on_tape(&env, &mut tape, qn).unwrap();
        let plain: Vec<f64> = Environment::<f64>::grad_terminal(&env, &q).unwrap();
        assert_eq!(tape.value(g).data(), plain.as_slice());
        let loss = tape.sum(g).unwrap();
        let grads = tape.backward(loss).unwrap();
        // nothing flows back into q through the detached gradient
        assert!(grads.wrt(qn).is_none() || grads.wrt(qn).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sampler_accepts_fields_with_a_boundary() {
        let env = ShapeOpt::new();
        for seed in 0..10 {
            let q: Vec<f64> = Environment::<f64>::sample_q0(&env, seed).unwrap();
            assert!(q.iter().all(|v| v.abs() <= 0.5));
            assert!(env.isoperimetric_ratio(&q).is_ok());
        }
    }
}
