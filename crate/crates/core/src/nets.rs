//! Multilayer perceptrons with tanh hidden activations and a linear output.
//!
//! Networks evaluate two ways: plain (values only) for rollouts and
//! inference, and on-tape for training. For scalar-output networks,
//! [`Mlp::forward_and_input_grad_on_tape`] additionally emits the gradient
//! with respect to the input as tape operations built from the layer
//! structure, so differentiating the surrounding program also
//! differentiates through that gradient. That is what lets a loss depend on
//! the symplectic field of a learned Hamiltonian and still receive exact
//! parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{matmul_raw, DiffTape, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::fmtnum::fmt_f64;
use crate::scalar::Scalar;

/// Fully connected network. Layer `i` maps `dims[i]` to `dims[i+1]`;
/// every layer but the last is followed by tanh.
#[derive(Clone, Debug)]
pub struct Mlp<S> {
    dims: Vec<usize>,
    weights: Vec<Tensor<S>>, // layer i: (dims[i+1], dims[i]) row-major
    biases: Vec<Tensor<S>>,  // layer i: (dims[i+1],)
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidArchitecture {
            reason: format!("need at least input and output dims, got {dims:?}"),
        });
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArchitecture { reason: format!("zero-width layer in {dims:?}") });
    }
    Ok(())
}

impl<S: Scalar> Mlp<S> {
    /// Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero
    /// biases. The same seed always produces the same parameters.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<S> =
                (0..fan_in * fan_out).map(|_| S::of(rng.gen_range(-limit..limit))).collect();
            weights.push(Tensor::matrix(fan_out, fan_in, data)?);
            biases.push(Tensor::vector(vec![S::zero(); fan_out]));
        }
        Ok(Mlp { dims: dims.to_vec(), weights, biases })
    }

    /// All-zero parameters. The network is identically zero, which makes
    /// hand-computable loss values easy to pin down in tests.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            weights.push(Tensor::zeros(vec![w[1], w[0]]));
            biases.push(Tensor::vector(vec![S::zero(); w[1]]));
        }
        Ok(Mlp { dims: dims.to_vec(), weights, biases })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|t| t.len()).sum()
    }

    /// Parameter tensors in a fixed order: all weights, then all biases.
    pub fn params(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.weights.iter().chain(self.biases.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.weights.iter_mut().chain(self.biases.iter_mut())
    }

    /// Plain single-sample evaluation.
    pub fn forward(&self, x: &[S]) -> Result<Vec<S>> {
        let t = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.forward_batch(&t)?.data().to_vec())
    }

    /// Plain batched evaluation of a (batch, input_dim) matrix.
    pub fn forward_batch(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = matmul_raw(&cur, w, false, true)?;
            let (r, c) = z.dims2();
            for ri in 0..r {
                for ci in 0..c {
                    z.data_mut()[ri * c + ci] += b.data()[ci];
                }
            }
            if i < last {
                for v in z.data_mut() {
                    *v = v.tanh();
                }
            }
            cur = z;
        }
        Ok(cur)
    }

    /// Plain batched value and input gradient of a scalar-output network.
    /// Returns (y: (batch, 1), dy/dx: (batch, input_dim)).
    pub fn input_grad_batch(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        self.check_input(x)?;
        if self.output_dim() != 1 {
            return Err(Error::shape("input gradient needs a scalar-output network"));
        }
        let (batch, _) = x.dims2();
        let last = self.weights.len() - 1;
        let mut acts: Vec<Tensor<S>> = Vec::with_capacity(last);
        let mut cur = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = matmul_raw(&cur, w, false, true)?;
            let (r, c) = z.dims2();
            for ri in 0..r {
                for ci in 0..c {
                    z.data_mut()[ri * c + ci] += b.data()[ci];
                }
            }
            if i < last {
                for v in z.data_mut() {
                    *v = v.tanh();
                }
                acts.push(z.clone());
                cur = z;
            } else {
                cur = z;
            }
        }
        let y = cur;
        let mut d = Tensor::matrix(batch, 1, vec![S::one(); batch])?;
        for i in (0..=last).rev() {
            let da = matmul_raw(&d, &self.weights[i], false, false)?;
            if i == 0 {
                return Ok((y, da));
            }
            let a = &acts[i - 1];
            let mut next = da;
            for (v, &av) in next.data_mut().iter_mut().zip(a.data()) {
                *v = *v * (S::one() - av * av);
            }
            d = next;
        }
        unreachable!("loop returns at i == 0")
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let (_, c) = x.dims2();
        if c != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects {} inputs, got {c}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Registers parameters as gradient-tracked tape variables.
    pub fn vars_on_tape(&self, tape: &mut DiffTape<S>) -> Result<MlpVars> {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for w in &self.weights {
            weights.push(tape.var(w.clone())?);
        }
        for b in &self.biases {
            biases.push(tape.var(b.clone())?);
        }
        Ok(MlpVars { weights, biases })
    }

    /// Registers parameters as frozen constants.
    pub fn consts_on_tape(&self, tape: &mut DiffTape<S>) -> Result<MlpVars> {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for w in &self.weights {
            weights.push(tape.constant(w.clone())?);
        }
        for b in &self.biases {
            biases.push(tape.constant(b.clone())?);
        }
        Ok(MlpVars { weights, biases })
    }

    /// On-tape batched forward pass; `x` is a (batch, input_dim) node.
    pub fn forward_on_tape(
        &self,
        tape: &mut DiffTape<S>,
        vars: &MlpVars,
        x: NodeId,
    ) -> Result<NodeId> {
        Ok(self.forward_on_tape_keep(tape, vars, x)?.0)
    }

    fn forward_on_tape_keep(
        &self,
        tape: &mut DiffTape<S>,
        vars: &MlpVars,
        x: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let (_, c) = tape.value(x).dims2();
        if c != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects {} inputs, got {c}",
                self.input_dim()
            )));
        }
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(last);
        let mut cur = x;
        for i in 0..self.weights.len() {
            let z = tape.matmul(cur, vars.weights[i], false, true)?;
            let z = tape.add_row(z, vars.biases[i])?;
            if i < last {
                cur = tape.tanh(z)?;
                acts.push(cur);
            } else {
                cur = z;
            }
        }
        Ok((cur, acts))
    }

    /// On-tape batched forward pass plus the gradient of the scalar output
    /// w.r.t. the input, expressed as tape operations. Returns
    /// (y: (batch, 1), dy/dx: (batch, input_dim)).
    pub fn forward_and_input_grad_on_tape(
        &self,
        tape: &mut DiffTape<S>,
        vars: &MlpVars,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        if self.output_dim() != 1 {
            return Err(Error::shape("input gradient needs a scalar-output network"));
        }
        let (batch, _) = tape.value(x).dims2();
        let (y, acts) = self.forward_on_tape_keep(tape, vars, x)?;
        let last = self.weights.len() - 1;
        let mut d = tape.constant(Tensor::matrix(batch, 1, vec![S::one(); batch])?)?;
        for i in (0..=last).rev() {
            let da = tape.matmul(d, vars.weights[i], false, false)?;
            if i == 0 {
                return Ok((y, da));
            }
            let a = acts[i - 1];
            let a2 = tape.mul(a, a)?;
            let sech2 = tape.affine(a2, -S::one(), S::one())?;
            d = tape.mul(da, sech2)?;
        }
        unreachable!("loop returns at i == 0")
    }

    /// Flattens into a shape-tagged record (dims header, row-major data).
    pub fn to_record(&self) -> NetRecord {
        let mut data = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            data.extend(w.data().iter().map(|v| v.widen()));
            data.extend(b.data().iter().map(|v| v.widen()));
        }
        NetRecord { dims: self.dims.clone(), data }
    }

    /// Rebuilds a network from a record, validating dims and data volume.
    pub fn from_record(rec: &NetRecord) -> Result<Self> {
        validate_dims(&rec.dims)?;
        let expected: usize = rec.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if rec.data.len() != expected {
            return Err(Error::DimsMismatch { expected, got: rec.data.len() });
        }
        if rec.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptCheckpoint { reason: "non-finite parameter".into() });
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut off = 0;
        for w in rec.dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let wdata: Vec<S> = rec.data[off..off + fan_in * fan_out].iter().map(|&v| S::of(v)).collect();
            off += fan_in * fan_out;
            let bdata: Vec<S> = rec.data[off..off + fan_out].iter().map(|&v| S::of(v)).collect();
            off += fan_out;
            weights.push(Tensor::matrix(fan_out, fan_in, wdata)?);
            biases.push(Tensor::vector(bdata));
        }
        Ok(Mlp { dims: rec.dims.clone(), weights, biases })
    }

    /// Canonical JSON bytes of the record; bit-exact roundtrip.
    pub fn serialize(&self) -> Vec<u8> {
        self.to_record().to_json().into_bytes()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_slice(bytes)
            .map_err(|e| Error::CorruptCheckpoint { reason: format!("network payload: {e}") })?;
        let rec = NetRecord::from_json_value(&v)?;
        Mlp::from_record(&rec)
    }
}

/// Tape handles for one network's parameters, in [`Mlp::params`] order.
pub struct MlpVars {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl MlpVars {
    /// Parameter node ids, in the same fixed order as [`Mlp::params`].
    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.weights.iter().chain(self.biases.iter()).copied()
    }
}

/// Serialized network: layer dims plus flat row-major parameter data
/// (per layer: weight matrix then bias vector).
#[derive(Clone, Debug, PartialEq)]
pub struct NetRecord {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NetRecord {
    pub fn to_json(&self) -> String {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        let data: Vec<String> = self.data.iter().map(|&v| fmt_f64(v)).collect();
        format!("{{\"dims\":[{}],\"data\":[{}]}}", dims.join(","), data.join(","))
    }

    pub fn from_json_value(v: &serde_json::Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::CorruptCheckpoint { reason: "network is not an object".into() })?;
        for key in obj.keys() {
            if key != "dims" && key != "data" {
                return Err(Error::CorruptCheckpoint { reason: format!("unexpected key {key:?}") });
            }
        }
        let dims = obj
            .get("dims")
            .and_then(|d| d.as_array())
            .ok_or_else(|| Error::CorruptCheckpoint { reason: "missing dims".into() })?
            .iter()
            .map(|d| d.as_u64().map(|u| u as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::CorruptCheckpoint { reason: "dims must be integers".into() })?;
        let data = obj
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| Error::CorruptCheckpoint { reason: "missing data".into() })?
            .iter()
            .map(|d| d.as_f64())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::CorruptCheckpoint { reason: "data must be numbers".into() })?;
        Ok(NetRecord { dims, data })
    }
}

/// Diagonal Gaussian over a latent vector, parameterized by mean and
/// log-variance. Sampling uses the reparameterization z = mu + exp(logvar/2) * eps.
#[derive(Clone, Debug)]
pub struct GaussianLatent<S> {
    pub mean: Vec<S>,
    pub logvar: Vec<S>,
}

impl<S: Scalar> GaussianLatent<S> {
    pub fn new(mean: Vec<S>, logvar: Vec<S>) -> Result<Self> {
        if mean.len() != logvar.len() {
            return Err(Error::shape(format!(
                "latent mean has {} entries, logvar {}",
                mean.len(),
                logvar.len()
            )));
        }
        Ok(GaussianLatent { mean, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, eps: &[S]) -> Result<Vec<S>> {
        if eps.len() != self.mean.len() {
            return Err(Error::shape(format!(
                "latent dim {} but {} noise values",
                self.mean.len(),
                eps.len()
            )));
        }
        let half = S::of(0.5);
        Ok(self
            .mean
            .iter()
            .zip(&self.logvar)
            .zip(eps)
            .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
            .collect())
    }
}
