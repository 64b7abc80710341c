//! Reverse-mode differentiation on a tape of dense tensor operations.
//!
//! A [`DiffTape`] records a Wengert list: every recorded operation evaluates
//! eagerly, appends a node holding its forward value, and returns a
//! [`NodeId`]. [`DiffTape::backward`] sweeps the list in reverse from a
//! scalar output, accumulating vector-Jacobian products into each node that
//! can reach a tracked variable. Each recorded value is checked for
//! non-finite entries, so NaN and infinity surface at the operation that
//! produced them rather than at the end of a long program.
//!
//! Tensors are rank 1 or rank 2, row-major. The tape is not Sync; it is
//! meant to live and die on one thread, usually one per optimization step.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor of rank 1 or 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::shape(format!("tensor rank must be 1 or 2, got {}", shape.len())));
        }
        if expect != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); n] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a (rows, cols) matrix.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("from_rows needs at least one row"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows rows differ in length"));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Sole element of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!("item() on tensor of {} elements", self.data.len())));
        }
        Ok(self.data[0])
    }

    /// Rows and columns, treating a rank-1 tensor as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            2 => (self.shape[0], self.shape[1]),
            _ => (1, self.data.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[S] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    fn add_assign(&mut self, other: &Tensor<S>) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Matrix product with optional transposition of either operand.
pub(crate) fn matmul_raw<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, ta: bool, tb: bool) -> Result<Tensor<S>> {
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims {}x{} vs {}x{} (ta={ta}, tb={tb})",
            m, k, k2, n
        )));
    }
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = if ta { a.data[kk * ac + i] } else { a.data[i * ac + kk] };
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            if tb {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = *o + av * b.data[j * bc + kk];
                }
            } else {
                let brow = &b.data[kk * bc..kk * bc + n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// External function spliced into the tape with a caller-supplied
/// vector-Jacobian product. Used for costs that have no closed-form
/// derivative, like the level-set shape functional.
pub trait CustomFn<S: Scalar> {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>>;
    /// Gradient of the loss w.r.t. each input given the output gradient.
    fn vjp(&self, inputs: &[&Tensor<S>], out_grad: &Tensor<S>) -> Result<Vec<Tensor<S>>>;
}

/// Handle to a node on a [`DiffTape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op<S: Scalar> {
    Var,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Affine { x: NodeId, scale: S, shift: S },
    Matmul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    AddRow { x: NodeId, row: NodeId },
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    RowSum(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols { x: NodeId, start: usize, len: usize },
    SliceRows { x: NodeId, start: usize, len: usize },
    Custom { inputs: Vec<NodeId>, f: Rc<dyn CustomFn<S>> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires: bool,
}

/// Recorded reverse-mode program.
pub struct DiffTape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for DiffTape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> DiffTape<S> {
    pub fn new() -> Self {
        DiffTape { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires: bool, ctx: &str) -> Result<NodeId> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(ctx.to_string()));
        }
        self.nodes.push(Node { value, op, requires });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    /// Gradient-tracked leaf.
    pub fn var(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.push(value, Op::Var, true, "var")
    }

    /// Untracked leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.push(value, Op::Const, false, "constant")
    }

    pub fn constant_scalar(&mut self, v: S) -> Result<NodeId> {
        self.constant(Tensor::scalar(v))
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op<S>,
        f: impl Fn(S, S) -> S,
        name: &str,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(Error::shape(format!("{name}: {:?} vs {:?}", va.shape, vb.shape)));
        }
        let value = va.zip(vb, f);
        let requires = self.requires(a) || self.requires(b);
        self.push(value, op, requires, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, Op::Div(a, b), |x, y| x / y, "div")
    }

    fn unary(
        &mut self,
        x: NodeId,
        op: Op<S>,
        f: impl Fn(S) -> S,
        name: &str,
    ) -> Result<NodeId> {
        let value = self.nodes[x.0].value.map(f);
        let requires = self.requires(x);
        self.push(value, op, requires, name)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Neg(x), |v| -v, "neg")
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: S, shift: S) -> Result<NodeId> {
        self.unary(x, Op::Affine { x, scale, shift }, |v| scale * v + shift, "affine")
    }

    /// Elementwise `scale * x`.
    pub fn scale(&mut self, x: NodeId, scale: S) -> Result<NodeId> {
        self.affine(x, scale, S::zero())
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Tanh(x), |v| v.tanh(), "tanh")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Exp(x), |v| v.exp(), "exp")
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Ln(x), |v| v.ln(), "ln")
    }

    pub fn sin(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sin(x), |v| v.sin(), "sin")
    }

    pub fn cos(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Cos(x), |v| v.cos(), "cos")
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt(), "sqrt")
    }

    /// Matrix product `(ta ? a^T : a) * (tb ? b^T : b)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let value = matmul_raw(&self.nodes[a.0].value, &self.nodes[b.0].value, ta, tb)?;
        let requires = self.requires(a) || self.requires(b);
        self.push(value, Op::Matmul { a, b, ta, tb }, requires, "matmul")
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.nodes[x.0].value.dims2();
        let rv = &self.nodes[row.0].value;
        if rv.len() != c {
            return Err(Error::shape(format!("add_row: row has {} entries, matrix has {c} columns", rv.len())));
        }
        let xv = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(xv.data[i * c + j] + rv.data[j]);
            }
        }
        let value = Tensor { shape: xv.shape.clone(), data };
        let requires = self.requires(x) || self.requires(row);
        self.push(value, Op::AddRow { x, row }, requires, "add_row")
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = S::zero();
        for &v in &self.nodes[x.0].value.data {
            acc += v;
        }
        let requires = self.requires(x);
        self.push(Tensor::scalar(acc), Op::Sum(x), requires, "sum")
    }

    /// Sums each row of a matrix, giving an (r, 1) column.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.nodes[x.0].value.dims2();
        let xv = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            let mut acc = S::zero();
            for j in 0..c {
                acc += xv.data[i * c + j];
            }
            data.push(acc);
        }
        let requires = self.requires(x);
        self.push(Tensor::matrix(r, 1, data)?, Op::RowSum(x), requires, "row_sum")
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.nodes[a.0].value.dims2();
        let (rb, cb) = self.nodes[b.0].value.dims2();
        if ra != rb {
            return Err(Error::shape(format!("concat_cols: {ra} rows vs {rb} rows")));
        }
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&va.data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&vb.data[i * cb..(i + 1) * cb]);
        }
        let requires = self.requires(a) || self.requires(b);
        self.push(Tensor::matrix(ra, ca + cb, data)?, Op::ConcatCols(a, b), requires, "concat_cols")
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.nodes[x.0].value.dims2();
        if start + len > c {
            return Err(Error::shape(format!("slice_cols {start}..{} of {c} columns", start + len)));
        }
        let xv = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.data[i * c + start..i * c + start + len]);
        }
        let requires = self.requires(x);
        self.push(Tensor::matrix(r, len, data)?, Op::SliceCols { x, start, len }, requires, "slice_cols")
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.nodes[x.0].value.dims2();
        if start + len > r {
            return Err(Error::shape(format!("slice_rows {start}..{} of {r} rows", start + len)));
        }
        let xv = &self.nodes[x.0].value;
        let data = xv.data[start * c..(start + len) * c].to_vec();
        let requires = self.requires(x);
        self.push(Tensor::matrix(len, c, data)?, Op::SliceRows { x, start, len }, requires, "slice_rows")
    }

    /// Splices an external function into the tape; its derivative comes from
    /// the supplied vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[NodeId], f: Rc<dyn CustomFn<S>>) -> Result<NodeId> {
        let vals: Vec<&Tensor<S>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = f.forward(&vals)?;
        let requires = inputs.iter().any(|id| self.requires(*id));
        let name = f.name();
        self.push(value, Op::Custom { inputs: inputs.to_vec(), f }, requires, name)
    }

    /// Reverse sweep from a one-element output node.
    pub fn backward(&self, out: NodeId) -> Result<Gradients<S>> {
        let out_val = &self.nodes[out.0].value;
        if out_val.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[out.0].requires {
            return Ok(Gradients { grads });
        }
        grads[out.0] = Some(Tensor { shape: out_val.shape.clone(), data: vec![S::one()] });

        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            self.propagate(i, g, lower)?;
        }
        Ok(Gradients { grads })
    }

    /// Accumulates the node's output gradient into its parents.
    fn propagate(&self, i: usize, g: &Tensor<S>, lower: &mut [Option<Tensor<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let need = |id: NodeId| self.nodes[id.0].requires;
        match &node.op {
            Op::Var | Op::Const => {}
            Op::Add(a, b) => {
                if need(*a) {
                    acc_ref(&mut lower[a.0], g);
                }
                if need(*b) {
                    acc_ref(&mut lower[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    acc_ref(&mut lower[a.0], g);
                }
                if need(*b) {
                    acc_owned(&mut lower[b.0], g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    acc_owned(&mut lower[a.0], g.zip(val(*b), |gv, bv| gv * bv));
                }
                if need(*b) {
                    acc_owned(&mut lower[b.0], g.zip(val(*a), |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                if need(*a) {
                    acc_owned(&mut lower[a.0], g.zip(val(*b), |gv, bv| gv / bv));
                }
                if need(*b) {
                    // d(a/b)/db = -y/b with y the stored quotient
                    let y = &node.value;
                    let t = g
                        .zip(y, |gv, yv| gv * yv)
                        .zip(val(*b), |gy, bv| -(gy / bv));
                    acc_owned(&mut lower[b.0], t);
                }
            }
            Op::Neg(x) => {
                if need(*x) {
                    acc_owned(&mut lower[x.0], g.map(|v| -v));
                }
            }
            Op::Affine { x, scale, .. } => {
                if need(*x) {
                    let k = *scale;
                    acc_owned(&mut lower[x.0], g.map(|v| k * v));
                }
            }
            Op::Matmul { a, b, ta, tb } => {
                if need(*a) {
                    let da = if *ta {
                        matmul_raw(val(*b), g, *tb, true)?
                    } else {
                        matmul_raw(g, val(*b), false, !*tb)?
                    };
                    acc_owned(&mut lower[a.0], da);
                }
                if need(*b) {
                    let db = if *tb {
                        matmul_raw(g, val(*a), true, *ta)?
                    } else {
                        matmul_raw(val(*a), g, !*ta, false)?
                    };
                    acc_owned(&mut lower[b.0], db);
                }
            }
            Op::AddRow { x, row } => {
                if need(*x) {
                    acc_ref(&mut lower[x.0], g);
                }
                if need(*row) {
                    let (r, c) = node.value.dims2();
                    let mut col = vec![S::zero(); c];
                    for ri in 0..r {
                        for ci in 0..c {
                            col[ci] += g.data[ri * c + ci];
                        }
                    }
                    let rshape = val(*row).shape.clone();
                    acc_owned(&mut lower[row.0], Tensor { shape: rshape, data: col });
                }
            }
            Op::Tanh(x) => {
                if need(*x) {
                    let y = &node.value;
                    acc_owned(&mut lower[x.0], g.zip(y, |gv, yv| gv * (S::one() - yv * yv)));
                }
            }
            Op::Exp(x) => {
                if need(*x) {
                    acc_owned(&mut lower[x.0], g.zip(&node.value, |gv, yv| gv * yv));
                }
            }
            Op::Ln(x) => {
                if need(*x) {
                    acc_owned(&mut lower[x.0], g.zip(val(*x), |gv, xv| gv / xv));
                }
            }
            Op::Sin(x) => {
                if need(*x) {
                    acc_owned(&mut lower[x.0], g.zip(val(*x), |gv, xv| gv * xv.cos()));
                }
            }
            Op::Cos(x) => {
                if need(*x) {
                    acc_owned(&mut lower[x.0], g.zip(val(*x), |gv, xv| -(gv * xv.sin())));
                }
            }
            Op::Sqrt(x) => {
                if need(*x) {
                    let two = S::of(2.0);
                    acc_owned(&mut lower[x.0], g.zip(&node.value, |gv, yv| gv / (two * yv)));
                }
            }
            Op::Sum(x) => {
                if need(*x) {
                    let gv = g.data[0];
                    let xv = val(*x);
                    acc_owned(
                        &mut lower[x.0],
                        Tensor { shape: xv.shape.clone(), data: vec![gv; xv.len()] },
                    );
                }
            }
            Op::RowSum(x) => {
                if need(*x) {
                    let xv = val(*x);
                    let (r, c) = xv.dims2();
                    let mut data = Vec::with_capacity(r * c);
                    for ri in 0..r {
                        let gv = g.data[ri];
                        data.extend(std::iter::repeat(gv).take(c));
                    }
                    acc_owned(&mut lower[x.0], Tensor { shape: xv.shape.clone(), data });
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = val(*a).dims2();
                let (_, cb) = val(*b).dims2();
                let c = ca + cb;
                if need(*a) {
                    let mut data = Vec::with_capacity(r * ca);
                    for ri in 0..r {
                        data.extend_from_slice(&g.data[ri * c..ri * c + ca]);
                    }
                    acc_owned(&mut lower[a.0], Tensor { shape: val(*a).shape.clone(), data });
                }
                if need(*b) {
                    let mut data = Vec::with_capacity(r * cb);
                    for ri in 0..r {
                        data.extend_from_slice(&g.data[ri * c + ca..(ri + 1) * c]);
                    }
                    acc_owned(&mut lower[b.0], Tensor { shape: val(*b).shape.clone(), data });
                }
            }
            Op::SliceCols { x, start, len } => {
                if need(*x) {
                    let xv = val(*x);
                    let (r, c) = xv.dims2();
                    let mut t = Tensor::zeros(xv.shape.clone());
                    for ri in 0..r {
                        for j in 0..*len {
                            t.data[ri * c + start + j] = g.data[ri * len + j];
                        }
                    }
                    acc_owned(&mut lower[x.0], t);
                }
            }
            Op::SliceRows { x, start, len } => {
                if need(*x) {
                    let xv = val(*x);
                    let (_, c) = xv.dims2();
                    let mut t = Tensor::zeros(xv.shape.clone());
                    t.data[start * c..(start + len) * c].copy_from_slice(&g.data);
                    acc_owned(&mut lower[x.0], t);
                }
            }
            Op::Custom { inputs, f } => {
                let vals: Vec<&Tensor<S>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                let parts = f.vjp(&vals, g)?;
                if parts.len() != inputs.len() {
                    return Err(Error::shape(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        f.name(),
                        parts.len(),
                        inputs.len()
                    )));
                }
                for (id, part) in inputs.iter().zip(parts) {
                    if need(*id) {
                        if part.shape != self.nodes[id.0].value.shape {
                            return Err(Error::shape(format!(
                                "custom op {} gradient shape {:?} vs input {:?}",
                                f.name(),
                                part.shape,
                                self.nodes[id.0].value.shape
                            )));
                        }
                        acc_owned(&mut lower[id.0], part);
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc_ref<S: Scalar>(slot: &mut Option<Tensor<S>>, g: &Tensor<S>) {
    match slot {
        Some(t) => t.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

fn acc_owned<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Result of a backward sweep. Nodes the output does not depend on carry no
/// gradient; [`Gradients::wrt`] reports those as `None` (meaning zero).
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Report from [`grad_check`]: per-coordinate analytic and central
/// finite-difference derivatives and their relative errors.
pub struct GradReport<S> {
    pub analytic: Vec<S>,
    pub fd: Vec<S>,
    pub rel: Vec<S>,
    pub max_rel: S,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences at `point`. The relative error per coordinate is
/// `|analytic - fd| / max(1, |analytic|)`.
pub fn grad_check<S: Scalar, F>(f: &F, point: &[S], step: S) -> Result<GradReport<S>>
where
    F: Fn(&mut DiffTape<S>, NodeId) -> Result<NodeId>,
{
    if !(step > S::zero()) {
        return Err(Error::InvalidStep);
    }
    let eval = |x: &[S]| -> Result<S> {
        let mut tape = DiffTape::new();
        let xid = tape.var(Tensor::vector(x.to_vec()))?;
        let out = f(&mut tape, xid)?;
        tape.value(out).item()
    };

    let mut tape = DiffTape::new();
    let xid = tape.var(Tensor::vector(point.to_vec()))?;
    let out = f(&mut tape, xid)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<S> = match grads.wrt(xid) {
        Some(t) => t.data().to_vec(),
        None => vec![S::zero(); point.len()],
    };

    let mut fd = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = eval(&probe)?;
        probe[i] = orig - step;
        let lo = eval(&probe)?;
        probe[i] = orig;
        fd.push((hi - lo) / (S::of(2.0) * step));
    }

    let mut rel = Vec::with_capacity(point.len());
    let mut max_rel = S::zero();
    for (&a, &d) in analytic.iter().zip(&fd) {
        let r = (a - d).abs() / S::one().max(a.abs());
        rel.push(r);
        max_rel = max_rel.max(r);
    }
    Ok(GradReport { analytic, fd, rel, max_rel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn product_plus_tanh_gradients() {
        // y = x0 * x1 + tanh(x2)
        let mut tape = DiffTape::new();
        let x = tape.var(t1(&[2.0, 3.0, 0.5])).unwrap();
        let x0 = tape.slice_cols(x, 0, 1).unwrap();
        let x1 = tape.slice_cols(x, 1, 1).unwrap();
        let x2 = tape.slice_cols(x, 2, 1).unwrap();
        let prod = tape.mul(x0, x1).unwrap();
        let th = tape.tanh(x2).unwrap();
        let y = tape.add(prod, th).unwrap();
        let y = tape.sum(y).unwrap();
        assert!((tape.value(y).item().unwrap() - (6.0 + 0.5f64.tanh())).abs() < 1e-15);
        let g = tape.backward(y).unwrap();
        let gx = g.wrt(x).unwrap().data();
        assert!((gx[0] - 3.0).abs() < 1e-15);
        assert!((gx[1] - 2.0).abs() < 1e-15);
        let sech2 = 1.0 - 0.5f64.tanh().powi(2);
        assert!((gx[2] - sech2).abs() < 1e-15);
    }

    #[test]
    fn gradient_of_output_wrt_itself_is_one() {
        let mut tape = DiffTape::new();
        let x = tape.var(Tensor::scalar(4.0f64)).unwrap();
        let y = tape.exp(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(y).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_backward_is_shape_error() {
        let mut tape = DiffTape::new();
        let x = tape.var(t1(&[1.0, 2.0])).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::ShapeError { .. })));
    }

    #[test]
    fn ln_of_negative_reports_non_finite() {
        let mut tape = DiffTape::new();
        let x = tape.var(Tensor::scalar(-1.0f64)).unwrap();
        assert!(matches!(tape.ln(x), Err(Error::NonFiniteValue { .. })));
    }

    #[test]
    fn matmul_all_transpose_combinations_match_fd() {
        // weighted sum of (a' * b') entries, differentiated w.r.t. both operands
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let a_dims = if ta { (3, 2) } else { (2, 3) };
            let b_dims = if tb { (4, 3) } else { (3, 4) };
            let a_data: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b_data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |ad: &[f64], bd: &[f64]| -> f64 {
                let a_t = Tensor::matrix(a_dims.0, a_dims.1, ad.to_vec()).unwrap();
                let b_t = Tensor::matrix(b_dims.0, b_dims.1, bd.to_vec()).unwrap();
                matmul_raw(&a_t, &b_t, ta, tb)
                    .unwrap()
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * (i as f64 + 1.0))
                    .sum()
            };
            let mut tape = DiffTape::new();
            let av = tape.var(Tensor::matrix(a_dims.0, a_dims.1, a_data.clone()).unwrap()).unwrap();
            let bv = tape.var(Tensor::matrix(b_dims.0, b_dims.1, b_data.clone()).unwrap()).unwrap();
            let c = tape.matmul(av, bv, ta, tb).unwrap();
            let w: Vec<f64> = (0..tape.value(c).len()).map(|i| i as f64 + 1.0).collect();
            let wshape = tape.value(c).shape().to_vec();
            let wt = tape.constant(Tensor::new(wshape, w).unwrap()).unwrap();
            let prod = tape.mul(c, wt).unwrap();
            let y = tape.sum(prod).unwrap();
            let grads = tape.backward(y).unwrap();

            let h = 1e-6;
            for (var, data, other, is_a) in
                [(av, &a_data, &b_data, true), (bv, &b_data, &a_data, false)]
            {
                let g = grads.wrt(var).unwrap().data();
                let mut probe = data.to_vec();
                for i in 0..probe.len() {
                    let orig = probe[i];
                    probe[i] = orig + h;
                    let hi = if is_a { loss(&probe, other) } else { loss(other, &probe) };
                    probe[i] = orig - h;
                    let lo = if is_a { loss(&probe, other) } else { loss(other, &probe) };
                    probe[i] = orig;
                    let fd = (hi - lo) / (2.0 * h);
                    assert!(
                        (g[i] - fd).abs() / fd.abs().max(1.0) < 1e-8,
                        "ta={ta} tb={tb} is_a={is_a} i={i}: {} vs {}",
                        g[i],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_are_linear_in_the_output() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            let x0: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let build = |tape: &mut DiffTape<f64>, x: NodeId| -> (NodeId, NodeId) {
                let s = tape.sin(x).unwrap();
                let f = tape.sum(s).unwrap();
                let m = tape.mul(x, x).unwrap();
                let g = tape.sum(m).unwrap();
                (f, g)
            };
            let grad_of = |wa: f64, wb: f64| -> Vec<f64> {
                let mut tape = DiffTape::new();
                let x = tape.var(t1(&x0)).unwrap();
                let (f, g) = build(&mut tape, x);
                let fa = tape.scale(f, wa).unwrap();
                let gb = tape.scale(g, wb).unwrap();
                let y = tape.add(fa, gb).unwrap();
                let grads = tape.backward(y).unwrap();
                grads.wrt(x).unwrap().data().to_vec()
            };
            let combo = grad_of(a, b);
            let gf = grad_of(1.0, 0.0);
            let gg = grad_of(0.0, 1.0);
            for i in 0..4 {
                let expect = a * gf[i] + b * gg[i];
                assert!((combo[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn replaying_a_program_is_bit_identical() {
        let run = || -> Vec<u64> {
            let mut tape = DiffTape::new();
            let x = tape.var(t1(&[0.3, -0.7, 1.9])).unwrap();
            let e = tape.exp(x).unwrap();
            let s = tape.sin(e).unwrap();
            let m = tape.mul(s, x).unwrap();
            let y = tape.sum(m).unwrap();
            let g = tape.backward(y).unwrap();
            let mut bits: Vec<u64> = tape.value(y).data().iter().map(|v| v.to_bits()).collect();
            bits.extend(g.wrt(x).unwrap().data().iter().map(|v| v.to_bits()));
            bits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn custom_op_gradient_flows_through_vjp() {
        struct SquareNorm;
        impl CustomFn<f64> for SquareNorm {
            fn name(&self) -> &'static str {
                "square_norm"
            }
            fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
                let s: f64 = inputs[0].data().iter().map(|v| v * v).sum();
                Ok(Tensor::scalar(s))
            }
            fn vjp(&self, inputs: &[&Tensor<f64>], out_grad: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
                let g = out_grad.data()[0];
                Ok(vec![Tensor {
                    shape: inputs[0].shape().to_vec(),
                    data: inputs[0].data().iter().map(|v| 2.0 * v * g).collect(),
                }])
            }
        }
        let mut tape = DiffTape::new();
        let x = tape.var(t1(&[1.0, -2.0, 3.0])).unwrap();
        let y = tape.custom(&[x], Rc::new(SquareNorm)).unwrap();
        let y2 = tape.scale(y, 0.5).unwrap();
        let g = tape.backward(y2).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn grad_check_accepts_composite_and_rejects_bad_step() {
        let f = |tape: &mut DiffTape<f64>, x: NodeId| -> Result<NodeId> {
            let s = tape.sin(x)?;
            let e = tape.exp(s)?;
            let m = tape.mul(e, x)?;
            tape.sum(m)
        };
        let report = grad_check(&f, &[0.4, -1.2, 2.0], 1e-6).unwrap();
        assert!(report.max_rel < 1e-8, "max rel {}", report.max_rel);
        assert!(matches!(grad_check(&f, &[0.4], 0.0), Err(Error::InvalidStep)));
        assert!(matches!(grad_check(&f, &[0.4], -1e-3), Err(Error::InvalidStep)));
    }

    #[test]
    fn div_and_sqrt_gradients_match_fd() {
        let f = |tape: &mut DiffTape<f64>, x: NodeId| -> Result<NodeId> {
            let a = tape.slice_cols(x, 0, 2)?;
            let b = tape.slice_cols(x, 2, 2)?;
            let q = tape.div(a, b)?;
            let r = tape.sqrt(b)?;
            let m = tape.mul(q, r)?;
            tape.sum(m)
        };
        let report = grad_check(&f, &[1.0, -0.5, 2.0, 0.7], 1e-6).unwrap();
        assert!(report.max_rel < 1e-8, "max rel {}", report.max_rel);
    }

    #[test]
    fn f32_instantiation_works() {
        let f = |tape: &mut DiffTape<f32>, x: NodeId| -> Result<NodeId> {
            let s = tape.tanh(x)?;
            let m = tape.mul(s, x)?;
            tape.sum(m)
        };
        let report = grad_check(&f, &[0.5f32, -0.25], 1e-2).unwrap();
        assert!(report.max_rel < 1e-2, "max rel {}", report.max_rel);
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let f = |tape: &mut DiffTape<f64>, x: NodeId| -> Result<NodeId> {
            let a = tape.slice_cols(x, 0, 2)?;
            let b = tape.slice_cols(x, 2, 3)?;
            let am = tape.mul(a, a)?;
            let cat = tape.concat_cols(am, b)?;
            let back = tape.slice_cols(cat, 1, 3)?;
            let rs = tape.row_sum(back)?;
            tape.sum(rs)
        };
        let report = grad_check(&f, &[0.3, 0.9, -1.1, 0.2, 0.8], 1e-6).unwrap();
        assert!(report.max_rel < 1e-9, "max rel {}", report.max_rel);
    }
}
