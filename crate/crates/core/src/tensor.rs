//! Dense f64 tensors with a reverse-mode tape.
//!
//! Values live on a [`Tape`]; every op appends a node whose inputs have
//! strictly smaller ids, so a single reverse sweep over the node list is a
//! valid topological order for backpropagation.
//!
//! Ops act on the trailing axis and treat any leading axes as a batch, so the
//! same `matvec` serves a single sample `[in]` and a minibatch `[batch x in]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QnnError, Result};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-major dense array with an optional gradient slot and tape binding.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(QnnError::Argument(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            node: None,
        })
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(QnnError::Argument("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Tensor::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Result<Self> {
        check_shape(shape)?;
        Tensor::new(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(QnnError::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(QnnError::Argument(format!(
            "shape extents must be >= 1, got {shape:?}"
        )));
    }
    Ok(())
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
    LeakyRelu,
}

const LEAKY_SLOPE: f64 = 0.01;

impl ActivationKind {
    pub const ALL: [ActivationKind; 5] = [
        ActivationKind::Relu,
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::Identity,
        ActivationKind::LeakyRelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Identity => "identity",
            ActivationKind::LeakyRelu => "leaky_relu",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        ActivationKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| {
                QnnError::Config(format!(
                    "unknown activation '{name}' (valid: relu, sigmoid, tanh, identity, leaky_relu)"
                ))
            })
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Identity => x,
            ActivationKind::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    /// Derivative given the input `x` and output `y`. The ReLU subgradient at 0 is 0.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Sigmoid => y * (1.0 - y),
            ActivationKind::Tanh => 1.0 - y * y,
            ActivationKind::Identity => 1.0,
            ActivationKind::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatVec { w: NodeId, x: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    AddRow { x: NodeId, row: NodeId },
    MulRow { x: NodeId, row: NodeId },
    KrpSum { a: NodeId, b: NodeId, m: usize },
    Activation { x: NodeId, kind: ActivationKind },
    Concat { parts: Vec<NodeId> },
    Slice { x: NodeId, start: usize },
    Reshape(NodeId),
    Dropout { x: NodeId, scale: Vec<f64> },
    Sum(NodeId),
    Mean(NodeId),
    Affine { x: NodeId, mul: f64 },
    RowSum(NodeId),
    Broadcast { x: NodeId },
    Gather { table: NodeId, rows: Vec<usize> },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Ln(NodeId),
    BceMean { p: NodeId, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Append-only record of a computation, replayed backwards for gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn last(shape: &[usize]) -> usize {
    *shape.last().expect("shapes are never empty")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable input; receives a gradient on `backward`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), true)
    }

    /// Input excluded from gradient flow.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), false)
    }

    pub fn constant_vec(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(Op::Leaf, t.shape, t.data, false))
    }

    /// Copy of `id`'s value cut off from the graph.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let n = &self.nodes[id.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(Op::Leaf, shape, value, false)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Snapshot of a node as a [`Tensor`], carrying its gradient when one was computed.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            grad: self.grads.get(id.0).and_then(|g| g.clone()),
            node: Some(id),
        }
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// `W [out x in]` applied to the trailing axis of `x [.. x in]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let ws = self.shape(w);
        let xs = self.shape(x);
        if ws.len() != 2 || ws[1] != last(xs) {
            return Err(QnnError::dim("matvec", ws, xs));
        }
        let (out, inp) = (ws[0], ws[1]);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = out;
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let rows = xv.len() / inp;
        let mut value = vec![0.0; rows * out];
        for (xr, yr) in xv.chunks_exact(inp).zip(value.chunks_exact_mut(out)) {
            for (wr, y) in wv.chunks_exact(inp).zip(yr.iter_mut()) {
                *y = dot(wr, xr);
            }
        }
        let rg = self.rg(&[w, x]);
        Ok(self.push(Op::MatVec { w, x }, shape, value, rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(QnnError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        (self.shape(a).to_vec(), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (shape, value) = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), shape, value, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let (shape, value) = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), shape, value, rg))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("hadamard", a, b)?;
        let (shape, value) = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Hadamard(a, b), shape, value, rg))
    }

    /// Adds a rank-1 `row` to every trailing-axis slice of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (xs, rs) = (self.shape(x), self.shape(row));
        if rs.len() != 1 || rs[0] != last(xs) {
            return Err(QnnError::dim("add_row", xs, rs));
        }
        let n = rs[0];
        let r = &self.nodes[row.0].value;
        let mut value = self.nodes[x.0].value.clone();
        for chunk in value.chunks_exact_mut(n) {
            for (v, b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        let shape = xs.to_vec();
        let rg = self.rg(&[x, row]);
        Ok(self.push(Op::AddRow { x, row }, shape, value, rg))
    }

    /// Multiplies every trailing-axis slice of `x` elementwise by the rank-1 `row`.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (xs, rs) = (self.shape(x), self.shape(row));
        if rs.len() != 1 || rs[0] != last(xs) {
            return Err(QnnError::dim("mul_row", xs, rs));
        }
        let n = rs[0];
        let r = &self.nodes[row.0].value;
        let mut value = self.nodes[x.0].value.clone();
        for chunk in value.chunks_exact_mut(n) {
            for (v, b) in chunk.iter_mut().zip(r) {
                *v *= b;
            }
        }
        let shape = xs.to_vec();
        let rg = self.rg(&[x, row]);
        Ok(self.push(Op::MulRow { x, row }, shape, value, rg))
    }

    /// Sum-pooled Khatri-Rao product: `out[.., j] = a[.., j] * sum_p b[.., p, j]`.
    ///
    /// `a` is `[.. x D']` and `b` is `[.. x M x D']` with matching leading axes.
    /// With `M == 1` this is exactly the Hadamard product with the single row.
    pub fn krp_sum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if bs.len() != as_.len() + 1
            || bs[bs.len() - 1] != last(as_)
            || bs[..as_.len() - 1] != as_[..as_.len() - 1]
        {
            return Err(QnnError::dim("krp_sum", as_, bs));
        }
        let d = last(as_);
        let m = bs[bs.len() - 2];
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = Vec::with_capacity(av.len());
        for (ar, br) in av.chunks_exact(d).zip(bv.chunks_exact(m * d)) {
            let pooled = pool_rows(br, m, d);
            value.extend(ar.iter().zip(&pooled).map(|(x, s)| x * s));
        }
        let shape = as_.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::KrpSum { a, b, m }, shape, value, rg))
    }

    pub fn activation(&mut self, x: NodeId, kind: ActivationKind) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|&v| kind.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::Activation { x, kind }, shape, value, rg)
    }

    /// Concatenation along the trailing axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| QnnError::Argument("concat of an empty list".into()))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(QnnError::dim("concat", self.shape(first), s));
            }
            widths.push(last(s));
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.nodes[p.0].value[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            shape,
            value,
            rg,
        ))
    }

    /// Columns `start..start+len` of the trailing axis.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        let w = last(xs);
        if len == 0 || start + len > w {
            return Err(QnnError::Argument(format!(
                "slice {start}..{} out of range for width {w}",
                start + len
            )));
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = len;
        let value = self.nodes[x.0]
            .value
            .chunks_exact(w)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Slice { x, start }, shape, value, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.nodes[x.0].value.len() {
            return Err(QnnError::dim("reshape", self.shape(x), &shape));
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape(x), shape, value, rg))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)`, inference is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(QnnError::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = self.nodes[x.0]
            .value
            .iter()
            .zip(&scale)
            .map(|(v, s)| v * s)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Dropout { x, scale }, shape, value, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Op::Mean(x), vec![1], vec![s], rg)
    }

    /// `mul * x + add`, elementwise.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|v| mul * v + add).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::Affine { x, mul }, shape, value, rg)
    }

    /// Sums the trailing axis, keeping it as extent 1.
    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let w = last(xs);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = 1;
        let value = self.nodes[x.0]
            .value
            .chunks_exact(w)
            .map(|r| r.iter().sum())
            .collect();
        let rg = self.rg(&[x]);
        self.push(Op::RowSum(x), shape, value, rg)
    }

    /// Repeats a trailing extent-1 axis `width` times.
    pub fn broadcast(&mut self, x: NodeId, width: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        if last(xs) != 1 || width == 0 {
            return Err(QnnError::dim("broadcast", xs, &[width]));
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = width;
        let value = self.nodes[x.0]
            .value
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, width))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Broadcast { x }, shape, value, rg))
    }

    /// Row lookup `table[rows[b], :]` producing `[rows.len() x d]`.
    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(QnnError::dim("gather", ts, &[rows.len()]));
        }
        let (n, d) = (ts[0], ts[1]);
        if rows.is_empty() {
            return Err(QnnError::Argument("gather of zero rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(QnnError::Data(format!(
                "row index {bad} out of range for table with {n} rows"
            )));
        }
        let tv = &self.nodes[table.0].value;
        let mut value = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            value.extend_from_slice(&tv[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            vec![rows.len(), d],
            value,
            rg,
        ))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::Clamp { x, lo, hi }, shape, value, rg)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::Ln(x), shape, value, rg)
    }

    /// Mean binary cross-entropy of probabilities `p` against a fixed `target`.
    pub fn bce_mean(&mut self, p: NodeId, target: &[f64]) -> Result<NodeId> {
        let pv = &self.nodes[p.0].value;
        if pv.len() != target.len() {
            return Err(QnnError::Argument(format!(
                "bce: {} predictions vs {} targets",
                pv.len(),
                target.len()
            )));
        }
        let loss = crate::loss_metrics::bce(target, pv)?;
        let rg = self.rg(&[p]);
        Ok(self.push(
            Op::BceMean {
                p,
                target: target.to_vec(),
            },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    /// Populates gradients of every ancestor of the scalar `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(QnnError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |n: NodeId| &self.nodes[n.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatVec { w, x } => {
                let inp = self.shape(*w)[1];
                let out = self.shape(*w)[0];
                let wv = val(*w);
                let xv = val(*x);
                if self.nodes[x.0].requires_grad {
                    let gx = acc(grads, *x, xv.len());
                    for (gr, gxr) in g.chunks_exact(out).zip(gx.chunks_exact_mut(inp)) {
                        for (&go, wr) in gr.iter().zip(wv.chunks_exact(inp)) {
                            if go != 0.0 {
                                axpy(go, wr, gxr);
                            }
                        }
                    }
                }
                if self.nodes[w.0].requires_grad {
                    let gw = acc(grads, *w, wv.len());
                    for (gr, xr) in g.chunks_exact(out).zip(xv.chunks_exact(inp)) {
                        for (&go, gwr) in gr.iter().zip(gw.chunks_exact_mut(inp)) {
                            if go != 0.0 {
                                axpy(go, xr, gwr);
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for n in [*a, *b] {
                    if self.nodes[n.0].requires_grad {
                        add_into(acc(grads, n, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a.0].requires_grad {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.nodes[b.0].requires_grad {
                    for (t, s) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                        *t -= s;
                    }
                }
            }
            Op::Hadamard(a, b) => {
                // a == b (x*x) works: both contributions land in the same slot.
                let (av, bv) = (val(*a), val(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let gb = acc(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.nodes[x.0].requires_grad {
                    add_into(acc(grads, *x, g.len()), g);
                }
                if self.nodes[row.0].requires_grad {
                    let n = val(*row).len();
                    let gr = acc(grads, *row, n);
                    for chunk in g.chunks_exact(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::MulRow { x, row } => {
                let n = val(*row).len();
                let (xv, rv) = (val(*x), val(*row));
                if self.nodes[x.0].requires_grad {
                    let gx = acc(grads, *x, g.len());
                    for (gc, gxc) in g.chunks_exact(n).zip(gx.chunks_exact_mut(n)) {
                        for j in 0..n {
                            gxc[j] += gc[j] * rv[j];
                        }
                    }
                }
                if self.nodes[row.0].requires_grad {
                    let gr = acc(grads, *row, n);
                    for (gc, xc) in g.chunks_exact(n).zip(xv.chunks_exact(n)) {
                        for j in 0..n {
                            gr[j] += gc[j] * xc[j];
                        }
                    }
                }
            }
            Op::KrpSum { a, b, m } => {
                let d = last(self.shape(*a));
                let (av, bv) = (val(*a), val(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = acc(grads, *a, av.len());
                    for ((gr, br), gar) in g
                        .chunks_exact(d)
                        .zip(bv.chunks_exact(m * d))
                        .zip(ga.chunks_exact_mut(d))
                    {
                        let pooled = pool_rows(br, *m, d);
                        for j in 0..d {
                            gar[j] += gr[j] * pooled[j];
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let gb = acc(grads, *b, bv.len());
                    for ((gr, ar), gbr) in g
                        .chunks_exact(d)
                        .zip(av.chunks_exact(d))
                        .zip(gb.chunks_exact_mut(m * d))
                    {
                        for row in gbr.chunks_exact_mut(d) {
                            for j in 0..d {
                                row[j] += gr[j] * ar[j];
                            }
                        }
                    }
                }
            }
            Op::Activation { x, kind } => {
                let xv = val(*x);
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * kind.derivative(xv[i], node.value[i]);
                }
            }
            Op::Concat { parts } => {
                let total = last(&node.shape);
                let rows = g.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = last(self.shape(p));
                    if self.nodes[p.0].requires_grad {
                        let gp = acc(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::Slice { x, start } => {
                let w = last(self.shape(*x));
                let len = last(&node.shape);
                let gx = acc(grads, *x, val(*x).len());
                for (gr, gxr) in g.chunks_exact(len).zip(gx.chunks_exact_mut(w)) {
                    add_into(&mut gxr[*start..*start + len], gr);
                }
            }
            Op::Reshape(x) => add_into(acc(grads, *x, g.len()), g),
            Op::Dropout { x, scale } => {
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * scale[i];
                }
            }
            Op::Sum(x) => {
                let gx = acc(grads, *x, val(*x).len());
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let s = g[0] / n as f64;
                acc(grads, *x, n).iter_mut().for_each(|v| *v += s);
            }
            Op::Affine { x, mul } => {
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += mul * g[i];
                }
            }
            Op::RowSum(x) => {
                let w = last(self.shape(*x));
                let gx = acc(grads, *x, val(*x).len());
                for (gxr, &gr) in gx.chunks_exact_mut(w).zip(g) {
                    gxr.iter_mut().for_each(|v| *v += gr);
                }
            }
            Op::Broadcast { x } => {
                let w = last(&node.shape);
                let gx = acc(grads, *x, val(*x).len());
                for (t, gr) in gx.iter_mut().zip(g.chunks_exact(w)) {
                    *t += gr.iter().sum::<f64>();
                }
            }
            Op::Gather { table, rows } => {
                let d = last(&node.shape);
                let gt = acc(grads, *table, val(*table).len());
                for (&r, gr) in rows.iter().zip(g.chunks_exact(d)) {
                    add_into(&mut gt[r * d..(r + 1) * d], gr);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Ln(x) => {
                let xv = val(*x);
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] / xv[i];
                }
            }
            Op::BceMean { p, target } => {
                let pv = val(*p);
                let n = pv.len() as f64;
                let gp = acc(grads, *p, pv.len());
                for i in 0..pv.len() {
                    let (y, q) = (target[i], pv[i]);
                    gp[i] += g[0] * (-(y / q) + (1.0 - y) / (1.0 - q)) / n;
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Column sums of an `[m x d]` block. Starts from the first row so `m == 1` is exact.
fn pool_rows(block: &[f64], m: usize, d: usize) -> Vec<f64> {
    let mut pooled = block[..d].to_vec();
    for p in 1..m {
        add_into(&mut pooled, &block[p * d..(p + 1) * d]);
    }
    pooled
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::zeros(&[]).is_err());
    }

    #[test]
    fn matvec_examples() {
        let cases = [
            (vec![1.0, 0.0, 0.0, 1.0], vec![3.0, 4.0], vec![3.0, 4.0]),
            (vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 1.0], vec![3.0, 7.0]),
            (vec![2.0, 0.0, 0.0, 2.0], vec![1.0, -1.0], vec![2.0, -2.0]),
        ];
        for (w, x, want) in cases {
            let mut tape = Tape::new();
            let w = tape.leaf(&t(&[2, 2], &w));
            let x = tape.leaf(&t(&[2], &x));
            let y = tape.matvec(w, x).unwrap();
            assert_eq!(tape.value(y), &want[..]);
        }
    }

    #[test]
    fn matvec_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let x = tape.leaf(&t(&[2], &[0.0; 2]));
        let err = tape.matvec(w, x).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn hadamard_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.leaf(&t(&[3], &[4.0, 5.0, 6.0]));
        let y = tape.hadamard(a, b).unwrap();
        assert_eq!(tape.value(y), &[4.0, 10.0, 18.0]);
        let ones = tape.constant(&Tensor::ones(&[3]).unwrap());
        let y = tape.hadamard(a, ones).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
        let s = tape.leaf(&t(&[2], &[2.0, -1.0]));
        let y = tape.hadamard(s, s).unwrap();
        assert_eq!(tape.value(y), &[4.0, 1.0]);
        let c = tape.leaf(&t(&[2], &[1.0, 1.0]));
        assert!(tape.hadamard(a, c).is_err());
    }

    #[test]
    fn krp_sum_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.krp_sum(a, b).unwrap();
        assert_eq!(tape.value(y), &[4.0, 12.0]);

        let a = tape.leaf(&t(&[2], &[5.0, 7.0]));
        let b = tape.leaf(&t(&[1, 2], &[1.0, 1.0]));
        let y = tape.krp_sum(a, b).unwrap();
        assert_eq!(tape.value(y), &[5.0, 7.0]);

        let a = tape.leaf(&t(&[3], &[1.0, 1.0, 1.0]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]).unwrap());
        let y = tape.krp_sum(a, b).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);

        let bad = tape.leaf(&Tensor::zeros(&[2, 2]).unwrap());
        assert!(matches!(
            tape.krp_sum(a, bad),
            Err(QnnError::Dimension { .. })
        ));
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.activation(x, ActivationKind::Relu);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let z = tape.leaf(&t(&[1], &[0.0]));
        let s = tape.activation(z, ActivationKind::Sigmoid);
        assert_eq!(tape.value(s), &[0.5]);
        let th = tape.activation(z, ActivationKind::Tanh);
        assert_eq!(tape.value(th), &[0.0]);
        assert!(matches!(
            ActivationKind::parse("gelu"),
            Err(QnnError::Config(_))
        ));
        assert_eq!(ActivationKind::parse("relu").unwrap(), ActivationKind::Relu);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[0.0]));
        let y = tape.activation(x, ActivationKind::Relu);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[1], &[3.0]));
        let y = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0]);
        assert_eq!(tape.concat(&[a]).unwrap(), a);
        assert!(matches!(tape.concat(&[]), Err(QnnError::Argument(_))));
        // zero-extent parts cannot even be constructed
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn dropout_contract() {
        let x = Tensor::ones(&[1000]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        assert_eq!(tape.dropout(xi, 0.0, &mut rng, true).unwrap(), xi);
        assert_eq!(tape.dropout(xi, 0.5, &mut rng, false).unwrap(), xi);
        assert!(matches!(
            tape.dropout(xi, 1.0, &mut rng, true),
            Err(QnnError::Config(_))
        ));
        assert!(tape.dropout(xi, -0.1, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_mean_is_preserved() {
        let x = Tensor::ones(&[1_000_000]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let y = tape.dropout(xi, 0.5, &mut rng, true).unwrap();
        let mean = tape.value(y).iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn dropout_is_reproducible_for_a_seed() {
        let x = Tensor::ones(&[64]).unwrap();
        let run = |seed| {
            let mut tape = Tape::new();
            let xi = tape.leaf(&x);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = tape.dropout(xi, 0.3, &mut rng, true).unwrap();
            tape.value(y).to_vec()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[3.0, -2.0]));
        let sq = tape.hadamard(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, -4.0]);
        assert_eq!(tape.tensor(x).grad().unwrap(), &[6.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(QnnError::Argument(_))));
    }

    #[test]
    fn constants_and_detached_nodes_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let c = tape.constant(&t(&[2], &[3.0, 4.0]));
        let d = tape.detach(x);
        let y = tape.hadamard(x, c).unwrap();
        let z = tape.hadamard(y, d).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(d).is_none());
        // d/dx (x * c * stop(x)) = c * x
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 8.0]);
    }

    #[test]
    fn gather_scatters_into_selected_rows() {
        let mut tape = Tape::new();
        let table = tape.leaf(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(tape.gather(table, &[3]), Err(QnnError::Data(_))));
    }

    #[test]
    fn batched_ops_match_per_row_results() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]));
        let xb = tape.leaf(&t(&[2, 3], &[1.0, 0.0, 2.0, -1.0, 1.0, 1.0]));
        let yb = tape.matvec(w, xb).unwrap();
        assert_eq!(tape.shape(yb), &[2, 2]);
        assert_eq!(tape.value(yb), &[7.0, -1.0, 4.0, 1.5]);
        let sl = tape.slice(xb, 1, 2).unwrap();
        assert_eq!(tape.value(sl), &[0.0, 2.0, 1.0, 1.0]);
        let rs = tape.row_sum(xb);
        assert_eq!(tape.value(rs), &[3.0, 1.0]);
        let bc = tape.broadcast(rs, 2).unwrap();
        assert_eq!(tape.value(bc), &[3.0, 3.0, 1.0, 1.0]);
    }
}
