//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, which is always a valid
//! topological order because a node can only reference nodes that already
//! exist. `forward` evaluates any nodes appended since the last call, so a
//! builder that needs intermediate values (for decoding, or for picking the
//! runner-up class of a hinge loss) can call it mid-construction. `backward`
//! walks the nodes in reverse and accumulates `d(loss)/d(node)` into every
//! node, including the parameter and lookup leaves, from which
//! [`Graph::gradients`] collects per-parameter gradients.
//!
//! A graph is meant to be built per training example and dropped afterwards.

pub mod check;

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{log_sum_exp, Reduce, Tensor, UnaryOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation catalogue. Each variant has a forward rule in `Graph::eval`
/// and a local derivative rule in `Graph::backprop_node`.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Constant input; the value is fixed at construction.
    Input,
    /// Reference to a named parameter in the store.
    Parameter(String),
    /// One row of a lookup table.
    Lookup { table: String, row: usize },
    Add,
    /// Binary difference `a - b`.
    Minus,
    /// Component-wise product.
    Cmul,
    Matmul,
    /// Row vectors joined left to right.
    Concat,
    /// Tensors with equal column count stacked top to bottom.
    ConcatRows,
    /// `x W + b`, with `b` broadcast over the rows of `x`.
    Affine,
    Negate,
    ScalarAdd(f64),
    Scale(f64),
    Unary(UnaryOp),
    Log,
    /// `ln(max(x, floor))`; the derivative uses the same floor.
    ClampedLog(f64),
    /// Row-wise softmax.
    Softmax,
    /// Element at a flat row-major index, as a 1x1 node.
    Pick(usize),
    SumElems,
    SumNodes,
    AvgNodes,
    WeightedSum(Vec<f64>),
    /// Column-wise max over rows.
    MaxPoolRows,
    AvgPoolRows,
    /// Top-k rows per column, kept in their original order, flattened to `1 x (k*cols)`.
    KMaxPoolRows(usize),
    /// Inverted dropout. `mask` holds the per-entry multiplier (0 or 1/(1-rate)).
    Dropout { rate: f64, train: bool, mask: Vec<f64> },
    /// `tanh(x) / ||tanh(x)||`.
    NormalizeTanh,
    Transpose,
    SliceCols { start: usize, len: usize },
    /// `log(sum(exp(x)))` over all entries.
    LogSumExp,
    /// Per-column log-sum-exp over rows.
    LogSumExpRows,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Parameter(_) => "parameter",
            OpKind::Lookup { .. } => "lookup",
            OpKind::Add => "add",
            OpKind::Minus => "minus",
            OpKind::Cmul => "cmul",
            OpKind::Matmul => "matmul",
            OpKind::Concat => "concat",
            OpKind::ConcatRows => "concat-rows",
            OpKind::Affine => "affine",
            OpKind::Negate => "negate",
            OpKind::ScalarAdd(_) => "scalar-add",
            OpKind::Scale(_) => "scale",
            OpKind::Unary(u) => u.name(),
            OpKind::Log => "log",
            OpKind::ClampedLog(_) => "clamped-log",
            OpKind::Softmax => "softmax",
            OpKind::Pick(_) => "pick",
            OpKind::SumElems => "sum-elems",
            OpKind::SumNodes => "sum-nodes",
            OpKind::AvgNodes => "avg-nodes",
            OpKind::WeightedSum(_) => "weighted-sum",
            OpKind::MaxPoolRows => "max-pool-rows",
            OpKind::AvgPoolRows => "avg-pool-rows",
            OpKind::KMaxPoolRows(_) => "kmax-pool-rows",
            OpKind::Dropout { .. } => "dropout",
            OpKind::NormalizeTanh => "normalize-tanh",
            OpKind::Transpose => "transpose",
            OpKind::SliceCols { .. } => "slice-cols",
            OpKind::LogSumExp => "logsumexp",
            OpKind::LogSumExpRows => "logsumexp-rows",
        }
    }

    fn arity(&self) -> Arity {
        match self {
            OpKind::Input | OpKind::Parameter(_) | OpKind::Lookup { .. } => Arity::Exactly(0),
            OpKind::Add | OpKind::Minus | OpKind::Cmul | OpKind::Matmul => Arity::Exactly(2),
            OpKind::Affine => Arity::Exactly(3),
            OpKind::Concat | OpKind::ConcatRows | OpKind::SumNodes | OpKind::AvgNodes => Arity::AtLeast(1),
            OpKind::WeightedSum(w) => Arity::Exactly(w.len()),
            _ => Arity::Exactly(1),
        }
    }
}

enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

/// Values recorded during forward that the derivative rule needs.
#[derive(Debug, Clone, Default)]
enum Aux {
    #[default]
    None,
    /// Winning row per column.
    Argmax(Vec<usize>),
    /// Selected rows per column, ascending.
    KMax(Vec<Vec<usize>>),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    value: Tensor,
    grad: Tensor,
    aux: Aux,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    evaluated: usize,
    loss: Option<NodeId>,
    train: bool,
    rng: ChaCha8Rng,
    param_cache: HashMap<String, NodeId>,
    lookup_cache: HashMap<(String, usize), NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// A graph in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            evaluated: 0,
            loss: None,
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            param_cache: HashMap::new(),
            lookup_cache: HashMap::new(),
        }
    }

    /// A graph in training mode whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Graph::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id))
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn dim(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.cols()
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        if id.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(id));
        }
        if id.0 >= self.evaluated {
            return Err(Error::NotEvaluated(id));
        }
        Ok(&self.nodes[id.0].value)
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id)?;
        if v.len() != 1 {
            return Err(Error::NonScalarLoss {
                rows: v.rows(),
                cols: v.cols(),
            });
        }
        Ok(v.item())
    }

    pub fn grad(&self, id: NodeId) -> Result<&Tensor> {
        Ok(&self.node(id)?.grad)
    }

    pub fn loss(&self) -> Option<NodeId> {
        self.loss
    }

    pub fn set_loss(&mut self, id: NodeId) -> Result<()> {
        let (r, c) = self.node(id)?.value.shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        self.loss = Some(id);
        Ok(())
    }

    /// Appends a node after checking arity and shapes. Leaf kinds must go
    /// through [`Graph::input`], [`Graph::parameter`] or [`Graph::lookup`].
    pub fn add_node(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        match kind.arity() {
            Arity::Exactly(0) => {
                return Err(Error::invalid(
                    kind.name(),
                    "leaf nodes are created with input/parameter/lookup",
                ))
            }
            Arity::Exactly(n) if inputs.len() != n => {
                return Err(Error::Arity {
                    op: kind.name(),
                    expected: n.to_string(),
                    got: inputs.len(),
                })
            }
            Arity::AtLeast(n) if inputs.len() < n => {
                return Err(Error::Arity {
                    op: kind.name(),
                    expected: format!("at least {n}"),
                    got: inputs.len(),
                })
            }
            _ => {}
        }
        for &i in inputs {
            if i.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(i));
            }
        }
        let shapes: Vec<(usize, usize)> = inputs.iter().map(|&i| self.shape(i)).collect();
        let (rows, cols) = infer_shape(&kind, &shapes)?;
        let kind = match kind {
            OpKind::Dropout { rate, mask, .. } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
                }
                let mask = if !mask.is_empty() {
                    if mask.len() != rows * cols {
                        return Err(Error::invalid("dropout", "mask length does not match input"));
                    }
                    mask
                } else if self.train {
                    let keep = 1.0 / (1.0 - rate);
                    (0..rows * cols)
                        .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
                        .collect()
                } else {
                    Vec::new()
                };
                OpKind::Dropout {
                    rate,
                    train: !mask.is_empty(),
                    mask,
                }
            }
            k => k,
        };
        Ok(self.push(kind, inputs.to_vec(), Tensor::zeros(rows, cols)))
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let (r, c) = value.shape();
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            grad: Tensor::zeros(r, c),
            aux: Aux::None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input node.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Input, Vec::new(), value)
    }

    /// Parameter node; repeated requests for the same name return the same node.
    pub fn parameter(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_cache.get(name) {
            return Ok(id);
        }
        let value = store.param(name)?.clone();
        let id = self.push(OpKind::Parameter(name.to_string()), Vec::new(), value);
        self.param_cache.insert(name.to_string(), id);
        Ok(id)
    }

    /// Embedding row. Indices past the vocabulary resolve to the table's unknown row.
    pub fn lookup(&mut self, store: &ParamStore, table: &str, index: usize) -> Result<NodeId> {
        let t = store.lookup(table)?;
        let row = t.resolve(index);
        let key = (table.to_string(), row);
        if let Some(&id) = self.lookup_cache.get(&key) {
            return Ok(id);
        }
        let value = Tensor::row(t.row(row).to_vec());
        let id = self.push(
            OpKind::Lookup {
                table: table.to_string(),
                row,
            },
            Vec::new(),
            value,
        );
        self.lookup_cache.insert(key, id);
        Ok(id)
    }

    // Convenience builders. Each is a thin wrapper over `add_node`.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Add, &[a, b])
    }

    pub fn minus(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Minus, &[a, b])
    }

    pub fn cmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Cmul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Matmul, &[a, b])
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Affine, &[x, w, b])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.add_node(OpKind::Concat, parts)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.add_node(OpKind::ConcatRows, parts)
    }

    pub fn negate(&mut self, a: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Negate, &[a])
    }

    pub fn scalar_add(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.add_node(OpKind::ScalarAdd(c), &[a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.add_node(OpKind::Scale(c), &[a])
    }

    pub fn unary(&mut self, op: UnaryOp, a: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Unary(op), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Log, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Softmax, &[a])
    }

    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        self.add_node(OpKind::Pick(index), &[a])
    }

    pub fn sum_elems(&mut self, a: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::SumElems, &[a])
    }

    pub fn sum_nodes(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.add_node(OpKind::SumNodes, parts)
    }

    pub fn avg_nodes(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.add_node(OpKind::AvgNodes, parts)
    }

    pub fn weighted_sum(&mut self, parts: &[NodeId], weights: &[f64]) -> Result<NodeId> {
        self.add_node(OpKind::WeightedSum(weights.to_vec()), parts)
    }

    pub fn dropout(&mut self, a: NodeId, rate: f64) -> Result<NodeId> {
        if rate == 0.0 {
            return Ok(a);
        }
        self.add_node(
            OpKind::Dropout {
                rate,
                train: self.train,
                mask: Vec::new(),
            },
            &[a],
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.add_node(OpKind::Transpose, &[a])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.add_node(OpKind::SliceCols { start, len }, &[a])
    }

    /// Evaluates every node appended since the last call and returns the
    /// value of the last node.
    pub fn forward(&mut self) -> Result<&Tensor> {
        if self.nodes.is_empty() {
            return Err(Error::Empty("forward on an empty graph"));
        }
        while self.evaluated < self.nodes.len() {
            let i = self.evaluated;
            let (value, aux) = self.eval(i)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: NodeId(i),
                    op: self.nodes[i].kind.name(),
                });
            }
            let node = &mut self.nodes[i];
            node.value = value;
            node.aux = aux;
            self.evaluated += 1;
        }
        Ok(&self.nodes[self.nodes.len() - 1].value)
    }

    /// Re-evaluates the whole graph from its leaves.
    pub fn recompute(&mut self) -> Result<&Tensor> {
        self.evaluated = 0;
        self.forward()
    }

    /// Replaces the value of an input node; downstream values are invalidated.
    pub fn set_input(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = self.nodes.get_mut(id.0).ok_or(Error::UnknownNode(id))?;
        if node.kind != OpKind::Input || node.value.shape() != value.shape() {
            return Err(Error::invalid("set_input", "target must be an input node of the same shape"));
        }
        node.value = value;
        self.evaluated = self.evaluated.min(id.0 + 1);
        Ok(())
    }

    fn eval(&self, i: usize) -> Result<(Tensor, Aux)> {
        let node = &self.nodes[i];
        let x = |k: usize| &self.nodes[node.inputs[k].0].value;
        let v = match &node.kind {
            OpKind::Input | OpKind::Parameter(_) | OpKind::Lookup { .. } => node.value.clone(),
            OpKind::Add => x(0).zip_with(x(1), "add", |a, b| a + b)?,
            OpKind::Minus => x(0).zip_with(x(1), "minus", |a, b| a - b)?,
            OpKind::Cmul => x(0).zip_with(x(1), "cmul", |a, b| a * b)?,
            OpKind::Matmul => x(0).matmul(x(1))?,
            OpKind::Affine => {
                let mut out = x(0).matmul(x(1))?;
                let b = x(2);
                for r in 0..out.rows() {
                    for (o, bv) in out.row_slice_mut(r).iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                out
            }
            OpKind::Concat => {
                let parts: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j.0].value).collect();
                Tensor::concat_cols(&parts)?
            }
            OpKind::ConcatRows => {
                let parts: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j.0].value).collect();
                Tensor::concat_rows(&parts)?
            }
            OpKind::Negate => x(0).map(|v| -v),
            OpKind::ScalarAdd(c) => x(0).map(|v| v + c),
            OpKind::Scale(c) => x(0).map(|v| v * c),
            OpKind::Unary(u) => x(0).map(|v| u.apply(v)),
            OpKind::Log => {
                if let Some(&bad) = x(0).data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::LogDomain {
                        node: NodeId(i),
                        value: bad,
                    });
                }
                x(0).map(f64::ln)
            }
            OpKind::ClampedLog(floor) => x(0).map(|v| v.max(*floor).ln()),
            OpKind::Softmax => {
                let a = x(0);
                let mut out = a.clone();
                for r in 0..a.rows() {
                    let row = out.row_slice_mut(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        z += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= z;
                    }
                }
                out
            }
            OpKind::Pick(k) => Tensor::scalar(x(0).data()[*k]),
            OpKind::SumElems => Tensor::scalar(x(0).sum()),
            OpKind::SumNodes | OpKind::AvgNodes => {
                let mut out = x(0).clone();
                for k in 1..node.inputs.len() {
                    out.add_scaled(x(k), 1.0)?;
                }
                if node.kind == OpKind::AvgNodes {
                    out.scale(1.0 / node.inputs.len() as f64);
                }
                out
            }
            OpKind::WeightedSum(w) => {
                let mut out = Tensor::zeros(x(0).rows(), x(0).cols());
                for (k, wk) in w.iter().enumerate() {
                    out.add_scaled(x(k), *wk)?;
                }
                out
            }
            OpKind::MaxPoolRows => {
                let r = x(0).reduce(Reduce::Max)?;
                return Ok((r.value, Aux::Argmax(r.argmax.unwrap_or_default())));
            }
            OpKind::AvgPoolRows => x(0).reduce(Reduce::Avg)?.value,
            OpKind::KMaxPoolRows(k) => {
                let (out, sel) = kmax_rows(x(0), *k);
                return Ok((out, Aux::KMax(sel)));
            }
            OpKind::Dropout { train, mask, .. } => {
                if *train {
                    let mut out = x(0).clone();
                    for (v, m) in out.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                    out
                } else {
                    x(0).clone()
                }
            }
            OpKind::NormalizeTanh => {
                let t = x(0).map(f64::tanh);
                let n = t.sq_norm().sqrt();
                if n == 0.0 {
                    return Err(Error::NonFinite {
                        node: NodeId(i),
                        op: "normalize-tanh",
                    });
                }
                t.map(|v| v / n)
            }
            OpKind::Transpose => x(0).transpose(),
            OpKind::SliceCols { start, len } => x(0).slice_cols(*start, *len)?,
            OpKind::LogSumExp => Tensor::scalar(log_sum_exp(x(0).data())),
            OpKind::LogSumExpRows => {
                let a = x(0);
                let mut out = Tensor::zeros(1, a.cols());
                let mut col = vec![0.0; a.rows()];
                for c in 0..a.cols() {
                    for (r, slot) in col.iter_mut().enumerate() {
                        *slot = a.get(r, c);
                    }
                    out.set(0, c, log_sum_exp(&col));
                }
                out
            }
        };
        Ok((v, Aux::None))
    }

    /// Reverse pass from `from`, which must be a 1x1 node. Pending nodes are
    /// evaluated first. Gradients of all nodes up to `from` are reset, so
    /// calling it twice is idempotent.
    pub fn backward(&mut self, from: NodeId) -> Result<()> {
        self.node(from)?;
        let (r, c) = self.shape(from);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        if from.0 >= self.evaluated {
            self.forward()?;
        }
        for node in &mut self.nodes[..=from.0] {
            node.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        self.nodes[from.0].grad.data_mut()[0] = 1.0;
        for i in (0..=from.0).rev() {
            if self.nodes[i].inputs.is_empty() || self.nodes[i].grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            self.backprop_node(i)?;
        }
        Ok(())
    }

    /// Backward from the designated loss node.
    pub fn backward_loss(&mut self) -> Result<()> {
        let loss = self.loss.ok_or(Error::Empty("graph has no loss node"))?;
        self.backward(loss)
    }

    fn accumulate(&mut self, id: NodeId, delta: &Tensor) {
        let g = &mut self.nodes[id.0].grad;
        for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
            *a += b;
        }
    }

    fn accumulate_at(&mut self, id: NodeId, flat: usize, delta: f64) {
        self.nodes[id.0].grad.data_mut()[flat] += delta;
    }

    fn backprop_node(&mut self, i: usize) -> Result<()> {
        let node = &self.nodes[i];
        let kind = node.kind.clone();
        let inputs = node.inputs.clone();
        let gy = node.grad.clone();
        let y = node.value.clone();
        let aux = node.aux.clone();
        let xv = |g: &Graph, k: usize| g.nodes[inputs[k].0].value.clone();
        match kind {
            OpKind::Input | OpKind::Parameter(_) | OpKind::Lookup { .. } => {}
            OpKind::Add => {
                self.accumulate(inputs[0], &gy);
                self.accumulate(inputs[1], &gy);
            }
            OpKind::Minus => {
                self.accumulate(inputs[0], &gy);
                self.accumulate(inputs[1], &gy.map(|v| -v));
            }
            OpKind::Cmul => {
                let a = xv(self, 0);
                let b = xv(self, 1);
                self.accumulate(inputs[0], &gy.zip_with(&b, "cmul", |g, b| g * b)?);
                self.accumulate(inputs[1], &gy.zip_with(&a, "cmul", |g, a| g * a)?);
            }
            OpKind::Matmul | OpKind::Affine => {
                let a = xv(self, 0);
                let b = xv(self, 1);
                let da = gy.matmul(&b.transpose())?;
                let db = a.transpose().matmul(&gy)?;
                self.accumulate(inputs[0], &da);
                self.accumulate(inputs[1], &db);
                if kind == OpKind::Affine {
                    let dbias = gy.reduce(Reduce::Sum)?.value;
                    self.accumulate(inputs[2], &dbias);
                }
            }
            OpKind::Concat => {
                let mut offset = 0;
                for &j in &inputs {
                    let w = self.nodes[j.0].value.cols();
                    let part = gy.slice_cols(offset, w)?;
                    self.accumulate(j, &part);
                    offset += w;
                }
            }
            OpKind::ConcatRows => {
                let mut offset = 0;
                for &j in &inputs {
                    let n = self.nodes[j.0].value.len();
                    let part = Tensor::row(gy.data()[offset..offset + n].to_vec());
                    self.accumulate(j, &part);
                    offset += n;
                }
            }
            OpKind::Negate => self.accumulate(inputs[0], &gy.map(|v| -v)),
            OpKind::ScalarAdd(_) => self.accumulate(inputs[0], &gy),
            OpKind::Scale(c) => self.accumulate(inputs[0], &gy.map(|v| v * c)),
            OpKind::Unary(u) => {
                let x = xv(self, 0);
                let mut d = gy.clone();
                for ((dv, &xi), &yi) in d.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *dv *= u.derivative(xi, yi);
                }
                self.accumulate(inputs[0], &d);
            }
            OpKind::Log => {
                let x = xv(self, 0);
                self.accumulate(inputs[0], &gy.zip_with(&x, "log", |g, x| g / x)?);
            }
            OpKind::ClampedLog(floor) => {
                let x = xv(self, 0);
                self.accumulate(inputs[0], &gy.zip_with(&x, "clamped-log", |g, x| g / x.max(floor))?);
            }
            OpKind::Softmax => {
                let mut d = gy.clone();
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = gy.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (k, dv) in d.row_slice_mut(r).iter_mut().enumerate() {
                        *dv = yr[k] * (gr[k] - dot);
                    }
                }
                self.accumulate(inputs[0], &d);
            }
            OpKind::Pick(k) => self.accumulate_at(inputs[0], k, gy.item()),
            OpKind::SumElems => {
                let (r, c) = self.shape(inputs[0]);
                self.accumulate(inputs[0], &Tensor::filled(r, c, gy.item()));
            }
            OpKind::SumNodes => {
                for &j in &inputs {
                    self.accumulate(j, &gy);
                }
            }
            OpKind::AvgNodes => {
                let s = 1.0 / inputs.len() as f64;
                let d = gy.map(|v| v * s);
                for &j in &inputs {
                    self.accumulate(j, &d);
                }
            }
            OpKind::WeightedSum(w) => {
                for (&j, wk) in inputs.iter().zip(w) {
                    self.accumulate(j, &gy.map(|v| v * wk));
                }
            }
            OpKind::MaxPoolRows => {
                if let Aux::Argmax(arg) = aux {
                    let cols = gy.cols();
                    for (c, &r) in arg.iter().enumerate() {
                        self.accumulate_at(inputs[0], r * cols + c, gy.data()[c]);
                    }
                }
            }
            OpKind::AvgPoolRows => {
                let (rows, cols) = self.shape(inputs[0]);
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        d.set(r, c, gy.data()[c] / rows as f64);
                    }
                }
                self.accumulate(inputs[0], &d);
            }
            OpKind::KMaxPoolRows(_) => {
                if let Aux::KMax(sel) = aux {
                    let cols = sel.len();
                    for (c, rows) in sel.iter().enumerate() {
                        for (j, &r) in rows.iter().enumerate() {
                            self.accumulate_at(inputs[0], r * cols + c, gy.data()[j * cols + c]);
                        }
                    }
                }
            }
            OpKind::Dropout { train, mask, .. } => {
                if train {
                    let mut d = gy.clone();
                    for (v, m) in d.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    self.accumulate(inputs[0], &d);
                } else {
                    self.accumulate(inputs[0], &gy);
                }
            }
            OpKind::NormalizeTanh => {
                let x = xv(self, 0);
                let t = x.map(f64::tanh);
                let n = t.sq_norm().sqrt();
                let dot: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
                let mut d = gy.clone();
                for (k, dv) in d.data_mut().iter_mut().enumerate() {
                    let dt = (gy.data()[k] - y.data()[k] * dot) / n;
                    *dv = dt * (1.0 - t.data()[k] * t.data()[k]);
                }
                self.accumulate(inputs[0], &d);
            }
            OpKind::Transpose => self.accumulate(inputs[0], &gy.transpose()),
            OpKind::SliceCols { start, len } => {
                for k in 0..len {
                    self.accumulate_at(inputs[0], start + k, gy.data()[k]);
                }
            }
            OpKind::LogSumExp => {
                let x = xv(self, 0);
                let z = y.item();
                let g = gy.item();
                self.accumulate(inputs[0], &x.map(|v| g * (v - z).exp()));
            }
            OpKind::LogSumExpRows => {
                let x = xv(self, 0);
                let mut d = x.clone();
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        d.set(r, c, gy.data()[c] * (x.get(r, c) - y.data()[c]).exp());
                    }
                }
                self.accumulate(inputs[0], &d);
            }
        }
        Ok(())
    }

    /// Per-parameter gradients after `backward`. Lookup gradients are sparse:
    /// only rows referenced by this graph appear.
    pub fn gradients(&self) -> Gradients {
        let mut out = Gradients::default();
        for node in &self.nodes {
            match &node.kind {
                OpKind::Parameter(name) => {
                    out.add_param(name, &node.grad);
                }
                OpKind::Lookup { table, row } => {
                    out.add_lookup_row(table, *row, node.grad.data());
                }
                _ => {}
            }
        }
        out
    }
}

/// Top-k entries per column, preserving original row order. Ties prefer earlier rows.
fn kmax_rows(x: &Tensor, k: usize) -> (Tensor, Vec<Vec<usize>>) {
    let (rows, cols) = x.shape();
    let mut out = Tensor::zeros(k, cols);
    let mut sel = Vec::with_capacity(cols);
    for c in 0..cols {
        let mut order: Vec<usize> = (0..rows).collect();
        // stable sort keeps the earlier row first among equal values
        order.sort_by(|&a, &b| x.get(b, c).total_cmp(&x.get(a, c)));
        let mut chosen: Vec<usize> = order[..k].to_vec();
        chosen.sort_unstable();
        for (j, &r) in chosen.iter().enumerate() {
            out.set(j, c, x.get(r, c));
        }
        sel.push(chosen);
    }
    (Tensor::from_vec(1, k * cols, out.into_vec()).expect("sizes agree"), sel)
}

fn infer_shape(kind: &OpKind, s: &[(usize, usize)]) -> Result<(usize, usize)> {
    let name = kind.name();
    let same = |a: (usize, usize), b: (usize, usize)| -> Result<()> {
        if a != b {
            return Err(Error::Shape { op: name, lhs: a, rhs: b });
        }
        Ok(())
    };
    Ok(match kind {
        OpKind::Input | OpKind::Parameter(_) | OpKind::Lookup { .. } => unreachable!("leaf"),
        OpKind::Add | OpKind::Minus | OpKind::Cmul => {
            same(s[0], s[1])?;
            s[0]
        }
        OpKind::Matmul => {
            if s[0].1 != s[1].0 {
                return Err(Error::Shape { op: name, lhs: s[0], rhs: s[1] });
            }
            (s[0].0, s[1].1)
        }
        OpKind::Affine => {
            if s[0].1 != s[1].0 {
                return Err(Error::Shape { op: name, lhs: s[0], rhs: s[1] });
            }
            if s[2] != (1, s[1].1) {
                return Err(Error::Shape { op: name, lhs: (1, s[1].1), rhs: s[2] });
            }
            (s[0].0, s[1].1)
        }
        OpKind::Concat => {
            for &p in s {
                if p.0 != 1 {
                    return Err(Error::invalid(name, format!("expected row vectors, got {}x{}", p.0, p.1)));
                }
            }
            (1, s.iter().map(|p| p.1).sum())
        }
        OpKind::ConcatRows => {
            for &p in &s[1..] {
                if p.1 != s[0].1 {
                    return Err(Error::Shape { op: name, lhs: s[0], rhs: p });
                }
            }
            (s.iter().map(|p| p.0).sum(), s[0].1)
        }
        OpKind::Negate
        | OpKind::ScalarAdd(_)
        | OpKind::Scale(_)
        | OpKind::Unary(_)
        | OpKind::Log
        | OpKind::ClampedLog(_)
        | OpKind::Softmax
        | OpKind::Dropout { .. }
        | OpKind::NormalizeTanh => s[0],
        OpKind::Pick(k) => {
            if *k >= s[0].0 * s[0].1 {
                return Err(Error::invalid(name, format!("index {k} out of range for {}x{}", s[0].0, s[0].1)));
            }
            (1, 1)
        }
        OpKind::SumElems | OpKind::LogSumExp => (1, 1),
        OpKind::SumNodes | OpKind::AvgNodes | OpKind::WeightedSum(_) => {
            for &p in &s[1..] {
                same(s[0], p)?;
            }
            s[0]
        }
        OpKind::MaxPoolRows | OpKind::AvgPoolRows | OpKind::LogSumExpRows => {
            if s[0].0 == 0 {
                return Err(Error::Empty("pooling over zero rows"));
            }
            (1, s[0].1)
        }
        OpKind::KMaxPoolRows(k) => {
            if *k == 0 || *k > s[0].0 {
                return Err(Error::invalid(name, format!("k={k} with {} rows", s[0].0)));
            }
            (1, k * s[0].1)
        }
        OpKind::Transpose => (s[0].1, s[0].0),
        OpKind::SliceCols { start, len } => {
            if s[0].0 != 1 || start + len > s[0].1 || *len == 0 {
                return Err(Error::invalid(name, format!("[{start}, {}) of {}x{}", start + len, s[0].0, s[0].1)));
            }
            (1, *len)
        }
    })
}

/// Gradients keyed by parameter name; lookup-table gradients are kept per row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub lookups: BTreeMap<String, BTreeMap<usize, Vec<f64>>>,
}

impl Gradients {
    pub fn add_param(&mut self, name: &str, grad: &Tensor) {
        match self.params.get_mut(name) {
            Some(g) => {
                g.add_scaled(grad, 1.0).expect("gradient shapes are fixed per parameter");
            }
            None => {
                self.params.insert(name.to_string(), grad.clone());
            }
        }
    }

    pub fn add_lookup_row(&mut self, table: &str, row: usize, grad: &[f64]) {
        let rows = self.lookups.entry(table.to_string()).or_default();
        let slot = rows.entry(row).or_insert_with(|| vec![0.0; grad.len()]);
        for (a, b) in slot.iter_mut().zip(grad) {
            *a += b;
        }
    }

    /// Adds `scale * other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (name, g) in &other.params {
            let mut s = g.clone();
            s.scale(scale);
            self.add_param(name, &s);
        }
        for (table, rows) in &other.lookups {
            for (&row, g) in rows {
                let s: Vec<f64> = g.iter().map(|v| v * scale).collect();
                self.add_lookup_row(table, row, &s);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.values_mut() {
            g.scale(s);
        }
        for rows in self.lookups.values_mut() {
            for g in rows.values_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    /// Global L2 norm over every entry.
    pub fn norm(&self) -> f64 {
        let p: f64 = self.params.values().map(Tensor::sq_norm).sum();
        let l: f64 = self
            .lookups
            .values()
            .flat_map(|rows| rows.values())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum();
        (p + l).sqrt()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.lookups.is_empty()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn lookup_row(&self, table: &str, row: usize) -> Option<&[f64]> {
        self.lookups.get(table)?.get(&row).map(Vec::as_slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitSpec, ParamStore};

    fn scalar_graph(a: f64, b: f64) -> (Graph, NodeId, NodeId, NodeId) {
        let mut g = Graph::new();
        let na = g.input(Tensor::scalar(a));
        let nb = g.input(Tensor::scalar(b));
        let ab = g.cmul(na, nb).unwrap();
        let p1 = g.scalar_add(ab, 1.0).unwrap();
        let p2 = g.scalar_add(ab, 2.0).unwrap();
        let out = g.cmul(p1, p2).unwrap();
        (g, na, nb, out)
    }

    #[test]
    fn shared_subexpression_forward_and_backward() {
        let (mut g, a, b, out) = scalar_graph(2.0, 3.0);
        assert_eq!(g.forward().unwrap().item(), 56.0);
        g.backward(out).unwrap();
        assert_eq!(g.grad(a).unwrap().item(), 45.0);
        assert_eq!(g.grad(b).unwrap().item(), 30.0);
        assert_eq!(g.grad(out).unwrap().item(), 1.0);
    }

    #[test]
    fn softmax_pick_log() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![1.0; 4]));
        let s = g.softmax(x).unwrap();
        let p = g.pick(s, 2).unwrap();
        let l = g.log(p).unwrap();
        let n = g.negate(l).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(s).unwrap().data(), &[0.25; 4]);
        assert!((g.scalar(n).unwrap() - 1.386_294_4).abs() < 1e-7);
    }

    #[test]
    fn add_node_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(1, 3));
        let b = g.input(Tensor::zeros(1, 3));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.shape(s), (1, 3));
        let v = g.input(Tensor::zeros(1, 17));
        let p = g.pick(v, 5).unwrap();
        assert_eq!(g.shape(p), (1, 1));
        let parts: Vec<NodeId> = (0..3).map(|_| g.input(Tensor::zeros(1, 50))).collect();
        let c = g.concat(&parts).unwrap();
        assert_eq!(g.shape(c), (1, 150));
        assert!(matches!(g.add_node(OpKind::Add, &[a]), Err(Error::Arity { .. })));
        let wrong = g.input(Tensor::zeros(1, 4));
        assert!(matches!(g.add(a, wrong), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(1, 3));
        let s = g.sum_elems(a).unwrap();
        assert!(matches!(g.value(s), Err(Error::NotEvaluated(_))));
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss { .. })));
        // pending nodes are evaluated on demand
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(matches!(Graph::new().forward(), Err(Error::Empty(_))));
    }

    #[test]
    fn log_of_nonpositive_is_an_error() {
        let mut g = Graph::new();
        let a = g.input(Tensor::row(vec![1.0, 0.0]));
        g.log(a).unwrap();
        assert!(matches!(g.forward(), Err(Error::LogDomain { .. })));
    }

    #[test]
    fn fan_out_accumulates() {
        // x feeding two consumers equals two copies of x feeding one each.
        let x = Tensor::row(vec![0.3, -0.7]);
        let mut g = Graph::new();
        let a = g.input(x.clone());
        let t = g.tanh(a).unwrap();
        let s = g.sigmoid(a).unwrap();
        let m = g.cmul(t, s).unwrap();
        let l = g.sum_elems(m).unwrap();
        g.forward().unwrap();
        g.backward(l).unwrap();

        let mut h = Graph::new();
        let a1 = h.input(x.clone());
        let a2 = h.input(x);
        let t = h.tanh(a1).unwrap();
        let s = h.sigmoid(a2).unwrap();
        let m = h.cmul(t, s).unwrap();
        let l = h.sum_elems(m).unwrap();
        h.forward().unwrap();
        h.backward(l).unwrap();
        let mut expect = h.grad(a1).unwrap().clone();
        expect.add_scaled(h.grad(a2).unwrap(), 1.0).unwrap();
        assert_eq!(g.grad(a).unwrap(), &expect);
    }

    #[test]
    fn minus_of_identical_inputs() {
        let mut g = Graph::new();
        let a = g.input(Tensor::row(vec![1.5]));
        let b = g.input(Tensor::row(vec![1.5]));
        let d = g.minus(a, b).unwrap();
        g.forward().unwrap();
        assert_eq!(g.scalar(d).unwrap(), 0.0);
        g.backward(d).unwrap();
        assert_eq!(g.grad(a).unwrap().item(), 1.0);
        assert_eq!(g.grad(b).unwrap().item(), -1.0);
    }

    #[test]
    fn kmax_worked_example() {
        let m = Tensor::from_rows(&[
            &[1.0, 2.0, 3.0],
            &[9.0, 6.0, 5.0],
            &[2.0, 3.0, 1.0],
            &[7.0, 8.0, 1.0],
            &[3.0, 4.0, 1.0],
        ]);
        let mut g = Graph::new();
        let x = g.input(m);
        let k1 = g.add_node(OpKind::KMaxPoolRows(1), &[x]).unwrap();
        let k2 = g.add_node(OpKind::KMaxPoolRows(2), &[x]).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(k1).unwrap().data(), &[9.0, 8.0, 5.0]);
        assert_eq!(g.value(k2).unwrap().data(), &[9.0, 6.0, 3.0, 7.0, 8.0, 5.0]);
    }

    #[test]
    fn dropout_is_seeded_and_inverted() {
        let build = |seed| {
            let mut g = Graph::training(seed);
            let a = g.input(Tensor::filled(1, 200, 1.0));
            let d = g.dropout(a, 0.5).unwrap();
            g.forward().unwrap();
            g.value(d).unwrap().clone()
        };
        let a = build(7);
        assert_eq!(a, build(7));
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = a.data().iter().filter(|&&v| v > 0.0).count();
        assert!((60..140).contains(&kept), "{kept}");
        // evaluation mode is the identity
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(1, 5, 1.0));
        let d = g.dropout(x, 0.5).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(d).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn softmax_is_a_distribution() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![-1.9, 0.3, 1.7, 2.0, -0.4]));
        let s = g.softmax(x).unwrap();
        g.forward().unwrap();
        let v = g.value(s).unwrap();
        assert!((v.sum() - 1.0).abs() < 1e-12);
        assert!(v.data().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn parameter_gradients_are_collected() {
        let mut store = ParamStore::new(3);
        store.add_param("W", 2, 2, InitSpec::Identity).unwrap();
        store.add_lookup("E", 4, 2, InitSpec::Constant(0.5)).unwrap();
        let mut g = Graph::new();
        let w = g.parameter(&store, "W").unwrap();
        assert_eq!(g.parameter(&store, "W").unwrap(), w);
        let e = g.lookup(&store, "E", 1).unwrap();
        let unk = g.lookup(&store, "E", 99).unwrap();
        let y = g.matmul(e, w).unwrap();
        let y2 = g.matmul(unk, w).unwrap();
        let s = g.add(y, y2).unwrap();
        let l = g.sum_elems(s).unwrap();
        g.forward().unwrap();
        g.backward(l).unwrap();
        let grads = g.gradients();
        assert_eq!(grads.param("W").unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(grads.lookup_row("E", 1).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.lookup_row("E", 4).unwrap(), &[1.0, 1.0]);
        assert!(grads.lookup_row("E", 0).is_none());
    }

    #[test]
    fn forward_is_deterministic() {
        let (mut g, _, _, _) = scalar_graph(0.1, 0.7);
        let first = g.forward().unwrap().clone();
        let second = g.recompute().unwrap().clone();
        assert_eq!(first.item().to_bits(), second.item().to_bits());
    }
}
