//! Input encoders (concatenation, CBOW), feed-forward networks and 1-d
//! convolution with pooling, all emitted as graph fragments.

use crate::autograd::{Graph, NodeId, OpKind};
use crate::error::{Error, Result};
use crate::model::{InitSpec, ParamStore};
use crate::tensor::{Tensor, UnaryOp};

/// A core feature resolved to a lookup-table row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub name: String,
    pub table: String,
    pub index: usize,
    /// Position tag such as `-1` or `+2`; only part of the key when the
    /// feature group does not share vectors across positions.
    pub position: Option<String>,
    /// Weight for weighted CBOW.
    pub weight: Option<f64>,
}

impl FeatureSpec {
    pub fn new(table: &str, index: usize) -> Self {
        FeatureSpec {
            name: String::new(),
            table: table.to_string(),
            index,
            position: None,
            weight: None,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn weighted(mut self, w: f64) -> Self {
        self.weight = Some(w);
        self
    }

    /// Vocabulary key: `name` when positions share a vector, `name:pos` otherwise.
    pub fn key(&self, shared: bool) -> String {
        match (&self.position, shared) {
            (Some(p), false) => format!("{}:{}", self.name, p),
            _ => self.name.clone(),
        }
    }
}

/// `[v(f1); v(f2); ...]`.
pub fn encode_concat(g: &mut Graph, store: &ParamStore, features: &[FeatureSpec]) -> Result<NodeId> {
    if features.is_empty() {
        return Err(Error::Empty("encode_concat needs at least one feature"));
    }
    let parts = features
        .iter()
        .map(|f| g.lookup(store, &f.table, f.index))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&parts)
}

/// `(sum a_i v(f_i)) / (sum a_i)`, with `a_i = 1` when `weighted` is false.
///
/// Features are put in a canonical order before summing, so the result is
/// bit-identical under any permutation of `features`.
pub fn encode_cbow(g: &mut Graph, store: &ParamStore, features: &[FeatureSpec], weighted: bool) -> Result<NodeId> {
    if features.is_empty() {
        return Err(Error::Empty("encode_cbow needs at least one feature"));
    }
    let mut items: Vec<(String, usize, f64)> = Vec::with_capacity(features.len());
    for f in features {
        let t = store.lookup(&f.table)?;
        let a = if weighted {
            match f.weight {
                Some(w) if w > 0.0 => w,
                _ => return Err(Error::invalid("wcbow", format!("feature `{}` needs a positive weight", f.name))),
            }
        } else {
            1.0
        };
        items.push((f.table.clone(), t.resolve(f.index), a));
    }
    items.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)));
    let total: f64 = items.iter().map(|i| i.2).sum();
    let mut nodes = Vec::with_capacity(items.len());
    let mut weights = Vec::with_capacity(items.len());
    let mut dim = None;
    for (table, row, a) in &items {
        let n = g.lookup(store, table, *row)?;
        let d = g.dim(n);
        if *dim.get_or_insert(d) != d {
            return Err(Error::invalid("cbow", "features have mixed dimensions"));
        }
        nodes.push(n);
        weights.push(a / total);
    }
    g.weighted_sum(&nodes, &weights)
}

/// Embedding-row index of a distance feature.
///
/// `edges` are inclusive upper bounds; the default `[1, 2, 3, 4, 10]` gives
/// bins {1}, {2}, {3}, {4}, {5..10} and {11+}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceBins {
    pub edges: Vec<usize>,
}

impl Default for DistanceBins {
    fn default() -> Self {
        DistanceBins {
            edges: vec![1, 2, 3, 4, 10],
        }
    }
}

impl DistanceBins {
    pub fn bin(&self, distance: usize) -> usize {
        self.edges
            .iter()
            .position(|&e| distance <= e)
            .unwrap_or(self.edges.len())
    }

    pub fn count(&self) -> usize {
        self.edges.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    HardTanh,
    Relu,
    Cube,
    TanhCube,
    /// `tanh(h) / ||tanh(h)||`, for layers prone to saturation.
    NormalizedTanh,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::HardTanh,
        Activation::Relu,
        Activation::Cube,
        Activation::TanhCube,
    ];

    pub fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Sigmoid => g.unary(UnaryOp::Sigmoid, x),
            Activation::Tanh => g.unary(UnaryOp::Tanh, x),
            Activation::HardTanh => g.unary(UnaryOp::HardTanh, x),
            Activation::Relu => g.unary(UnaryOp::Relu, x),
            Activation::Cube => g.unary(UnaryOp::Cube, x),
            Activation::TanhCube => g.unary(UnaryOp::TanhCube, x),
            Activation::NormalizedTanh => g.add_node(OpKind::NormalizeTanh, &[x]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::HardTanh => "hardtanh",
            Activation::Relu => "relu",
            Activation::Cube => "cube",
            Activation::TanhCube => "tanhcube",
            Activation::NormalizedTanh => "normalized-tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" | "linear" => Activation::Identity,
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            "hardtanh" => Activation::HardTanh,
            "relu" => Activation::Relu,
            "cube" => Activation::Cube,
            "tanhcube" => Activation::TanhCube,
            "normalized-tanh" => Activation::NormalizedTanh,
            other => return Err(Error::invalid("activation", format!("unknown activation `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// `[d_in, d_1, ..., d_out]`; two entries make a perceptron.
    pub dims: Vec<usize>,
    /// One per hidden layer.
    pub activations: Vec<Activation>,
    /// One per layer (hidden layers and output).
    pub bias: Vec<bool>,
    /// Dropout rate applied after each hidden activation.
    pub dropout: f64,
    pub init: InitSpec,
}

impl MlpSpec {
    pub fn perceptron(d_in: usize, d_out: usize) -> Self {
        MlpSpec::new(vec![d_in, d_out], Vec::new())
    }

    pub fn mlp1(d_in: usize, hidden: usize, d_out: usize, act: Activation) -> Self {
        MlpSpec::new(vec![d_in, hidden, d_out], vec![act])
    }

    pub fn mlp2(d_in: usize, h1: usize, h2: usize, d_out: usize, act: Activation) -> Self {
        MlpSpec::new(vec![d_in, h1, h2, d_out], vec![act, act])
    }

    pub fn new(dims: Vec<usize>, activations: Vec<Activation>) -> Self {
        let layers = dims.len().saturating_sub(1);
        MlpSpec {
            dims,
            activations,
            bias: vec![true; layers],
            dropout: 0.0,
            init: InitSpec::Xavier,
        }
    }

    pub fn d_in(&self) -> usize {
        self.dims[0]
    }

    pub fn d_out(&self) -> usize {
        *self.dims.last().expect("validated")
    }
}

/// Feed-forward network whose parameters are `{prefix}/W{i}` and `{prefix}/b{i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub spec: MlpSpec,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: MlpSpec) -> Result<Self> {
        if spec.dims.len() < 2 || spec.dims.contains(&0) {
            return Err(Error::invalid("mlp", "need at least input and output dims, all positive"));
        }
        if spec.activations.len() != spec.dims.len() - 2 || spec.bias.len() != spec.dims.len() - 1 {
            return Err(Error::invalid("mlp", "one activation per hidden layer and one bias flag per layer"));
        }
        let mlp = Mlp {
            prefix: prefix.to_string(),
            spec,
        };
        for l in 0..mlp.spec.dims.len() - 1 {
            let (din, dout) = (mlp.spec.dims[l], mlp.spec.dims[l + 1]);
            store.add_param(&mlp.weight(l), din, dout, mlp.spec.init)?;
            if mlp.spec.bias[l] {
                store.add_param(&mlp.bias_name(l), 1, dout, InitSpec::Constant(0.0))?;
            }
        }
        Ok(mlp)
    }

    /// Attaches to parameters already in a store (e.g. after `ParamStore::load`).
    pub fn attach(store: &ParamStore, prefix: &str, spec: MlpSpec) -> Result<Self> {
        let mlp = Mlp {
            prefix: prefix.to_string(),
            spec,
        };
        for l in 0..mlp.spec.dims.len() - 1 {
            let w = store.param(&mlp.weight(l))?;
            if w.shape() != (mlp.spec.dims[l], mlp.spec.dims[l + 1]) {
                return Err(Error::invalid("mlp", format!("{} has shape {:?}", mlp.weight(l), w.shape())));
            }
        }
        Ok(mlp)
    }

    pub fn weight(&self, layer: usize) -> String {
        format!("{}/W{}", self.prefix, layer + 1)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}/b{}", self.prefix, layer + 1)
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        mlp_apply(g, store, self, x)
    }
}

/// `g(...g(x W1 + b1)...) Wn + bn`; the final layer is linear.
pub fn mlp_apply(g: &mut Graph, store: &ParamStore, mlp: &Mlp, x: NodeId) -> Result<NodeId> {
    let spec = &mlp.spec;
    if g.shape(x) != (1, spec.d_in()) {
        let (r, c) = g.shape(x);
        return Err(Error::Shape {
            op: "mlp",
            lhs: (r, c),
            rhs: (1, spec.d_in()),
        });
    }
    let layers = spec.dims.len() - 1;
    let mut h = x;
    for l in 0..layers {
        let w = g.parameter(store, &mlp.weight(l))?;
        h = if spec.bias[l] {
            let b = g.parameter(store, &mlp.bias_name(l))?;
            g.affine(h, w, b)?
        } else {
            g.matmul(h, w)?
        };
        if l + 1 < layers {
            h = spec.activations[l].apply(g, h)?;
            h = g.dropout(h, spec.dropout)?;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// `n - k + 1` windows, no padding.
    Narrow,
    /// `n + k - 1` windows, `k - 1` pads on each side.
    Wide,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Avg,
    /// Top-k values per dimension, in sentence order.
    KMax(usize),
    /// Split the windows into `regions` contiguous groups and pool each.
    Split { regions: usize, inner: Box<Pooling> },
    /// `stages` rounds of convolution; between rounds every `group`
    /// neighboring vectors are max-pooled. A final max pool closes it.
    Hierarchical { group: usize, stages: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub window: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub mode: ConvMode,
    pub pooling: Pooling,
}

/// Number of windows a sentence of length `n` yields.
pub fn window_count(n: usize, k: usize, mode: ConvMode) -> Option<usize> {
    match mode {
        ConvMode::Narrow if n >= k => Some(n - k + 1),
        ConvMode::Narrow => None,
        ConvMode::Wide if n > 0 => Some(n + k - 1),
        ConvMode::Wide => None,
    }
}

/// Near-equal contiguous split of `m` items into `parts` groups.
pub fn split_ranges(m: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let base = m / parts;
    let extra = m % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub prefix: String,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: ConvSpec) -> Result<Self> {
        if spec.window == 0 || spec.in_dim == 0 || spec.out_dim == 0 {
            return Err(Error::invalid("conv", "window and dims must be positive"));
        }
        let conv = Conv {
            prefix: prefix.to_string(),
            spec,
        };
        let stages = conv.stages();
        for s in 0..stages {
            let din = if s == 0 { conv.spec.in_dim } else { conv.spec.out_dim };
            store.add_param(&conv.weight(s), conv.spec.window * din, conv.spec.out_dim, InitSpec::Xavier)?;
            store.add_param(&conv.bias_name(s), 1, conv.spec.out_dim, InitSpec::Constant(0.0))?;
        }
        Ok(conv)
    }

    pub fn attach(prefix: &str, spec: ConvSpec) -> Self {
        Conv {
            prefix: prefix.to_string(),
            spec,
        }
    }

    fn stages(&self) -> usize {
        match self.spec.pooling {
            Pooling::Hierarchical { stages, .. } => stages.max(1),
            _ => 1,
        }
    }

    pub fn weight(&self, stage: usize) -> String {
        format!("{}/W{}", self.prefix, stage)
    }

    pub fn bias_name(&self, stage: usize) -> String {
        format!("{}/b{}", self.prefix, stage)
    }

    pub fn output_dim(&self) -> usize {
        fn dim(p: &Pooling, d: usize) -> usize {
            match p {
                Pooling::Max | Pooling::Avg | Pooling::Hierarchical { .. } => d,
                Pooling::KMax(k) => k * d,
                Pooling::Split { regions, inner } => regions * dim(inner, d),
            }
        }
        dim(&self.spec.pooling, self.spec.out_dim)
    }

    /// Filtered window vectors `p_i = g(w_i W + b)` for one stage.
    pub fn convolve(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stage: usize,
        seq: &[NodeId],
        pad: Option<NodeId>,
    ) -> Result<Vec<NodeId>> {
        let k = self.spec.window;
        let n = seq.len();
        let m = window_count(n, k, self.spec.mode).ok_or_else(|| {
            Error::invalid("conv", format!("sequence of length {n} is too short for window {k}"))
        })?;
        let padded: Vec<NodeId> = match self.spec.mode {
            ConvMode::Narrow => seq.to_vec(),
            ConvMode::Wide => {
                let pad = match pad {
                    Some(p) => p,
                    None => {
                        let d = g.dim(seq[0]);
                        g.input(Tensor::zeros(1, d))
                    }
                };
                let mut v = vec![pad; k - 1];
                v.extend_from_slice(seq);
                v.extend(std::iter::repeat_n(pad, k - 1));
                v
            }
        };
        let w = g.parameter(store, &self.weight(stage))?;
        let b = g.parameter(store, &self.bias_name(stage))?;
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let window = g.concat(&padded[i..i + k])?;
            let lin = g.affine(window, w, b)?;
            out.push(self.spec.activation.apply(g, lin)?);
        }
        Ok(out)
    }

    /// Convolution over `words` followed by the configured pooling.
    /// `pad` is the `*PAD*` embedding used by wide convolution.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, words: &[NodeId], pad: Option<NodeId>) -> Result<NodeId> {
        conv_pool(g, store, self, words, pad)
    }
}

fn pool(g: &mut Graph, pooling: &Pooling, windows: &[NodeId]) -> Result<NodeId> {
    let stacked = g.concat_rows(windows)?;
    match pooling {
        Pooling::Max => g.add_node(OpKind::MaxPoolRows, &[stacked]),
        Pooling::Avg => g.add_node(OpKind::AvgPoolRows, &[stacked]),
        Pooling::KMax(k) => g.add_node(OpKind::KMaxPoolRows(*k), &[stacked]),
        Pooling::Split { regions, inner } => {
            if *regions == 0 || *regions > windows.len() {
                return Err(Error::invalid(
                    "split pooling",
                    format!("{regions} regions over {} windows", windows.len()),
                ));
            }
            if matches!(**inner, Pooling::Split { .. } | Pooling::Hierarchical { .. }) {
                return Err(Error::invalid("split pooling", "inner pooling must be max, avg or kmax"));
            }
            let parts = split_ranges(windows.len(), *regions)
                .into_iter()
                .map(|r| pool(g, inner, &windows[r]))
                .collect::<Result<Vec<_>>>()?;
            g.concat(&parts)
        }
        Pooling::Hierarchical { .. } => unreachable!("handled by conv_pool"),
    }
}

pub fn conv_pool(g: &mut Graph, store: &ParamStore, conv: &Conv, words: &[NodeId], pad: Option<NodeId>) -> Result<NodeId> {
    if words.is_empty() {
        return Err(Error::Empty("conv over an empty sentence"));
    }
    let d = conv.spec.in_dim;
    if let Some(&bad) = words.iter().find(|&&w| g.shape(w) != (1, d)) {
        return Err(Error::Shape {
            op: "conv",
            lhs: g.shape(bad),
            rhs: (1, d),
        });
    }
    let mut seq = conv.convolve(g, store, 0, words, pad)?;
    match &conv.spec.pooling {
        Pooling::Hierarchical { group, stages } => {
            if *group == 0 {
                return Err(Error::invalid("hierarchical pooling", "group must be positive"));
            }
            for s in 1..(*stages).max(1) {
                let pooled = seq
                    .chunks(*group)
                    .map(|c| pool(g, &Pooling::Max, c))
                    .collect::<Result<Vec<_>>>()?;
                seq = conv.convolve(g, store, s, &pooled, None)?;
            }
            pool(g, &Pooling::Max, &seq)
        }
        p => pool(g, p, &seq),
    }
}
