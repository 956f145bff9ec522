//! Recurrent networks: a state update `R` and output `O` applied at every
//! position with shared parameters, plus the usual wirings on top of it.

use std::fmt;
use std::sync::Arc;

use crate::autograd::{Graph, NodeId};
use crate::encoders::Activation;
use crate::error::{Error, Result};
use crate::model::{InitSpec, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RnnVariant {
    Srnn,
    Lstm,
    Gru,
    Scrn,
}

impl RnnVariant {
    pub const ALL: [RnnVariant; 4] = [RnnVariant::Srnn, RnnVariant::Lstm, RnnVariant::Gru, RnnVariant::Scrn];

    pub fn name(self) -> &'static str {
        match self {
            RnnVariant::Srnn => "srnn",
            RnnVariant::Lstm => "lstm",
            RnnVariant::Gru => "gru",
            RnnVariant::Scrn => "scrn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "srnn" | "rnn" | "elman" => RnnVariant::Srnn,
            "lstm" => RnnVariant::Lstm,
            "gru" => RnnVariant::Gru,
            "scrn" => RnnVariant::Scrn,
            other => return Err(Error::invalid("rnn", format!("unknown variant `{other}`"))),
        })
    }
}

impl fmt::Display for RnnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnSpec {
    pub variant: RnnVariant,
    pub d_x: usize,
    pub d_h: usize,
    /// SRNN nonlinearity; SCRN is fixed to sigmoid.
    pub activation: Activation,
    /// SCRN slow-component interpolation, in (0, 1).
    pub alpha: f64,
    /// LSTM forget-gate bias starts at 1.
    pub forget_bias: bool,
    /// SRNN recurrent matrix starts as the identity and `b` at zero.
    pub identity_init: bool,
    /// Gate biases for LSTM and GRU; off gives the bias-free equations.
    pub biases: bool,
}

impl RnnSpec {
    pub fn new(variant: RnnVariant, d_x: usize, d_h: usize) -> Self {
        RnnSpec {
            variant,
            d_x,
            d_h,
            activation: Activation::Tanh,
            alpha: 0.95,
            forget_bias: true,
            identity_init: false,
            biases: true,
        }
    }

    /// ReLU SRNN with identity recurrence.
    pub fn irnn(d_x: usize, d_h: usize) -> Self {
        RnnSpec {
            activation: Activation::Relu,
            identity_init: true,
            ..RnnSpec::new(RnnVariant::Srnn, d_x, d_h)
        }
    }

    /// Width of `y`.
    pub fn output_dim(&self) -> usize {
        match self.variant {
            RnnVariant::Scrn => 2 * self.d_h,
            _ => self.d_h,
        }
    }

    /// Width of the full state `s`.
    pub fn state_dim(&self) -> usize {
        match self.variant {
            RnnVariant::Lstm | RnnVariant::Scrn => 2 * self.d_h,
            _ => self.d_h,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_h == 0 {
            return Err(Error::invalid("rnn", "d_x and d_h must be positive"));
        }
        if self.variant == RnnVariant::Scrn && !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("rnn", format!("alpha {} outside (0, 1)", self.alpha)));
        }
        Ok(())
    }
}

/// Recurrent state. `c` is present for LSTM and SCRN; `h` is the whole
/// state for SRNN and GRU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RnnState {
    pub c: Option<NodeId>,
    pub h: NodeId,
}

impl RnnState {
    pub fn simple(s: NodeId) -> Self {
        RnnState { c: None, h: s }
    }

    pub fn split(c: NodeId, h: NodeId) -> Self {
        RnnState { c: Some(c), h }
    }

    /// `[c; h]` or `s`.
    pub fn vector(&self, g: &mut Graph) -> Result<NodeId> {
        match self.c {
            Some(c) => g.concat(&[c, self.h]),
            None => Ok(self.h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Only the final output is used.
    Acceptor,
    /// One output per input.
    Transducer,
    /// The final output summarizes the sequence for another component.
    Encoder,
}

/// A recurrent network whose parameters live under `{prefix}/`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rnn {
    pub prefix: String,
    pub spec: RnnSpec,
}

struct Gate<'a> {
    wx: &'a str,
    wh: &'a str,
    b: &'a str,
}

impl Rnn {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: RnnSpec) -> Result<Self> {
        spec.validate()?;
        let rnn = Rnn {
            prefix: prefix.to_string(),
            spec,
        };
        let (dx, dh) = (rnn.spec.d_x, rnn.spec.d_h);
        let zero = InitSpec::Constant(0.0);
        match rnn.spec.variant {
            RnnVariant::Srnn => {
                store.add_param(&rnn.p("Wx"), dx, dh, InitSpec::Xavier)?;
                let ws = if rnn.spec.identity_init { InitSpec::Identity } else { InitSpec::Xavier };
                store.add_param(&rnn.p("Ws"), dh, dh, ws)?;
                store.add_param(&rnn.p("b"), 1, dh, zero)?;
            }
            RnnVariant::Lstm => {
                for gate in ["i", "f", "o", "g"] {
                    store.add_param(&rnn.p(&format!("Wx{gate}")), dx, dh, InitSpec::Xavier)?;
                    store.add_param(&rnn.p(&format!("Wh{gate}")), dh, dh, InitSpec::Xavier)?;
                    if rnn.spec.biases {
                        let init = if gate == "f" && rnn.spec.forget_bias { InitSpec::Constant(1.0) } else { zero };
                        store.add_param(&rnn.p(&format!("b{gate}")), 1, dh, init)?;
                    }
                }
            }
            RnnVariant::Gru => {
                for (x, h) in [("Wxz", "Whz"), ("Wxr", "Whr"), ("Wxh", "Whg")] {
                    store.add_param(&rnn.p(x), dx, dh, InitSpec::Xavier)?;
                    store.add_param(&rnn.p(h), dh, dh, InitSpec::Xavier)?;
                }
                if rnn.spec.biases {
                    for b in ["bz", "br", "bh"] {
                        store.add_param(&rnn.p(b), 1, dh, zero)?;
                    }
                }
            }
            RnnVariant::Scrn => {
                store.add_param(&rnn.p("Wx1"), dx, dh, InitSpec::Xavier)?;
                store.add_param(&rnn.p("Wx2"), dx, dh, InitSpec::Xavier)?;
                store.add_param(&rnn.p("Wh"), dh, dh, InitSpec::Xavier)?;
                store.add_param(&rnn.p("Wc"), dh, dh, InitSpec::Xavier)?;
            }
        }
        store.add_param(&rnn.p("s0"), 1, rnn.spec.state_dim(), zero)?;
        Ok(rnn)
    }

    /// Refers to parameters already present in `store`.
    pub fn attach(store: &ParamStore, prefix: &str, spec: RnnSpec) -> Result<Self> {
        spec.validate()?;
        let rnn = Rnn {
            prefix: prefix.to_string(),
            spec,
        };
        let s0 = store.param(&rnn.p("s0"))?;
        if s0.shape() != (1, rnn.spec.state_dim()) {
            return Err(Error::invalid("rnn", format!("{} has shape {:?}", rnn.p("s0"), s0.shape())));
        }
        Ok(rnn)
    }

    /// Full parameter name for a local name such as `Wxi`.
    pub fn p(&self, local: &str) -> String {
        format!("{}/{}", self.prefix, local)
    }

    /// The trainable initial state `s0`.
    pub fn initial_state(&self, g: &mut Graph, store: &ParamStore) -> Result<RnnState> {
        let s0 = g.parameter(store, &self.p("s0"))?;
        self.state_from_vector(g, s0)
    }

    /// Splits a `1 x state_dim` vector into a state.
    pub fn state_from_vector(&self, g: &mut Graph, s: NodeId) -> Result<RnnState> {
        let want = (1, self.spec.state_dim());
        if g.shape(s) != want {
            return Err(Error::Shape {
                op: "rnn state",
                lhs: g.shape(s),
                rhs: want,
            });
        }
        match self.spec.variant {
            RnnVariant::Srnn | RnnVariant::Gru => Ok(RnnState::simple(s)),
            RnnVariant::Lstm | RnnVariant::Scrn => {
                let d = self.spec.d_h;
                let c = g.slice_cols(s, 0, d)?;
                let h = g.slice_cols(s, d, d)?;
                Ok(RnnState::split(c, h))
            }
        }
    }

    /// `y = O(s)`.
    pub fn output(&self, g: &mut Graph, state: RnnState) -> Result<NodeId> {
        match self.spec.variant {
            RnnVariant::Scrn => state.vector(g),
            _ => Ok(state.h),
        }
    }

    fn check_state(&self, g: &Graph, state: RnnState) -> Result<()> {
        let d = self.spec.d_h;
        let split = matches!(self.spec.variant, RnnVariant::Lstm | RnnVariant::Scrn);
        let c_ok = match state.c {
            Some(c) => split && g.shape(c) == (1, d),
            None => !split,
        };
        if !c_ok || g.shape(state.h) != (1, d) {
            return Err(Error::invalid(
                "rnn_step",
                format!("state does not match {} with d_h={d}", self.spec.variant),
            ));
        }
        Ok(())
    }

    fn gate(&self, g: &mut Graph, store: &ParamStore, x: NodeId, h: NodeId, gate: Gate<'_>, bias: bool) -> Result<NodeId> {
        let wx = g.parameter(store, &self.p(gate.wx))?;
        let wh = g.parameter(store, &self.p(gate.wh))?;
        let a = g.matmul(x, wx)?;
        let b = g.matmul(h, wh)?;
        let sum = g.add(a, b)?;
        if bias {
            let bn = g.parameter(store, &self.p(gate.b))?;
            g.add(sum, bn)
        } else {
            Ok(sum)
        }
    }

    /// One application of `R` and `O`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, state: RnnState, x: NodeId) -> Result<(RnnState, NodeId)> {
        if g.shape(x) != (1, self.spec.d_x) {
            return Err(Error::Shape {
                op: "rnn_step",
                lhs: g.shape(x),
                rhs: (1, self.spec.d_x),
            });
        }
        self.check_state(g, state)?;
        let bias = self.spec.biases;
        let next = match self.spec.variant {
            RnnVariant::Srnn => {
                let pre = self.gate(g, store, x, state.h, Gate { wx: "Wx", wh: "Ws", b: "b" }, true)?;
                RnnState::simple(self.spec.activation.apply(g, pre)?)
            }
            RnnVariant::Lstm => {
                let c_prev = state.c.expect("checked");
                let mut gates = [NodeId(0); 4];
                for (slot, name) in gates.iter_mut().zip(["i", "f", "o", "g"]) {
                    let (wx, wh, b) = (format!("Wx{name}"), format!("Wh{name}"), format!("b{name}"));
                    let pre = self.gate(g, store, x, state.h, Gate { wx: &wx, wh: &wh, b: &b }, bias)?;
                    *slot = if name == "g" { g.tanh(pre)? } else { g.sigmoid(pre)? };
                }
                let [i, f, o, cand] = gates;
                let keep = g.cmul(c_prev, f)?;
                let write = g.cmul(cand, i)?;
                let c = g.add(keep, write)?;
                let tc = g.tanh(c)?;
                let h = g.cmul(tc, o)?;
                RnnState::split(c, h)
            }
            RnnVariant::Gru => {
                let s = state.h;
                let z = self.gate(g, store, x, s, Gate { wx: "Wxz", wh: "Whz", b: "bz" }, bias)?;
                let z = g.sigmoid(z)?;
                let r = self.gate(g, store, x, s, Gate { wx: "Wxr", wh: "Whr", b: "br" }, bias)?;
                let r = g.sigmoid(r)?;
                let sr = g.cmul(s, r)?;
                let h = self.gate(g, store, x, sr, Gate { wx: "Wxh", wh: "Whg", b: "bh" }, bias)?;
                let h = g.tanh(h)?;
                let neg = g.negate(z)?;
                let one_minus_z = g.scalar_add(neg, 1.0)?;
                let keep = g.cmul(one_minus_z, s)?;
                let write = g.cmul(z, h)?;
                RnnState::simple(g.add(keep, write)?)
            }
            RnnVariant::Scrn => {
                let alpha = self.spec.alpha;
                let c_prev = state.c.expect("checked");
                let wx1 = g.parameter(store, &self.p("Wx1"))?;
                let xw = g.matmul(x, wx1)?;
                let a = g.scale(xw, 1.0 - alpha)?;
                let b = g.scale(c_prev, alpha)?;
                let c = g.add(a, b)?;
                let pre = self.gate(g, store, x, state.h, Gate { wx: "Wx2", wh: "Wh", b: "" }, false)?;
                let wc = g.parameter(store, &self.p("Wc"))?;
                let cw = g.matmul(c, wc)?;
                let pre = g.add(pre, cw)?;
                RnnState::split(c, g.sigmoid(pre)?)
            }
        };
        let y = self.output(g, next)?;
        Ok((next, y))
    }

    /// Runs over `xs`, returning every output and the final state.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, s0: RnnState, xs: &[NodeId]) -> Result<(Vec<NodeId>, RnnState)> {
        if xs.is_empty() {
            return Err(Error::Empty("rnn over an empty sequence"));
        }
        let mut state = s0;
        let mut ys = Vec::with_capacity(xs.len());
        for &x in xs {
            let (next, y) = self.step(g, store, state, x)?;
            state = next;
            ys.push(y);
        }
        Ok((ys, state))
    }

    /// Acceptor and encoder return `[y_n]`; transducer returns `y_1..y_n`.
    pub fn unroll(&self, g: &mut Graph, store: &ParamStore, s0: RnnState, xs: &[NodeId], regime: Regime) -> Result<Vec<NodeId>> {
        let (ys, _) = self.run(g, store, s0, xs)?;
        Ok(match regime {
            Regime::Transducer => ys,
            Regime::Acceptor | Regime::Encoder => vec![*ys.last().expect("nonempty")],
        })
    }
}

/// `y_i = [y^f_i; y^b_i]`, where the backward network reads `xs` reversed.
pub fn bi_rnn(g: &mut Graph, store: &ParamStore, fwd: &Rnn, bwd: &Rnn, xs: &[NodeId]) -> Result<Vec<NodeId>> {
    if xs.is_empty() {
        return Err(Error::Empty("bi_rnn over an empty sequence"));
    }
    let s0 = fwd.initial_state(g, store)?;
    let f = fwd.unroll(g, store, s0, xs, Regime::Transducer)?;
    let rev: Vec<NodeId> = xs.iter().rev().copied().collect();
    let s0 = bwd.initial_state(g, store)?;
    let mut b = bwd.unroll(g, store, s0, &rev, Regime::Transducer)?;
    b.reverse();
    f.into_iter().zip(b).map(|(yf, yb)| g.concat(&[yf, yb])).collect()
}

/// Stacked transducers; layer `j` reads layer `j-1`'s outputs. `dropout`
/// applies between layers only.
pub fn deep_rnn(g: &mut Graph, store: &ParamStore, layers: &[Rnn], xs: &[NodeId], dropout: f64) -> Result<Vec<NodeId>> {
    if layers.is_empty() {
        return Err(Error::Empty("deep_rnn needs at least one layer"));
    }
    for pair in layers.windows(2) {
        if pair[1].spec.d_x != pair[0].spec.output_dim() {
            return Err(Error::invalid(
                "deep_rnn",
                format!(
                    "layer `{}` expects d_x={} but `{}` emits {}",
                    pair[1].prefix,
                    pair[1].spec.d_x,
                    pair[0].prefix,
                    pair[0].spec.output_dim()
                ),
            ));
        }
    }
    let mut seq = xs.to_vec();
    for (j, layer) in layers.iter().enumerate() {
        if j > 0 {
            seq = seq.into_iter().map(|y| g.dropout(y, dropout)).collect::<Result<_>>()?;
        }
        let s0 = layer.initial_state(g, store)?;
        seq = layer.unroll(g, store, s0, &seq, Regime::Transducer)?;
    }
    Ok(seq)
}

/// Encodes `xs` and runs the decoder from the encoder's final state over the
/// teacher-forced inputs, returning one decoder output per target position.
pub fn encoder_decoder(
    g: &mut Graph,
    store: &ParamStore,
    enc: &Rnn,
    dec: &Rnn,
    xs: &[NodeId],
    teacher: &[NodeId],
    reverse: bool,
) -> Result<Vec<NodeId>> {
    if enc.spec.variant != dec.spec.variant || enc.spec.d_h != dec.spec.d_h {
        return Err(Error::invalid(
            "encoder_decoder",
            format!(
                "encoder {}/{} cannot seed decoder {}/{}",
                enc.spec.variant, enc.spec.d_h, dec.spec.variant, dec.spec.d_h
            ),
        ));
    }
    if teacher.is_empty() {
        return Err(Error::Empty("encoder_decoder needs a nonempty target"));
    }
    let src: Vec<NodeId> = if reverse { xs.iter().rev().copied().collect() } else { xs.to_vec() };
    let s0 = enc.initial_state(g, store)?;
    let (_, summary) = enc.run(g, store, s0, &src)?;
    dec.unroll(g, store, summary, teacher, Regime::Transducer)
}

struct StackNode<T> {
    value: T,
    parent: PersistentStack<T>,
    depth: usize,
}

/// Immutable linked-list stack; `push` and `pop` return new handles and
/// leave every existing handle denoting the same sequence.
pub struct PersistentStack<T> {
    head: Option<Arc<StackNode<T>>>,
}

impl<T> Clone for PersistentStack<T> {
    fn clone(&self) -> Self {
        PersistentStack { head: self.head.clone() }
    }
}

impl<T> Default for PersistentStack<T> {
    fn default() -> Self {
        PersistentStack { head: None }
    }
}

/// Handles are equal when they denote the same node.
impl<T> PartialEq for PersistentStack<T> {
    fn eq(&self, other: &Self) -> bool {
        match (&self.head, &other.head) {
            (None, None) => true,
            (Some(a), Some(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for PersistentStack<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.iter()).finish()
    }
}

impl<T> PersistentStack<T> {
    pub fn new() -> Self {
        PersistentStack::default()
    }

    pub fn push(&self, value: T) -> Self {
        PersistentStack {
            head: Some(Arc::new(StackNode {
                value,
                parent: self.clone(),
                depth: self.len() + 1,
            })),
        }
    }

    /// The parent handle.
    pub fn pop(&self) -> Result<Self> {
        self.head
            .as_ref()
            .map(|n| n.parent.clone())
            .ok_or(Error::Empty("pop on an empty stack"))
    }

    pub fn top(&self) -> Option<&T> {
        self.head.as_ref().map(|n| &n.value)
    }

    pub fn len(&self) -> usize {
        self.head.as_ref().map_or(0, |n| n.depth)
    }

    pub fn is_empty(&self) -> bool {
        self.head.is_none()
    }

    /// Elements from the top down.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let mut cur = self.head.as_deref();
        std::iter::from_fn(move || {
            let node = cur?;
            cur = node.parent.head.as_deref();
            Some(&node.value)
        })
    }

    /// Elements from the bottom up.
    pub fn to_vec(&self) -> Vec<T>
    where
        T: Clone,
    {
        let mut v: Vec<T> = self.iter().cloned().collect();
        v.reverse();
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackEntry {
    pub element: usize,
    pub state: RnnState,
}

/// Stack whose every node carries the RNN state encoding the stack up to it.
#[derive(Debug, Clone, PartialEq)]
pub struct StackRnnState {
    pub stack: PersistentStack<StackEntry>,
    /// State of the empty stack.
    pub empty: RnnState,
}

impl StackRnnState {
    pub fn new(g: &mut Graph, store: &ParamStore, rnn: &Rnn) -> Result<Self> {
        Ok(StackRnnState {
            stack: PersistentStack::new(),
            empty: rnn.initial_state(g, store)?,
        })
    }

    pub fn state(&self) -> RnnState {
        self.stack.top().map_or(self.empty, |e| e.state)
    }

    /// `y` of the RNN over the current stack contents.
    pub fn encoding(&self, g: &mut Graph, rnn: &Rnn) -> Result<NodeId> {
        rnn.output(g, self.state())
    }

    pub fn elements(&self) -> Vec<usize> {
        self.stack.to_vec().into_iter().map(|e| e.element).collect()
    }
}

/// Pushes `element` (embedded as `x`), extending the parent's RNN state.
pub fn stack_push(
    g: &mut Graph,
    store: &ParamStore,
    rnn: &Rnn,
    st: &StackRnnState,
    element: usize,
    x: NodeId,
) -> Result<StackRnnState> {
    let (state, _) = rnn.step(g, store, st.state(), x)?;
    Ok(StackRnnState {
        stack: st.stack.push(StackEntry { element, state }),
        empty: st.empty,
    })
}

/// Returns the parent handle; its RNN state is reused, not recomputed.
pub fn stack_pop(st: &StackRnnState) -> Result<StackRnnState> {
    Ok(StackRnnState {
        stack: st.stack.pop()?,
        empty: st.empty,
    })
}

/// Constant `1 x d` input, handy for building explicit states.
pub fn const_row(g: &mut Graph, values: &[f64]) -> NodeId {
    g.input(Tensor::row(values.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{grad_check, DEFAULT_EPS, DEFAULT_TOL};
    use proptest::prelude::*;

    fn zeroed(store: &mut ParamStore, rnn: &Rnn) {
        let names: Vec<String> = store
            .param_names()
            .filter(|n| n.starts_with(&format!("{}/", rnn.prefix)))
            .map(str::to_string)
            .collect();
        for n in names {
            store.param_mut(&n).unwrap().data_mut().fill(0.0);
        }
    }

    fn value(g: &mut Graph, id: NodeId) -> Vec<f64> {
        g.forward().unwrap();
        g.value(id).unwrap().data().to_vec()
    }

    #[test]
    fn parameter_shapes() {
        let mut s = ParamStore::new(0);
        let lstm = Rnn::new(&mut s, "l", RnnSpec::new(RnnVariant::Lstm, 3, 5)).unwrap();
        for gate in ["i", "f", "o", "g"] {
            assert_eq!(s.param(&lstm.p(&format!("Wx{gate}"))).unwrap().shape(), (3, 5));
            assert_eq!(s.param(&lstm.p(&format!("Wh{gate}"))).unwrap().shape(), (5, 5));
        }
        assert_eq!(s.param("l/bf").unwrap().data(), &[1.0; 5]);
        assert_eq!(s.param("l/s0").unwrap().shape(), (1, 10));
        let srnn = Rnn::new(&mut s, "s", RnnSpec::new(RnnVariant::Srnn, 3, 4)).unwrap();
        assert_eq!(s.param(&srnn.p("Wx")).unwrap().shape(), (3, 4));
        assert_eq!(s.param(&srnn.p("Ws")).unwrap().shape(), (4, 4));
        assert_eq!(s.param(&srnn.p("b")).unwrap().shape(), (1, 4));
        Rnn::new(&mut s, "g", RnnSpec::new(RnnVariant::Gru, 3, 4)).unwrap();
        assert_eq!(s.param("g/Whg").unwrap().shape(), (4, 4));
        let scrn = Rnn::new(&mut s, "c", RnnSpec::new(RnnVariant::Scrn, 3, 4)).unwrap();
        assert_eq!(scrn.spec.output_dim(), 8);
        assert!(!s.contains("c/b"));
        let mut bad = RnnSpec::new(RnnVariant::Scrn, 3, 4);
        bad.alpha = 1.0;
        assert!(Rnn::new(&mut s, "bad", bad).is_err());
    }

    #[test]
    fn zero_srnn_stays_at_zero() {
        let mut s = ParamStore::new(0);
        let rnn = Rnn::new(&mut s, "r", RnnSpec::new(RnnVariant::Srnn, 2, 3)).unwrap();
        zeroed(&mut s, &rnn);
        let mut g = Graph::new();
        let s0 = rnn.initial_state(&mut g, &s).unwrap();
        let x = const_row(&mut g, &[0.3, -2.0]);
        let (_, y) = rnn.step(&mut g, &s, s0, x).unwrap();
        assert_eq!(value(&mut g, y), vec![0.0; 3]);
    }

    #[test]
    fn lstm_zero_weights_example() {
        let mut s = ParamStore::new(0);
        let rnn = Rnn::new(&mut s, "l", RnnSpec::new(RnnVariant::Lstm, 2, 2)).unwrap();
        zeroed(&mut s, &rnn);
        let mut g = Graph::new();
        let c = const_row(&mut g, &[1.0, 1.0]);
        let h = const_row(&mut g, &[0.0, 0.0]);
        let x = const_row(&mut g, &[0.7, -0.1]);
        let (st, y) = rnn.step(&mut g, &s, RnnState::split(c, h), x).unwrap();
        assert_eq!(value(&mut g, st.c.unwrap()), vec![0.5, 0.5]);
        let expect = 0.5f64.tanh() * 0.5;
        for v in value(&mut g, y) {
            assert!((v - expect).abs() < 1e-15);
            assert!((v - 0.2311).abs() < 1e-4);
        }
    }

    #[test]
    fn gru_zero_weights_example() {
        let mut s = ParamStore::new(0);
        let rnn = Rnn::new(&mut s, "g", RnnSpec::new(RnnVariant::Gru, 1, 1)).unwrap();
        zeroed(&mut s, &rnn);
        let mut g = Graph::new();
        let prev = const_row(&mut g, &[4.0]);
        let x = const_row(&mut g, &[1.0]);
        let (_, y) = rnn.step(&mut g, &s, RnnState::simple(prev), x).unwrap();
        assert_eq!(value(&mut g, y), vec![2.0]);
    }

    #[test]
    fn step_rejects_mismatched_dims() {
        let mut s = ParamStore::new(0);
        let rnn = Rnn::new(&mut s, "l", RnnSpec::new(RnnVariant::Lstm, 2, 2)).unwrap();
        let mut g = Graph::new();
        let s0 = rnn.initial_state(&mut g, &s).unwrap();
        let x = const_row(&mut g, &[1.0, 2.0, 3.0]);
        assert!(rnn.step(&mut g, &s, s0, x).is_err());
        let x = const_row(&mut g, &[1.0, 2.0]);
        assert!(rnn.step(&mut g, &s, RnnState::simple(x), x).is_err());
        assert!(rnn.unroll(&mut g, &s, s0, &[], Regime::Acceptor).is_err());
    }

    fn inputs(g: &mut Graph, n: usize, d: usize) -> Vec<NodeId> {
        (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..d).map(|j| ((i * d + j) as f64 * 0.37).sin()).collect();
                const_row(g, &v)
            })
            .collect()
    }

    #[test]
    fn unroll_matches_nested_steps() {
        for variant in RnnVariant::ALL {
            let mut s = ParamStore::new(5);
            let rnn = Rnn::new(&mut s, "r", RnnSpec::new(variant, 3, 4)).unwrap();
            let mut g = Graph::new();
            let xs = inputs(&mut g, 4, 3);
            let s0 = rnn.initial_state(&mut g, &s).unwrap();
            let out = rnn.unroll(&mut g, &s, s0, &xs, Regime::Acceptor).unwrap();
            let all = rnn.unroll(&mut g, &s, s0, &xs, Regime::Transducer).unwrap();
            assert_eq!(all.len(), 4);
            let (s1, _) = rnn.step(&mut g, &s, s0, xs[0]).unwrap();
            let (s2, _) = rnn.step(&mut g, &s, s1, xs[1]).unwrap();
            let (s3, _) = rnn.step(&mut g, &s, s2, xs[2]).unwrap();
            let (_, y4) = rnn.step(&mut g, &s, s3, xs[3]).unwrap();
            let a = value(&mut g, out[0]);
            assert_eq!(a, value(&mut g, y4), "{variant}");
            assert_eq!(a, value(&mut g, all[3]));
            let one = rnn.unroll(&mut g, &s, s0, &xs[..1], Regime::Encoder).unwrap();
            let (_, y1) = rnn.step(&mut g, &s, s0, xs[0]).unwrap();
            assert_eq!(value(&mut g, one[0]), value(&mut g, y1));
        }
    }

    #[test]
    fn every_variant_passes_gradient_check() {
        for variant in RnnVariant::ALL {
            let mut s = ParamStore::new(9);
            let rnn = Rnn::new(&mut s, "r", RnnSpec::new(variant, 2, 3)).unwrap();
            s.param_mut("r/s0").unwrap().data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 - 0.2);
            let report = grad_check(
                &s,
                |g, s| {
                    let xs = inputs(g, 3, 2);
                    let s0 = rnn.initial_state(g, s)?;
                    let ys = rnn.unroll(g, s, s0, &xs, Regime::Transducer)?;
                    let sum = g.sum_nodes(&ys)?;
                    let sq = g.cmul(sum, sum)?;
                    g.sum_elems(sq)
                },
                DEFAULT_EPS,
                DEFAULT_TOL,
            )
            .unwrap();
            assert!(report.passed(), "{variant}: {report}");
        }
    }

    #[test]
    fn lstm_memory_path_is_exact() {
        let mut s = ParamStore::new(2);
        let rnn = Rnn::new(&mut s, "l", RnnSpec::new(RnnVariant::Lstm, 2, 3)).unwrap();
        s.param_mut("l/bf").unwrap().data_mut().fill(1e3);
        s.param_mut("l/bi").unwrap().data_mut().fill(-1e3);
        let mut grads = Vec::new();
        for n in 1..=50 {
            let mut g = Graph::new();
            let c0 = const_row(&mut g, &[0.25, -1.5, 2.0]);
            let h0 = const_row(&mut g, &[0.0; 3]);
            let xs = inputs(&mut g, n, 2);
            let (_, last) = rnn.run(&mut g, &s, RnnState::split(c0, h0), &xs).unwrap();
            let w = const_row(&mut g, &[1.0, 2.0, -3.0]);
            let read = g.cmul(last.c.unwrap(), w).unwrap();
            let loss = g.sum_elems(read).unwrap();
            assert_eq!(value(&mut g, last.c.unwrap()), vec![0.25, -1.5, 2.0]);
            g.backward(loss).unwrap();
            grads.push(g.grad(c0).unwrap().data().to_vec());
        }
        assert!(grads.iter().all(|d| d == &[1.0, 2.0, -3.0]));
    }

    #[test]
    fn gru_with_closed_update_gate_copies_state() {
        let mut s = ParamStore::new(2);
        let rnn = Rnn::new(&mut s, "g", RnnSpec::new(RnnVariant::Gru, 2, 3)).unwrap();
        s.param_mut("g/bz").unwrap().data_mut().fill(-1e3);
        let mut g = Graph::new();
        let s0 = const_row(&mut g, &[0.125, -7.0, 3.5]);
        let xs = inputs(&mut g, 20, 2);
        let (_, last) = rnn.run(&mut g, &s, RnnState::simple(s0), &xs).unwrap();
        assert_eq!(value(&mut g, last.h), vec![0.125, -7.0, 3.5]);
    }

    #[test]
    fn irnn_copies_nonnegative_state() {
        let mut s = ParamStore::new(2);
        let rnn = Rnn::new(&mut s, "i", RnnSpec::irnn(2, 3)).unwrap();
        s.param_mut("i/Wx").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let s0 = const_row(&mut g, &[0.0, 1.5, 42.0]);
        let xs = inputs(&mut g, 5, 2);
        let (_, last) = rnn.run(&mut g, &s, RnnState::simple(s0), &xs).unwrap();
        assert_eq!(value(&mut g, last.h), vec![0.0, 1.5, 42.0]);
    }

    #[test]
    fn bi_rnn_dims_and_palindrome_symmetry() {
        let mut s = ParamStore::new(4);
        let f = Rnn::new(&mut s, "f", RnnSpec::new(RnnVariant::Gru, 2, 3)).unwrap();
        let b = Rnn::new(&mut s, "b", RnnSpec::new(RnnVariant::Lstm, 2, 5)).unwrap();
        let mut g = Graph::new();
        let xs = inputs(&mut g, 4, 2);
        let ys = bi_rnn(&mut g, &s, &f, &b, &xs).unwrap();
        assert_eq!(ys.len(), 4);
        assert!(ys.iter().all(|&y| g.shape(y) == (1, 8)));
        assert!(bi_rnn(&mut g, &s, &f, &b, &[]).is_err());

        let mut g = Graph::new();
        let half = inputs(&mut g, 3, 2);
        let pal = [half[0], half[1], half[2], half[1], half[0]];
        let ys = bi_rnn(&mut g, &s, &f, &f, &pal).unwrap();
        g.forward().unwrap();
        for i in 0..5 {
            let a = g.value(ys[i]).unwrap().data();
            let b = g.value(ys[4 - i]).unwrap().data();
            assert_eq!(&a[..3], &b[3..]);
            assert_eq!(&a[3..], &b[..3]);
        }
        let one = bi_rnn(&mut g, &s, &f, &f, &half[..1]).unwrap();
        let v = value(&mut g, one[0]);
        assert_eq!(v[..3], v[3..]);
    }

    #[test]
    fn deep_rnn_chains_layers() {
        let mut s = ParamStore::new(4);
        let l1 = Rnn::new(&mut s, "l1", RnnSpec::new(RnnVariant::Lstm, 2, 4)).unwrap();
        let l2 = Rnn::new(&mut s, "l2", RnnSpec::new(RnnVariant::Scrn, 4, 3)).unwrap();
        let l3 = Rnn::new(&mut s, "l3", RnnSpec::new(RnnVariant::Srnn, 6, 5)).unwrap();
        let mut g = Graph::new();
        let xs = inputs(&mut g, 4, 2);
        let ys = deep_rnn(&mut g, &s, &[l1.clone(), l2.clone(), l3.clone()], &xs, 0.0).unwrap();
        assert_eq!(ys.len(), 4);
        assert!(ys.iter().all(|&y| g.shape(y) == (1, 5)));
        assert!(deep_rnn(&mut g, &s, &[l1.clone(), l3.clone()], &xs, 0.0).is_err());

        let single = deep_rnn(&mut g, &s, std::slice::from_ref(&l1), &xs, 0.0).unwrap();
        let s0 = l1.initial_state(&mut g, &s).unwrap();
        let direct = l1.unroll(&mut g, &s, s0, &xs, Regime::Transducer).unwrap();
        assert_eq!(value(&mut g, single[3]), value(&mut g, direct[3]));

        zeroed(&mut s, &l3);
        let mut g = Graph::new();
        let xs = inputs(&mut g, 3, 2);
        let ys = deep_rnn(&mut g, &s, &[l1, l2, l3], &xs, 0.0).unwrap();
        assert_eq!(value(&mut g, ys[2]), vec![0.0; 5]);
    }

    #[test]
    fn encoder_decoder_wiring() {
        let mut s = ParamStore::new(4);
        let enc = Rnn::new(&mut s, "enc", RnnSpec::new(RnnVariant::Lstm, 2, 3)).unwrap();
        let dec = Rnn::new(&mut s, "dec", RnnSpec::new(RnnVariant::Lstm, 2, 3)).unwrap();
        let mut g = Graph::new();
        let xs = inputs(&mut g, 5, 2);
        let ys = encoder_decoder(&mut g, &s, &enc, &dec, &xs, &xs, false).unwrap();
        assert_eq!(ys.len(), 5);
        assert!(encoder_decoder(&mut g, &s, &enc, &dec, &xs, &[], false).is_err());
        let other = Rnn::new(&mut s, "o", RnnSpec::new(RnnVariant::Gru, 2, 3)).unwrap();
        assert!(encoder_decoder(&mut g, &s, &enc, &other, &xs, &xs, false).is_err());

        let rev: Vec<NodeId> = xs.iter().rev().copied().collect();
        let a = encoder_decoder(&mut g, &s, &enc, &dec, &xs, &xs[..2], true).unwrap();
        let b = encoder_decoder(&mut g, &s, &enc, &dec, &rev, &xs[..2], false).unwrap();
        assert_eq!(value(&mut g, a[1]), value(&mut g, b[1]));

        // supervision on the decoder reaches the encoder
        let loss = g.sum_elems(a[1]).unwrap();
        g.backward(loss).unwrap();
        let grads = g.gradients();
        assert!(grads.param("enc/Wxi").unwrap().sq_norm() > 0.0);
    }

    #[test]
    fn persistent_stack_operation_tree() {
        let s0: PersistentStack<char> = PersistentStack::new();
        let a = s0.push('a');
        let b = a.push('b');
        let c = b.push('c');
        let p = c.pop().unwrap();
        assert_eq!(p, b);
        let d = p.push('d');
        let p = d.pop().unwrap().pop().unwrap();
        assert_eq!(p, a);
        let f = p.push('e').push('f');
        assert_eq!(f.to_vec(), vec!['a', 'e', 'f']);
        assert_eq!(c.to_vec(), vec!['a', 'b', 'c']);
        assert_eq!(d.to_vec(), vec!['a', 'b', 'd']);
        assert!(s0.pop().is_err());

        let x = a.push('x');
        let y = a.push('y');
        assert_ne!(x, y);
        assert_eq!(a.to_vec(), vec!['a']);
        assert_eq!(x.pop().unwrap(), y.pop().unwrap());
    }

    #[derive(Debug, Clone)]
    enum StackOp {
        Push(u8),
        Pop,
    }

    proptest! {
        #[test]
        fn persistent_stack_matches_vec(ops in prop::collection::vec(
            prop_oneof![any::<u8>().prop_map(StackOp::Push), Just(StackOp::Pop)], 0..60)) {
            let mut handle = PersistentStack::new();
            let mut model: Vec<u8> = Vec::new();
            let mut history = Vec::new();
            for op in ops {
                match op {
                    StackOp::Push(v) => { handle = handle.push(v); model.push(v); }
                    StackOp::Pop => match model.pop() {
                        Some(_) => handle = handle.pop().unwrap(),
                        None => prop_assert!(handle.pop().is_err()),
                    },
                }
                history.push((handle.clone(), model.clone()));
            }
            for (h, m) in &history {
                let top_down: Vec<u8> = h.iter().copied().collect();
                let mut expect = m.clone();
                expect.reverse();
                prop_assert_eq!(top_down, expect);
                prop_assert_eq!(h.len(), m.len());
            }
        }

        #[test]
        fn transducer_matches_steps(n in 1usize..6, seed in 0u64..50) {
            for variant in RnnVariant::ALL {
                let mut s = ParamStore::new(seed);
                let rnn = Rnn::new(&mut s, "r", RnnSpec::new(variant, 2, 3)).unwrap();
                let mut g = Graph::new();
                let xs = inputs(&mut g, n, 2);
                let s0 = rnn.initial_state(&mut g, &s).unwrap();
                let ys = rnn.unroll(&mut g, &s, s0, &xs, Regime::Transducer).unwrap();
                let mut st = s0;
                let mut manual = Vec::new();
                for &x in &xs {
                    let (next, y) = rnn.step(&mut g, &s, st, x).unwrap();
                    st = next;
                    manual.push(y);
                }
                g.forward().unwrap();
                for (a, b) in ys.iter().zip(&manual) {
                    prop_assert_eq!(g.value(*a).unwrap(), g.value(*b).unwrap());
                }
            }
        }
    }

    #[test]
    fn stack_rnn_reuses_parent_states() {
        let mut s = ParamStore::new(3);
        let rnn = Rnn::new(&mut s, "st", RnnSpec::new(RnnVariant::Lstm, 2, 3)).unwrap();
        let mut g = Graph::new();
        let emb = inputs(&mut g, 6, 2);
        let empty = StackRnnState::new(&mut g, &s, &rnn).unwrap();
        let sa = stack_push(&mut g, &s, &rnn, &empty, 0, emb[0]).unwrap();
        let sb = stack_push(&mut g, &s, &rnn, &sa, 1, emb[1]).unwrap();
        let sc = stack_push(&mut g, &s, &rnn, &sb, 2, emb[2]).unwrap();
        let p = stack_pop(&sc).unwrap();
        let sd = stack_push(&mut g, &s, &rnn, &p, 3, emb[3]).unwrap();
        let p = stack_pop(&stack_pop(&sd).unwrap()).unwrap();
        assert_eq!(p.state(), sa.state());
        let se = stack_push(&mut g, &s, &rnn, &p, 4, emb[4]).unwrap();
        let sf = stack_push(&mut g, &s, &rnn, &se, 5, emb[5]).unwrap();
        assert_eq!(sf.elements(), vec![0, 4, 5]);
        assert!(stack_pop(&empty).is_err());

        // equals an RNN run over the final contents
        let enc = sf.encoding(&mut g, &rnn).unwrap();
        let s0 = rnn.initial_state(&mut g, &s).unwrap();
        let chain = rnn.unroll(&mut g, &s, s0, &[emb[0], emb[4], emb[5]], Regime::Acceptor).unwrap();
        assert_eq!(value(&mut g, enc), value(&mut g, chain[0]));
    }
}
