//! Loss nodes over network outputs, loss combination and the L2 penalty.

use crate::autograd::{Graph, NodeId, OpKind};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

/// Floor applied inside the cross-entropy log.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `max(0, m - y * yhat)` for a scalar output and `y` in {-1, +1}.
    HingeBinary,
    /// `max(0, m - (yhat_t - yhat_k))` with `k` the best class other than `t`.
    HingeMulticlass,
    /// `log(1 + exp(-(yhat_t - yhat_k)))`.
    Log,
    /// `-sum_i y_i log(yhat_i)` over an already-normalized `yhat`.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Gold {
    Index(usize),
    /// Binary label, `+1.0` or `-1.0`.
    Sign(f64),
    Distribution(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub margin: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec { kind, margin: 1.0 }
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankingKind {
    Margin,
    Log,
}

/// Index of the highest score other than `t`, ties to the lowest index.
pub fn runner_up(scores: &[f64], t: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in scores.iter().enumerate() {
        if i == t {
            continue;
        }
        if best.is_none_or(|b| v > scores[b]) {
            best = Some(i);
        }
    }
    best
}

fn softplus_neg(g: &mut Graph, diff: NodeId) -> Result<NodeId> {
    let n = g.negate(diff)?;
    let e = g.exp(n)?;
    let one_plus = g.scalar_add(e, 1.0)?;
    g.log(one_plus)
}

fn gold_index(gold: &Gold, k: usize) -> Result<usize> {
    match gold {
        Gold::Index(t) if *t < k => Ok(*t),
        Gold::Index(t) => Err(Error::invalid("loss", format!("gold index {t} out of range for {k} classes"))),
        _ => Err(Error::invalid("loss", "expected a gold class index")),
    }
}

/// Builds a scalar loss node for `yhat` against `gold`.
///
/// Hinge-multiclass and log loss need the runner-up class, so this runs
/// `forward` on the graph built so far.
pub fn loss_node(g: &mut Graph, spec: LossSpec, yhat: NodeId, gold: &Gold) -> Result<NodeId> {
    if spec.margin <= 0.0 {
        return Err(Error::invalid("loss", "margin must be positive"));
    }
    let (rows, k) = g.shape(yhat);
    if rows != 1 {
        return Err(Error::invalid("loss", format!("expected a row vector, got {rows}x{k}")));
    }
    match spec.kind {
        LossKind::HingeBinary => {
            let y = match gold {
                Gold::Sign(y) if *y == 1.0 || *y == -1.0 => *y,
                _ => return Err(Error::invalid("hinge-binary", "gold must be Sign(+1) or Sign(-1)")),
            };
            if k != 1 {
                return Err(Error::invalid("hinge-binary", format!("expected 1x1 output, got 1x{k}")));
            }
            let s = g.scale(yhat, -y)?;
            let m = g.scalar_add(s, spec.margin)?;
            g.relu(m)
        }
        LossKind::HingeMulticlass | LossKind::Log => {
            let t = gold_index(gold, k)?;
            if k < 2 {
                return Err(Error::invalid("loss", "multiclass losses need at least two classes"));
            }
            g.forward()?;
            let other = runner_up(g.value(yhat)?.data(), t).expect("k >= 2");
            let pt = g.pick(yhat, t)?;
            let pk = g.pick(yhat, other)?;
            let diff = g.minus(pt, pk)?;
            if spec.kind == LossKind::Log {
                return softplus_neg(g, diff);
            }
            let n = g.negate(diff)?;
            let m = g.scalar_add(n, spec.margin)?;
            g.relu(m)
        }
        LossKind::CrossEntropy => {
            g.forward()?;
            let probs = g.value(yhat)?.data().to_vec();
            let sum: f64 = probs.iter().sum();
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid("cross-entropy", "prediction is not a probability distribution"));
            }
            match gold {
                Gold::Distribution(y) => {
                    if y.len() != k {
                        return Err(Error::invalid("cross-entropy", "gold distribution has the wrong size"));
                    }
                    let logs = g.add_node(OpKind::ClampedLog(LOG_FLOOR), &[yhat])?;
                    let yn = g.input(Tensor::row(y.clone()));
                    let prod = g.cmul(yn, logs)?;
                    let s = g.sum_elems(prod)?;
                    g.negate(s)
                }
                _ => {
                    let t = gold_index(gold, k)?;
                    let p = g.pick(yhat, t)?;
                    let l = g.add_node(OpKind::ClampedLog(LOG_FLOOR), &[p])?;
                    g.negate(l)
                }
            }
        }
    }
}

/// Pairwise ranking loss between the score of a correct and a corrupted input.
pub fn ranking_loss(
    g: &mut Graph,
    kind: RankingKind,
    correct: NodeId,
    corrupt: NodeId,
    margin: f64,
) -> Result<NodeId> {
    for id in [correct, corrupt] {
        if g.shape(id) != (1, 1) {
            let (r, c) = g.shape(id);
            return Err(Error::invalid("ranking", format!("scores must be 1x1, got {r}x{c}")));
        }
    }
    let diff = g.minus(correct, corrupt)?;
    match kind {
        RankingKind::Margin => {
            let n = g.negate(diff)?;
            let m = g.scalar_add(n, margin)?;
            g.relu(m)
        }
        RankingKind::Log => softplus_neg(g, diff),
    }
}

/// Sums task losses into one node, optionally weighted.
pub fn combine_losses(g: &mut Graph, losses: &[NodeId], weights: Option<&[f64]>) -> Result<NodeId> {
    if losses.is_empty() {
        return Err(Error::Empty("combine_losses needs at least one loss"));
    }
    for &l in losses {
        if g.shape(l) != (1, 1) {
            return Err(Error::invalid("combine_losses", "losses must be scalar"));
        }
    }
    match weights {
        None if losses.len() == 1 => Ok(losses[0]),
        None => g.sum_nodes(losses),
        Some(w) if w.len() != losses.len() => Err(Error::invalid("combine_losses", "one weight per loss")),
        Some(w) => g.weighted_sum(losses, w),
    }
}

/// `(lambda / 2) * sum(theta^2)` over trainable parameters, plus lookup
/// tables when the store's `l2_include_lookups` flag is set.
pub fn l2_penalty(g: &mut Graph, store: &ParamStore, lambda: f64) -> Result<NodeId> {
    if lambda < 0.0 {
        return Err(Error::invalid("l2", "lambda must be non-negative"));
    }
    if lambda == 0.0 {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::new();
    let names: Vec<String> = store
        .params()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let p = g.parameter(store, &name)?;
        let sq = g.cmul(p, p)?;
        terms.push(g.sum_elems(sq)?);
    }
    if store.l2_include_lookups {
        // every row, not only those the example touched
        let tables: Vec<(String, usize)> = store
            .lookups()
            .filter(|(_, t)| t.trainable)
            .map(|(n, t)| (n.to_string(), t.vocab_size()))
            .collect();
        for (name, rows) in tables {
            for r in 0..rows {
                let v = g.lookup(store, &name, r)?;
                let sq = g.cmul(v, v)?;
                terms.push(g.sum_elems(sq)?);
            }
        }
    }
    if terms.is_empty() {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let total = if terms.len() == 1 { terms[0] } else { g.sum_nodes(&terms)? };
    g.scale(total, lambda / 2.0)
}
