//! Linear-chain structured prediction: a network scores emission and
//! transition parts, exact dynamic programs search or sum over label
//! sequences, and the losses tie both into the graph.

use crate::autograd::{Graph, NodeId, OpKind};
use crate::encoders::{Mlp, MlpSpec};
use crate::error::{Error, Result};
use crate::model::{InitSpec, ParamStore};
use crate::objectives::{loss_node, Gold, LossKind, LossSpec};
use crate::tensor::{log_sum_exp, Tensor};

/// Scores `NN(c(p))` for the parts of a chain: one `1 x L` emission row
/// per position from a shared network, and an `L x L` transition matrix
/// indexed `[previous, current]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainModel {
    pub prefix: String,
    pub labels: usize,
    pub scorer: Mlp,
}

impl ChainModel {
    /// `scorer.dims` must end in the label count.
    pub fn new(store: &mut ParamStore, prefix: &str, scorer: MlpSpec) -> Result<Self> {
        let labels = scorer.d_out();
        let scorer = Mlp::new(store, &format!("{prefix}/emit"), scorer)?;
        store.add_param(&format!("{prefix}/T"), labels, labels, InitSpec::Xavier)?;
        Ok(ChainModel {
            prefix: prefix.to_string(),
            labels,
            scorer,
        })
    }

    pub fn attach(store: &ParamStore, prefix: &str, scorer: MlpSpec) -> Result<Self> {
        let labels = scorer.d_out();
        let scorer = Mlp::attach(store, &format!("{prefix}/emit"), scorer)?;
        let t = store.param(&format!("{prefix}/T"))?;
        if t.shape() != (labels, labels) {
            return Err(Error::invalid("chain model", format!("transition matrix has shape {:?}", t.shape())));
        }
        Ok(ChainModel {
            prefix: prefix.to_string(),
            labels,
            scorer,
        })
    }

    pub fn transitions(&self) -> String {
        format!("{}/T", self.prefix)
    }
}

/// Graph nodes holding every part score of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredParts {
    pub emissions: Vec<NodeId>,
    /// Absent for single-word sentences.
    pub transitions: Option<NodeId>,
    pub labels: usize,
}

/// Scores every part; `xs[i]` is the feature vector `c(p)` for position `i`.
pub fn score_parts(g: &mut Graph, store: &ParamStore, model: &ChainModel, xs: &[NodeId]) -> Result<ScoredParts> {
    if xs.is_empty() {
        return Err(Error::Empty("score_parts over an empty sentence"));
    }
    let emissions = xs
        .iter()
        .map(|&x| model.scorer.apply(g, store, x))
        .collect::<Result<Vec<_>>>()?;
    let transitions = if xs.len() > 1 {
        Some(g.parameter(store, &model.transitions())?)
    } else {
        None
    };
    Ok(ScoredParts {
        emissions,
        transitions,
        labels: model.labels,
    })
}

impl ScoredParts {
    /// Evaluates the part scores into plain tables.
    pub fn values(&self, g: &mut Graph) -> Result<ChainScores> {
        g.forward()?;
        let emissions = self
            .emissions
            .iter()
            .map(|&e| g.value(e).map(|t| t.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let l = self.labels;
        let transitions = match self.transitions {
            Some(t) => {
                let t = g.value(t)?;
                (0..l).map(|r| t.row_slice(r).to_vec()).collect()
            }
            None => vec![vec![0.0; l]; l],
        };
        Ok(ChainScores { emissions, transitions })
    }

    /// `score(x, y)` as a graph node.
    pub fn sequence_score(&self, g: &mut Graph, y: &[usize]) -> Result<NodeId> {
        self.check_labels(y)?;
        let l = self.labels;
        let mut terms = Vec::with_capacity(2 * y.len());
        for (i, &yi) in y.iter().enumerate() {
            terms.push(g.pick(self.emissions[i], yi)?);
            if i > 0 {
                let t = self.transitions.expect("n > 1");
                terms.push(g.pick(t, y[i - 1] * l + yi)?);
            }
        }
        g.sum_nodes(&terms)
    }

    fn check_labels(&self, y: &[usize]) -> Result<()> {
        if y.len() != self.emissions.len() {
            return Err(Error::invalid(
                "structured loss",
                format!("gold has {} labels for {} positions", y.len(), self.emissions.len()),
            ));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= self.labels) {
            return Err(Error::invalid("structured loss", format!("label {bad} out of range 0..{}", self.labels)));
        }
        Ok(())
    }

    /// `log Z` by the forward recursion over the graph.
    pub fn log_partition(&self, g: &mut Graph) -> Result<NodeId> {
        let l = self.labels;
        let mut alpha = self.emissions[0];
        if let Some(t) = self.transitions {
            let ones = g.input(Tensor::filled(1, l, 1.0));
            for &e in &self.emissions[1..] {
                // m[p, c] = alpha[p] + T[p, c]
                let col = g.transpose(alpha)?;
                let spread = g.matmul(col, ones)?;
                let m = g.add(spread, t)?;
                let reduced = g.add_node(OpKind::LogSumExpRows, &[m])?;
                alpha = g.add(reduced, e)?;
            }
        }
        g.add_node(OpKind::LogSumExp, &[alpha])
    }
}

/// Plain part-score tables, `transitions[prev][cur]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainScores {
    pub emissions: Vec<Vec<f64>>,
    pub transitions: Vec<Vec<f64>>,
}

impl ChainScores {
    pub fn len(&self) -> usize {
        self.emissions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emissions.is_empty()
    }

    pub fn labels(&self) -> usize {
        self.transitions.len()
    }

    /// Parts of `y`: `n` emissions and `n - 1` transitions.
    pub fn parts(y: &[usize]) -> Vec<Part> {
        let mut out: Vec<Part> = y.iter().enumerate().map(|(i, &l)| Part::Emission { pos: i, label: l }).collect();
        out.extend(y.windows(2).enumerate().map(|(i, w)| Part::Transition {
            pos: i + 1,
            prev: w[0],
            cur: w[1],
        }));
        out
    }

    pub fn part_score(&self, p: Part) -> f64 {
        match p {
            Part::Emission { pos, label } => self.emissions[pos][label],
            Part::Transition { prev, cur, .. } => self.transitions[prev][cur],
        }
    }

    /// `sum_{p in y} score(p)`, accumulated left to right.
    pub fn score(&self, y: &[usize]) -> f64 {
        let mut s = 0.0;
        for (i, &l) in y.iter().enumerate() {
            if i > 0 {
                s += self.transitions[y[i - 1]][l];
            }
            s += self.emissions[i][l];
        }
        s
    }

    /// Adds `cost` to every emission whose label differs from `gold`.
    pub fn cost_augmented(&self, gold: &[usize], cost: f64) -> ChainScores {
        let mut out = self.clone();
        for (row, &g) in out.emissions.iter_mut().zip(gold) {
            for (l, v) in row.iter_mut().enumerate() {
                if l != g {
                    *v += cost;
                }
            }
        }
        out
    }

    /// Highest-scoring sequence; ties go to the lower label index.
    pub fn viterbi(&self) -> (Vec<usize>, f64) {
        self.kbest(1).swap_remove(0)
    }

    /// The `k` best distinct sequences in descending score order.
    pub fn kbest(&self, k: usize) -> Vec<(Vec<usize>, f64)> {
        let n = self.len();
        let l = self.labels();
        assert!(n > 0 && l > 0 && k > 0);
        // cells[i][label] = up to k (score, prev label, prev rank)
        let mut cells: Vec<Vec<Vec<(f64, usize, usize)>>> = Vec::with_capacity(n);
        cells.push((0..l).map(|c| vec![(self.emissions[0][c], 0, 0)]).collect());
        for i in 1..n {
            let prev = &cells[i - 1];
            let row = (0..l)
                .map(|c| {
                    let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(l * k);
                    for (p, entries) in prev.iter().enumerate() {
                        for (rank, e) in entries.iter().enumerate() {
                            cand.push((e.0 + self.transitions[p][c] + self.emissions[i][c], p, rank));
                        }
                    }
                    top_k(cand, k)
                })
                .collect();
            cells.push(row);
        }
        let finals: Vec<(f64, usize, usize)> = cells[n - 1]
            .iter()
            .enumerate()
            .flat_map(|(c, entries)| entries.iter().enumerate().map(move |(r, e)| (e.0, c, r)))
            .collect();
        top_k(finals, k)
            .into_iter()
            .map(|(score, mut label, mut rank)| {
                let mut y = vec![0; n];
                for i in (0..n).rev() {
                    y[i] = label;
                    let (_, p, r) = cells[i][label][rank];
                    label = p;
                    rank = r;
                }
                (y, score)
            })
            .collect()
    }

    /// Best sequence other than `gold`.
    pub fn best_excluding(&self, gold: &[usize]) -> Option<(Vec<usize>, f64)> {
        self.kbest(2).into_iter().find(|(y, _)| y != gold)
    }

    /// `log Z` by the forward recursion.
    pub fn log_partition(&self) -> f64 {
        let l = self.labels();
        let mut alpha = self.emissions[0].clone();
        for e in &self.emissions[1..] {
            alpha = (0..l)
                .map(|c| {
                    let col: Vec<f64> = (0..l).map(|p| alpha[p] + self.transitions[p][c]).collect();
                    log_sum_exp(&col) + e[c]
                })
                .collect();
        }
        log_sum_exp(&alpha)
    }

    /// `P(y | x)` under the CRF.
    pub fn probability(&self, y: &[usize]) -> f64 {
        (self.score(y) - self.log_partition()).exp()
    }
}

fn top_k(mut cand: Vec<(f64, usize, usize)>, k: usize) -> Vec<(f64, usize, usize)> {
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cand.truncate(k);
    cand
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Emission { pos: usize, label: usize },
    Transition { pos: usize, prev: usize, cur: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StructuredLossKind {
    /// `max_y' score(y') - score(y)`.
    Perceptron,
    /// `max(0, m - (score(y) - max_{y' != y} score(y')))`.
    Margin(f64),
    /// `-log P(y | x)`.
    Crf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructuredLossSpec {
    pub kind: StructuredLossKind,
    /// Hamming cost per mislabeled position added during the search for
    /// the competing sequence (perceptron and margin only). Zero disables.
    pub cost: f64,
}

impl StructuredLossSpec {
    pub fn new(kind: StructuredLossKind) -> Self {
        StructuredLossSpec { kind, cost: 0.0 }
    }
}

pub fn structured_loss(g: &mut Graph, spec: StructuredLossSpec, parts: &ScoredParts, gold: &[usize]) -> Result<NodeId> {
    parts.check_labels(gold)?;
    let gold_score = parts.sequence_score(g, gold)?;
    match spec.kind {
        StructuredLossKind::Perceptron => {
            let scores = parts.values(g)?;
            let (best, _) = if spec.cost > 0.0 {
                scores.cost_augmented(gold, spec.cost).viterbi()
            } else {
                scores.viterbi()
            };
            let best_score = parts.sequence_score(g, &best)?;
            g.minus(best_score, gold_score)
        }
        StructuredLossKind::Margin(m) => {
            if !(m > 0.0) {
                return Err(Error::invalid("margin loss", format!("margin {m} must be positive")));
            }
            let scores = parts.values(g)?;
            let search = if spec.cost > 0.0 { scores.cost_augmented(gold, spec.cost) } else { scores };
            match search.best_excluding(gold) {
                Some((rival, _)) => {
                    let hamming = rival.iter().zip(gold).filter(|(a, b)| a != b).count() as f64;
                    let rival_score = parts.sequence_score(g, &rival)?;
                    let gap = g.minus(rival_score, gold_score)?;
                    let shifted = g.scalar_add(gap, m + spec.cost * hamming)?;
                    g.relu(shifted)
                }
                // a single possible sequence has no competitor
                None => g.scale(gold_score, 0.0),
            }
        }
        StructuredLossKind::Crf => {
            let log_z = parts.log_partition(g)?;
            g.minus(log_z, gold_score)
        }
    }
}

/// Left-to-right classifier conditioned on the previous label, whose
/// embedding comes from `{prefix}/prev` (row `labels` is the start symbol).
#[derive(Debug, Clone, PartialEq)]
pub struct MemmModel {
    pub prefix: String,
    pub labels: usize,
    pub d_x: usize,
    pub mlp: Mlp,
}

impl MemmModel {
    /// `mlp.dims[0]` must be `d_x + d_prev` and the last dim the label count.
    pub fn new(store: &mut ParamStore, prefix: &str, d_x: usize, d_prev: usize, mlp: MlpSpec) -> Result<Self> {
        if mlp.d_in() != d_x + d_prev {
            return Err(Error::invalid("memm", format!("mlp input {} != {d_x} + {d_prev}", mlp.d_in())));
        }
        let labels = mlp.d_out();
        store.add_lookup(&format!("{prefix}/prev"), labels + 1, d_prev, InitSpec::Xavier)?;
        let mlp = Mlp::new(store, &format!("{prefix}/mlp"), mlp)?;
        Ok(MemmModel {
            prefix: prefix.to_string(),
            labels,
            d_x,
            mlp,
        })
    }

    pub fn attach(store: &ParamStore, prefix: &str, d_x: usize, mlp: MlpSpec) -> Result<Self> {
        let labels = mlp.d_out();
        store.lookup(&format!("{prefix}/prev"))?;
        let mlp = Mlp::attach(store, &format!("{prefix}/mlp"), mlp)?;
        Ok(MemmModel {
            prefix: prefix.to_string(),
            labels,
            d_x,
            mlp,
        })
    }

    pub fn start(&self) -> usize {
        self.labels
    }

    pub fn prev_table(&self) -> String {
        format!("{}/prev", self.prefix)
    }

    /// Unnormalized label scores at one position.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: NodeId, prev: usize) -> Result<NodeId> {
        let v = g.lookup(store, &self.prev_table(), prev)?;
        let input = g.concat(&[x, v])?;
        self.mlp.apply(g, store, input)
    }

    /// Summed per-position log loss with gold previous labels.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, xs: &[NodeId], gold: &[usize]) -> Result<NodeId> {
        if xs.len() != gold.len() || xs.is_empty() {
            return Err(Error::invalid("memm", "need one gold label per position"));
        }
        let mut terms = Vec::with_capacity(xs.len());
        let mut prev = self.start();
        for (&x, &y) in xs.iter().zip(gold) {
            let z = self.logits(g, store, x, prev)?;
            let p = g.softmax(z)?;
            terms.push(loss_node(g, LossSpec::new(LossKind::Log), p, &Gold::Index(y))?);
            prev = y;
        }
        g.sum_nodes(&terms)
    }
}

/// Greedy decoding: each position takes the argmax given the previous
/// prediction.
pub fn memm_greedy(g: &mut Graph, store: &ParamStore, model: &MemmModel, xs: &[NodeId]) -> Result<Vec<usize>> {
    let mut prev = model.start();
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let z = model.logits(g, store, x, prev)?;
        g.forward()?;
        let scores = g.value(z)?.data();
        prev = argmax(scores);
        out.push(prev);
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
