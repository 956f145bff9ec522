//! Named finite-difference cases covering every operation and network
//! architecture in the crate.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::check::{grad_check, grad_check_with, GradCheckReport, DEFAULT_EPS, DEFAULT_TOL};
use crate::autograd::{Graph, NodeId, OpKind};
use crate::encoders::{
    encode_cbow, encode_concat, Activation, Conv, ConvMode, ConvSpec, FeatureSpec, Mlp, MlpSpec, Pooling,
};
use crate::error::{Error, Result};
use crate::model::{InitSpec, ParamStore};
use crate::objectives::{loss_node, ranking_loss, Gold, LossKind, LossSpec, RankingKind};
use crate::recurrent::{
    bi_rnn, deep_rnn, encoder_decoder, stack_pop, stack_push, Regime, Rnn, RnnSpec, RnnVariant, StackRnnState,
};
use crate::structured::{score_parts, structured_loss, ChainModel, MemmModel, StructuredLossKind, StructuredLossSpec};
use crate::tensor::{Tensor, UnaryOp};
use crate::treenn::{label_inventory, parse_sexp, Composition, RecNn, RecNnSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    Ops,
    Encoders,
    Recurrent,
    Treenn,
    Structured,
    All,
}

impl Scope {
    pub const NAMES: [&'static str; 6] = ["ops", "encoders", "recurrent", "treenn", "structured", "all"];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Encoders => "encoders",
            Scope::Recurrent => "recurrent",
            Scope::Treenn => "treenn",
            Scope::Structured => "structured",
            Scope::All => "all",
        }
    }

    fn covers(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ops" => Scope::Ops,
            "encoders" => Scope::Encoders,
            "recurrent" => Scope::Recurrent,
            "treenn" => Scope::Treenn,
            "structured" => Scope::Structured,
            "all" => Scope::All,
            _ => {
                return Err(Error::invalid(
                    "gradcheck",
                    format!("unknown scope `{s}`; expected one of {}", Scope::NAMES.join(", ")),
                ))
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub scope: Scope,
    pub name: String,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{} {}",
            if self.passed() { "ok  " } else { "FAIL" },
            self.scope,
            self.name,
            self.report
        )
    }
}

type Builder = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<NodeId>>;

struct Case {
    scope: Scope,
    name: String,
    store: ParamStore,
    builder: Builder,
    /// Seed of a training-mode graph, for dropout cases.
    train_seed: Option<u64>,
}

fn case(scope: Scope, name: impl Into<String>, store: ParamStore, builder: Builder) -> Case {
    Case {
        scope,
        name: name.into(),
        store,
        builder,
        train_seed: None,
    }
}

/// Runs every case in `scope`, in a fixed order.
pub fn run(scope: Scope) -> Result<Vec<CaseResult>> {
    run_each(scope, |_| {})
}

/// As [`run`], calling `progress` after each case.
pub fn run_each(scope: Scope, mut progress: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for c in cases(scope)? {
        let t0 = Instant::now();
        let report = match c.train_seed {
            None => grad_check(&c.store, &c.builder, DEFAULT_EPS, DEFAULT_TOL),
            Some(seed) => grad_check_with(&c.store, &c.builder, || Graph::training(seed), DEFAULT_EPS, DEFAULT_TOL),
        }
        .map_err(|e| Error::invalid("gradcheck", format!("{}/{}: {e}", c.scope, c.name)))?;
        let r = CaseResult {
            scope: c.scope,
            name: c.name,
            report,
            elapsed: t0.elapsed(),
        };
        progress(&r);
        out.push(r);
    }
    Ok(out)
}

/// Names of the cases in `scope`, in run order.
pub fn case_names(scope: Scope) -> Result<Vec<String>> {
    Ok(cases(scope)?.into_iter().map(|c| format!("{}/{}", c.scope, c.name)).collect())
}

fn cases(scope: Scope) -> Result<Vec<Case>> {
    let mut out = Vec::new();
    if scope.covers(Scope::Ops) {
        out.extend(op_cases()?);
    }
    if scope.covers(Scope::Encoders) {
        out.extend(encoder_cases()?);
    }
    if scope.covers(Scope::Recurrent) {
        out.extend(recurrent_cases()?);
    }
    if scope.covers(Scope::Treenn) {
        out.extend(treenn_cases()?);
    }
    if scope.covers(Scope::Structured) {
        out.extend(structured_cases()?);
    }
    Ok(out)
}

fn random_tensor(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// Scalar `sum(x ⊙ R)` with a fixed random `R`, so every entry of `x`
/// receives a distinct upstream gradient.
fn probe(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let (r, c) = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64((r * 131 + c) as u64);
    let w = g.input(random_tensor(r, c, -1.0, 1.0, &mut rng));
    let y = g.cmul(x, w)?;
    g.sum_elems(y)
}

fn op_store() -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut s = ParamStore::new(42);
    s.insert_param("a", random_tensor(2, 3, -1.5, 1.5, &mut rng))?;
    s.insert_param("b", random_tensor(2, 3, -1.5, 1.5, &mut rng))?;
    s.insert_param("m", random_tensor(3, 2, -1.0, 1.0, &mut rng))?;
    s.insert_param("bias", random_tensor(1, 2, -0.5, 0.5, &mut rng))?;
    s.insert_param("v", random_tensor(1, 3, -1.0, 1.0, &mut rng))?;
    s.insert_param("u", random_tensor(1, 3, -1.0, 1.0, &mut rng))?;
    s.insert_param("pos", random_tensor(2, 3, 0.2, 2.0, &mut rng))?;
    s.insert_param("seq", random_tensor(4, 3, -1.0, 1.0, &mut rng))?;
    s.add_lookup("emb", 4, 3, InitSpec::Xavier)?;
    Ok(s)
}

fn op_cases() -> Result<Vec<Case>> {
    let s = op_store()?;
    let mut out = Vec::new();
    let mut unary = |name: &str, f: fn(&mut Graph, NodeId) -> Result<NodeId>, input: &'static str| {
        out.push(case(
            Scope::Ops,
            name,
            s.clone(),
            Box::new(move |g, s| {
                let x = g.parameter(s, input)?;
                let y = f(g, x)?;
                probe(g, y)
            }),
        ));
    };
    unary("parameter", |_, x| Ok(x), "a");
    unary("negate", |g, x| g.negate(x), "a");
    unary("scalar-add", |g, x| g.scalar_add(x, 0.75), "a");
    unary("scale", |g, x| g.scale(x, -1.5), "a");
    unary("log", |g, x| g.log(x), "pos");
    unary("clamped-log", |g, x| g.add_node(OpKind::ClampedLog(1e-3), &[x]), "pos");
    unary("softmax", |g, x| g.softmax(x), "a");
    unary("pick", |g, x| g.pick(x, 4), "a");
    unary("sum-elems", |g, x| g.sum_elems(x), "a");
    unary("max-pool-rows", |g, x| g.add_node(OpKind::MaxPoolRows, &[x]), "seq");
    unary("avg-pool-rows", |g, x| g.add_node(OpKind::AvgPoolRows, &[x]), "seq");
    unary("kmax-pool-rows", |g, x| g.add_node(OpKind::KMaxPoolRows(2), &[x]), "seq");
    unary("normalize-tanh", |g, x| g.add_node(OpKind::NormalizeTanh, &[x]), "v");
    unary("transpose", |g, x| g.transpose(x), "a");
    unary("slice-cols", |g, x| g.slice_cols(x, 1, 2), "v");
    unary("logsumexp", |g, x| g.add_node(OpKind::LogSumExp, &[x]), "a");
    unary("logsumexp-rows", |g, x| g.add_node(OpKind::LogSumExpRows, &[x]), "seq");

    for op in [
        UnaryOp::Neg,
        UnaryOp::Exp,
        UnaryOp::Sigmoid,
        UnaryOp::Tanh,
        UnaryOp::HardTanh,
        UnaryOp::Relu,
        UnaryOp::Cube,
        UnaryOp::TanhCube,
    ] {
        out.push(case(
            Scope::Ops,
            op.name(),
            s.clone(),
            Box::new(move |g, s| {
                let x = g.parameter(s, "a")?;
                let y = g.unary(op, x)?;
                probe(g, y)
            }),
        ));
    }

    let mut binary = |name: &str, f: fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>, l: &'static str, r: &'static str| {
        out.push(case(
            Scope::Ops,
            name,
            s.clone(),
            Box::new(move |g, s| {
                let x = g.parameter(s, l)?;
                let y = g.parameter(s, r)?;
                let z = f(g, x, y)?;
                probe(g, z)
            }),
        ));
    };
    binary("add", |g, x, y| g.add(x, y), "a", "b");
    binary("minus", |g, x, y| g.minus(x, y), "a", "b");
    binary("cmul", |g, x, y| g.cmul(x, y), "a", "b");
    binary("matmul", |g, x, y| g.matmul(x, y), "a", "m");
    binary("concat", |g, x, y| g.concat(&[x, y]), "v", "u");
    binary("concat-rows", |g, x, y| g.concat_rows(&[x, y]), "a", "b");
    binary("sum-nodes", |g, x, y| g.sum_nodes(&[x, y, x]), "a", "b");
    binary("avg-nodes", |g, x, y| g.avg_nodes(&[x, y]), "a", "b");
    binary("weighted-sum", |g, x, y| g.weighted_sum(&[x, y], &[0.3, -1.7]), "a", "b");

    out.push(case(
        Scope::Ops,
        "input",
        s.clone(),
        Box::new(|g, s| {
            let x = g.input(Tensor::from_rows(&[&[0.5, -1.0, 2.0], &[1.5, 0.25, -0.75]]));
            let a = g.parameter(s, "a")?;
            let y = g.cmul(x, a)?;
            probe(g, y)
        }),
    ));
    out.push(case(
        Scope::Ops,
        "lookup",
        s.clone(),
        Box::new(|g, s| {
            // row 9 is out of vocabulary and resolves to the unknown row
            let rows: Vec<NodeId> = [1, 3, 1, 9].iter().map(|&i| g.lookup(s, "emb", i)).collect::<Result<_>>()?;
            let x = g.concat(&rows)?;
            probe(g, x)
        }),
    ));
    out.push(case(
        Scope::Ops,
        "affine",
        s.clone(),
        Box::new(|g, s| {
            let x = g.parameter(s, "a")?;
            let w = g.parameter(s, "m")?;
            let b = g.parameter(s, "bias")?;
            let y = g.affine(x, w, b)?;
            probe(g, y)
        }),
    ));
    let mut dropout = case(
        Scope::Ops,
        "dropout",
        s.clone(),
        Box::new(|g, s| {
            let x = g.parameter(s, "seq")?;
            let y = g.dropout(x, 0.5)?;
            probe(g, y)
        }),
    );
    dropout.train_seed = Some(7);
    out.push(dropout);

    let class_scores = |g: &mut Graph, s: &ParamStore| -> Result<NodeId> {
        let x = g.parameter(s, "v")?;
        let w = g.parameter(s, "m")?;
        g.matmul(x, w)
    };
    let losses: Vec<(&str, LossSpec, Gold, bool)> = vec![
        ("loss-hinge-binary", LossSpec::new(LossKind::HingeBinary).with_margin(3.0), Gold::Sign(1.0), false),
        ("loss-hinge-multiclass", LossSpec::new(LossKind::HingeMulticlass).with_margin(3.0), Gold::Index(1), false),
        ("loss-log", LossSpec::new(LossKind::Log), Gold::Index(0), false),
        ("loss-cross-entropy", LossSpec::new(LossKind::CrossEntropy), Gold::Index(1), true),
        ("loss-cross-entropy-soft", LossSpec::new(LossKind::CrossEntropy), Gold::Distribution(vec![0.3, 0.7]), true),
    ];
    for (name, spec, gold, normalize) in losses {
        out.push(case(
            Scope::Ops,
            name,
            s.clone(),
            Box::new(move |g, s| {
                let mut y = class_scores(g, s)?;
                if normalize {
                    y = g.softmax(y)?;
                } else if spec.kind == LossKind::HingeBinary {
                    y = g.pick(y, 0)?;
                }
                loss_node(g, spec, y, &gold)
            }),
        ));
    }
    for (name, kind) in [("loss-ranking-margin", RankingKind::Margin), ("loss-ranking-log", RankingKind::Log)] {
        out.push(case(
            Scope::Ops,
            name,
            s.clone(),
            Box::new(move |g, s| {
                let y = class_scores(g, s)?;
                let good = g.pick(y, 0)?;
                let bad = g.pick(y, 1)?;
                ranking_loss(g, kind, good, bad, 5.0)
            }),
        ));
    }
    Ok(out)
}

fn words_store(seed: u64, vocab: usize, dim: usize) -> Result<ParamStore> {
    let mut s = ParamStore::new(seed);
    s.add_lookup("words", vocab, dim, InitSpec::Xavier)?;
    Ok(s)
}

fn word_nodes(g: &mut Graph, s: &ParamStore, ids: &[usize]) -> Result<Vec<NodeId>> {
    ids.iter().map(|&i| g.lookup(s, "words", i)).collect()
}

fn encoder_cases() -> Result<Vec<Case>> {
    let mut out = Vec::new();
    let x = Tensor::row(vec![0.4, -0.9, 1.3, 0.2]);
    for act in Activation::ALL {
        for depth in [1, 2] {
            let mut s = ParamStore::new(5);
            let spec = if depth == 1 {
                MlpSpec::mlp1(4, 5, 3, act)
            } else {
                MlpSpec::mlp2(4, 5, 4, 3, act)
            };
            let mlp = Mlp::new(&mut s, "mlp", spec)?;
            // nonzero biases keep relu and hardtanh off their kinks at zero
            for l in 0..=depth {
                let b = s.param_mut(&mlp.bias_name(l))?;
                b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * (i as f64 + 1.0));
            }
            let x = x.clone();
            out.push(case(
                Scope::Encoders,
                format!("mlp{depth}-{}", act.name()),
                s,
                Box::new(move |g, s| {
                    let xi = g.input(x.clone());
                    let y = mlp.apply(g, s, xi)?;
                    probe(g, y)
                }),
            ));
        }
    }

    let mut s = ParamStore::new(6);
    let mut spec = MlpSpec::mlp1(4, 6, 3, Activation::Tanh);
    spec.dropout = 0.3;
    let mlp = Mlp::new(&mut s, "mlp", spec)?;
    let mut c = case(
        Scope::Encoders,
        "mlp1-dropout",
        s,
        Box::new(move |g, s| {
            let xi = g.input(x.clone());
            let y = mlp.apply(g, s, xi)?;
            probe(g, y)
        }),
    );
    c.train_seed = Some(3);
    out.push(c);

    let s = words_store(8, 6, 3)?;
    out.push(case(
        Scope::Encoders,
        "concat-features",
        s.clone(),
        Box::new(|g, s| {
            let f = [FeatureSpec::new("words", 0), FeatureSpec::new("words", 4), FeatureSpec::new("words", 2)];
            let x = encode_concat(g, s, &f)?;
            probe(g, x)
        }),
    ));
    for weighted in [false, true] {
        out.push(case(
            Scope::Encoders,
            if weighted { "wcbow" } else { "cbow" },
            s.clone(),
            Box::new(move |g, s| {
                let f = [
                    FeatureSpec::new("words", 1).weighted(2.0),
                    FeatureSpec::new("words", 3).weighted(0.5),
                    FeatureSpec::new("words", 1).weighted(1.0),
                ];
                let x = encode_cbow(g, s, &f, weighted)?;
                probe(g, x)
            }),
        ));
    }

    let poolings = [
        ("max", Pooling::Max, ConvMode::Wide),
        ("avg", Pooling::Avg, ConvMode::Wide),
        ("kmax", Pooling::KMax(2), ConvMode::Wide),
        (
            "split",
            Pooling::Split {
                regions: 2,
                inner: Box::new(Pooling::Max),
            },
            ConvMode::Wide,
        ),
        ("hierarchical", Pooling::Hierarchical { group: 2, stages: 2 }, ConvMode::Wide),
        ("narrow-max", Pooling::Max, ConvMode::Narrow),
    ];
    for (name, pooling, mode) in poolings {
        let mut s = words_store(9, 8, 2)?;
        let conv = Conv::new(
            &mut s,
            "conv",
            ConvSpec {
                window: 2,
                in_dim: 2,
                out_dim: 3,
                activation: Activation::Tanh,
                mode,
                pooling,
            },
        )?;
        out.push(case(
            Scope::Encoders,
            format!("conv-{name}"),
            s,
            Box::new(move |g, s| {
                let words = word_nodes(g, s, &[0, 3, 5, 2, 7])?;
                let pad = g.lookup(s, "words", 9)?;
                let y = conv.apply(g, s, &words, Some(pad))?;
                probe(g, y)
            }),
        ));
    }
    Ok(out)
}

fn rnn_store(seed: u64) -> Result<ParamStore> {
    words_store(seed, 8, 2)
}

/// Nonzero initial state so the `s0` gradient is exercised.
fn jitter_s0(s: &mut ParamStore, rnn: &Rnn) -> Result<()> {
    let t = s.param_mut(&rnn.p("s0"))?;
    t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 - 0.2);
    Ok(())
}

fn recurrent_cases() -> Result<Vec<Case>> {
    let mut out = Vec::new();
    for variant in RnnVariant::ALL {
        let mut s = rnn_store(10)?;
        let rnn = Rnn::new(&mut s, "rnn", RnnSpec::new(variant, 2, 3))?;
        jitter_s0(&mut s, &rnn)?;
        out.push(case(
            Scope::Recurrent,
            format!("{}-3step", variant.name()),
            s,
            Box::new(move |g, s| {
                let xs = word_nodes(g, s, &[1, 4, 6])?;
                let s0 = rnn.initial_state(g, s)?;
                let ys = rnn.unroll(g, s, s0, &xs, Regime::Transducer)?;
                let y = g.concat(&ys)?;
                probe(g, y)
            }),
        ));
    }

    let mut s = rnn_store(11)?;
    let fwd = Rnn::new(&mut s, "fwd", RnnSpec::new(RnnVariant::Lstm, 2, 3))?;
    let bwd = Rnn::new(&mut s, "bwd", RnnSpec::new(RnnVariant::Lstm, 2, 3))?;
    out.push(case(
        Scope::Recurrent,
        "bi-rnn",
        s,
        Box::new(move |g, s| {
            let xs = word_nodes(g, s, &[2, 0, 5])?;
            let ys = bi_rnn(g, s, &fwd, &bwd, &xs)?;
            let y = g.concat(&ys)?;
            probe(g, y)
        }),
    ));

    let mut s = rnn_store(12)?;
    let l1 = Rnn::new(&mut s, "deep1", RnnSpec::new(RnnVariant::Gru, 2, 3))?;
    let l2 = Rnn::new(&mut s, "deep2", RnnSpec::new(RnnVariant::Gru, 3, 3))?;
    out.push(case(
        Scope::Recurrent,
        "deep-rnn-2layer",
        s,
        Box::new(move |g, s| {
            let xs = word_nodes(g, s, &[3, 1, 7])?;
            let ys = deep_rnn(g, s, &[l1.clone(), l2.clone()], &xs, 0.0)?;
            let y = g.concat(&ys)?;
            probe(g, y)
        }),
    ));

    let mut s = rnn_store(13)?;
    let rnn = Rnn::new(&mut s, "stack", RnnSpec::new(RnnVariant::Lstm, 2, 3))?;
    out.push(case(
        Scope::Recurrent,
        "stack-rnn",
        s,
        Box::new(move |g, s| {
            // push a, b, c; pop; push d; pop; pop; push e; push f
            let e = word_nodes(g, s, &[0, 1, 2, 3, 4, 5])?;
            let empty = StackRnnState::new(g, s, &rnn)?;
            let sa = stack_push(g, s, &rnn, &empty, 0, e[0])?;
            let sb = stack_push(g, s, &rnn, &sa, 1, e[1])?;
            let sc = stack_push(g, s, &rnn, &sb, 2, e[2])?;
            let sd = stack_push(g, s, &rnn, &stack_pop(&sc)?, 3, e[3])?;
            let back = stack_pop(&stack_pop(&sd)?)?;
            let se = stack_push(g, s, &rnn, &back, 4, e[4])?;
            let sf = stack_push(g, s, &rnn, &se, 5, e[5])?;
            let y = sf.encoding(g, &rnn)?;
            probe(g, y)
        }),
    ));

    let mut s = rnn_store(14)?;
    let enc = Rnn::new(&mut s, "enc", RnnSpec::new(RnnVariant::Lstm, 2, 3))?;
    let dec = Rnn::new(&mut s, "dec", RnnSpec::new(RnnVariant::Lstm, 2, 3))?;
    out.push(case(
        Scope::Recurrent,
        "encoder-decoder",
        s,
        Box::new(move |g, s| {
            let xs = word_nodes(g, s, &[1, 2, 3])?;
            let ts = word_nodes(g, s, &[6, 5])?;
            let ys = encoder_decoder(g, s, &enc, &dec, &xs, &ts, true)?;
            let y = g.concat(&ys)?;
            probe(g, y)
        }),
    ));
    Ok(out)
}

/// The five-word example tree.
pub const EXAMPLE_TREE: &str = "(S (NP (Det the) (Noun boy)) (VP (Verb saw) (NP (Det her) (Noun duck))))";

fn treenn_cases() -> Result<Vec<Case>> {
    let tree = parse_sexp(EXAMPLE_TREE)?;
    let (labels, pairs) = label_inventory([&tree]);
    let mut out = Vec::new();
    for (name, comp) in [
        ("recnn-untied", Composition::Untied),
        ("recnn-label-embedding", Composition::LabelEmbedding { d_nt: 2 }),
        ("recnn-per-pair", Composition::PerPair),
    ] {
        let mut s = words_store(15, 5, 3)?;
        let net = RecNn::new(
            &mut s,
            "rec",
            RecNnSpec {
                composition: comp,
                dim: 3,
                activation: Activation::Tanh,
            },
            labels.clone(),
            pairs.clone(),
        )?;
        let tree = tree.clone();
        out.push(case(
            Scope::Treenn,
            name,
            s,
            Box::new(move |g, s| {
                let leaves = word_nodes(g, s, &[0, 1, 2, 3, 4])?;
                let st = net.encode(g, s, &tree, &leaves)?;
                let all: Vec<NodeId> = st.nodes.iter().map(|n| n.1).collect();
                let y = g.concat(&all)?;
                probe(g, y)
            }),
        ));
    }
    Ok(out)
}

fn structured_cases() -> Result<Vec<Case>> {
    let mut out = Vec::new();
    let gold = [2, 0, 1, 1];
    for (name, kind) in [
        ("crf", StructuredLossKind::Crf),
        ("perceptron", StructuredLossKind::Perceptron),
        ("margin", StructuredLossKind::Margin(1.0)),
    ] {
        let mut s = words_store(16, 6, 3)?;
        let model = ChainModel::new(&mut s, "chain", MlpSpec::mlp1(3, 4, 3, Activation::Tanh))?;
        out.push(case(
            Scope::Structured,
            name,
            s,
            Box::new(move |g, s| {
                let xs = word_nodes(g, s, &[0, 3, 3, 5])?;
                let parts = score_parts(g, s, &model, &xs)?;
                structured_loss(g, StructuredLossSpec::new(kind), &parts, &gold)
            }),
        ));
    }
    let mut s = words_store(17, 6, 3)?;
    let memm = MemmModel::new(&mut s, "memm", 3, 2, MlpSpec::mlp1(5, 4, 3, Activation::Tanh))?;
    out.push(case(
        Scope::Structured,
        "memm",
        s,
        Box::new(move |g, s| {
            let xs = word_nodes(g, s, &[1, 2, 4, 0])?;
            memm.loss(g, s, &xs, &gold)
        }),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_parsing() {
        for name in Scope::NAMES {
            assert_eq!(name.parse::<Scope>().unwrap().name(), name);
        }
        assert!("everything".parse::<Scope>().is_err());
    }

    #[test]
    fn ops_scope_lists_every_op_kind() {
        let names = case_names(Scope::Ops).unwrap();
        let kinds = [
            "input",
            "parameter",
            "lookup",
            "add",
            "minus",
            "cmul",
            "matmul",
            "concat",
            "concat-rows",
            "affine",
            "negate",
            "scalar-add",
            "scale",
            "neg",
            "exp",
            "sigmoid",
            "tanh",
            "hardtanh",
            "relu",
            "cube",
            "tanhcube",
            "log",
            "clamped-log",
            "softmax",
            "pick",
            "sum-elems",
            "sum-nodes",
            "avg-nodes",
            "weighted-sum",
            "max-pool-rows",
            "avg-pool-rows",
            "kmax-pool-rows",
            "dropout",
            "normalize-tanh",
            "transpose",
            "slice-cols",
            "logsumexp",
            "logsumexp-rows",
        ];
        for k in kinds {
            assert!(names.contains(&format!("ops/{k}")), "missing {k}");
        }
    }

    #[test]
    fn all_scopes_partition_the_suite() {
        let all = case_names(Scope::All).unwrap();
        let parts: usize = [Scope::Ops, Scope::Encoders, Scope::Recurrent, Scope::Treenn, Scope::Structured]
            .iter()
            .map(|&s| case_names(s).unwrap().len())
            .sum();
        assert_eq!(all.len(), parts);
    }

    #[test]
    fn structured_and_treenn_cases_pass() {
        for scope in [Scope::Treenn, Scope::Structured] {
            for r in run(scope).unwrap() {
                assert!(r.passed(), "{r}");
            }
        }
    }
}
