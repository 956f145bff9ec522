//! Sentence classification over a selectable encoder, with one softmax
//! head per task.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use super::{fit, fraction, label_index, save_model, sidecar, write_lines, Outcome, RunConfig};
use crate::autograd::{Graph, NodeId};
use crate::data::{build_vocab, LabeledSentence, Vocab};
use crate::encoders::{encode_cbow, Activation, Conv, ConvMode, ConvSpec, FeatureSpec, Mlp, MlpSpec, Pooling};
use crate::error::{Error, Result};
use crate::model::{InitSpec, ParamStore};
use crate::objectives::{combine_losses, loss_node, Gold, LossKind, LossSpec};
use crate::optim::mean_loss;
use crate::recurrent::{Regime, Rnn, RnnSpec};
use crate::structured::argmax;
use crate::treenn::{label_inventory, parse_sexp, BinaryTree, Composition, RecNn, RecNnSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Cbow,
    Conv,
    /// Recurrent acceptor: the final output encodes the sentence.
    Rnn,
    /// Final forward and backward outputs, concatenated.
    BiRnn,
    /// Root of a recursive network; sentences are bracketed trees.
    RecNn,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 5] = [
        EncoderKind::Cbow,
        EncoderKind::Conv,
        EncoderKind::Rnn,
        EncoderKind::BiRnn,
        EncoderKind::RecNn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Cbow => "cbow",
            EncoderKind::Conv => "conv",
            EncoderKind::Rnn => "rnn",
            EncoderKind::BiRnn => "birnn",
            EncoderKind::RecNn => "recnn",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderKind::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::invalid("classifier", format!("unknown encoder `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Encoder {
    Cbow,
    Conv(Conv),
    Rnn(Rnn),
    BiRnn(Rnn, Rnn),
    RecNn(RecNn),
}

const WORDS: &str = "clf/words";

/// A sentence as word indices (tree leaves for the recursive encoder) plus
/// one gold class per task.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub words: Vec<usize>,
    pub tree: Option<BinaryTree>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub kind: EncoderKind,
    pub vocab: Vocab,
    /// Sorted class inventory per task.
    pub labels: Vec<Vec<String>>,
    encoder: Encoder,
    heads: Vec<Mlp>,
}

fn tree_of(ex: &LabeledSentence) -> Result<BinaryTree> {
    parse_sexp(&ex.words.join(" "))
}

impl Classifier {
    /// With `multitask` every `a|b` label field trains its own head;
    /// otherwise only the first label is used.
    pub fn new(
        cfg: &RunConfig,
        kind: EncoderKind,
        multitask: bool,
        train: &[LabeledSentence],
        store: &mut ParamStore,
    ) -> Result<Self> {
        let first = train.first().ok_or(Error::Empty("training set"))?;
        let tasks = if multitask { first.labels.len() } else { 1 };
        if train.iter().any(|ex| ex.labels.len() < tasks) {
            return Err(Error::invalid("classifier", format!("every example needs {tasks} labels")));
        }
        let labels: Vec<Vec<String>> = (0..tasks)
            .map(|t| {
                train
                    .iter()
                    .map(|ex| ex.labels[t].clone())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            })
            .collect();

        let trees: Vec<BinaryTree> = if kind == EncoderKind::RecNn {
            train.iter().map(tree_of).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let sentences: Vec<Vec<String>> = if kind == EncoderKind::RecNn {
            trees.iter().map(|t| t.tokens.clone()).collect()
        } else {
            train.iter().map(|ex| ex.words.clone()).collect()
        };
        let vocab = build_vocab(&sentences, cfg.min_count)?;
        store.add_lookup(WORDS, vocab.len(), cfg.dim, InitSpec::Xavier)?;

        let (encoder, d_enc) = match kind {
            EncoderKind::Cbow => (Encoder::Cbow, cfg.dim),
            EncoderKind::Conv => {
                let conv = Conv::new(
                    store,
                    "clf/conv",
                    ConvSpec {
                        window: cfg.window,
                        in_dim: cfg.dim,
                        out_dim: cfg.hidden,
                        activation: Activation::Tanh,
                        mode: ConvMode::Wide,
                        pooling: Pooling::Max,
                    },
                )?;
                let d = conv.output_dim();
                (Encoder::Conv(conv), d)
            }
            EncoderKind::Rnn => {
                let rnn = Rnn::new(store, "clf/rnn", RnnSpec::new(cfg.variant, cfg.dim, cfg.hidden))?;
                let d = rnn.spec.output_dim();
                (Encoder::Rnn(rnn), d)
            }
            EncoderKind::BiRnn => {
                let f = Rnn::new(store, "clf/fwd", RnnSpec::new(cfg.variant, cfg.dim, cfg.hidden))?;
                let b = Rnn::new(store, "clf/bwd", RnnSpec::new(cfg.variant, cfg.dim, cfg.hidden))?;
                let d = f.spec.output_dim() + b.spec.output_dim();
                (Encoder::BiRnn(f, b), d)
            }
            EncoderKind::RecNn => {
                let (nts, pairs) = label_inventory(&trees);
                let spec = RecNnSpec {
                    composition: Composition::Untied,
                    dim: cfg.dim,
                    activation: Activation::Tanh,
                };
                (Encoder::RecNn(RecNn::new(store, "clf/rec", spec, nts, pairs)?), cfg.dim)
            }
        };
        let heads = labels
            .iter()
            .enumerate()
            .map(|(t, l)| {
                let mut spec = MlpSpec::mlp1(d_enc, cfg.hidden, l.len(), Activation::Tanh);
                spec.dropout = cfg.dropout;
                Mlp::new(store, &format!("clf/head{t}"), spec)
            })
            .collect::<Result<_>>()?;
        Ok(Classifier {
            kind,
            vocab,
            labels,
            encoder,
            heads,
        })
    }

    pub fn tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn encode(&self, data: &[LabeledSentence]) -> Result<Vec<Encoded>> {
        data.iter()
            .map(|ex| {
                let tree = match self.kind {
                    EncoderKind::RecNn => Some(tree_of(ex)?),
                    _ => None,
                };
                let words = match &tree {
                    Some(t) => self.vocab.ids(&t.tokens),
                    None => self.vocab.ids(&ex.words),
                };
                if ex.labels.len() < self.tasks() {
                    return Err(Error::invalid("classifier", format!("expected {} labels", self.tasks())));
                }
                let labels = self
                    .labels
                    .iter()
                    .zip(&ex.labels)
                    .map(|(inv, l)| label_index(inv, l, "classifier"))
                    .collect::<Result<_>>()?;
                Ok(Encoded { words, tree, labels })
            })
            .collect()
    }

    /// Sentence vector.
    pub fn represent(&self, g: &mut Graph, store: &ParamStore, ex: &Encoded) -> Result<NodeId> {
        match &self.encoder {
            Encoder::Cbow => {
                let f: Vec<FeatureSpec> = ex.words.iter().map(|&w| FeatureSpec::new(WORDS, w)).collect();
                encode_cbow(g, store, &f, false)
            }
            Encoder::Conv(conv) => {
                let xs = self.embed(g, store, &ex.words)?;
                let pad = g.lookup(store, WORDS, self.vocab.pad())?;
                conv.apply(g, store, &xs, Some(pad))
            }
            Encoder::Rnn(rnn) => {
                let xs = self.embed(g, store, &ex.words)?;
                let s0 = rnn.initial_state(g, store)?;
                Ok(rnn.unroll(g, store, s0, &xs, Regime::Acceptor)?[0])
            }
            Encoder::BiRnn(f, b) => {
                let xs = self.embed(g, store, &ex.words)?;
                let s0 = f.initial_state(g, store)?;
                let yf = f.unroll(g, store, s0, &xs, Regime::Acceptor)?[0];
                let rev: Vec<NodeId> = xs.iter().rev().copied().collect();
                let s0 = b.initial_state(g, store)?;
                let yb = b.unroll(g, store, s0, &rev, Regime::Acceptor)?[0];
                g.concat(&[yf, yb])
            }
            Encoder::RecNn(net) => {
                let xs = self.embed(g, store, &ex.words)?;
                let tree = ex.tree.as_ref().ok_or_else(|| Error::invalid("classifier", "missing tree"))?;
                Ok(net.encode(g, store, tree, &xs)?.root())
            }
        }
    }

    fn embed(&self, g: &mut Graph, store: &ParamStore, words: &[usize]) -> Result<Vec<NodeId>> {
        words.iter().map(|&w| g.lookup(store, WORDS, w)).collect()
    }

    /// Summed cross-entropy over the task heads.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, ex: &Encoded) -> Result<NodeId> {
        let h = self.represent(g, store, ex)?;
        let mut losses = Vec::with_capacity(self.heads.len());
        for (head, &gold) in self.heads.iter().zip(&ex.labels) {
            let z = head.apply(g, store, h)?;
            let p = g.softmax(z)?;
            losses.push(loss_node(g, LossSpec::new(LossKind::CrossEntropy), p, &Gold::Index(gold))?);
        }
        combine_losses(g, &losses, None)
    }

    /// Predicted class index per task.
    pub fn predict_ids(&self, store: &ParamStore, ex: &Encoded) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let h = self.represent(&mut g, store, ex)?;
        let zs: Vec<NodeId> = self.heads.iter().map(|m| m.apply(&mut g, store, h)).collect::<Result<_>>()?;
        g.forward()?;
        zs.iter().map(|&z| Ok(argmax(g.value(z)?.data()))).collect()
    }

    /// Accuracy per task.
    pub fn accuracy(&self, store: &ParamStore, data: &[Encoded]) -> Result<Vec<f64>> {
        let mut correct = vec![0; self.tasks()];
        for ex in data {
            for (t, (p, g)) in self.predict_ids(store, ex)?.iter().zip(&ex.labels).enumerate() {
                correct[t] += usize::from(p == g);
            }
        }
        Ok(correct.into_iter().map(|c| fraction(c, data.len())).collect())
    }

    pub fn dev_loss(&self, store: &ParamStore, dev: &[LabeledSentence]) -> Result<f64> {
        let dev = self.encode(dev)?;
        mean_loss(store, &dev, &|g: &mut Graph, s: &ParamStore, ex: &Encoded| self.loss(g, s, ex))
    }
}

fn accuracy_name(t: usize) -> String {
    if t == 0 {
        "accuracy".to_string()
    } else {
        format!("accuracy_task{t}")
    }
}

/// Trains a classifier; reports per-task train and dev accuracy.
pub fn train_classifier(
    cfg: &RunConfig,
    kind: EncoderKind,
    multitask: bool,
    train: &[LabeledSentence],
    dev: &[LabeledSentence],
) -> Result<Outcome<Classifier>> {
    cfg.validate()?;
    let mut store = ParamStore::new(cfg.seed);
    let model = Classifier::new(cfg, kind, multitask, train, &mut store)?;
    let tr = model.encode(train)?;
    let dv = model.encode(dev)?;
    let eval = |s: &ParamStore| -> Result<Vec<(String, String, f64)>> {
        let mut rows = Vec::new();
        for (split, data) in [("train", &tr), ("dev", &dv)] {
            if data.is_empty() {
                continue;
            }
            for (t, a) in model.accuracy(s, data)?.into_iter().enumerate() {
                rows.push((split.to_string(), accuracy_name(t), a));
            }
        }
        Ok(rows)
    };
    let report = fit(
        cfg,
        &mut store,
        &tr,
        &dv,
        |g: &mut Graph, s: &ParamStore, ex: &Encoded| model.loss(g, s, ex),
        Some(Box::new(eval)),
    )?;
    let mut summary = BTreeMap::new();
    for (split, data) in [("train", &tr), ("dev", &dv)] {
        if data.is_empty() {
            continue;
        }
        for (t, a) in model.accuracy(&store, data)?.into_iter().enumerate() {
            summary.insert(format!("{split}_{}", accuracy_name(t)), a);
        }
    }
    save_model(cfg, &store, &[("vocab", &model.vocab)])?;
    if let Some(path) = &cfg.model_out {
        let lines: Vec<String> = model.labels.iter().map(|l| l.join(" ")).collect();
        write_lines(&sidecar(path, "labels"), &lines)?;
    }
    Ok(Outcome {
        dev_loss: report.last().and_then(|e| e.dev_loss),
        model,
        store,
        report,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn cfg() -> RunConfig {
        RunConfig {
            epochs: 2,
            dim: 6,
            hidden: 8,
            ..RunConfig::default()
        }
    }

    fn labeled(label: &str, text: &str) -> LabeledSentence {
        LabeledSentence {
            labels: label.split('|').map(str::to_string).collect(),
            words: text.split(' ').map(str::to_string).collect(),
        }
    }

    #[test]
    fn cbow_twins_get_identical_predictions() {
        let data = synthetic::negation_templates(40, 1);
        let out = train_classifier(&cfg(), EncoderKind::Cbow, false, &data, &[]).unwrap();
        let enc = out.model.encode(&data).unwrap();
        for pair in enc.chunks(2) {
            assert_eq!(
                out.model.predict_ids(&out.store, &pair[0]).unwrap(),
                out.model.predict_ids(&out.store, &pair[1]).unwrap()
            );
        }
        assert_eq!(out.summary["train_accuracy"], 0.5);
    }

    #[test]
    fn every_encoder_trains() {
        let data = synthetic::negation_templates(20, 2);
        let trees = vec![
            labeled("pos", "(S (NP (D a) (N cat)) (V sat))"),
            labeled("neg", "(S (N dogs) (VP (V bark) (Adv loudly)))"),
        ];
        for kind in EncoderKind::ALL {
            let d = if kind == EncoderKind::RecNn { &trees } else { &data };
            let out = train_classifier(&cfg(), kind, false, d, d).unwrap();
            assert!(out.dev_loss.unwrap().is_finite(), "{kind}");
        }
    }

    #[test]
    fn multitask_trains_one_head_per_task() {
        let data = vec![
            labeled("pos|short", "good fun"),
            labeled("neg|long", "bad dull and awful"),
            labeled("pos|long", "nice and good and fun"),
        ];
        let out = train_classifier(&cfg(), EncoderKind::Cbow, true, &data, &data).unwrap();
        assert_eq!(out.model.tasks(), 2);
        assert!(out.summary.contains_key("dev_accuracy_task1"));
        assert!(out.store.contains("clf/head1/W1"));
        let single = train_classifier(&cfg(), EncoderKind::Cbow, false, &data, &data).unwrap();
        assert_eq!(single.model.tasks(), 1);
    }
}
