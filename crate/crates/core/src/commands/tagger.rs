//! Sequence tagging with a window MLP (greedy), an MEMM or a chain CRF.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use super::{fit, fraction, label_index, save_model, sidecar, write_lines, Outcome, RunConfig};
use crate::autograd::{Graph, NodeId};
use crate::data::{build_vocab, TaggedSentence, Vocab};
use crate::encoders::{Activation, Mlp, MlpSpec};
use crate::error::{Error, Result};
use crate::model::{InitSpec, ParamStore};
use crate::objectives::{loss_node, Gold, LossKind, LossSpec};
use crate::optim::mean_loss;
use crate::structured::{
    argmax, memm_greedy, score_parts, structured_loss, ChainModel, MemmModel, StructuredLossKind, StructuredLossSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaggerMode {
    Window,
    Memm,
    Crf,
}

impl TaggerMode {
    pub fn name(self) -> &'static str {
        match self {
            TaggerMode::Window => "window",
            TaggerMode::Memm => "memm",
            TaggerMode::Crf => "crf",
        }
    }
}

impl fmt::Display for TaggerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaggerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "window" => Ok(TaggerMode::Window),
            "memm" => Ok(TaggerMode::Memm),
            "crf" => Ok(TaggerMode::Crf),
            _ => Err(Error::invalid("tagger", format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Head {
    Window(Mlp),
    Memm(MemmModel),
    Crf(ChainModel),
}

const WORDS: &str = "tagger/words";

/// A sentence as vocabulary and tag indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub words: Vec<usize>,
    pub tags: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tagger {
    pub mode: TaggerMode,
    pub vocab: Vocab,
    /// Sorted tag inventory.
    pub tags: Vec<String>,
    /// Context radius: each position sees `2 * window + 1` words.
    pub window: usize,
    head: Head,
}

impl Tagger {
    pub fn new(cfg: &RunConfig, mode: TaggerMode, train: &[TaggedSentence], store: &mut ParamStore) -> Result<Self> {
        let words: Vec<Vec<&str>> = train.iter().map(|s| s.words.iter().map(String::as_str).collect()).collect();
        let vocab = build_vocab(&words, cfg.min_count)?;
        let tags: Vec<String> = train
            .iter()
            .flat_map(|s| s.tags.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        store.add_lookup(WORDS, vocab.len(), cfg.dim, InitSpec::Xavier)?;
        let d_x = (2 * cfg.window + 1) * cfg.dim;
        let mut mlp = MlpSpec::mlp1(d_x, cfg.hidden, tags.len(), Activation::Tanh);
        mlp.dropout = cfg.dropout;
        let head = match mode {
            TaggerMode::Window => Head::Window(Mlp::new(store, "tagger/mlp", mlp)?),
            TaggerMode::Memm => {
                let d_prev = cfg.dim.min(8);
                mlp.dims[0] = d_x + d_prev;
                Head::Memm(MemmModel::new(store, "tagger/memm", d_x, d_prev, mlp)?)
            }
            TaggerMode::Crf => Head::Crf(ChainModel::new(store, "tagger/crf", mlp)?),
        };
        Ok(Tagger {
            mode,
            vocab,
            tags,
            window: cfg.window,
            head,
        })
    }

    pub fn encode(&self, data: &[TaggedSentence]) -> Result<Vec<Encoded>> {
        data.iter()
            .map(|s| {
                Ok(Encoded {
                    words: self.vocab.ids(&s.words),
                    tags: s
                        .tags
                        .iter()
                        .map(|t| label_index(&self.tags, t, "tagger"))
                        .collect::<Result<_>>()?,
                })
            })
            .collect()
    }

    /// Concatenated window embeddings, one row per position.
    fn features(&self, g: &mut Graph, store: &ParamStore, words: &[usize]) -> Result<Vec<NodeId>> {
        let k = self.window as isize;
        let n = words.len() as isize;
        let rows: Vec<NodeId> = words.iter().map(|&w| g.lookup(store, WORDS, w)).collect::<Result<_>>()?;
        let pad = g.lookup(store, WORDS, self.vocab.pad())?;
        (0..n)
            .map(|i| {
                let window: Vec<NodeId> = (i - k..=i + k)
                    .map(|j| if j < 0 || j >= n { pad } else { rows[j as usize] })
                    .collect();
                g.concat(&window)
            })
            .collect()
    }

    /// Summed per-position loss (window, MEMM) or the CRF sentence loss.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, ex: &Encoded) -> Result<NodeId> {
        let xs = self.features(g, store, &ex.words)?;
        match &self.head {
            Head::Window(mlp) => {
                let mut terms = Vec::with_capacity(xs.len());
                for (&x, &t) in xs.iter().zip(&ex.tags) {
                    let z = mlp.apply(g, store, x)?;
                    let p = g.softmax(z)?;
                    terms.push(loss_node(g, LossSpec::new(LossKind::CrossEntropy), p, &Gold::Index(t))?);
                }
                g.sum_nodes(&terms)
            }
            Head::Memm(m) => m.loss(g, store, &xs, &ex.tags),
            Head::Crf(c) => {
                let parts = score_parts(g, store, c, &xs)?;
                structured_loss(g, StructuredLossSpec::new(StructuredLossKind::Crf), &parts, &ex.tags)
            }
        }
    }

    /// Greedy argmax, greedy MEMM decoding or Viterbi, by mode.
    pub fn predict_ids(&self, store: &ParamStore, words: &[usize]) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let xs = self.features(&mut g, store, words)?;
        match &self.head {
            Head::Window(mlp) => {
                let zs: Vec<NodeId> = xs.iter().map(|&x| mlp.apply(&mut g, store, x)).collect::<Result<_>>()?;
                g.forward()?;
                zs.iter().map(|&z| Ok(argmax(g.value(z)?.data()))).collect()
            }
            Head::Memm(m) => memm_greedy(&mut g, store, m, &xs),
            Head::Crf(c) => {
                let parts = score_parts(&mut g, store, c, &xs)?;
                g.forward()?;
                Ok(parts.values(&mut g)?.viterbi().0)
            }
        }
    }

    pub fn predict(&self, store: &ParamStore, words: &[String]) -> Result<Vec<String>> {
        Ok(self
            .predict_ids(store, &self.vocab.ids(words))?
            .into_iter()
            .map(|t| self.tags[t].clone())
            .collect())
    }

    /// Token-level accuracy.
    pub fn accuracy(&self, store: &ParamStore, data: &[Encoded]) -> Result<f64> {
        let (mut correct, mut total) = (0, 0);
        for ex in data {
            let pred = self.predict_ids(store, &ex.words)?;
            correct += pred.iter().zip(&ex.tags).filter(|(a, b)| a == b).count();
            total += ex.tags.len();
        }
        Ok(fraction(correct, total))
    }

    pub fn dev_loss(&self, store: &ParamStore, dev: &[TaggedSentence]) -> Result<f64> {
        let dev = self.encode(dev)?;
        mean_loss(store, &dev, &|g: &mut Graph, s: &ParamStore, ex: &Encoded| self.loss(g, s, ex))
    }
}

/// Trains a tagger; reports train and dev token accuracy per epoch.
pub fn train_tagger(
    cfg: &RunConfig,
    mode: TaggerMode,
    train: &[TaggedSentence],
    dev: &[TaggedSentence],
) -> Result<Outcome<Tagger>> {
    cfg.validate()?;
    let mut store = ParamStore::new(cfg.seed);
    let model = Tagger::new(cfg, mode, train, &mut store)?;
    let tr = model.encode(train)?;
    let dv = model.encode(dev)?;
    let eval = |s: &ParamStore| -> Result<Vec<(String, String, f64)>> {
        let mut rows = vec![("train".into(), "accuracy".into(), model.accuracy(s, &tr)?)];
        if !dv.is_empty() {
            rows.push(("dev".into(), "accuracy".into(), model.accuracy(s, &dv)?));
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
    let mut summary = std::collections::BTreeMap::new();
    summary.insert("train_accuracy".to_string(), model.accuracy(&store, &tr)?);
    if !dv.is_empty() {
        summary.insert("dev_accuracy".to_string(), model.accuracy(&store, &dv)?);
    }
    save_model(cfg, &store, &[("vocab", &model.vocab)])?;
    if let Some(path) = &cfg.model_out {
        write_lines(&sidecar(path, "tags"), &model.tags)?;
    }
    Ok(Outcome {
        dev_loss: report.last().and_then(|e| e.dev_loss),
        model,
        store,
        report,
        summary,
    })
}
