//! Recurrent transducer language model: after reading `w_1..w_i` it
//! predicts `w_{i+1}` over the vocabulary plus an unknown-word class.

use super::{fit, save_model, Outcome, RunConfig};
use crate::autograd::{Graph, NodeId, OpKind};
use crate::data::{build_vocab, Vocab};
use crate::encoders::{Mlp, MlpSpec};
use crate::error::{Error, Result};
use crate::model::{InitSpec, ParamStore};
use crate::objectives::LOG_FLOOR;
use crate::optim::mean_loss;
use crate::recurrent::{Regime, Rnn, RnnSpec};
use crate::synthetic::unigram_perplexity;

const WORDS: &str = "lm/words";

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub vocab: Vocab,
    pub rnn: Rnn,
    pub out: Mlp,
}

impl LanguageModel {
    pub fn new(cfg: &RunConfig, train: &[Vec<String>], store: &mut ParamStore) -> Result<Self> {
        let vocab = build_vocab(train, cfg.min_count)?;
        store.add_lookup(WORDS, vocab.len(), cfg.dim, InitSpec::Xavier)?;
        let rnn = Rnn::new(store, "lm/rnn", RnnSpec::new(cfg.variant, cfg.dim, cfg.hidden))?;
        let out = Mlp::new(store, "lm/out", MlpSpec::perceptron(rnn.spec.output_dim(), vocab.len() + 1))?;
        Ok(LanguageModel { vocab, rnn, out })
    }

    /// Output classes: the vocabulary and the unknown word.
    pub fn classes(&self) -> usize {
        self.vocab.len() + 1
    }

    /// Index sequences of at least two tokens; shorter sentences predict nothing.
    pub fn encode(&self, data: &[Vec<String>]) -> Vec<Vec<usize>> {
        data.iter().filter(|s| s.len() >= 2).map(|s| self.vocab.ids(s)).collect()
    }

    /// Negative log-probability nodes of `w_2..w_n`.
    fn token_losses(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Vec<NodeId>> {
        let xs: Vec<NodeId> = ids[..ids.len() - 1]
            .iter()
            .map(|&w| g.lookup(store, WORDS, w))
            .collect::<Result<_>>()?;
        let s0 = self.rnn.initial_state(g, store)?;
        let ys = self.rnn.unroll(g, store, s0, &xs, Regime::Transducer)?;
        let mut out = Vec::with_capacity(ys.len());
        for (y, &target) in ys.into_iter().zip(&ids[1..]) {
            let z = self.out.apply(g, store, y)?;
            let p = g.softmax(z)?;
            let pt = g.pick(p, target.min(self.vocab.unk()))?;
            let lp = g.add_node(OpKind::ClampedLog(LOG_FLOOR), &[pt])?;
            out.push(g.negate(lp)?);
        }
        Ok(out)
    }

    /// Summed negative log-likelihood of one sentence.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<NodeId> {
        let terms = self.token_losses(g, store, ids)?;
        g.sum_nodes(&terms)
    }

    /// `exp` of the mean per-token negative log-likelihood.
    pub fn perplexity(&self, store: &ParamStore, data: &[Vec<usize>]) -> Result<f64> {
        let (mut nll, mut n) = (0.0, 0usize);
        for ids in data {
            let mut g = Graph::new();
            let terms = self.token_losses(&mut g, store, ids)?;
            g.forward()?;
            for t in terms {
                nll += g.scalar(t)?;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty("perplexity over no predicted tokens"));
        }
        Ok((nll / n as f64).exp())
    }

    pub fn dev_loss(&self, store: &ParamStore, dev: &[Vec<String>]) -> Result<f64> {
        mean_loss(store, &self.encode(dev), &|g: &mut Graph, s: &ParamStore, ids: &Vec<usize>| {
            self.loss(g, s, ids)
        })
    }
}

/// Predicted tokens only, i.e. every sentence without its first word.
fn targets(data: &[Vec<String>]) -> Vec<Vec<String>> {
    data.iter().filter(|s| s.len() >= 2).map(|s| s[1..].to_vec()).collect()
}

/// Trains the language model; reports dev perplexity against the unigram
/// baseline.
pub fn train_lm(cfg: &RunConfig, train: &[Vec<String>], dev: &[Vec<String>]) -> Result<Outcome<LanguageModel>> {
    cfg.validate()?;
    let mut store = ParamStore::new(cfg.seed);
    let model = LanguageModel::new(cfg, train, &mut store)?;
    let tr = model.encode(train);
    let dv = model.encode(dev);
    let eval = |s: &ParamStore| -> Result<Vec<(String, String, f64)>> {
        let mut rows = Vec::new();
        if !dv.is_empty() {
            rows.push(("dev".into(), "perplexity".into(), model.perplexity(s, &dv)?));
        }
        Ok(rows)
    };
    let report = fit(
        cfg,
        &mut store,
        &tr,
        &dv,
        |g: &mut Graph, s: &ParamStore, ids: &Vec<usize>| model.loss(g, s, ids),
        Some(Box::new(eval)),
    )?;
    let mut summary = std::collections::BTreeMap::new();
    summary.insert("train_perplexity".to_string(), model.perplexity(&store, &tr)?);
    summary.insert("uniform_perplexity".to_string(), model.classes() as f64);
    if !dv.is_empty() {
        summary.insert("dev_perplexity".to_string(), model.perplexity(&store, &dv)?);
        summary.insert("unigram_perplexity".to_string(), unigram_perplexity(&targets(train), &targets(dev)));
    }
    save_model(cfg, &store, &[("vocab", &model.vocab)])?;
    Ok(Outcome {
        dev_loss: report.last().and_then(|e| e.dev_loss),
        model,
        store,
        report,
        summary,
    })
}
