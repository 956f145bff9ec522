//! Word embeddings from a window-scoring network trained to rank observed
//! windows above windows whose focus word was replaced at random.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fit, save_model, Outcome, RunConfig};
use crate::autograd::{Graph, NodeId};
use crate::data::{build_vocab, corrupt, extract_windows, SkipGramPair, Vocab, PAD};
use crate::encoders::{Activation, Mlp, MlpSpec};
use crate::error::{Error, Result};
use crate::model::{InitSpec, ParamStore};
use crate::objectives::{ranking_loss, RankingKind};
use crate::optim::mean_loss;

pub const WORDS: &str = "emb/words";
const CONTEXTS: &str = "emb/contexts";

/// Corrupted windows drawn per observed window.
pub const NEGATIVES: usize = 2;

/// An observed window paired with one corruption of its focus word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankExample {
    pub focus: usize,
    pub corrupt: usize,
    /// Context indices, offsets `-k..-1` then `+1..+k`.
    pub context: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub vocab: Vocab,
    /// Positional context vocabulary (`the:+2`); `None` shares the word table.
    pub contexts: Option<Vocab>,
    pub window: usize,
    pub scorer: Mlp,
}

impl EmbeddingModel {
    pub fn new(cfg: &RunConfig, corpus: &[Vec<String>], store: &mut ParamStore) -> Result<Self> {
        let vocab = build_vocab(corpus, cfg.min_count)?;
        store.add_lookup(WORDS, vocab.len(), cfg.dim, InitSpec::Xavier)?;
        let contexts = if cfg.positional {
            let mut ctx_tokens = Vec::new();
            for s in corpus {
                for w in extract_windows(s, cfg.window, true)? {
                    ctx_tokens.push(w.context.into_iter().filter(|c| c != PAD).collect::<Vec<_>>());
                }
            }
            let cv = build_vocab(&ctx_tokens, cfg.min_count)?;
            store.add_lookup(CONTEXTS, cv.len(), cfg.dim, InitSpec::Xavier)?;
            Some(cv)
        } else {
            None
        };
        let d_in = (2 * cfg.window + 1) * cfg.dim;
        let scorer = Mlp::new(store, "emb/score", MlpSpec::mlp1(d_in, cfg.hidden, 1, Activation::Tanh))?;
        Ok(EmbeddingModel {
            vocab,
            contexts,
            window: cfg.window,
            scorer,
        })
    }

    fn context_table(&self) -> (&str, &Vocab) {
        match &self.contexts {
            Some(v) => (CONTEXTS, v),
            None => (WORDS, &self.vocab),
        }
    }

    /// One example per window and corruption, drawn from `seed`.
    pub fn examples(&self, corpus: &[Vec<String>], seed: u64) -> Result<Vec<RankExample>> {
        let positional = self.contexts.is_some();
        let (_, cv) = self.context_table();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for s in corpus.iter().filter(|s| !s.is_empty()) {
            for w in extract_windows(s, self.window, positional)? {
                let focus = self.vocab.id(&w.word);
                let context: Vec<usize> = w.context.iter().map(|c| if c == PAD { cv.pad() } else { cv.id(c) }).collect();
                let pair = SkipGramPair {
                    focus,
                    context: 0,
                    observed: true,
                };
                for _ in 0..NEGATIVES {
                    let bad = corrupt(pair, self.vocab.len(), false, &mut rng)?;
                    out.push(RankExample {
                        focus,
                        corrupt: bad.focus,
                        context: context.clone(),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Network score of the window with `focus` in the middle.
    pub fn score(&self, g: &mut Graph, store: &ParamStore, focus: usize, context: &[usize]) -> Result<NodeId> {
        let (table, _) = self.context_table();
        let k = self.window;
        let mut parts = Vec::with_capacity(2 * k + 1);
        for &c in &context[..k] {
            parts.push(g.lookup(store, table, c)?);
        }
        parts.push(g.lookup(store, WORDS, focus)?);
        for &c in &context[k..] {
            parts.push(g.lookup(store, table, c)?);
        }
        let x = g.concat(&parts)?;
        self.scorer.apply(g, store, x)
    }

    /// `max(0, 1 - (s(observed) - s(corrupted)))`.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, ex: &RankExample) -> Result<NodeId> {
        let good = self.score(g, store, ex.focus, &ex.context)?;
        let bad = self.score(g, store, ex.corrupt, &ex.context)?;
        ranking_loss(g, RankingKind::Margin, good, bad, 1.0)
    }

    pub fn dev_loss(&self, store: &ParamStore, dev: &[RankExample]) -> Result<f64> {
        mean_loss(store, dev, &|g: &mut Graph, s: &ParamStore, ex: &RankExample| self.loss(g, s, ex))
    }

    pub fn vector<'s>(&self, store: &'s ParamStore, word: &str) -> Result<&'s [f64]> {
        let id = self
            .vocab
            .get(word)
            .ok_or_else(|| Error::invalid("embeddings", format!("`{word}` is not in the vocabulary")))?;
        Ok(store.lookup(WORDS)?.row(id))
    }

    pub fn similarity(&self, store: &ParamStore, a: &str, b: &str) -> Result<f64> {
        Ok(cosine(self.vector(store, a)?, self.vector(store, b)?))
    }

    /// The `n` most cosine-similar other vocabulary words.
    pub fn nearest(&self, store: &ParamStore, word: &str, n: usize) -> Result<Vec<(String, f64)>> {
        let v = self.vector(store, word)?;
        let table = store.lookup(WORDS)?;
        let mut scored: Vec<(String, f64)> = self
            .vocab
            .tokens()
            .iter()
            .enumerate()
            .filter(|(_, t)| t.as_str() != word)
            .map(|(i, t)| (t.clone(), cosine(v, table.row(i))))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(n);
        Ok(scored)
    }

    /// Mean cosine over distinct word pairs within a group and across groups.
    pub fn group_cosines(&self, store: &ParamStore, groups: &[Vec<String>]) -> Result<(f64, f64)> {
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
        for (gi, a) in groups.iter().enumerate() {
            for (gj, b) in groups.iter().enumerate().skip(gi) {
                for (x, wa) in a.iter().enumerate() {
                    for (y, wb) in b.iter().enumerate() {
                        if gi == gj && y <= x {
                            continue;
                        }
                        let c = self.similarity(store, wa, wb)?;
                        if gi == gj {
                            intra += c;
                            ni += 1;
                        } else {
                            inter += c;
                            nx += 1;
                        }
                    }
                }
            }
        }
        if ni == 0 || nx == 0 {
            return Err(Error::invalid("embeddings", "need two groups with at least two words"));
        }
        Ok((intra / ni as f64, inter / nx as f64))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Trains embeddings on `corpus`; `dev` windows give the held-out ranking loss.
pub fn train_embeddings(
    cfg: &RunConfig,
    corpus: &[Vec<String>],
    dev: &[Vec<String>],
) -> Result<Outcome<EmbeddingModel>> {
    cfg.validate()?;
    let mut store = ParamStore::new(cfg.seed);
    let model = EmbeddingModel::new(cfg, corpus, &mut store)?;
    let tr = model.examples(corpus, cfg.seed)?;
    let dv = model.examples(dev, cfg.seed.wrapping_add(1))?;
    let report = fit(
        cfg,
        &mut store,
        &tr,
        &dv,
        |g: &mut Graph, s: &ParamStore, ex: &RankExample| model.loss(g, s, ex),
        None,
    )?;
    let mut vocabs = vec![("vocab", &model.vocab)];
    if let Some(cv) = &model.contexts {
        vocabs.push(("contexts", cv));
    }
    save_model(cfg, &store, &vocabs)?;
    Ok(Outcome {
        dev_loss: report.last().and_then(|e| e.dev_loss),
        model,
        store,
        report,
        summary: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn cfg(positional: bool) -> RunConfig {
        RunConfig {
            epochs: 1,
            dim: 6,
            hidden: 8,
            window: 2,
            positional,
            ..RunConfig::default()
        }
    }

    #[test]
    fn self_similarity_is_one() {
        let corpus = synthetic::two_topics(20, 4, 6, 1);
        let out = train_embeddings(&cfg(false), &corpus, &[]).unwrap();
        for w in out.model.vocab.tokens() {
            assert!((out.model.similarity(&out.store, w, w).unwrap() - 1.0).abs() < 1e-12);
        }
        let near = out.model.nearest(&out.store, "sun0", 3).unwrap();
        assert_eq!(near.len(), 3);
        assert!(near.windows(2).all(|p| p[0].1 >= p[1].1));
    }

    #[test]
    fn positional_mode_uses_offset_contexts() {
        let corpus = synthetic::two_topics(10, 3, 5, 2);
        let out = train_embeddings(&cfg(true), &corpus, &[]).unwrap();
        let cv = out.model.contexts.as_ref().unwrap();
        assert!(cv.get("sun0:+2").is_some());
        assert!(cv.get("sun0").is_none());
        assert!(out.store.lookup(CONTEXTS).is_ok());
    }

    #[test]
    fn corruptions_replace_only_the_focus() {
        let corpus = synthetic::two_topics(6, 3, 5, 3);
        let mut store = ParamStore::new(1);
        let m = EmbeddingModel::new(&cfg(false), &corpus, &mut store).unwrap();
        let ex = m.examples(&corpus, 9).unwrap();
        assert_eq!(ex.len(), 6 * 5 * NEGATIVES);
        assert!(ex.iter().all(|e| e.corrupt != e.focus && e.context.len() == 4));
        assert_eq!(ex, m.examples(&corpus, 9).unwrap());
    }
}
