//! Training commands behind the `nnlp` binary. Each command takes a
//! [`RunConfig`] and in-memory data and returns the trained model, its
//! parameters and the training report, so runs are reproducible from
//! `(config, seed)` alone.

pub mod classifier;
pub mod embeddings;
pub mod lm;
pub mod tagger;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autograd::{Graph, NodeId};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::optim::{train, OptimizerConfig, Schedule, TrainLog, TrainReport};
use crate::recurrent::RnnVariant;

/// Paths and hyperparameters shared by every command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub model_out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    /// Decay of the `eta_0 / (1 + eta_0 lambda t)` schedule; 0 keeps the rate constant.
    pub lr_lambda: f64,
    pub clip: Option<f64>,
    pub l2: f64,
    pub minibatch: usize,
    pub dropout: f64,
    /// Embedding width.
    pub dim: usize,
    /// Hidden width of MLPs and recurrent states.
    pub hidden: usize,
    /// Context radius for taggers and embeddings; filter width for convolutions.
    pub window: usize,
    pub variant: RnnVariant,
    pub positional: bool,
    pub min_count: usize,
    pub lowercase: bool,
    pub verbose: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: None,
            dev: None,
            model_out: None,
            metrics: None,
            seed: 1,
            epochs: 10,
            lr: 0.1,
            lr_lambda: 0.0,
            clip: Some(5.0),
            l2: 0.0,
            minibatch: 1,
            dropout: 0.0,
            dim: 16,
            hidden: 32,
            window: 2,
            variant: RnnVariant::Lstm,
            positional: false,
            min_count: 1,
            lowercase: false,
            verbose: false,
        }
    }
}

impl RunConfig {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            eta0: self.lr,
            schedule: if self.lr_lambda > 0.0 {
                Schedule::Bottou(self.lr_lambda)
            } else {
                Schedule::Constant
            },
            clip: self.clip,
            l2: self.l2,
            minibatch: self.minibatch,
            epochs: self.epochs,
            seed: self.seed,
            ..OptimizerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.window == 0 {
            return Err(Error::invalid("config", "dim, hidden and window must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("config", format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.optimizer().validate()
    }
}

/// A trained model with the parameters it reads and the training record.
#[derive(Debug, Clone)]
pub struct Outcome<M> {
    pub model: M,
    pub store: ParamStore,
    pub report: TrainReport,
    /// Mean dev loss after the last epoch.
    pub dev_loss: Option<f64>,
    /// Final named results, e.g. `dev_accuracy`.
    pub summary: BTreeMap<String, f64>,
}

type Eval<'a> = Box<dyn FnMut(&ParamStore) -> Result<Vec<(String, String, f64)>> + 'a>;

fn fit<E, B>(
    cfg: &RunConfig,
    store: &mut ParamStore,
    train_set: &[E],
    dev: &[E],
    builder: B,
    evaluate: Option<Eval<'_>>,
) -> Result<TrainReport>
where
    B: Fn(&mut Graph, &ParamStore, &E) -> Result<NodeId>,
{
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut log = TrainLog {
        verbose: cfg.verbose,
        metrics_path: cfg.metrics.clone(),
        evaluate,
    };
    train(store, train_set, dev, builder, &cfg.optimizer(), &mut log)
}

/// Writes the parameters to `cfg.model_out` and each vocabulary to a
/// `<model>.<suffix>` sidecar.
fn save_model(cfg: &RunConfig, store: &ParamStore, vocabs: &[(&str, &Vocab)]) -> Result<()> {
    if let Some(path) = &cfg.model_out {
        store.save(path)?;
        for (suffix, v) in vocabs {
            v.save(sidecar(path, suffix))?;
        }
    }
    Ok(())
}

pub fn sidecar(model: &Path, suffix: &str) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Index of each label in a sorted inventory.
fn label_index(labels: &[String], label: &str, what: &'static str) -> Result<usize> {
    labels
        .binary_search_by(|l| l.as_str().cmp(label))
        .map_err(|_| Error::invalid(what, format!("label `{label}` does not occur in the training data")))
}

fn fraction(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}
