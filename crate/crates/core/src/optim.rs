//! Stochastic gradient training: online and minibatch SGD, momentum,
//! learning-rate schedules and gradient clipping.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::objectives::l2_penalty;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    /// Classical momentum with coefficient `mu` in `[0, 1)`.
    Momentum(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// `eta_t = eta_0 / (1 + eta_0 * lambda * t)`.
    Bottou(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub eta0: f64,
    pub schedule: Schedule,
    /// Global-norm clipping threshold.
    pub clip: Option<f64>,
    /// L2 strength added to every minibatch loss.
    pub l2: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub shuffle: bool,
    pub seed: u64,
    /// Stop after this many epochs without a dev-loss improvement.
    pub patience: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            eta0: 0.1,
            schedule: Schedule::Constant,
            clip: None,
            l2: 0.0,
            minibatch: 1,
            epochs: 10,
            shuffle: true,
            seed: 1,
            patience: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0) {
            return Err(Error::invalid("optimizer", format!("eta0 must be positive, got {}", self.eta0)));
        }
        if let OptimizerKind::Momentum(mu) = self.kind {
            if !(0.0..1.0).contains(&mu) {
                return Err(Error::invalid("optimizer", format!("momentum {mu} outside [0, 1)")));
            }
        }
        if let Schedule::Bottou(l) = self.schedule {
            if !(l >= 0.0) {
                return Err(Error::invalid("optimizer", format!("schedule lambda {l} is negative")));
            }
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::invalid("optimizer", format!("clip threshold {c} must be positive")));
            }
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::invalid("optimizer", "l2 must be non-negative"));
        }
        if self.minibatch == 0 {
            return Err(Error::invalid("optimizer", "minibatch size must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate after `t` updates.
pub fn lr_at(config: &OptimizerConfig, t: usize) -> f64 {
    match config.schedule {
        Schedule::Constant => config.eta0,
        Schedule::Bottou(lambda) => config.eta0 / (1.0 + config.eta0 * lambda * t as f64),
    }
}

/// Rescales `grads` to norm `threshold` when its global norm exceeds it.
/// Returns the norm before clipping.
pub fn clip(grads: &mut Gradients, threshold: f64) -> f64 {
    let norm = grads.norm();
    if norm > threshold {
        grads.scale(threshold / norm);
    }
    norm
}

fn check_finite(grads: &Gradients) -> Result<()> {
    for (name, g) in &grads.params {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    for (table, rows) in &grads.lookups {
        for (row, g) in rows {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{table}[{row}]")));
            }
        }
    }
    Ok(())
}

/// `theta <- theta - eta * g` for trainable parameters and the lookup rows
/// present in `grads`.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, eta: f64) -> Result<()> {
    check_finite(grads)?;
    for (name, g) in &grads.params {
        if store.param_entry(name)?.trainable {
            store.param_mut(name)?.add_scaled(g, -eta)?;
        }
    }
    for (table, rows) in &grads.lookups {
        let t = store.lookup_mut(table)?;
        if !t.trainable {
            continue;
        }
        for (&row, g) in rows {
            for (w, d) in t.matrix_mut().row_slice_mut(row).iter_mut().zip(g) {
                *w -= eta * d;
            }
        }
    }
    Ok(())
}

/// Stateful update rule: schedule position and momentum velocities.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// Updates applied so far.
    pub t: usize,
    velocity: BTreeMap<String, Tensor>,
    lookup_velocity: BTreeMap<(String, usize), Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            t: 0,
            velocity: BTreeMap::new(),
            lookup_velocity: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        lr_at(&self.config, self.t)
    }

    /// Clips if configured, applies one update and advances the schedule.
    /// Returns the learning rate used.
    pub fn step(&mut self, store: &mut ParamStore, mut grads: Gradients) -> Result<f64> {
        check_finite(&grads)?;
        if let Some(c) = self.config.clip {
            clip(&mut grads, c);
        }
        let eta = self.lr();
        match self.config.kind {
            OptimizerKind::Sgd => sgd_step(store, &grads, eta)?,
            OptimizerKind::Momentum(mu) => self.momentum_step(store, &grads, eta, mu)?,
        }
        self.t += 1;
        Ok(eta)
    }

    // v <- mu v - eta g; theta <- theta + v. Lookup velocities only move
    // for rows present in the gradient.
    fn momentum_step(&mut self, store: &mut ParamStore, grads: &Gradients, eta: f64, mu: f64) -> Result<()> {
        for (name, g) in &grads.params {
            if !store.param_entry(name)?.trainable {
                continue;
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            v.scale(mu);
            v.add_scaled(g, -eta)?;
            store.param_mut(name)?.add_scaled(v, 1.0)?;
        }
        for (table, rows) in &grads.lookups {
            let t = store.lookup_mut(table)?;
            if !t.trainable {
                continue;
            }
            for (&row, g) in rows {
                let v = self
                    .lookup_velocity
                    .entry((table.clone(), row))
                    .or_insert_with(|| vec![0.0; g.len()]);
                for ((w, vi), d) in t.matrix_mut().row_slice_mut(row).iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = mu * *vi - eta * d;
                    *w += *vi;
                }
            }
        }
        Ok(())
    }
}

/// One row of the metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    /// Learning rate at the end of the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub metrics: Vec<Metric>,
    pub updates: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    /// Tab-separated `epoch split metric value` with a header line.
    pub fn metrics_tsv(&self) -> String {
        let mut out = String::from("epoch\tsplit\tmetric\tvalue\n");
        for m in &self.metrics {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", m.epoch, m.split, m.metric, m.value);
        }
        out
    }
}

type EvalHook<'a> = Box<dyn FnMut(&ParamStore) -> Result<Vec<(String, String, f64)>> + 'a>;

/// Side channels of a training run.
#[derive(Default)]
pub struct TrainLog<'a> {
    /// Print `epoch <n> loss <mean> lr <eta>` per epoch.
    pub verbose: bool,
    /// Rewritten after every epoch.
    pub metrics_path: Option<PathBuf>,
    /// Extra `(split, metric, value)` rows per epoch, e.g. dev accuracy.
    pub evaluate: Option<EvalHook<'a>>,
}

/// Mean builder loss over `data` with evaluation-mode graphs.
pub fn mean_loss<E, B>(store: &ParamStore, data: &[E], builder: &B) -> Result<f64>
where
    B: Fn(&mut Graph, &ParamStore, &E) -> Result<NodeId>,
{
    if data.is_empty() {
        return Err(Error::Empty("mean_loss over no examples"));
    }
    let mut total = 0.0;
    for (i, ex) in data.iter().enumerate() {
        let mut g = Graph::new();
        let wrap = |e| Error::Example {
            index: i,
            source: Box::new(e),
        };
        let loss = builder(&mut g, store, ex).map_err(wrap)?;
        g.forward().map_err(wrap)?;
        total += g.scalar(loss).map_err(wrap)?;
    }
    Ok(total / data.len() as f64)
}

/// One example per update, in the given order, with a constant rate.
pub fn online_sgd<E, B>(store: &mut ParamStore, data: &[E], builder: &B, eta: f64, epochs: usize) -> Result<()>
where
    B: Fn(&mut Graph, &ParamStore, &E) -> Result<NodeId>,
{
    for _ in 0..epochs {
        for (i, ex) in data.iter().enumerate() {
            let wrap = |e| Error::Example {
                index: i,
                source: Box::new(e),
            };
            let mut g = Graph::new();
            let loss = builder(&mut g, store, ex).map_err(wrap)?;
            g.backward(loss).map_err(wrap)?;
            sgd_step(store, &g.gradients(), eta).map_err(wrap)?;
        }
    }
    Ok(())
}

/// Minibatch SGD: each batch shares one graph whose loss is the average of
/// the example losses (plus the L2 term), one update per batch.
pub fn train<E, B>(
    store: &mut ParamStore,
    train_set: &[E],
    dev: &[E],
    builder: B,
    config: &OptimizerConfig,
    log: &mut TrainLog<'_>,
) -> Result<TrainReport>
where
    B: Fn(&mut Graph, &ParamStore, &E) -> Result<NodeId>,
{
    let mut opt = Optimizer::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();
    let mut best_dev = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for batch in order.chunks(config.minibatch) {
            let mut g = Graph::training(rng.random());
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let loss = builder(&mut g, store, &train_set[i]).map_err(|e| Error::Example {
                    index: i,
                    source: Box::new(e),
                })?;
                losses.push(loss);
            }
            let first = batch[0];
            let wrap = |e| Error::Example {
                index: first,
                source: Box::new(e),
            };
            g.forward().map_err(wrap)?;
            for &l in &losses {
                total += g.scalar(l).map_err(wrap)?;
            }
            let mut objective = if losses.len() == 1 { losses[0] } else { g.avg_nodes(&losses).map_err(wrap)? };
            if config.l2 > 0.0 {
                let pen = l2_penalty(&mut g, store, config.l2).map_err(wrap)?;
                objective = g.add(objective, pen).map_err(wrap)?;
            }
            g.backward(objective).map_err(wrap)?;
            opt.step(store, g.gradients()).map_err(wrap)?;
        }
        let train_loss = if train_set.is_empty() { 0.0 } else { total / train_set.len() as f64 };
        let dev_loss = if dev.is_empty() { None } else { Some(mean_loss(store, dev, &builder)?) };
        let stats = EpochStats {
            epoch,
            train_loss,
            dev_loss,
            lr: opt.lr(),
        };
        if log.verbose {
            println!("epoch {} loss {:.6} lr {:.6}", epoch, train_loss, stats.lr);
        }
        report.metrics.push(Metric {
            epoch,
            split: "train".into(),
            metric: "loss".into(),
            value: train_loss,
        });
        if let Some(d) = dev_loss {
            report.metrics.push(Metric {
                epoch,
                split: "dev".into(),
                metric: "loss".into(),
                value: d,
            });
        }
        if let Some(eval) = log.evaluate.as_mut() {
            for (split, metric, value) in eval(store)? {
                report.metrics.push(Metric {
                    epoch,
                    split,
                    metric,
                    value,
                });
            }
        }
        report.epochs.push(stats);
        if let Some(path) = &log.metrics_path {
            fs::write(path, report.metrics_tsv()).map_err(|e| Error::io(path, e))?;
        }
        if let (Some(p), Some(d)) = (config.patience, dev_loss) {
            if d < best_dev {
                best_dev = d;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= p {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    report.updates = opt.t;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitSpec;
    use proptest::prelude::*;

    fn theta_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.add_param("theta", 1, 1, InitSpec::Constant(v)).unwrap();
        s
    }

    fn grads_of(name: &str, v: Vec<f64>) -> Gradients {
        let mut g = Gradients::default();
        let n = v.len();
        g.add_param(name, &Tensor::from_vec(1, n, v).unwrap());
        g
    }

    #[test]
    fn sgd_step_examples() {
        let mut s = theta_store(1.0);
        sgd_step(&mut s, &grads_of("theta", vec![2.0]), 0.1).unwrap();
        assert!((s.param("theta").unwrap().item() - 0.8).abs() < 1e-15);
        let before = s.clone();
        sgd_step(&mut s, &grads_of("theta", vec![0.0]), 0.1).unwrap();
        assert_eq!(s, before);
        assert!(matches!(
            sgd_step(&mut s, &grads_of("theta", vec![f64::NAN]), 0.1),
            Err(Error::NonFiniteGradient(n)) if n == "theta"
        ));
        s.set_trainable("theta", false).unwrap();
        sgd_step(&mut s, &grads_of("theta", vec![5.0]), 0.1).unwrap();
        assert_eq!(s.param("theta").unwrap(), before.param("theta").unwrap());
    }

    #[test]
    fn untouched_lookup_rows_stay() {
        let mut s = ParamStore::new(3);
        s.add_lookup("w", 4, 2, InitSpec::Xavier).unwrap();
        let before = s.lookup("w").unwrap().matrix().clone();
        let mut g = Gradients::default();
        g.add_lookup_row("w", 2, &[1.0, -1.0]);
        sgd_step(&mut s, &g, 0.5).unwrap();
        let after = s.lookup("w").unwrap().matrix();
        for r in 0..6 {
            if r != 2 {
                assert_eq!(after.row_slice(r), before.row_slice(r));
            }
        }
        assert_eq!(after.get(2, 0), before.get(2, 0) - 0.5);
    }

    #[test]
    fn quadratic_descent() {
        let mut s = theta_store(1.0);
        let builder = |g: &mut Graph, s: &ParamStore, _: &()| {
            let t = g.parameter(s, "theta")?;
            g.cmul(t, t)
        };
        let mut prev = 1.0;
        for step in 0..50 {
            online_sgd(&mut s, &[()], &builder, 0.1, 1).unwrap();
            let v = s.param("theta").unwrap().item();
            if step == 0 {
                assert!((v - 0.8).abs() < 1e-15);
            }
            assert!(v < prev && v > 0.0);
            prev = v;
        }
    }

    #[test]
    fn clip_examples() {
        let mut g = grads_of("a", vec![6.0, 8.0]);
        assert_eq!(clip(&mut g, 5.0), 10.0);
        assert_eq!(g.param("a").unwrap().data(), &[3.0, 4.0]);
        let mut g = grads_of("a", vec![1.8, 2.4]);
        let before = g.clone();
        clip(&mut g, 5.0);
        assert_eq!(g, before);
        let mut z = grads_of("a", vec![0.0, 0.0]);
        clip(&mut z, 5.0);
        assert_eq!(z.param("a").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn schedule_examples() {
        let c = OptimizerConfig {
            eta0: 0.1,
            schedule: Schedule::Bottou(1.0),
            ..Default::default()
        };
        assert_eq!(lr_at(&c, 0), 0.1);
        assert!((lr_at(&c, 90) - 0.01).abs() < 1e-15);
        let k = OptimizerConfig::default();
        assert!((0..100).all(|t| lr_at(&k, t) == k.eta0));
    }

    #[test]
    fn config_validation() {
        let bad = [
            OptimizerConfig { eta0: 0.0, ..Default::default() },
            OptimizerConfig { kind: OptimizerKind::Momentum(1.0), ..Default::default() },
            OptimizerConfig { clip: Some(0.0), ..Default::default() },
            OptimizerConfig { minibatch: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(Optimizer::new(c).is_err());
        }
    }

    /// Least squares on a few points, with a lookup table in the loop.
    fn regression() -> (ParamStore, Vec<(usize, f64)>) {
        let mut s = ParamStore::new(4);
        s.add_lookup("x", 5, 3, InitSpec::Xavier).unwrap();
        s.add_param("w", 3, 1, InitSpec::Xavier).unwrap();
        let data = vec![(0, 1.0), (1, -0.5), (2, 0.25), (3, 2.0), (4, 0.0), (1, -0.5)];
        (s, data)
    }

    fn reg_loss(g: &mut Graph, s: &ParamStore, ex: &(usize, f64)) -> Result<NodeId> {
        let x = g.lookup(s, "x", ex.0)?;
        let w = g.parameter(s, "w")?;
        let y = g.matmul(x, w)?;
        let d = g.scalar_add(y, -ex.1)?;
        g.cmul(d, d)
    }

    #[test]
    fn minibatch_of_one_is_online_sgd() {
        let (mut a, data) = regression();
        let mut b = a.clone();
        let config = OptimizerConfig {
            eta0: 0.05,
            minibatch: 1,
            epochs: 7,
            shuffle: false,
            ..Default::default()
        };
        train(&mut a, &data, &[], reg_loss, &config, &mut TrainLog::default()).unwrap();
        online_sgd(&mut b, &data, &reg_loss, 0.05, 7).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn duplicated_pair_matches_single_example() {
        let (mut a, _) = regression();
        let mut b = a.clone();
        let config = |m| OptimizerConfig {
            eta0: 0.05,
            minibatch: m,
            epochs: 1,
            shuffle: false,
            ..Default::default()
        };
        train(&mut a, &[(2, 0.25), (2, 0.25)], &[], reg_loss, &config(2), &mut TrainLog::default()).unwrap();
        train(&mut b, &[(2, 0.25)], &[], reg_loss, &config(1), &mut TrainLog::default()).unwrap();
        for (x, y) in a.param("w").unwrap().data().iter().zip(b.param("w").unwrap().data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op_and_seeds_reproduce() {
        let (mut a, data) = regression();
        let before = a.clone();
        let mut config = OptimizerConfig {
            epochs: 0,
            ..Default::default()
        };
        train(&mut a, &data, &data, reg_loss, &config, &mut TrainLog::default()).unwrap();
        assert_eq!(a, before);

        config.epochs = 5;
        config.minibatch = 2;
        config.schedule = Schedule::Bottou(0.5);
        config.kind = OptimizerKind::Momentum(0.9);
        config.clip = Some(1.0);
        config.l2 = 1e-3;
        let dir = tempfile::tempdir().unwrap();
        let run = |path: PathBuf| {
            let (mut s, data) = regression();
            let mut log = TrainLog {
                metrics_path: Some(path.clone()),
                ..Default::default()
            };
            let r = train(&mut s, &data, &data, reg_loss, &config, &mut log).unwrap();
            (s, r, std::fs::read_to_string(path).unwrap())
        };
        let (s1, r1, m1) = run(dir.path().join("a.tsv"));
        let (s2, r2, m2) = run(dir.path().join("b.tsv"));
        assert_eq!(s1, s2);
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        assert!(m1.starts_with("epoch\tsplit\tmetric\tvalue\n1\ttrain\tloss\t"));
        assert_eq!(r1.updates, 15);
        assert!(r1.last().unwrap().dev_loss.unwrap() < r1.epochs[0].dev_loss.unwrap());
    }

    #[test]
    fn momentum_zero_is_plain_sgd() {
        let (mut a, data) = regression();
        let mut b = a.clone();
        let base = OptimizerConfig {
            epochs: 4,
            minibatch: 2,
            ..Default::default()
        };
        let mom = OptimizerConfig {
            kind: OptimizerKind::Momentum(0.0),
            ..base.clone()
        };
        train(&mut a, &data, &[], reg_loss, &base, &mut TrainLog::default()).unwrap();
        train(&mut b, &data, &[], reg_loss, &mom, &mut TrainLog::default()).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn builder_errors_name_the_example() {
        let (mut s, data) = regression();
        let failing = |g: &mut Graph, s: &ParamStore, ex: &(usize, f64)| {
            if ex.0 == 3 {
                return Err(Error::invalid("test", "boom"));
            }
            reg_loss(g, s, ex)
        };
        let config = OptimizerConfig {
            shuffle: false,
            ..Default::default()
        };
        let err = train(&mut s, &data, &[], failing, &config, &mut TrainLog::default()).unwrap_err();
        assert!(matches!(err, Error::Example { index: 3, .. }));
    }

    #[test]
    fn patience_stops_early() {
        let (mut s, data) = regression();
        let config = OptimizerConfig {
            eta0: 5.0,
            epochs: 50,
            patience: Some(2),
            clip: Some(1e-3),
            ..Default::default()
        };
        // a constant dev loss never improves after the first epoch
        let dev = |g: &mut Graph, s: &ParamStore, ex: &(usize, f64)| {
            let l = reg_loss(g, s, ex)?;
            g.scale(l, 0.0)
        };
        let r = train(&mut s, &data, &data, dev, &config, &mut TrainLog::default()).unwrap();
        assert!(r.stopped_early);
        assert_eq!(r.epochs.len(), 3);
    }

    proptest! {
        #[test]
        fn clip_bounds_norm(v in prop::collection::vec(-1e3f64..1e3, 1..20), w in prop::collection::vec(-1e3f64..1e3, 1..5), t in 1e-3f64..1e2) {
            let mut g = grads_of("a", v);
            g.add_lookup_row("tbl", 3, &w);
            let before = g.norm();
            clip(&mut g, t);
            prop_assert!(g.norm() <= t + 1e-12);
            if before <= t {
                prop_assert_eq!(g.norm(), before);
            }
        }
    }
}
