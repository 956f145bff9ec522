//! WebAssembly bindings for the interactive demo page in `www/`.
//!
//! Each demo is a plain Rust function returning [`nnlp::Result`], wrapped
//! by a `#[wasm_bindgen]` export that turns errors into JS exceptions.

use wasm_bindgen::prelude::*;

use nnlp::encoders::{Activation, Mlp, MlpSpec};
use nnlp::objectives::{loss_node, Gold, LossKind, LossSpec};
use nnlp::optim::{mean_loss, Optimizer, OptimizerConfig};
use nnlp::structured::{ChainScores, ScoredParts};
use nnlp::{synthetic, Error, Graph, NodeId, OpKind, ParamStore, Tensor};

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// XOR classifier trained one epoch batch at a time from the page.
#[wasm_bindgen]
pub struct XorDemo {
    store: ParamStore,
    mlp: Mlp,
    opt: Optimizer,
    epochs: usize,
}

fn xor_loss(g: &mut Graph, s: &ParamStore, mlp: &Mlp, ex: &([f64; 2], usize)) -> nnlp::Result<NodeId> {
    let x = g.input(Tensor::row(ex.0.to_vec()));
    let z = mlp.apply(g, s, x)?;
    let p = g.softmax(z)?;
    loss_node(g, LossSpec::new(LossKind::CrossEntropy), p, &Gold::Index(ex.1))
}

impl XorDemo {
    /// `hidden == 0` gives the linear perceptron.
    pub fn create(hidden: usize, activation: &str, eta: f64, seed: u64) -> nnlp::Result<XorDemo> {
        let mut store = ParamStore::new(seed);
        let spec = if hidden == 0 {
            MlpSpec::perceptron(2, 2)
        } else {
            MlpSpec::mlp1(2, hidden, 2, Activation::parse(activation)?)
        };
        let mlp = Mlp::new(&mut store, "xor", spec)?;
        let opt = Optimizer::new(OptimizerConfig {
            eta0: eta,
            seed,
            ..OptimizerConfig::default()
        })?;
        Ok(XorDemo {
            store,
            mlp,
            opt,
            epochs: 0,
        })
    }

    /// Runs `epochs` passes of online updates and returns the mean loss.
    pub fn run(&mut self, epochs: usize) -> nnlp::Result<f64> {
        let data = synthetic::xor();
        for _ in 0..epochs {
            for ex in &data {
                let mut g = Graph::new();
                let loss = xor_loss(&mut g, &self.store, &self.mlp, ex)?;
                g.backward(loss)?;
                self.opt.step(&mut self.store, g.gradients())?;
            }
            self.epochs += 1;
        }
        let mlp = &self.mlp;
        mean_loss(&self.store, &data, &|g: &mut Graph, s: &ParamStore, ex: &([f64; 2], usize)| {
            xor_loss(g, s, mlp, ex)
        })
    }

    /// Probability of class 1 at `(x, y)`.
    pub fn prob(&self, x: f64, y: f64) -> nnlp::Result<f64> {
        let mut g = Graph::new();
        let input = g.input(Tensor::row(vec![x, y]));
        let z = self.mlp.apply(&mut g, &self.store, input)?;
        let p = g.softmax(z)?;
        g.forward()?;
        Ok(g.value(p)?.data()[1])
    }

    /// Row-major `size x size` grid of class-1 probabilities over `[-0.5, 1.5]^2`,
    /// first row at the top (`y = 1.5`).
    pub fn surface(&self, size: usize) -> nnlp::Result<Vec<f64>> {
        let step = if size > 1 { 2.0 / (size - 1) as f64 } else { 0.0 };
        let mut out = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                out.push(self.prob(-0.5 + c as f64 * step, 1.5 - r as f64 * step)?);
            }
        }
        Ok(out)
    }

    /// Points classified correctly out of four.
    pub fn correct(&self) -> nnlp::Result<usize> {
        let mut n = 0;
        for (x, y) in synthetic::xor() {
            n += usize::from((self.prob(x[0], x[1])? > 0.5) == (y == 1));
        }
        Ok(n)
    }
}

#[wasm_bindgen]
impl XorDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(hidden: usize, activation: &str, eta: f64, seed: u64) -> Result<XorDemo, JsError> {
        XorDemo::create(hidden, activation, eta, seed).map_err(js)
    }

    pub fn train(&mut self, epochs: usize) -> Result<f64, JsError> {
        self.run(epochs).map_err(js)
    }

    #[wasm_bindgen(js_name = surface)]
    pub fn surface_js(&self, size: usize) -> Result<Vec<f64>, JsError> {
        self.surface(size).map_err(js)
    }

    #[wasm_bindgen(js_name = correct)]
    pub fn correct_js(&self) -> Result<usize, JsError> {
        self.correct().map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn epochs(&self) -> usize {
        self.epochs
    }
}

/// Order-preserving k-max pooling over the columns of a row-major matrix;
/// the `k` selected rows are concatenated.
pub fn kmax(values: &[f64], rows: usize, cols: usize, k: usize) -> nnlp::Result<Vec<f64>> {
    if k == 0 || k > rows {
        return Err(Error::invalid("kmax", format!("k = {k} with {rows} rows")));
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(rows, cols, values.to_vec())?);
    let y = g.add_node(OpKind::KMaxPoolRows(k), &[x])?;
    g.forward()?;
    Ok(g.value(y)?.data().to_vec())
}

#[wasm_bindgen(js_name = kmaxPool)]
pub fn kmax_pool(values: Vec<f64>, rows: usize, cols: usize, k: usize) -> Result<Vec<f64>, JsError> {
    kmax(&values, rows, cols, k).map_err(js)
}

/// Number of convolution windows over `n` words with window `k`.
#[wasm_bindgen(js_name = windowCount)]
pub fn window_count(n: usize, k: usize, wide: bool) -> usize {
    let mode = if wide { nnlp::encoders::ConvMode::Wide } else { nnlp::encoders::ConvMode::Narrow };
    nnlp::encoders::window_count(n, k, mode).unwrap_or(0)
}

/// Viterbi path, its score, `log Z` and per-position label marginals of a
/// linear-chain CRF.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDecoding {
    path: Vec<u32>,
    score: f64,
    log_partition: f64,
    marginals: Vec<f64>,
}

#[wasm_bindgen]
impl ChainDecoding {
    #[wasm_bindgen(getter)]
    pub fn path(&self) -> Vec<u32> {
        self.path.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn score(&self) -> f64 {
        self.score
    }

    #[wasm_bindgen(getter, js_name = logPartition)]
    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    /// Row-major `n x labels`.
    #[wasm_bindgen(getter)]
    pub fn marginals(&self) -> Vec<f64> {
        self.marginals.clone()
    }
}

/// Marginals are the gradient of `log Z` with respect to the emission scores.
pub fn decode(emissions: &[f64], transitions: &[f64], labels: usize) -> nnlp::Result<ChainDecoding> {
    if labels == 0 || emissions.is_empty() || !emissions.len().is_multiple_of(labels) {
        return Err(Error::invalid("crf", "emissions must be a nonempty n x labels table"));
    }
    if transitions.len() != labels * labels {
        return Err(Error::invalid("crf", "transitions must be labels x labels"));
    }
    let n = emissions.len() / labels;
    let scores = ChainScores {
        emissions: emissions.chunks(labels).map(<[f64]>::to_vec).collect(),
        transitions: transitions.chunks(labels).map(<[f64]>::to_vec).collect(),
    };
    let (path, score) = scores.viterbi();

    let mut g = Graph::new();
    let em: Vec<NodeId> = scores.emissions.iter().map(|e| g.input(Tensor::row(e.clone()))).collect();
    let tr = (n > 1).then(|| g.input(Tensor::from_vec(labels, labels, transitions.to_vec()).expect("checked size")));
    let parts = ScoredParts {
        emissions: em.clone(),
        transitions: tr,
        labels,
    };
    let z = parts.log_partition(&mut g)?;
    g.backward(z)?;
    let log_partition = g.scalar(z)?;
    let mut marginals = Vec::with_capacity(n * labels);
    for e in em {
        marginals.extend_from_slice(g.grad(e)?.data());
    }
    Ok(ChainDecoding {
        path: path.into_iter().map(|l| l as u32).collect(),
        score,
        log_partition,
        marginals,
    })
}

#[wasm_bindgen(js_name = crfDecode)]
pub fn crf_decode(emissions: Vec<f64>, transitions: Vec<f64>, labels: usize) -> Result<ChainDecoding, JsError> {
    decode(&emissions, &transitions, labels).map_err(js)
}
