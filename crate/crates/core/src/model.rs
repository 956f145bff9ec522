//! Parameter store shared by all per-example graphs, plus model files.
//!
//! Model file layout (text):
//!
//! ```text
//! NNLP1
//! P <name> <rows> <cols>
//! <rows lines of cols space-separated floats>
//! L <name> <rows> <cols> <unk-index> <pad-index>
//! <rows lines ...>
//! ```
//!
//! Floats are written with 17 significant digits so loading is value-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "NNLP1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitSpec {
    /// Uniform in `±sqrt(6)/sqrt(d_in + d_out)`, with `d_in = rows`, `d_out = cols`.
    Xavier,
    /// Zero-mean Gaussian with std `sqrt(2 / d_in)`, `d_in = rows`.
    He,
    /// Uniform in `±1/(2d)`, `d = cols`.
    Word2VecUniform,
    Constant(f64),
    Identity,
}

impl InitSpec {
    pub fn xavier_bound(d_in: usize, d_out: usize) -> f64 {
        6f64.sqrt() / ((d_in + d_out) as f64).sqrt()
    }

    pub fn he_std(d_in: usize) -> f64 {
        (2.0 / d_in as f64).sqrt()
    }

    pub fn word2vec_bound(dim: usize) -> f64 {
        1.0 / (2.0 * dim as f64)
    }

    pub fn sample(self, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n = rows * cols;
        let data: Vec<f64> = match self {
            InitSpec::Xavier => {
                let b = Self::xavier_bound(rows, cols);
                uniform(b, n, rng)?
            }
            InitSpec::He => {
                let dist = Normal::new(0.0, Self::he_std(rows))
                    .map_err(|e| Error::invalid("he init", e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            InitSpec::Word2VecUniform => uniform(Self::word2vec_bound(cols), n, rng)?,
            InitSpec::Constant(c) => vec![c; n],
            InitSpec::Identity => {
                if rows != cols {
                    return Err(Error::invalid("identity init", format!("{rows}x{cols} is not square")));
                }
                return Ok(Tensor::identity(rows));
            }
        };
        Tensor::from_vec(rows, cols, data)
    }
}

fn uniform(bound: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid("uniform init", e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Embedding matrix `E` with one row per vocabulary entry plus reserved
/// `*UNK*` and `*PAD*` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    matrix: Tensor,
    unk: usize,
    pad: usize,
    pub trainable: bool,
}

impl LookupTable {
    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn unk(&self) -> usize {
        self.unk
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    /// Maps out-of-range indices to `*UNK*`.
    pub fn resolve(&self, index: usize) -> usize {
        if index < self.matrix.rows() {
            index
        } else {
            self.unk
        }
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.matrix.row_slice(self.resolve(index))
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Tensor {
        &mut self.matrix
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    lookups: BTreeMap<String, LookupTable>,
    /// L2 coefficient used by training when no explicit one is configured.
    pub l2_lambda: f64,
    /// Whether the L2 penalty also covers lookup tables.
    pub l2_include_lookups: bool,
    seed: u64,
    rng: ChaCha8Rng,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.lookups == other.lookups
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            lookups: BTreeMap::new(),
            l2_lambda: 0.0,
            l2_include_lookups: false,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn check_name(&self, name: &str) -> Result<()> {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::invalid("param store", format!("invalid name `{name}`")));
        }
        if self.params.contains_key(name) || self.lookups.contains_key(name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, rows: usize, cols: usize, init: InitSpec) -> Result<()> {
        self.check_name(name)?;
        let value = init.sample(rows, cols, &mut self.rng)?;
        self.params.insert(
            name.to_string(),
            Param {
                value,
                trainable: true,
            },
        );
        Ok(())
    }

    /// Adds a `(vocab + 2) x dim` table; row `vocab` is `*UNK*` (initialized
    /// like any word) and row `vocab + 1` is `*PAD*` (zeros).
    pub fn add_lookup(&mut self, name: &str, vocab: usize, dim: usize, init: InitSpec) -> Result<()> {
        self.check_name(name)?;
        let mut matrix = init.sample(vocab + 2, dim, &mut self.rng)?;
        matrix.row_slice_mut(vocab + 1).iter_mut().for_each(|v| *v = 0.0);
        self.lookups.insert(
            name.to_string(),
            LookupTable {
                matrix,
                unk: vocab,
                pad: vocab + 1,
                trainable: true,
            },
        );
        Ok(())
    }

    /// Registers a prepared tensor, e.g. pre-trained vectors.
    pub fn insert_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.check_name(name)?;
        self.params.insert(
            name.to_string(),
            Param {
                value,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name) || self.lookups.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param_entry(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn lookup(&self, name: &str) -> Result<&LookupTable> {
        self.lookups.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn lookup_mut(&mut self, name: &str) -> Result<&mut LookupTable> {
        self.lookups
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        if let Some(p) = self.params.get_mut(name) {
            p.trainable = trainable;
            return Ok(());
        }
        self.lookup_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn lookup_names(&self) -> impl Iterator<Item = &str> {
        self.lookups.keys().map(String::as_str)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn lookups(&self) -> impl Iterator<Item = (&str, &LookupTable)> {
        self.lookups.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.lookups.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        let write_rows = |out: &mut String, t: &Tensor| {
            for r in 0..t.rows() {
                let line: Vec<String> = t.row_slice(r).iter().map(|v| format!("{v:.16e}")).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        };
        for (name, p) in &self.params {
            let _ = writeln!(out, "P {} {} {}", name, p.value.rows(), p.value.cols());
            write_rows(&mut out, &p.value);
        }
        for (name, t) in &self.lookups {
            let _ = writeln!(
                out,
                "L {} {} {} {} {}",
                name,
                t.matrix.rows(),
                t.matrix.cols(),
                t.unk,
                t.pad
            );
            write_rows(&mut out, &t.matrix);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<ParamStore> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == MAGIC => {}
            Some((_, l)) => return Err(Error::Format(format!("expected `{MAGIC}` header, found `{l}`"))),
            None => return Err(Error::Format("empty model file".into())),
        }
        let mut store = ParamStore::new(0);
        while let Some((ln, header)) = lines.next() {
            if header.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = header.split_whitespace().collect();
            let bad = |msg: &str| Error::Format(format!("line {}: {msg}", ln + 1));
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed number in header"));
            let (kind, name) = match fields.as_slice() {
                [k @ ("P" | "L"), name, ..] => (*k, *name),
                _ => return Err(bad("expected `P` or `L` header")),
            };
            let expected = if kind == "P" { 4 } else { 6 };
            if fields.len() != expected {
                return Err(bad("wrong number of header fields"));
            }
            let rows = num(fields[2])?;
            let cols = num(fields[3])?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (rl, line) = lines.next().ok_or_else(|| bad("truncated tensor"))?;
                let before = data.len();
                for tok in line.split_whitespace() {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| Error::Format(format!("line {}: bad float `{tok}`", rl + 1)))?;
                    data.push(v);
                }
                if data.len() - before != cols {
                    return Err(Error::Format(format!("line {}: expected {cols} values", rl + 1)));
                }
            }
            let tensor = Tensor::from_vec(rows, cols, data)?;
            if store.contains(name) {
                return Err(Error::DuplicateName(name.to_string()));
            }
            if kind == "P" {
                store.insert_param(name, tensor)?;
            } else {
                let unk = num(fields[4])?;
                let pad = num(fields[5])?;
                if unk >= rows || pad >= rows {
                    return Err(bad("reserved index out of range"));
                }
                store.lookups.insert(
                    name.to_string(),
                    LookupTable {
                        matrix: tensor,
                        unk,
                        pad,
                        trainable: true,
                    },
                );
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ParamStore::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_param_examples() {
        let mut s = ParamStore::new(5);
        s.add_param("W", 100, 50, InitSpec::Xavier).unwrap();
        let b = InitSpec::xavier_bound(100, 50);
        assert!((b - 0.2).abs() < 1e-4);
        assert!(s.param("W").unwrap().data().iter().all(|v| v.abs() <= b));
        s.add_param("b", 1, 20, InitSpec::Constant(0.0)).unwrap();
        assert!(s.param("b").unwrap().data().iter().all(|&v| v == 0.0));
        s.add_param("I", 3, 3, InitSpec::Identity).unwrap();
        assert_eq!(s.param("I").unwrap(), &Tensor::identity(3));
        assert!(matches!(
            s.add_param("W", 1, 1, InitSpec::Xavier),
            Err(Error::DuplicateName(_))
        ));
    }

    #[test]
    fn add_lookup_examples() {
        let mut s = ParamStore::new(5);
        s.add_lookup("words", 100, 50, InitSpec::Word2VecUniform).unwrap();
        let t = s.lookup("words").unwrap();
        assert_eq!(t.matrix().shape(), (102, 50));
        assert_eq!(t.resolve(5000), t.unk());
        assert!(t.row(t.pad()).iter().all(|&v| v == 0.0));
        assert!(t.row(t.unk()).iter().any(|&v| v != 0.0));
        s.add_lookup("w2", 10, 100, InitSpec::Word2VecUniform).unwrap();
        assert!(s.lookup("w2").unwrap().matrix().data().iter().all(|v| v.abs() <= 0.005));
        // names are unique across params and tables
        assert!(s.add_param("words", 1, 1, InitSpec::Xavier).is_err());
    }

    #[test]
    fn same_seed_same_init() {
        let mk = || {
            let mut s = ParamStore::new(42);
            s.add_param("W", 4, 4, InitSpec::He).unwrap();
            s.add_lookup("E", 3, 2, InitSpec::Word2VecUniform).unwrap();
            s
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut s = ParamStore::new(9);
        s.add_param("W1", 3, 4, InitSpec::Xavier).unwrap();
        s.add_param("b1", 1, 4, InitSpec::He).unwrap();
        s.add_lookup("words", 5, 3, InitSpec::Word2VecUniform).unwrap();
        s.param_mut("b1").unwrap().data_mut()[0] = 1.0 / 3.0;
        let back = ParamStore::from_text(&s.to_text()).unwrap();
        assert_eq!(back, s);
        for (a, b) in back.param("b1").unwrap().data().iter().zip(s.param("b1").unwrap().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let empty = ParamStore::new(0);
        assert!(ParamStore::from_text(&empty.to_text()).unwrap().is_empty());
    }

    #[test]
    fn load_rejects_bad_files() {
        assert!(matches!(ParamStore::from_text("NNLP0\n"), Err(Error::Format(_))));
        assert!(ParamStore::from_text("NNLP1\nP W 2 2\n1 2\n").is_err());
        assert!(ParamStore::from_text("NNLP1\nP W 1 2\n1 x\n").is_err());
        assert!(ParamStore::from_text("NNLP1\nQ W 1 2\n1 2\n").is_err());
        assert!(ParamStore::from_text("NNLP1\nL E 2 1 5 1\n1\n2\n").is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nnlp");
        let mut s = ParamStore::new(1);
        s.add_param("W", 2, 2, InitSpec::Xavier).unwrap();
        s.save(&path).unwrap();
        assert_eq!(ParamStore::load(&path).unwrap(), s);
        assert!(matches!(ParamStore::load(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
