//! Dense 2-D tensors of `f64`, stored row-major.
//!
//! Vectors are `1 x d` row vectors throughout, so a layer is `x W + b`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self.get(r, c))?;
            }
        }
        write!(f, "]")
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "{} values cannot fill a {}x{} tensor",
                    data.len(),
                    rows,
                    cols
                ),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// A `1 x n` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::row(vec![v])
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn ewise(&self, op: EwiseOp, other: Option<&Tensor>) -> Result<Tensor> {
        match (op, other) {
            (EwiseOp::Unary(u), None) => Ok(self.map(|v| u.apply(v))),
            (EwiseOp::Binary(b), Some(o)) => self.zip_with(o, b.name(), |x, y| b.apply(x, y)),
            (EwiseOp::Unary(_), Some(_)) => Err(Error::Arity {
                op: "ewise",
                expected: "1".into(),
                got: 2,
            }),
            (EwiseOp::Binary(_), None) => Err(Error::Arity {
                op: "ewise",
                expected: "2".into(),
                got: 1,
            }),
        }
    }

    /// `self += scale * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add_scaled",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Concatenates row vectors left to right.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols needs at least one part"));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            if p.rows != 1 {
                return Err(Error::invalid(
                    "concat_cols",
                    format!("expected row vectors, got {}x{}", p.rows, p.cols),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::row(data))
    }

    /// Stacks tensors sharing a column count top to bottom.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat_rows needs at least one part"))?;
        let cols = first.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Columns `start..start+len` of a row vector.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.rows != 1 || start + len > self.cols {
            return Err(Error::invalid(
                "slice_cols",
                format!("cannot take [{start}, {}) of a {}x{} tensor", start + len, self.rows, self.cols),
            ));
        }
        Ok(Tensor::row(self.data[start..start + len].to_vec()))
    }

    pub fn reduce(&self, kind: Reduce) -> Result<Reduced> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Empty("reduce over an empty tensor"));
        }
        let mut out = Tensor::zeros(1, self.cols);
        match kind {
            Reduce::Sum | Reduce::Avg => {
                for r in 0..self.rows {
                    for (o, v) in out.data.iter_mut().zip(self.row_slice(r)) {
                        *o += v;
                    }
                }
                if kind == Reduce::Avg {
                    out.scale(1.0 / self.rows as f64);
                }
                Ok(Reduced { value: out, argmax: None })
            }
            Reduce::Max => {
                let mut arg = vec![0usize; self.cols];
                out.data.copy_from_slice(self.row_slice(0));
                for r in 1..self.rows {
                    for c in 0..self.cols {
                        // strict comparison keeps the lowest row on ties
                        let v = self.get(r, c);
                        if v > out.data[c] {
                            out.data[c] = v;
                            arg[c] = r;
                        }
                    }
                }
                Ok(Reduced { value: out, argmax: Some(arg) })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Avg,
    /// Per-column maximum over rows.
    Max,
}

#[derive(Debug, Clone)]
pub struct Reduced {
    pub value: Tensor,
    /// Winning row per column, for `Reduce::Max` only.
    pub argmax: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Sigmoid,
    Tanh,
    HardTanh,
    Relu,
    Cube,
    TanhCube,
}

impl UnaryOp {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::HardTanh => x.clamp(-1.0, 1.0),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Cube => x * x * x,
            UnaryOp::TanhCube => (x * x * x + x).tanh(),
        }
    }

    /// Derivative expressed through the input `x` and the output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Exp => y,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::HardTanh => {
                if x > -1.0 && x < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Cube => 3.0 * x * x,
            UnaryOp::TanhCube => (1.0 - y * y) * (3.0 * x * x + 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Tanh => "tanh",
            UnaryOp::HardTanh => "hardtanh",
            UnaryOp::Relu => "relu",
            UnaryOp::Cube => "cube",
            UnaryOp::TanhCube => "tanhcube",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwiseOp {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

impl FromStr for EwiseOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => EwiseOp::Binary(BinaryOp::Add),
            "sub" => EwiseOp::Binary(BinaryOp::Sub),
            "mul" => EwiseOp::Binary(BinaryOp::Mul),
            "neg" => EwiseOp::Unary(UnaryOp::Neg),
            "exp" => EwiseOp::Unary(UnaryOp::Exp),
            "sigmoid" => EwiseOp::Unary(UnaryOp::Sigmoid),
            "tanh" => EwiseOp::Unary(UnaryOp::Tanh),
            "hardtanh" => EwiseOp::Unary(UnaryOp::HardTanh),
            "relu" => EwiseOp::Unary(UnaryOp::Relu),
            "cube" => EwiseOp::Unary(UnaryOp::Cube),
            "tanhcube" => EwiseOp::Unary(UnaryOp::TanhCube),
            other => return Err(Error::invalid("ewise", format!("unknown op tag `{other}`"))),
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
        let v = Tensor::row(vec![1.0, 2.0, 3.0]);
        let ones = Tensor::filled(3, 1, 1.0);
        assert_eq!(v.matmul(&ones).unwrap().data(), &[6.0]);
        let x = Tensor::zeros(1, 4);
        assert_eq!(x.matmul(&Tensor::zeros(4, 6)).unwrap().shape(), (1, 6));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let err = Tensor::zeros(1, 3).matmul(&Tensor::zeros(2, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 3)") && msg.contains("(2, 2)"), "{msg}");
    }

    #[test]
    fn ewise_examples() {
        let add: EwiseOp = "add".parse().unwrap();
        let mul: EwiseOp = "mul".parse().unwrap();
        let neg: EwiseOp = "neg".parse().unwrap();
        let a = Tensor::row(vec![1.0, 2.0]);
        assert_eq!(a.ewise(add, Some(&Tensor::zeros(1, 2))).unwrap(), a);
        let p = Tensor::row(vec![2.0, 3.0])
            .ewise(mul, Some(&Tensor::row(vec![4.0, 5.0])))
            .unwrap();
        assert_eq!(p.data(), &[8.0, 15.0]);
        let n = Tensor::row(vec![1.0, -1.0]).ewise(neg, None).unwrap();
        assert_eq!(n.data(), &[-1.0, 1.0]);
        assert!("sqrt".parse::<EwiseOp>().is_err());
        assert!(a.ewise(add, Some(&Tensor::zeros(1, 3))).is_err());
    }

    #[test]
    fn concat_examples() {
        let c = Tensor::concat_cols(&[&Tensor::row(vec![1.0, 2.0]), &Tensor::row(vec![3.0])]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0]);
        let v = Tensor::filled(1, 50, 0.5);
        assert_eq!(Tensor::concat_cols(&[&v, &v, &v]).unwrap().shape(), (1, 150));
        assert_eq!(Tensor::concat_cols(&[&v]).unwrap(), v);
        assert!(Tensor::concat_cols(&[]).is_err());
        assert!(Tensor::concat_cols(&[&Tensor::zeros(2, 2)]).is_err());
    }

    #[test]
    fn reduce_examples() {
        let m = Tensor::from_rows(&[
            &[1.0, 2.0, 3.0],
            &[9.0, 6.0, 5.0],
            &[2.0, 3.0, 1.0],
            &[7.0, 8.0, 1.0],
            &[3.0, 4.0, 1.0],
        ]);
        let r = m.reduce(Reduce::Max).unwrap();
        assert_eq!(r.value.data(), &[9.0, 8.0, 5.0]);
        assert_eq!(r.argmax.unwrap(), vec![1, 3, 1]);
        let two = Tensor::from_rows(&[&[0.3, 0.7], &[0.3, 0.7]]);
        assert_eq!(two.reduce(Reduce::Avg).unwrap().value.data(), &[0.3, 0.7]);
        let col = Tensor::from_rows(&[&[1.0], &[2.0], &[3.0]]);
        assert_eq!(col.reduce(Reduce::Sum).unwrap().value.data(), &[6.0]);
        assert!(Tensor::zeros(0, 3).reduce(Reduce::Sum).is_err());
    }

    #[test]
    fn max_ties_pick_lowest_row() {
        let m = Tensor::from_rows(&[&[1.0], &[4.0], &[4.0]]);
        assert_eq!(m.reduce(Reduce::Max).unwrap().argmax.unwrap(), vec![1]);
    }

    fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |d| Tensor::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in tensor(2, 3), b in tensor(3, 4), c in tensor(4, 2)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!((l - r).abs() <= 1e-9 * l.abs().max(r.abs()).max(1.0));
            }
        }

        #[test]
        fn max_matches_brute_force(m in tensor(5, 4)) {
            let r = m.reduce(Reduce::Max).unwrap();
            for c in 0..4 {
                let mut best = f64::NEG_INFINITY;
                for row in 0..5 {
                    best = best.max(m.get(row, c));
                }
                prop_assert_eq!(r.value.get(0, c), best);
            }
        }

        #[test]
        fn concat_then_slice_round_trips(a in tensor(1, 3), b in tensor(1, 5)) {
            let c = Tensor::concat_cols(&[&a, &b]).unwrap();
            prop_assert_eq!(c.slice_cols(0, 3).unwrap(), a);
            prop_assert_eq!(c.slice_cols(3, 5).unwrap(), b);
        }
    }
}
