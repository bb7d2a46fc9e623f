//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] records operations on [`Var`] handles; [`Graph::backward`]
//! returns the gradient of a scalar output with respect to every node.
//! Parameters live in a [`Params`] store and are referenced, not copied, by
//! the graph. Everything is `f64`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;

pub const WTS_HEADER: &str = "m3-wts v1";
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (r x k) * b (k x c)`.
pub fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a * b^T`.
fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * b`.
fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let brow = b.row(k);
        for i in 0..a.cols {
            let av = a.data[k * a.cols + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub usize);

/// Named parameter tensors with matching gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform Glorot initialization.
    pub fn add_glorot(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        self.add(name, Tensor { rows, cols, data })
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    /// Embedding table whose row `i` is drawn from a generator seeded by
    /// hashing `(seed, labels[i])`, so rows depend only on the symbol.
    pub fn add_symbol_table(
        &mut self,
        name: &str,
        labels: &[&str],
        width: usize,
        seed: u64,
    ) -> ParamId {
        let scale = 1.0 / (width as f64).sqrt();
        let mut data = Vec::with_capacity(labels.len() * width);
        for label in labels {
            let digest = Sha256::digest(format!("{seed}:{name}:{label}").as_bytes());
            let mut s = [0u8; 32];
            s.copy_from_slice(&digest);
            let mut rng = ChaCha8Rng::from_seed(s);
            data.extend((0..width).map(|_| rng.gen_range(-scale..scale)));
        }
        self.add(
            name,
            Tensor {
                rows: labels.len(),
                cols: width,
                data,
            },
        )
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.values
            .iter()
            .map(|v| Tensor::zeros(v.rows, v.cols))
            .collect()
    }

    /// `m3-wts v1` text: one header line per block followed by its values.
    pub fn to_text(&self) -> String {
        let mut s = format!("{WTS_HEADER}\n");
        for (name, t) in self.names.iter().zip(&self.values) {
            let _ = writeln!(s, "param {name} {} {}", t.rows, t.cols);
            let vals: Vec<String> = t.data.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(s, "{}", vals.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Params> {
        let mut lines = text.lines();
        if lines.next() != Some(WTS_HEADER) {
            return Err(Error::Parse(format!("missing `{WTS_HEADER}` header")));
        }
        let mut p = Params::new();
        while let Some(head) = lines.next() {
            let parts: Vec<&str> = head.split_whitespace().collect();
            let [kind, name, rows, cols] = parts[..] else {
                return Err(Error::Parse(format!("bad parameter header `{head}`")));
            };
            if kind != "param" {
                return Err(Error::Parse(format!("bad parameter header `{head}`")));
            }
            let rows: usize = rows.parse().map_err(|_| Error::Parse(head.to_string()))?;
            let cols: usize = cols.parse().map_err(|_| Error::Parse(head.to_string()))?;
            let body = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing values for `{name}`")))?;
            let data: Vec<f64> = body
                .split_whitespace()
                .map(|v| {
                    v.parse()
                        .map_err(|_| Error::Parse(format!("bad value `{v}` in `{name}`")))
                })
                .collect::<Result<_>>()?;
            p.add(name, Tensor::from_vec(rows, cols, data)?);
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_artifact(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Params> {
        let text = io::read_artifact(path, WTS_HEADER)?;
        io::in_file(path, Params::from_text(&text))
    }

    /// Checks that `other` has the same block names and shapes.
    pub fn check_layout(&self, other: &Params) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter names differ".into()));
        }
        for (a, b) in self.values.iter().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::Shape("parameter shapes differ".into()));
            }
        }
        Ok(())
    }
}

/// Sparse constant matrix as `(row, col, weight)` triples.
#[derive(Clone, Debug, PartialEq)]
pub struct Sparse {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias(Var, Var),
    Concat(Vec<Var>),
    AbsDiff(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    MeanRows(Var),
    SumRows(Var),
    Cosine(Var, Var),
    /// Probabilities, targets, per-label weights.
    Bce(Var, Tensor, Option<Tensor>),
    Mse(Var, Var),
    GatherRows(Var, Vec<usize>),
    SpMM(Sparse, Var),
    Scale(Var, f64),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(usize);

/// Recording of one forward pass.
pub struct Graph<'p> {
    params: &'p Params,
    ops: Vec<Op>,
    /// `None` for parameter nodes, whose values live in `params`.
    values: Vec<Option<Tensor>>,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p Params) -> Self {
        Graph {
            params,
            ops: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.values[v.0] {
            Some(t) => t,
            None => match self.ops[v.0] {
                Op::Param(id) => self.params.get(id),
                _ => unreachable!("only parameters are stored by reference"),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.ops.push(op);
        self.values.push(Some(value));
        Var(self.ops.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.ops.push(Op::Param(id));
        self.values.push(None);
        Var(self.ops.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let out = matmul_raw(ta, tb);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    fn zip(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        Ok(Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta
                .data
                .iter()
                .zip(&tb.data)
                .map(|(x, y)| f(*x, *y))
                .collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Adds the `1 x c` row `bias` to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows != 1 || tb.cols != ta.cols {
            return Err(shape_err("add_row_bias", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (o, b) in out.data[r * out.cols..(r + 1) * out.cols]
                .iter_mut()
                .zip(&tb.data)
            {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRowBias(a, bias), out))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| Error::Shape("empty concat".into()))?,
            )
            .rows;
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows != rows {
                return Err(shape_err("concat", (rows, cols), t.shape()));
            }
            cols += t.cols;
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = r * cols;
            for &p in parts {
                let row = self.value(p).row(r);
                out.data[off..off + row.len()].copy_from_slice(row);
                off += row.len();
            }
        }
        Ok(self.push(Op::Concat(parts.to_vec()), out))
    }

    pub fn absdiff(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("absdiff", a, b, |x, y| (x - y).abs())?;
        Ok(self.push(Op::AbsDiff(a, b), out))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data.iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let out = self.map(a, |x| x * f);
        self.push(Op::Scale(a, f), out)
    }

    /// Mean over rows: `r x c` to `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows == 0 {
            return Err(Error::Shape("mean over zero rows".into()));
        }
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (o, x) in out.data.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        let n = t.rows as f64;
        out.data.iter_mut().for_each(|x| *x /= n);
        Ok(self.push(Op::MeanRows(a), out))
    }

    /// Sum over rows: `r x c` to `1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (o, x) in out.data.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        self.push(Op::SumRows(a), out)
    }

    /// Cosine similarity of two equal-shape tensors, read as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("cosine", ta.shape(), tb.shape()));
        }
        let na = ta.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = tb.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroVector);
        }
        let dot: f64 = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Cosine(a, b), Tensor::row_vec(vec![dot / (na * nb)])))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`,
    /// with `p` clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, target: Tensor) -> Result<Var> {
        self.bce_weighted(p, target, None)
    }

    /// [`Graph::bce`] with a per-label weight on each log term.
    pub fn bce_weighted(&mut self, p: Var, target: Tensor, weights: Option<Tensor>) -> Result<Var> {
        let tp = self.value(p);
        if tp.shape() != target.shape() {
            return Err(shape_err("bce", tp.shape(), target.shape()));
        }
        if let Some(w) = &weights {
            if w.shape() != target.shape() {
                return Err(shape_err("bce weights", w.shape(), target.shape()));
            }
        }
        let out = bce_weighted_value(
            &tp.data,
            &target.data,
            weights.as_ref().map(|w| &w.data[..]),
        );
        Ok(self.push(Op::Bce(p, target, weights), Tensor::row_vec(vec![out])))
    }

    /// Mean squared error.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mse", ta.shape(), tb.shape()));
        }
        let n = ta.data.len().max(1) as f64;
        let v = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        Ok(self.push(Op::Mse(a, b), Tensor::row_vec(vec![v])))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows) {
            return Err(Error::Shape(format!("gather row {bad} of {}", t.rows)));
        }
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(t.row(i));
        }
        Ok(self.push(Op::GatherRows(table, idx.to_vec()), out))
    }

    /// Constant sparse matrix times `x`.
    pub fn spmm(&mut self, s: &Sparse, x: Var) -> Result<Var> {
        let t = self.value(x);
        if s.cols != t.rows {
            return Err(shape_err("spmm", (s.rows, s.cols), t.shape()));
        }
        let mut out = Tensor::zeros(s.rows, t.cols);
        for &(i, j, w) in &s.entries {
            let src = t.row(j);
            for (o, v) in out.data[i * t.cols..(i + 1) * t.cols].iter_mut().zip(src) {
                *o += w * v;
            }
        }
        Ok(self.push(Op::SpMM(s.clone(), x), out))
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Grads {
        let mut g: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        let t = self.value(out);
        g[out.0] = Some(Tensor {
            rows: t.rows,
            cols: t.cols,
            data: vec![1.0; t.data.len()],
        });
        for i in (0..=out.0).rev() {
            let Some(gi) = g[i].take() else {
                continue;
            };
            self.backprop(i, &gi, &mut g);
            g[i] = Some(gi);
        }
        Grads { g }
    }

    fn backprop(&self, i: usize, gi: &Tensor, g: &mut [Option<Tensor>]) {
        let acc = |g: &mut [Option<Tensor>], v: Var, d: Tensor| match &mut g[v.0] {
            Some(t) => t.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        let out = self.values[i].as_ref();
        match &self.ops[i] {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(g, *a, matmul_bt(gi, tb));
                acc(g, *b, matmul_at(ta, gi));
            }
            Op::Add(a, b) => {
                acc(g, *a, gi.clone());
                acc(g, *b, gi.clone());
            }
            Op::Sub(a, b) => {
                acc(g, *a, gi.clone());
                let mut neg = gi.clone();
                neg.data.iter_mut().for_each(|x| *x = -*x);
                acc(g, *b, neg);
            }
            Op::AddRowBias(a, b) => {
                acc(g, *a, gi.clone());
                let mut db = Tensor::zeros(1, gi.cols);
                for r in 0..gi.rows {
                    for (o, x) in db.data.iter_mut().zip(gi.row(r)) {
                        *o += x;
                    }
                }
                acc(g, *b, db);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols;
                    let mut d = Tensor::zeros(gi.rows, c);
                    for r in 0..gi.rows {
                        d.data[r * c..(r + 1) * c].copy_from_slice(&gi.row(r)[off..off + c]);
                    }
                    off += c;
                    acc(g, p, d);
                }
            }
            Op::AbsDiff(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let sign: Vec<f64> = ta
                    .data
                    .iter()
                    .zip(&tb.data)
                    .map(|(x, y)| {
                        if x > y {
                            1.0
                        } else if x < y {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let da: Vec<f64> = gi.data.iter().zip(&sign).map(|(g, s)| g * s).collect();
                let db: Vec<f64> = da.iter().map(|x| -x).collect();
                acc(
                    g,
                    *a,
                    Tensor {
                        rows: gi.rows,
                        cols: gi.cols,
                        data: da,
                    },
                );
                acc(
                    g,
                    *b,
                    Tensor {
                        rows: gi.rows,
                        cols: gi.cols,
                        data: db,
                    },
                );
            }
            Op::Sigmoid(a) => {
                let y = out.expect("owned");
                let d = gi
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                acc(
                    g,
                    *a,
                    Tensor {
                        rows: gi.rows,
                        cols: gi.cols,
                        data: d,
                    },
                );
            }
            Op::Tanh(a) => {
                let y = out.expect("owned");
                let d = gi
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                acc(
                    g,
                    *a,
                    Tensor {
                        rows: gi.rows,
                        cols: gi.cols,
                        data: d,
                    },
                );
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = gi
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(
                    g,
                    *a,
                    Tensor {
                        rows: gi.rows,
                        cols: gi.cols,
                        data: d,
                    },
                );
            }
            Op::Scale(a, f) => {
                let d = gi.data.iter().map(|x| x * f).collect();
                acc(
                    g,
                    *a,
                    Tensor {
                        rows: gi.rows,
                        cols: gi.cols,
                        data: d,
                    },
                );
            }
            Op::MeanRows(a) | Op::SumRows(a) => {
                let t = self.value(*a);
                let f = if matches!(self.ops[i], Op::MeanRows(_)) {
                    1.0 / t.rows as f64
                } else {
                    1.0
                };
                let mut d = Tensor::zeros(t.rows, t.cols);
                for r in 0..t.rows {
                    for (o, x) in d.data[r * t.cols..(r + 1) * t.cols]
                        .iter_mut()
                        .zip(&gi.data)
                    {
                        *o = x * f;
                    }
                }
                acc(g, *a, d);
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = out.expect("owned").scalar();
                let na = ta.data.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = tb.data.iter().map(|x| x * x).sum::<f64>().sqrt();
                let s = gi.scalar();
                let da = ta
                    .data
                    .iter()
                    .zip(&tb.data)
                    .map(|(x, y)| s * (y / (na * nb) - c * x / (na * na)))
                    .collect();
                let db = ta
                    .data
                    .iter()
                    .zip(&tb.data)
                    .map(|(x, y)| s * (x / (na * nb) - c * y / (nb * nb)))
                    .collect();
                acc(
                    g,
                    *a,
                    Tensor {
                        rows: ta.rows,
                        cols: ta.cols,
                        data: da,
                    },
                );
                acc(
                    g,
                    *b,
                    Tensor {
                        rows: tb.rows,
                        cols: tb.cols,
                        data: db,
                    },
                );
            }
            Op::Bce(p, target, weights) => {
                let tp = self.value(*p);
                let n = tp.data.len().max(1) as f64;
                let s = gi.scalar();
                let d = tp
                    .data
                    .iter()
                    .zip(&target.data)
                    .enumerate()
                    .map(|(j, (p, y))| {
                        if *p < PROB_CLAMP || *p > 1.0 - PROB_CLAMP {
                            0.0
                        } else {
                            let w = weights.as_ref().map_or(1.0, |w| w.data[j]);
                            s * w * (p - y) / (p * (1.0 - p)) / n
                        }
                    })
                    .collect();
                acc(
                    g,
                    *p,
                    Tensor {
                        rows: tp.rows,
                        cols: tp.cols,
                        data: d,
                    },
                );
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = ta.data.len().max(1) as f64;
                let s = gi.scalar();
                let da: Vec<f64> = ta
                    .data
                    .iter()
                    .zip(&tb.data)
                    .map(|(x, y)| s * 2.0 * (x - y) / n)
                    .collect();
                let db = da.iter().map(|x| -x).collect();
                acc(
                    g,
                    *a,
                    Tensor {
                        rows: ta.rows,
                        cols: ta.cols,
                        data: da,
                    },
                );
                acc(
                    g,
                    *b,
                    Tensor {
                        rows: tb.rows,
                        cols: tb.cols,
                        data: db,
                    },
                );
            }
            Op::GatherRows(table, idx) => {
                let t = self.value(*table);
                let mut d = Tensor::zeros(t.rows, t.cols);
                for (r, &j) in idx.iter().enumerate() {
                    for (o, x) in d.data[j * t.cols..(j + 1) * t.cols]
                        .iter_mut()
                        .zip(gi.row(r))
                    {
                        *o += x;
                    }
                }
                acc(g, *table, d);
            }
            Op::SpMM(s, x) => {
                let t = self.value(*x);
                let mut d = Tensor::zeros(t.rows, t.cols);
                for &(i, j, w) in &s.entries {
                    for (o, v) in d.data[j * t.cols..(j + 1) * t.cols]
                        .iter_mut()
                        .zip(gi.row(i))
                    {
                        *o += w * v;
                    }
                }
                acc(g, *x, d);
            }
        }
    }
}

/// Mean clamped binary cross-entropy.
pub fn bce_value(p: &[f64], y: &[f64]) -> f64 {
    bce_weighted_value(p, y, None)
}

pub fn bce_weighted_value(p: &[f64], y: &[f64], w: Option<&[f64]>) -> f64 {
    let n = p.len().max(1) as f64;
    p.iter()
        .zip(y)
        .enumerate()
        .map(|(j, (p, y))| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let w = w.map_or(1.0, |w| w[j]);
            -w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.g[v.0].as_ref()
    }

    /// Adds parameter gradients of `graph` into `into` (indexed by ParamId).
    pub fn accumulate(&self, graph: &Graph<'_>, into: &mut [Tensor]) {
        for (i, op) in graph.ops.iter().enumerate() {
            if let (Op::Param(id), Some(d)) = (op, &self.g[i]) {
                into[id.0].add_assign(d);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &[Tensor]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = params.get_mut(ParamId(k));
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m.data[j] / c1;
                let vh = v.data[j] / c2;
                p.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        grads
            .iter_mut()
            .flat_map(|g| g.data.iter_mut())
            .for_each(|x| *x *= f);
    }
    norm
}

/// One optimization step: build the loss graph, check it is finite,
/// backpropagate, and update. Returns the loss value.
pub fn train_step<F>(
    params: &mut Params,
    opt: &mut Adam,
    step: usize,
    clip: Option<f64>,
    loss_fn: F,
) -> Result<f64>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var>,
{
    let mut grads = params.zero_grads();
    let value = {
        let mut graph = Graph::new(params);
        let loss = loss_fn(&mut graph)?;
        let value = graph.value(loss).scalar();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                value,
                step,
                context: "training loss".into(),
            });
        }
        graph.backward(loss).accumulate(&graph, &mut grads);
        value
    };
    if let Some(c) = clip {
        clip_grad_norm(&mut grads, c);
    }
    opt.update(params, &grads);
    Ok(value)
}

/// Largest relative error between analytic and central-difference gradients
/// of the scalar `f` with respect to each of `inputs`. The relative error is
/// `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps exactly-zero gradients
/// from dividing finite-difference noise by zero.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    gradcheck_in(&Params::new(), inputs, h, f)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// [`gradcheck`] with parameter blocks available to `f`.
pub fn gradcheck_in<F>(params: &Params, inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new(params);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out);
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .of(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.rows, t.cols))
            })
            .collect()
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(params);
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).scalar())
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for k in 0..xs.len() {
        for j in 0..xs[k].data.len() {
            let orig = xs[k].data[j];
            xs[k].data[j] = orig + h;
            let up = eval(&xs)?;
            xs[k].data[j] = orig - h;
            let down = eval(&xs)?;
            xs[k].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k].data[j], numeric));
        }
    }
    Ok(worst)
}

/// Same relative error for selected parameter entries `(block, index)`,
/// checking the accumulated parameter gradients.
pub fn gradcheck_params<F>(
    params: &Params,
    entries: &[(ParamId, usize)],
    h: f64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut grads = params.zero_grads();
    {
        let mut g = Graph::new(params);
        let out = f(&mut g)?;
        g.backward(out).accumulate(&g, &mut grads);
    }
    let mut p = params.clone();
    let eval = |p: &Params| -> Result<f64> {
        let mut g = Graph::new(p);
        let out = f(&mut g)?;
        Ok(g.value(out).scalar())
    };
    let mut worst: f64 = 0.0;
    for &(id, j) in entries {
        let orig = p.get(id).data[j];
        p.get_mut(id).data[j] = orig + h;
        let up = eval(&p)?;
        p.get_mut(id).data[j] = orig - h;
        let down = eval(&p)?;
        p.get_mut(id).data[j] = orig;
        worst = worst.max(rel_err(grads[id.0].data[j], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

/// Seeded generator for model initialization and data order.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
