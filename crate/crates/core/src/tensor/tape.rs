use super::{gemm, softmax_rows, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities with analytic derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    /// elu with unit scale: `x` for positive inputs, `eˣ − 1` otherwise.
    Elu,
    Exp,
    Relu,
    /// tanh approximation.
    Gelu,
    Swish,
    Abs,
    /// `max(|x|, 1)`.
    MaxAbsOne,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Elu => "elu",
            Unary::Exp => "exp",
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Swish => "swish",
            Unary::Abs => "abs",
            Unary::MaxAbsOne => "max_abs_one",
        }
    }

    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Elu => {
                if x > F::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Exp => x.exp(),
            Unary::Relu => x.max(F::zero()),
            Unary::Gelu => {
                let c = F::of(GELU_C);
                let a = F::of(GELU_A);
                let half = F::of(0.5);
                half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
            }
            Unary::Swish => x * sigmoid(x),
            Unary::Abs => x.abs(),
            Unary::MaxAbsOne => x.abs().max(F::one()),
        }
    }

    /// Derivative at `x`, given the forward output `y`.
    fn derivative<F: Scalar>(self, x: F, y: F) -> F {
        match self {
            Unary::Sigmoid => y * (F::one() - y),
            Unary::Elu => {
                if x > F::zero() {
                    F::one()
                } else {
                    y + F::one()
                }
            }
            Unary::Exp => y,
            Unary::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Unary::Gelu => {
                let c = F::of(GELU_C);
                let a = F::of(GELU_A);
                let half = F::of(0.5);
                let three = F::of(3.0);
                let t = (c * (x + a * x * x * x)).tanh();
                half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
            }
            Unary::Swish => {
                let s = sigmoid(x);
                s + x * s * (F::one() - s)
            }
            Unary::Abs => x.signum() * if x == F::zero() { F::zero() } else { F::one() },
            Unary::MaxAbsOne => {
                if x.abs() > F::one() {
                    x.signum()
                } else {
                    F::zero()
                }
            }
        }
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale(Var, F),
    AddScalar(Var),
    Unary(Var, Unary),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<F> },
    LayerNorm { x: Var, gain: Var, bias: Var, inv_std: Vec<F> },
    Softmax(Var),
    RowSum(Var),
    DivRows { x: Var, z: Var },
    Gather { table: Var, ids: Vec<usize> },
    GatherScalars { table: Var, index: Vec<Option<usize>> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    PadCols { x: Var },
    Rotary { x: Var, cos: Vec<F>, sin: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<F>, count: usize },
    SumAll(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    param: Option<usize>,
}

/// Ordered record of primitive applications, replayable in reverse.
///
/// Every forward primitive rejects non-finite outputs, so a tape built from
/// finite inputs only ever holds finite values.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite<F: Scalar>(op: &'static str, t: Tensor<F>) -> Result<Tensor<F>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A trainable leaf; its gradient is reported under `param_index`.
    pub fn param(&mut self, param_index: usize, value: Tensor<F>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(param_index);
        v
    }

    /// A non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = finite("matmul", gemm(self.value(a), ta, self.value(b), tb)?)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = finite("add", self.value(a).zip_map(self.value(b), |x, y| x + y)?)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = finite("mul", self.value(a).zip_map(self.value(b), |x, y| x * y)?)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.len() != xv.cols() {
            return Err(Error::dim(
                "add_row",
                format!("row of {} vs {} columns", rv.len(), xv.cols()),
            ));
        }
        let mut out = xv.clone();
        let r = rv.data().to_vec();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o = *o + b;
            }
        }
        let out = finite("add_row", out)?;
        Ok(self.push(out, Op::AddRow { x, row }))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let out = finite("scale", self.value(x).scale(c))?;
        Ok(self.push(out, Op::Scale(x, c)))
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Result<Var> {
        let out = finite("add_scalar", self.value(x).map(|v| v + c))?;
        Ok(self.push(out, Op::AddScalar(x)))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let out = self.value(x).map(|v| kind.apply(v));
        if !out.is_finite() {
            return Err(if kind == Unary::Exp {
                Error::Overflow { op: "exp" }
            } else {
                Error::NonFinite { op: kind.name() }
            });
        }
        Ok(self.push(out, Op::Unary(x, kind)))
    }

    /// Row-wise `x / rms(x) ⊙ gain` with `rms = sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.cols();
        if gv.len() != d {
            return Err(Error::dim("rms_norm", format!("gain {} vs {d}", gv.len())));
        }
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        let g = gv.data();
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().fold(F::zero(), |s, &v| s + v * v) / F::of(d as f64);
            let inv = F::one() / (ms + F::of(eps)).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &gi) in out.row_mut(r).iter_mut().zip(row).zip(g) {
                *o = v * inv * gi;
            }
        }
        let out = finite("rms_norm", out)?;
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Row-wise `(x − μ)/σ ⊙ gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(Error::dim("layer_norm", "gain/bias width"));
        }
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        let (g, b) = (gv.data(), bv.data());
        let n = F::of(d as f64);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().fold(F::zero(), |s, &v| s + v) / n;
            let var = row.iter().fold(F::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
            let inv = F::one() / (var + F::of(eps)).sqrt();
            inv_std.push(inv);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let out = finite("layer_norm", out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax of `x + mask`; the mask is a constant of 0 / sentinel entries.
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor<F>>) -> Result<Var> {
        let out = finite("softmax", softmax_rows(self.value(x), mask)?)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Sums each row into a `rows×1` column.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let sums: Vec<F> = (0..xv.rows())
            .map(|r| xv.row(r).iter().fold(F::zero(), |s, &v| s + v))
            .collect();
        let out = finite("row_sum", Tensor::matrix(xv.rows(), 1, sums)?)?;
        Ok(self.push(out, Op::RowSum(x)))
    }

    /// Divides row `i` of `x` by `z[i]`.
    pub fn div_rows(&mut self, x: Var, z: Var) -> Result<Var> {
        let (xv, zv) = (self.value(x), self.value(z));
        if zv.len() != xv.rows() {
            return Err(Error::dim("div_rows", format!("{} divisors for {} rows", zv.len(), xv.rows())));
        }
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let zr = zv.data()[r];
            if zr == F::zero() {
                return Err(Error::DegenerateRow { op: "div_rows", row: r });
            }
            for o in out.row_mut(r) {
                *o = *o / zr;
            }
        }
        let out = finite("div_rows", out)?;
        Ok(self.push(out, Op::DivRows { x, z }))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let d = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= tv.rows() {
                return Err(Error::Range {
                    what: "row index",
                    value: id,
                    limit: tv.rows(),
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Builds a `rows×cols` matrix whose entries are `table[index]`, or zero for `None`.
    pub fn gather_scalars(
        &mut self,
        table: Var,
        index: Vec<Option<usize>>,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        if index.len() != rows * cols {
            return Err(Error::dim("gather_scalars", "index grid size"));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(index.len());
        for ix in &index {
            data.push(match ix {
                Some(i) => *tv.get(*i).ok_or(Error::Range {
                    what: "table index",
                    value: *i,
                    limit: tv.len(),
                })?,
                None => F::zero(),
            });
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::GatherScalars { table, index }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {}", xv.cols())));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(xv.rows(), len, data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::dim("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Zero-pads columns on the right up to `total`.
    pub fn pad_cols(&mut self, x: Var, total: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if total < c {
            return Err(Error::dim("pad_cols", format!("{total} < {c}")));
        }
        let mut data = Vec::with_capacity(xv.rows() * total);
        for r in 0..xv.rows() {
            data.extend_from_slice(xv.row(r));
            data.extend(std::iter::repeat_n(F::zero(), total - c));
        }
        let out = Tensor::matrix(xv.rows(), total, data)?;
        Ok(self.push(out, Op::PadCols { x }))
    }

    /// Rotates consecutive coordinate pairs of each row by the given angles.
    ///
    /// `cos`/`sin` hold one entry per (row, pair). A pair `(a, b)` maps to
    /// `(a·cos − b·sin, a·sin + b·cos)`.
    pub fn rotary(&mut self, x: Var, cos: Vec<F>, sin: Vec<F>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if cols % 2 != 0 || cos.len() != rows * cols / 2 || sin.len() != cos.len() {
            return Err(Error::dim("rotary", "angle table does not match input"));
        }
        let mut out = xv.clone();
        let half = cols / 2;
        for r in 0..rows {
            let row = out.row_mut(r);
            for p in 0..half {
                let (c, s) = (cos[r * half + p], sin[r * half + p]);
                let (a, b) = (row[2 * p], row[2 * p + 1]);
                row[2 * p] = a * c - b * s;
                row[2 * p + 1] = a * s + b * c;
            }
        }
        Ok(self.push(out, Op::Rotary { x, cos, sin }))
    }

    /// Mean token cross-entropy over rows with a target; `None` rows are unscored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", format!("{} targets for {rows} rows", targets.len())));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Input("cross_entropy: no scored positions".into()));
        }
        let mut probs = vec![F::zero(); rows * cols];
        let mut total = F::zero();
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= cols {
                return Err(Error::Range {
                    what: "target token",
                    value: t,
                    limit: cols,
                });
            }
            let row = lv.row(r);
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut z = F::zero();
            for (p, &v) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *p = (v - max).exp();
                z = z + *p;
            }
            for p in &mut probs[r * cols..(r + 1) * cols] {
                *p = *p / z;
            }
            total = total + (z.ln() + max - row[t]);
        }
        let loss = total / F::of(count as f64);
        let out = finite("cross_entropy", Tensor::matrix(1, 1, vec![loss])?)?;
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let out = finite("sum_all", Tensor::matrix(1, 1, vec![s])?)?;
        Ok(self.push(out, Op::SumAll(x)))
    }

    /// Hash of the branch taken by every non-smooth pointwise op (rectifier,
    /// absolute value, clamp). Equal signatures at two inputs mean the graph
    /// is smooth on the segment only if no branch flips in between.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |b: u8| h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
        for node in &self.nodes {
            if let Op::Unary(x, u) = node.op {
                let xs = self.value(x).data();
                match u {
                    Unary::Relu | Unary::Abs => xs.iter().for_each(|&v| mix(u8::from(v > F::zero()))),
                    Unary::MaxAbsOne => xs
                        .iter()
                        .for_each(|&v| mix(u8::from(v > F::zero()) | (u8::from(v.abs() > F::one()) << 1))),
                    _ => {}
                }
            }
        }
        h
    }

    /// Reverse sweep from a scalar root. Returns one gradient per parameter
    /// index in `0..n_params`; parameters that did not influence the root get
    /// `None`.
    pub fn backward(&self, root: Var, n_params: usize) -> Result<Vec<Option<Tensor<F>>>> {
        if self.value(root).len() != 1 {
            return Err(Error::dim("backward", "root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), F::one()));
        let mut out: Vec<Option<Tensor<F>>> = (0..n_params).map(|_| None).collect();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(p) = node.param {
                if p >= n_params {
                    return Err(Error::Range {
                        what: "parameter index",
                        value: p,
                        limit: n_params,
                    });
                }
                accumulate(&mut out[p], g)?;
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        for g in out.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = if *ta {
                    gemm(bv, *tb, g, true)?
                } else {
                    gemm(g, false, bv, !*tb)?
                };
                let gb = if *tb {
                    gemm(g, true, av, *ta)?
                } else {
                    gemm(av, !*ta, g, false)?
                };
                accumulate(&mut grads[a.0], ga)?;
                accumulate(&mut grads[b.0], gb)?;
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone())?;
                accumulate(&mut grads[b.0], g.clone())?;
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                accumulate(&mut grads[a.0], ga)?;
                accumulate(&mut grads[b.0], gb)?;
            }
            Op::AddRow { x, row } => {
                let mut gr = vec![F::zero(); g.cols()];
                for r in 0..g.rows() {
                    for (s, &v) in gr.iter_mut().zip(g.row(r)) {
                        *s = *s + v;
                    }
                }
                let shape = self.shape(*row).to_vec();
                accumulate(&mut grads[x.0], g.clone())?;
                accumulate(&mut grads[row.0], Tensor::new(shape, gr)?)?;
            }
            Op::Scale(x, c) => accumulate(&mut grads[x.0], g.scale(*c))?,
            Op::AddScalar(x) => accumulate(&mut grads[x.0], g.clone())?,
            Op::Unary(x, kind) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(y.data())
                    .map(|((&gi, &xi), &yi)| gi * kind.derivative(xi, yi))
                    .collect();
                accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.cols();
                let gd = gv.data();
                let mut gx = Tensor::zeros(xv.shape());
                let mut gg = vec![F::zero(); d];
                let inv_d = F::one() / F::of(d as f64);
                for r in 0..xv.rows() {
                    let (xr, dy, inv) = (xv.row(r), g.row(r), inv_rms[r]);
                    let mut dot = F::zero();
                    for j in 0..d {
                        dot = dot + gd[j] * dy[j] * xr[j];
                        gg[j] = gg[j] + dy[j] * xr[j] * inv;
                    }
                    let coeff = dot * inv * inv * inv * inv_d;
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = gd[j] * dy[j] * inv - xr[j] * coeff;
                    }
                }
                let gshape = gv.shape().to_vec();
                accumulate(&mut grads[x.0], gx)?;
                accumulate(&mut grads[gain.0], Tensor::new(gshape, gg)?)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.cols();
                let n = F::of(d as f64);
                let gd = gv.data();
                let mut gx = Tensor::zeros(xv.shape());
                let mut gg = vec![F::zero(); d];
                let mut gb = vec![F::zero(); d];
                let mut xhat = vec![F::zero(); d];
                let mut dxhat = vec![F::zero(); d];
                for r in 0..xv.rows() {
                    let (xr, dy, inv) = (xv.row(r), g.row(r), inv_std[r]);
                    let mean = xr.iter().fold(F::zero(), |s, &v| s + v) / n;
                    let (mut m1, mut m2) = (F::zero(), F::zero());
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * inv;
                        dxhat[j] = dy[j] * gd[j];
                        gg[j] = gg[j] + dy[j] * xhat[j];
                        gb[j] = gb[j] + dy[j];
                        m1 = m1 + dxhat[j];
                        m2 = m2 + dxhat[j] * xhat[j];
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                let shape = gv.shape().to_vec();
                let bshape = self.shape(*bias).to_vec();
                accumulate(&mut grads[x.0], gx)?;
                accumulate(&mut grads[gain.0], Tensor::new(shape, gg)?)?;
                accumulate(&mut grads[bias.0], Tensor::new(bshape, gb)?)?;
            }
            Op::Softmax(x) => {
                let mut gx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, dy) = (y.row(r), g.row(r));
                    let dot = yr.iter().zip(dy).fold(F::zero(), |s, (&a, &b)| s + a * b);
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[j] * (dy[j] - dot);
                    }
                }
                accumulate(&mut grads[x.0], gx)?;
            }
            Op::RowSum(x) => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    let gr = g.data()[r];
                    for o in gx.row_mut(r) {
                        *o = gr;
                    }
                }
                accumulate(&mut grads[x.0], gx)?;
            }
            Op::DivRows { x, z } => {
                let (xv, zv) = (self.value(*x), self.value(*z));
                let mut gx = Tensor::zeros(xv.shape());
                let mut gz = vec![F::zero(); zv.len()];
                for r in 0..xv.rows() {
                    let zr = zv.data()[r];
                    let (xr, dy) = (xv.row(r), g.row(r));
                    let mut acc = F::zero();
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = dy[j] / zr;
                        acc = acc + dy[j] * xr[j];
                    }
                    gz[r] = -acc / (zr * zr);
                }
                let zshape = zv.shape().to_vec();
                accumulate(&mut grads[x.0], gx)?;
                accumulate(&mut grads[z.0], Tensor::new(zshape, gz)?)?;
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut gt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                accumulate(&mut grads[table.0], gt)?;
            }
            Op::GatherScalars { table, index } => {
                let tv = self.value(*table);
                let mut gt = Tensor::zeros(tv.shape());
                for (ix, &v) in index.iter().zip(g.data()) {
                    if let Some(i) = ix {
                        gt.data_mut()[*i] = gt.data()[*i] + v;
                    }
                }
                accumulate(&mut grads[table.0], gt)?;
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                let len = g.cols();
                for r in 0..xv.rows() {
                    gx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                accumulate(&mut grads[x.0], gx)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    let mut gp = Vec::with_capacity(pv.len());
                    for r in 0..pv.rows() {
                        gp.extend_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    offset += c;
                    accumulate(&mut grads[p.0], Tensor::new(pv.shape().to_vec(), gp)?)?;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    let gp = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    accumulate(&mut grads[p.0], Tensor::new(pv.shape().to_vec(), gp)?)?;
                }
            }
            Op::PadCols { x } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = Vec::with_capacity(xv.len());
                for r in 0..xv.rows() {
                    gx.extend_from_slice(&g.row(r)[..c]);
                }
                accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), gx)?)?;
            }
            Op::Rotary { x, cos, sin } => {
                let half = g.cols() / 2;
                let mut gx = g.clone();
                for r in 0..g.rows() {
                    let row = gx.row_mut(r);
                    for p in 0..half {
                        let (c, s) = (cos[r * half + p], sin[r * half + p]);
                        let (ga, gb) = (row[2 * p], row[2 * p + 1]);
                        row[2 * p] = ga * c + gb * s;
                        row[2 * p + 1] = -ga * s + gb * c;
                    }
                }
                accumulate(&mut grads[x.0], gx)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let lv = self.value(*logits);
                let cols = lv.cols();
                let scale = g.data()[0] / F::of(*count as f64);
                let mut gl = Tensor::zeros(lv.shape());
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    let row = gl.row_mut(r);
                    for (o, &p) in row.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                        *o = p * scale;
                    }
                    row[t] = row[t] - scale;
                }
                accumulate(&mut grads[logits.0], gl)?;
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                accumulate(&mut grads[x.0], Tensor::full(xv.shape(), g.data()[0]))?;
            }
        }
        Ok(())
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
