//! Append-only computation tape and its reverse sweep.
//!
//! Complex adjoints use the real-composite convention: for `z = a + ib` the
//! stored adjoint is `dL/da + i dL/db`. A real tensor feeding a complex op
//! receives the real part of that adjoint.

use num_complex::Complex64;

use crate::error::{AutodiffError, Result};
use crate::fft::fft_rows;
use crate::tensor::{split_axis, Storage, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Softplus,
    Sigmoid,
    Log1p,
    /// Subgradient 0 at 0.
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror about the edge samples without repeating them.
    Reflect,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    ScalarMul(usize, f64),
    Mul(usize, usize),
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Unary(usize, Unary),
    Modulus(usize),
    RealPart(usize),
    Fft(usize),
    Ifft(usize),
    Subsample { src: usize, factor: usize },
    Pad { src: usize, left: usize, mode: PadMode },
    Sum(usize),
    SumSquares(usize),
    Reshape(usize),
    Slice { src: usize, axis: usize, start: usize },
    Concat { srcs: Vec<usize>, axis: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::Unary(_, u) => match u {
                Unary::Tanh => "tanh",
                Unary::Softplus => "softplus",
                Unary::Sigmoid => "sigmoid",
                Unary::Log1p => "log1p",
                Unary::Relu => "relu",
            },
            Op::Modulus(_) => "modulus",
            Op::RealPart(_) => "real_part",
            Op::Fft(_) => "fft",
            Op::Ifft(_) => "ifft",
            Op::Subsample { .. } => "subsample",
            Op::Pad { .. } => "pad",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Single-threaded; build one per worker.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<usize>,
    consumed: bool,
}

/// Gradients of a scalar root with respect to every leaf of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    by_leaf: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_leaf
            .binary_search_by_key(&v.0, |(i, _)| *i)
            .ok()
            .map(|k| &self.by_leaf[k].1)
    }

    /// Takes ownership of the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        let k = self.by_leaf.binary_search_by_key(&v.0, |(i, _)| *i).ok()?;
        Some(std::mem::replace(
            &mut self.by_leaf[k].1,
            Tensor::scalar(0.0),
        ))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

fn promote(t: &Tensor) -> Vec<Complex64> {
    match t.storage() {
        Storage::Real(v) => v.iter().map(|&r| Complex64::new(r, 0.0)).collect(),
        Storage::Complex(v) => v.clone(),
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Invalid {
        op,
        msg: msg.into(),
    }
}

fn reflect_index(j: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = j.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn unary_forward(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Tanh => x.tanh(),
        Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        Unary::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        Unary::Log1p => x.ln_1p(),
        Unary::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
    }
}

fn unary_derivative(u: Unary, x: f64, y: f64) -> f64 {
    match u {
        Unary::Tanh => 1.0 - y * y,
        Unary::Softplus => unary_forward(Unary::Sigmoid, x),
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Log1p => 1.0 / (1.0 + x),
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn matmul_real(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let s = a[i * k + l];
            if s == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    out
}

fn matmul_complex(a: &[Complex64], b: &[Complex64], m: usize, k: usize, n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let s = a[i * k + l];
            if s.re == 0.0 && s.im == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Scalar value of a rank-0 or single-element real node.
    pub fn scalar(&self, v: Var) -> Option<f64> {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(AutodiffError::Frozen(op.name()));
        }
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(op.name()));
        }
        let id = self.nodes.len();
        if matches!(op, Op::Leaf) {
            self.leaves.push(id);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, false)
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, sub: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let name = if sub { "sub" } else { "add" };
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let sign = if sub { -1.0 } else { 1.0 };
        let out = match (ta.storage(), tb.storage()) {
            (Storage::Real(x), Storage::Real(y)) => Tensor::real(
                ta.shape(),
                x.iter().zip(y).map(|(p, q)| p + sign * q).collect(),
            )?,
            _ => {
                let x = promote(ta);
                let y = promote(tb);
                Tensor::complex(
                    ta.shape(),
                    x.iter().zip(&y).map(|(p, q)| p + q * sign).collect(),
                )?
            }
        };
        let op = if sub {
            Op::Sub(a.0, b.0)
        } else {
            Op::Add(a.0, b.0)
        };
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, true)
    }

    /// Sum of a non-empty list of equally shaped nodes.
    pub fn add_many(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| invalid("add", "empty operand list"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        if !s.is_finite() {
            return Err(AutodiffError::NonFinite("scalar_mul"));
        }
        let ta = self.value(a);
        let out = match ta.storage() {
            Storage::Real(x) => Tensor::real(ta.shape(), x.iter().map(|v| v * s).collect())?,
            Storage::Complex(x) => {
                Tensor::complex(ta.shape(), x.iter().map(|v| v * s).collect())?
            }
        };
        let rg = self.rg(&[a.0]);
        self.push(out, Op::ScalarMul(a.0, s), rg)
    }

    /// Elementwise product, real or complex. `b` may have a shape equal to a
    /// trailing suffix of `a`'s shape, in which case it is repeated over the
    /// leading dimensions.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let sa = ta.shape();
        let sb = tb.shape();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("mul", ta, tb));
        }
        let nb = tb.numel().max(1);
        let out = match (ta.storage(), tb.storage()) {
            (Storage::Real(x), Storage::Real(y)) => Tensor::real(
                sa,
                x.iter().enumerate().map(|(i, p)| p * y[i % nb]).collect(),
            )?,
            _ => {
                let x = promote(ta);
                let y = promote(tb);
                Tensor::complex(
                    sa,
                    x.iter().enumerate().map(|(i, p)| p * y[i % nb]).collect(),
                )?
            }
        };
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::Mul(a.0, b.0), rg)
    }

    /// Elementwise complex product; identical to [`Tape::mul`], named for
    /// call sites that multiply spectra.
    pub fn cmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mul(a, b)
    }

    /// `[m,k] x [k,n] -> [m,n]`, real or complex.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = match (ta.storage(), tb.storage()) {
            (Storage::Real(x), Storage::Real(y)) => {
                Tensor::real(&[m, n], matmul_real(x, y, m, k, n))?
            }
            _ => Tensor::complex(&[m, n], matmul_complex(&promote(ta), &promote(tb), m, k, n))?,
        };
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::MatMul(a.0, b.0), rg)
    }

    /// Real `x·W + b` with `x: [m,k]`, `W: [k,n]`, `b: [n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.is_complex() || tw.is_complex() || tb.is_complex() {
            return Err(AutodiffError::Dtype {
                op: "affine",
                expected: "real",
            });
        }
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[0] {
            return Err(mismatch("affine", tx, tw));
        }
        let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
        if tb.shape() != [n] {
            return Err(mismatch("affine", tw, tb));
        }
        let mut out = matmul_real(tx.data(), tw.data(), m, k, n);
        let bias = tb.data();
        for row in out.chunks_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let out = Tensor::real(&[m, n], out)?;
        let rg = self.rg(&[x.0, w.0, b.0]);
        self.push(out, Op::Affine(x.0, w.0, b.0), rg)
    }

    pub fn unary(&mut self, a: Var, u: Unary) -> Result<Var> {
        let ta = self.value(a);
        let x = ta.as_real().ok_or(AutodiffError::Dtype {
            op: "pointwise nonlinearity",
            expected: "real",
        })?;
        let out = Tensor::real(ta.shape(), x.iter().map(|&v| unary_forward(u, v)).collect())?;
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Unary(a.0, u), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn log1p(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log1p)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    /// Elementwise `|z|`; real inputs give `|x|`.
    pub fn modulus(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = match ta.storage() {
            Storage::Real(x) => x.iter().map(|v| v.abs()).collect(),
            Storage::Complex(x) => x.iter().map(|z| z.norm()).collect(),
        };
        let out = Tensor::real(ta.shape(), out)?;
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Modulus(a.0), rg)
    }

    pub fn real_part(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = match ta.storage() {
            Storage::Real(x) => x.clone(),
            Storage::Complex(x) => x.iter().map(|z| z.re).collect(),
        };
        let out = Tensor::real(ta.shape(), out)?;
        let rg = self.rg(&[a.0]);
        self.push(out, Op::RealPart(a.0), rg)
    }

    fn transform(&mut self, a: Var, inverse: bool) -> Result<Var> {
        let ta = self.value(a);
        let name = if inverse { "ifft" } else { "fft" };
        let n = *ta
            .shape()
            .last()
            .ok_or_else(|| invalid(name, "rank-0 input"))?;
        let mut data = promote(ta);
        fft_rows(&mut data, n, inverse);
        let out = Tensor::complex(ta.shape(), data)?;
        let rg = self.rg(&[a.0]);
        let op = if inverse { Op::Ifft(a.0) } else { Op::Fft(a.0) };
        self.push(out, op, rg)
    }

    /// Unnormalized DFT along the last axis.
    pub fn fft(&mut self, a: Var) -> Result<Var> {
        self.transform(a, false)
    }

    /// Inverse DFT along the last axis, normalized by `1/n`.
    pub fn ifft(&mut self, a: Var) -> Result<Var> {
        self.transform(a, true)
    }

    /// Keeps every `factor`-th sample of the last axis, starting at 0.
    pub fn subsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(invalid("subsample", "factor must be positive"));
        }
        let ta = self.value(a);
        let n = *ta
            .shape()
            .last()
            .ok_or_else(|| invalid("subsample", "rank-0 input"))?;
        let m = n.div_ceil(factor);
        let rows = if n == 0 { 0 } else { ta.numel() / n };
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let out = match ta.storage() {
            Storage::Real(x) => {
                let mut o = Vec::with_capacity(rows * m);
                for r in 0..rows {
                    o.extend((0..m).map(|i| x[r * n + i * factor]));
                }
                Tensor::real(&shape, o)?
            }
            Storage::Complex(x) => {
                let mut o = Vec::with_capacity(rows * m);
                for r in 0..rows {
                    o.extend((0..m).map(|i| x[r * n + i * factor]));
                }
                Tensor::complex(&shape, o)?
            }
        };
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Subsample { src: a.0, factor }, rg)
    }

    /// Pads the last axis with `left` and `right` samples.
    pub fn pad(&mut self, a: Var, left: usize, right: usize, mode: PadMode) -> Result<Var> {
        let ta = self.value(a);
        let n = *ta
            .shape()
            .last()
            .ok_or_else(|| invalid("pad", "rank-0 input"))?;
        if mode == PadMode::Reflect && n == 0 {
            return Err(invalid("pad", "cannot reflect an empty axis"));
        }
        let m = n + left + right;
        let rows: usize = ta.shape()[..ta.rank() - 1].iter().product();
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let map = |i: usize| -> Option<usize> {
            let j = i as isize - left as isize;
            match mode {
                PadMode::Zero => (j >= 0 && (j as usize) < n).then_some(j as usize),
                PadMode::Reflect => Some(reflect_index(j, n)),
            }
        };
        let out = match ta.storage() {
            Storage::Real(x) => {
                let mut o = vec![0.0; rows * m];
                for r in 0..rows {
                    for i in 0..m {
                        if let Some(j) = map(i) {
                            o[r * m + i] = x[r * n + j];
                        }
                    }
                }
                Tensor::real(&shape, o)?
            }
            Storage::Complex(x) => {
                let mut o = vec![Complex64::new(0.0, 0.0); rows * m];
                for r in 0..rows {
                    for i in 0..m {
                        if let Some(j) = map(i) {
                            o[r * m + i] = x[r * n + j];
                        }
                    }
                }
                Tensor::complex(&shape, o)?
            }
        };
        let rg = self.rg(&[a.0]);
        self.push(
            out,
            Op::Pad {
                src: a.0,
                left,
                mode,
            },
            rg,
        )
    }

    /// Sum of all elements, as a rank-0 tensor (complex for complex input).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = match ta.storage() {
            Storage::Real(x) => Tensor::scalar(x.iter().sum()),
            Storage::Complex(x) => Tensor::complex(&[], vec![x.iter().sum()])?,
        };
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Sum(a.0), rg)
    }

    /// `Σ|a_i|²` as a real rank-0 tensor.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).norm_sqr());
        let rg = self.rg(&[a.0]);
        self.push(out, Op::SumSquares(a.0), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = ta.clone().with_shape(shape);
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Reshape(a.0), rg)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() || start + len > ta.shape()[axis] {
            return Err(invalid(
                "slice",
                format!(
                    "range {start}..{} on axis {axis} of shape {:?}",
                    start + len,
                    ta.shape()
                ),
            ));
        }
        let (outer, n, inner) = split_axis(ta.shape(), axis);
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        fn gather<T: Copy>(x: &[T], outer: usize, n: usize, inner: usize, start: usize, len: usize) -> Vec<T> {
            let mut o = Vec::with_capacity(outer * len * inner);
            for r in 0..outer {
                let base = r * n * inner + start * inner;
                o.extend_from_slice(&x[base..base + len * inner]);
            }
            o
        }
        let out = match ta.storage() {
            Storage::Real(x) => Tensor::real(&shape, gather(x, outer, n, inner, start, len))?,
            Storage::Complex(x) => {
                Tensor::complex(&shape, gather(x, outer, n, inner, start, len))?
            }
        };
        let rg = self.rg(&[a.0]);
        self.push(
            out,
            Op::Slice {
                src: a.0,
                axis,
                start,
            },
            rg,
        )
    }

    /// Concatenates along `axis`; other extents must agree. Mixed dtypes
    /// promote to complex.
    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(
            *vars
                .first()
                .ok_or_else(|| invalid("concat", "empty operand list"))?,
        );
        if axis >= first.rank() {
            return Err(invalid("concat", format!("axis {axis} out of range")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        let mut any_complex = false;
        for &v in vars {
            let t = self.value(v);
            let ok = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(mismatch("concat", first, t));
            }
            shape[axis] += t.shape()[axis];
            any_complex |= t.is_complex();
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let out = if any_complex {
            let parts: Vec<Vec<Complex64>> = vars.iter().map(|&v| promote(self.value(v))).collect();
            let mut o = Vec::with_capacity(shape.iter().product());
            for r in 0..outer {
                for (p, &v) in parts.iter().zip(vars) {
                    let w = self.value(v).shape()[axis] * inner;
                    o.extend_from_slice(&p[r * w..(r + 1) * w]);
                }
            }
            Tensor::complex(&shape, o)?
        } else {
            let mut o = Vec::with_capacity(shape.iter().product());
            for r in 0..outer {
                for &v in vars {
                    let t = self.value(v);
                    let w = t.shape()[axis] * inner;
                    o.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            Tensor::real(&shape, o)?
        };
        let ids: Vec<usize> = vars.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        self.push(out, Op::Concat { srcs: ids, axis }, rg)
    }

    /// Reverse sweep from a real scalar root. Consumes the tape: a second
    /// call, or any further recording, is an error. Every leaf gets an entry,
    /// zero when the root does not depend on it.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(AutodiffError::AlreadyConsumed);
        }
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 || rv.is_complex() {
            return Err(AutodiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::real(rv.shape(), vec![1.0])?);
        }
        for id in (0..=root.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.propagate(id, gy, &mut grads);
        }
        let mut by_leaf = Vec::with_capacity(self.leaves.len());
        for &l in &self.leaves {
            let g = grads[l]
                .take()
                .unwrap_or_else(|| self.nodes[l].value.zeros_like());
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite("backward"));
            }
            by_leaf.push((l, g));
        }
        Ok(Gradients { by_leaf })
    }

    fn propagate(&self, id: usize, gy: Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let val = |i: usize| &nodes[i].value;
        let mut give = |src: usize, t: Tensor| contribute(nodes, grads, src, t);
        match &nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                give(*b, gy.clone());
                give(*a, gy);
            }
            Op::Sub(a, b) => {
                give(*b, negate(&gy));
                give(*a, gy);
            }
            Op::ScalarMul(a, s) => give(*a, scale(&gy, *s)),
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let nb = tb.numel().max(1);
                match (gy.storage(), ta.storage(), tb.storage()) {
                    (Storage::Real(g), Storage::Real(x), Storage::Real(y)) => {
                        let ga: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * y[i % nb]).collect();
                        let mut gb = vec![0.0; nb];
                        for (i, v) in g.iter().enumerate() {
                            gb[i % nb] += v * x[i];
                        }
                        give(*a, Tensor::real(ta.shape(), ga).unwrap());
                        give(*b, Tensor::real(tb.shape(), gb).unwrap());
                    }
                    _ => {
                        let g = promote(&gy);
                        let x = promote(ta);
                        let y = promote(tb);
                        let ga: Vec<Complex64> =
                            g.iter().enumerate().map(|(i, v)| v * y[i % nb].conj()).collect();
                        let mut gb = vec![Complex64::new(0.0, 0.0); nb];
                        for (i, v) in g.iter().enumerate() {
                            gb[i % nb] += v * x[i].conj();
                        }
                        give(*a, Tensor::complex(ta.shape(), ga).unwrap());
                        give(*b, Tensor::complex(tb.shape(), gb).unwrap());
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                match (gy.storage(), ta.storage(), tb.storage()) {
                    (Storage::Real(g), Storage::Real(x), Storage::Real(y)) => {
                        if nodes[*a].requires_grad {
                            give(*a, Tensor::real(&[m, k], matmul_a_bt(g, y, m, n, k)).unwrap());
                        }
                        if nodes[*b].requires_grad {
                            give(*b, Tensor::real(&[k, n], matmul_at_b(x, g, m, k, n)).unwrap());
                        }
                    }
                    _ => {
                        let g = promote(&gy);
                        let x = promote(ta);
                        let y = promote(tb);
                        if nodes[*a].requires_grad {
                            let mut ga = vec![Complex64::new(0.0, 0.0); m * k];
                            for i in 0..m {
                                for l in 0..k {
                                    let mut acc = Complex64::new(0.0, 0.0);
                                    for j in 0..n {
                                        acc += g[i * n + j] * y[l * n + j].conj();
                                    }
                                    ga[i * k + l] = acc;
                                }
                            }
                            give(*a, Tensor::complex(&[m, k], ga).unwrap());
                        }
                        if nodes[*b].requires_grad {
                            let mut gb = vec![Complex64::new(0.0, 0.0); k * n];
                            for i in 0..m {
                                for l in 0..k {
                                    let s = x[i * k + l].conj();
                                    if s.re == 0.0 && s.im == 0.0 {
                                        continue;
                                    }
                                    let row = &mut gb[l * n..(l + 1) * n];
                                    for (o, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                        *o += s * gv;
                                    }
                                }
                            }
                            give(*b, Tensor::complex(&[k, n], gb).unwrap());
                        }
                    }
                }
            }
            Op::Affine(x, w, b) => {
                let (tx, tw) = (val(*x), val(*w));
                let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
                let g = gy.data();
                if nodes[*x].requires_grad {
                    give(*x, Tensor::real(&[m, k], matmul_a_bt(g, tw.data(), m, n, k)).unwrap());
                }
                if nodes[*w].requires_grad {
                    give(*w, Tensor::real(&[k, n], matmul_at_b(tx.data(), g, m, k, n)).unwrap());
                }
                if nodes[*b].requires_grad {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n.max(1)) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    give(*b, Tensor::vector(gb));
                }
            }
            Op::Unary(a, u) => {
                let x = val(*a).data();
                let y = nodes[id].value.data();
                let g: Vec<f64> = gy
                    .data()
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(gv, (&xv, &yv))| gv * unary_derivative(*u, xv, yv))
                    .collect();
                give(*a, Tensor::real(val(*a).shape(), g).unwrap());
            }
            Op::Modulus(a) => {
                let ta = val(*a);
                let g = gy.data();
                match ta.storage() {
                    Storage::Real(x) => {
                        let o = x
                            .iter()
                            .zip(g)
                            .map(|(&xv, gv)| if xv == 0.0 { 0.0 } else { gv * xv.signum() })
                            .collect();
                        give(*a, Tensor::real(ta.shape(), o).unwrap());
                    }
                    Storage::Complex(z) => {
                        let o = z
                            .iter()
                            .zip(g)
                            .map(|(zv, gv)| {
                                let r = zv.norm();
                                if r == 0.0 {
                                    Complex64::new(0.0, 0.0)
                                } else {
                                    zv * (gv / r)
                                }
                            })
                            .collect();
                        give(*a, Tensor::complex(ta.shape(), o).unwrap());
                    }
                }
            }
            Op::RealPart(a) => give(*a, gy),
            Op::Fft(a) | Op::Ifft(a) => {
                let inverse_fwd = matches!(nodes[id].op, Op::Ifft(_));
                let shape = gy.shape().to_vec();
                let n = *shape.last().unwrap();
                let mut g = promote(&gy);
                // Adjoint of the forward DFT is n times its normalized inverse,
                // and vice versa.
                fft_rows(&mut g, n, !inverse_fwd);
                let s = if inverse_fwd { 1.0 / n as f64 } else { n as f64 };
                for v in g.iter_mut() {
                    *v *= s;
                }
                give(*a, Tensor::complex(&shape, g).unwrap());
            }
            Op::Subsample { src, factor } => {
                let ts = val(*src);
                let n = *ts.shape().last().unwrap();
                let m = *gy.shape().last().unwrap();
                let mut out = ts.zeros_like();
                scatter(&gy, &mut out, |r, i| Some(r * n + i * factor), m);
                give(*src, out);
            }
            Op::Pad { src, left, mode } => {
                let ts = val(*src);
                let n = *ts.shape().last().unwrap();
                let m = *gy.shape().last().unwrap();
                let mut out = ts.zeros_like();
                let (left, mode) = (*left, *mode);
                scatter(
                    &gy,
                    &mut out,
                    |r, i| {
                        let j = i as isize - left as isize;
                        let j = match mode {
                            PadMode::Zero => (j >= 0 && (j as usize) < n).then_some(j as usize)?,
                            PadMode::Reflect => reflect_index(j, n),
                        };
                        Some(r * n + j)
                    },
                    m,
                );
                give(*src, out);
            }
            Op::Sum(a) => {
                let ta = val(*a);
                let t = match gy.storage() {
                    Storage::Real(g) => Tensor::real(ta.shape(), vec![g[0]; ta.numel()]).unwrap(),
                    Storage::Complex(g) => {
                        Tensor::complex(ta.shape(), vec![g[0]; ta.numel()]).unwrap()
                    }
                };
                give(*a, t);
            }
            Op::SumSquares(a) => {
                let s = 2.0 * gy.data()[0];
                give(*a, scale(val(*a), s));
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                give(*a, gy.with_shape(&shape));
            }
            Op::Slice { src, axis, start } => {
                let ts = val(*src);
                let (outer, n, inner) = split_axis(ts.shape(), *axis);
                let len = gy.shape()[*axis];
                let mut out = ts.zeros_like();
                let w = len * inner;
                scatter(&gy, &mut out, |r, i| Some(r * n * inner + start * inner + i), w);
                debug_assert_eq!(gy.numel(), outer * w);
                give(*src, out);
            }
            Op::Concat { srcs, axis } => {
                let (outer, total, inner) = split_axis(gy.shape(), *axis);
                let mut offset = 0;
                for &s in srcs {
                    let ts = val(s);
                    let len = ts.shape()[*axis];
                    if nodes[s].requires_grad {
                        let mut out = if gy.is_complex() {
                            Tensor::czeros(ts.shape())
                        } else {
                            Tensor::zeros(ts.shape())
                        };
                        let w = len * inner;
                        let off = offset * inner;
                        let stride = total * inner;
                        gather_into(&gy, &mut out, |r, i| r * stride + off + i, outer, w);
                        give(s, out);
                    }
                    offset += len;
                }
            }
        }
    }
}

fn contribute(nodes: &[Node], grads: &mut [Option<Tensor>], src: usize, t: Tensor) {
    let node = &nodes[src];
    if !node.requires_grad {
        return;
    }
    let t = match (node.value.is_complex(), t.is_complex()) {
        (false, true) => {
            let shape = t.shape().to_vec();
            Tensor::real(&shape, t.cdata().iter().map(|z| z.re).collect()).unwrap()
        }
        (true, false) => {
            let shape = t.shape().to_vec();
            Tensor::complex(&shape, promote(&t)).unwrap()
        }
        _ => t,
    };
    match &mut grads[src] {
        Some(g) => g.accumulate(&t),
        slot @ None => *slot = Some(t),
    }
}

fn negate(t: &Tensor) -> Tensor {
    scale(t, -1.0)
}

fn scale(t: &Tensor, s: f64) -> Tensor {
    match t.storage() {
        Storage::Real(x) => Tensor::real(t.shape(), x.iter().map(|v| v * s).collect()).unwrap(),
        Storage::Complex(x) => {
            Tensor::complex(t.shape(), x.iter().map(|v| v * s).collect()).unwrap()
        }
    }
}

/// `g [m,n] x y^T` where `y` is `[k,n]`.
fn matmul_a_bt(g: &[f64], y: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for l in 0..k {
            let yr = &y[l * n..(l + 1) * n];
            out[i * k + l] = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
        }
    }
    out
}

/// `x^T g` where `x` is `[m,k]` and `g` is `[m,n]`.
fn matmul_at_b(x: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for l in 0..k {
            let s = x[i * k + l];
            if s == 0.0 {
                continue;
            }
            for (o, gv) in out[l * n..(l + 1) * n].iter_mut().zip(gr) {
                *o += s * gv;
            }
        }
    }
    out
}

/// Adds row-chunked entries of `src` (chunks of width `w`) into `dst` at
/// positions given by `index(row, i)`.
fn scatter(src: &Tensor, dst: &mut Tensor, index: impl Fn(usize, usize) -> Option<usize>, w: usize) {
    let rows = if w == 0 { 0 } else { src.numel() / w };
    match (src.storage(), dst.is_complex()) {
        (Storage::Real(s), false) => {
            let d = dst.real_mut().unwrap();
            for r in 0..rows {
                for i in 0..w {
                    if let Some(j) = index(r, i) {
                        d[j] += s[r * w + i];
                    }
                }
            }
        }
        (Storage::Real(s), true) => {
            let d = dst.complex_mut().unwrap();
            for r in 0..rows {
                for i in 0..w {
                    if let Some(j) = index(r, i) {
                        d[j].re += s[r * w + i];
                    }
                }
            }
        }
        (Storage::Complex(s), true) => {
            let d = dst.complex_mut().unwrap();
            for r in 0..rows {
                for i in 0..w {
                    if let Some(j) = index(r, i) {
                        d[j] += s[r * w + i];
                    }
                }
            }
        }
        (Storage::Complex(s), false) => {
            let d = dst.real_mut().unwrap();
            for r in 0..rows {
                for i in 0..w {
                    if let Some(j) = index(r, i) {
                        d[j] += s[r * w + i].re;
                    }
                }
            }
        }
    }
}

/// Copies `dst[r*w + i] = src[index(r, i)]`; dtypes must agree.
fn gather_into(src: &Tensor, dst: &mut Tensor, index: impl Fn(usize, usize) -> usize, rows: usize, w: usize) {
    match src.storage() {
        Storage::Real(s) => {
            let d = dst.real_mut().unwrap();
            for r in 0..rows {
                for i in 0..w {
                    d[r * w + i] = s[index(r, i)];
                }
            }
        }
        Storage::Complex(s) => {
            let d = dst.complex_mut().unwrap();
            for r in 0..rows {
                for i in 0..w {
                    d[r * w + i] = s[index(r, i)];
                }
            }
        }
    }
}
