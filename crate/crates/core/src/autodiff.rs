//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`];
//! [`Tape::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because inputs always precede their consumers.

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape { op: "tensor", detail: format!("{} values for shape {rows}x{cols}", data.len()) });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
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

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = beta * c + a(m x k) * b(k x n)`, each operand optionally transposed
/// in place through its strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    // Stored shapes: a is m x k (or k x m when transposed), b likewise.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths were checked against the logical shapes above and
    // the strides address exactly those elements.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, false, &b.data, false, 0.0, &mut out.data);
    out
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape { op, detail: format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols) }
}

/// Records primitives as they are evaluated.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Drops every node recorded after the first `len`; variables created
    /// before that point stay valid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Mutable access to a leaf value. Nodes computed from it are not
    /// refreshed, so this is meant for use after `truncate`.
    pub fn leaf_mut(&mut self, v: Var) -> Result<&mut Tensor> {
        match self.nodes.get_mut(v.0) {
            Some(Node { value, op: Op::Leaf }) => Ok(value),
            _ => Err(crate::error::invalid("not a leaf")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = matmul(ta, tb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.cols {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        gemm(ta.rows, ta.cols, tb.rows, &ta.data, false, &tb.data, true, 0.0, &mut out.data);
        Ok(self.push(out, Op::MatMulNT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    fn zip_same(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor { rows: ta.rows, cols: ta.cols, data };
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, op_name: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows != 1 || tr.cols != ta.cols {
            return Err(shape_err(op_name, ta, tr));
        }
        let mut out = ta.clone();
        for chunk in out.data.chunks_exact_mut(ta.cols) {
            for (x, &r) in chunk.iter_mut().zip(&tr.data) {
                *x = f(*x, r);
            }
        }
        Ok(self.push(out, op))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, |x, r| x + r, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, |x, r| x * r, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        self.push(out, Op::Scale(a, s))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked
    /// out; the input must then be square.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let ta = self.value(a);
        if causal && ta.rows != ta.cols {
            return Err(Error::Shape { op: "softmax", detail: format!("causal mask needs a square input, got {}x{}", ta.rows, ta.cols) });
        }
        let mut out = Tensor::zeros(ta.rows, ta.cols);
        for r in 0..ta.rows {
            let width = if causal { r + 1 } else { ta.cols };
            let src = &ta.row(r)[..width];
            let dst = &mut out.data[r * ta.cols..r * ta.cols + width];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            let inv = 1.0 / total;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols as f64;
        let mut out = ta.clone();
        let mut inv_std = Vec::with_capacity(ta.rows);
        for chunk in out.data.chunks_exact_mut(ta.cols) {
            let mean = chunk.iter().sum::<f64>() / n;
            let var = chunk.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            chunk.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std })
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out = Tensor { rows: ta.rows, cols: ta.cols, data: ta.data.iter().map(|&x| f(x)).collect() };
        self.push(out, op)
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()), Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.data.iter().sum::<f64>() / ta.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Column means, a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(1, ta.cols);
        for chunk in ta.data.chunks_exact(ta.cols) {
            for (o, x) in out.data.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        let inv = 1.0 / ta.rows as f64;
        out.data.iter_mut().for_each(|x| *x *= inv);
        self.push(out, Op::MeanRows(a))
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(Error::BackwardWithoutForward);
        }
        let out_val = self.value(output);
        if seed.shape() != out_val.shape() {
            return Err(shape_err("backward", out_val, &seed));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                    let mut ga = Tensor::zeros(m, k);
                    gemm(m, n, k, &g.data, false, &tb.data, true, 0.0, &mut ga.data);
                    accumulate(&mut grads, *a, ga);
                    let mut gb = Tensor::zeros(k, n);
                    gemm(k, m, n, &ta.data, true, &g.data, false, 0.0, &mut gb.data);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    // out = a b^T: da = g b, db = g^T a
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows, ta.cols, tb.rows);
                    let mut ga = Tensor::zeros(m, k);
                    gemm(m, n, k, &g.data, false, &tb.data, false, 0.0, &mut ga.data);
                    accumulate(&mut grads, *a, ga);
                    let mut gb = Tensor::zeros(n, k);
                    gemm(n, m, k, &g.data, true, &ta.data, false, 0.0, &mut gb.data);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.data.iter_mut().for_each(|x| *x = -*x);
                    accumulate(&mut grads, *b, neg);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, zip_with(&g, tb, |gi, y| gi * y));
                    accumulate(&mut grads, *b, zip_with(&g, ta, |gi, x| gi * x));
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, column_sums(&g));
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let (ta, tr) = (self.value(*a), self.value(*row));
                    let mut grow = Tensor::zeros(1, tr.cols);
                    let mut ga = g.clone();
                    for (r, chunk) in ga.data.chunks_exact_mut(tr.cols).enumerate() {
                        let xa = ta.row(r);
                        for c in 0..tr.cols {
                            grow.data[c] += chunk[c] * xa[c];
                            chunk[c] *= tr.data[c];
                        }
                    }
                    accumulate(&mut grads, *row, grow);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.data.iter_mut().for_each(|x| *x *= s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        let dst = &mut ga.data[r * y.cols..(r + 1) * y.cols];
                        for c in 0..y.cols {
                            dst[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, inv_std } => {
                    let xhat = &node.value;
                    let n = xhat.cols as f64;
                    let mut ga = Tensor::zeros(xhat.rows, xhat.cols);
                    for r in 0..xhat.rows {
                        let xr = xhat.row(r);
                        let gr = g.row(r);
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gx: f64 = gr.iter().zip(xr).map(|(p, q)| p * q).sum();
                        let dst = &mut ga.data[r * xhat.cols..(r + 1) * xhat.cols];
                        for c in 0..xhat.cols {
                            dst[c] = inv_std[r] / n * (n * gr[c] - sum_g - xr[c] * sum_gx);
                        }
                    }
                    accumulate(&mut grads, *x, ga);
                }
                Op::Gelu(a) => {
                    let ta = self.value(*a);
                    accumulate(&mut grads, *a, zip_with(&g, ta, |gi, x| gi * gelu_grad(x)));
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    accumulate(&mut grads, *a, zip_with(&g, ta, |gi, x| if x > 0.0 { gi } else { 0.0 }));
                }
                Op::Sigmoid(a) => {
                    accumulate(&mut grads, *a, zip_with(&g, &node.value, |gi, s| gi * s * (1.0 - s)));
                }
                Op::Square(a) => {
                    let ta = self.value(*a);
                    accumulate(&mut grads, *a, zip_with(&g, ta, |gi, x| 2.0 * gi * x));
                }
                Op::Sum(a) => {
                    let ta = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::filled(ta.rows, ta.cols, g.data[0]));
                }
                Op::Mean(a) => {
                    let ta = self.value(*a);
                    let v = g.data[0] / ta.len() as f64;
                    accumulate(&mut grads, *a, Tensor::filled(ta.rows, ta.cols, v));
                }
                Op::MeanRows(a) => {
                    let ta = self.value(*a);
                    let inv = 1.0 / ta.rows as f64;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for chunk in ga.data.chunks_exact_mut(ta.cols) {
                        for (d, s) in chunk.iter_mut().zip(&g.data) {
                            *d = s * inv;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        let shapes = self.nodes[..=output.0].iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn zip_with(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().zip(&x.data).map(|(&a, &b)| f(a, b)).collect() }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols);
    for chunk in g.data.chunks_exact(g.cols) {
        for (o, x) in out.data.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient of a leaf; zeros when the leaf does not reach the output.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            Some(None) => Tensor::zeros(self.shapes[v.0][0], self.shapes[v.0][1]),
            None => Tensor::zeros(0, 0),
        }
    }

    /// Moves a leaf gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Result of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input, flat index, analytic, numeric)` for every entry above tolerance.
    pub failures: Vec<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Magnitudes below this are compared absolutely rather than relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the gradient of the scalar produced by `f` with central finite
/// differences of step `h` for every entry of every input.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_value(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_value(&tape, out)?;
    let grads = tape.backward(out, Tensor::scalar(1.0))?;

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, failures: Vec::new() };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for j in 0..inputs[i].len() {
            let orig = work[i].data[j];
            work[i].data[j] = orig + h;
            let up = eval(&work)?;
            work[i].data[j] = orig - h;
            let down = eval(&work)?;
            work[i].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic.data[j], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
            if err > tolerance {
                report.failures.push((i, j, analytic.data[j], numeric));
            }
        }
    }
    Ok(report)
}

fn scalar_value(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.shape() != [1, 1] {
        return Err(Error::Shape { op: "gradient_check", detail: format!("output is {}x{}, expected 1x1", t.rows, t.cols) });
    }
    Ok(t.data[0])
}
