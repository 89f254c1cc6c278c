//! Dense row-major matrices with a reverse-mode tape.
//!
//! Every forward primitive appends a node to a [`Tape`]; [`Tape::backward`]
//! walks the nodes in reverse, accumulating gradients additively wherever a
//! value fans out. ReLU, hinge and absolute-value kinks use subgradient 0.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// An `n x 1` column.
    pub fn column(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a `1 x 1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on a {}x{} tensor",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Selects rows by index, in order.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Plain matrix product without recording anything.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(self, false, other, false, &mut out, 0.0);
        Ok(out)
    }
}

/// `out = beta * out + op(a) * op(b)` where `op` optionally transposes.
fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool, out: &mut Tensor, beta: f64) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    debug_assert_eq!(out.shape(), (m, n));
    let (rsa, csa) = if ta { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if tb { (1, b.cols) } else { (b.cols, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe in-bounds views of `a`, `b` and `out`, whose
    // lengths were validated by the shape checks of the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    Ln { x: Var, floor: f64 },
    Square(Var),
    Abs(Var),
    MaxWith(Var, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ConcatCols(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Record of primitive operations for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    clamp_events: usize,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid.
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

/// `ln(1 + e^x)` computed without overflow.
pub fn softplus_scalar(x: f64) -> f64 {
    softplus(x)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            clamp_events: 0,
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of times a logarithm argument was clamped to its floor.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    /// Smallest distance of any non-smooth op input to its kink.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite output from {op:?}")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn track_kink(&mut self, x: Var, at: f64) {
        let m = self
            .value(x)
            .data
            .iter()
            .map(|v| (v - at).abs())
            .fold(f64::INFINITY, f64::min);
        self.kink_margin = self.kink_margin.min(m);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows != 1 || tr.cols != ta.cols {
            return Err(Error::Shape(format!(
                "add_row: {:?} + {:?}",
                ta.shape(),
                tr.shape()
            )));
        }
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (o, b) in out.data[r * out.cols..(r + 1) * out.cols]
                .iter_mut()
                .zip(&tr.data)
            {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.track_kink(a, 0.0);
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.track_kink(a, 0.0);
        let out = self.value(a).map(|x| if x > 0.0 { x } else { alpha * x });
        self.push(out, Op::LeakyRelu(a, alpha))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Natural log with arguments clamped from below at `floor`.
    ///
    /// Clamped entries get zero gradient and are counted in
    /// [`Tape::clamp_events`].
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let clamped = self.value(a).data.iter().filter(|&&x| x < floor).count();
        self.clamp_events += clamped;
        let out = self.value(a).map(|x| x.max(floor).ln());
        self.push(out, Op::Ln { x: a, floor })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.track_kink(a, 0.0);
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    /// Elementwise `max(x, c)`.
    pub fn max_with(&mut self, a: Var, c: f64) -> Result<Var> {
        self.track_kink(a, c);
        let out = self.value(a).map(|x| x.max(c));
        self.push(out, Op::MaxWith(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean over all entries; zero-size inputs are rejected.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let m = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Row sums: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::column((0..t.rows).map(|r| t.row(r).iter().sum()).collect());
        self.push(out, Op::SumCols(a))
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows != tb.rows {
            return Err(Error::Shape(format!(
                "concat_cols: {:?} with {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let cols = ta.cols + tb.cols;
        let mut data = Vec::with_capacity(ta.rows * cols);
        for r in 0..ta.rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor {
            rows: ta.rows,
            cols,
            data,
        };
        self.push(out, Op::ConcatCols(a, b))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let val = |v: Var| &self.nodes[v.0].value;
            let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    gemm(&g, false, tb, true, &mut ga, 0.0);
                    let mut gb = Tensor::zeros(tb.rows, tb.cols);
                    gemm(ta, true, &g, false, &mut gb, 0.0);
                    acc(a, ga);
                    acc(b, gb);
                }
                Op::Add(a, b) => {
                    acc(a, g.clone());
                    acc(b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(b, g.map(|x| -x));
                    acc(a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(a, g.zip_map(val(b), |x, y| x * y));
                    acc(b, g.zip_map(val(a), |x, y| x * y));
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, x) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(row, gr);
                    acc(a, g.clone());
                }
                Op::Scale(a, c) => acc(a, g.map(|x| x * c)),
                Op::AddScalar(a) => acc(a, g.clone()),
                Op::Relu(a) => acc(a, g.zip_map(val(a), |d, x| if x > 0.0 { d } else { 0.0 })),
                Op::LeakyRelu(a, alpha) => acc(
                    a,
                    g.zip_map(val(a), |d, x| {
                        if x > 0.0 {
                            d
                        } else if x < 0.0 {
                            alpha * d
                        } else {
                            0.0
                        }
                    }),
                ),
                Op::Sigmoid(a) => acc(
                    a,
                    g.zip_map(&node.value, |d, s| d * s * (1.0 - s)),
                ),
                Op::Softplus(a) => acc(a, g.zip_map(val(a), |d, x| d * sigmoid(x))),
                Op::Tanh(a) => acc(a, g.zip_map(&node.value, |d, t| d * (1.0 - t * t))),
                Op::Ln { x, floor } => acc(
                    x,
                    g.zip_map(val(x), |d, v| if v < floor { 0.0 } else { d / v }),
                ),
                Op::Square(a) => acc(a, g.zip_map(val(a), |d, x| 2.0 * x * d)),
                Op::Abs(a) => acc(a, g.zip_map(val(a), |d, x| d * sign0(x))),
                Op::MaxWith(a, c) => {
                    acc(a, g.zip_map(val(a), |d, x| if x > c { d } else { 0.0 }))
                }
                Op::Sum(a) => {
                    let t = val(a);
                    acc(a, Tensor::full(t.rows, t.cols, g.data[0]));
                }
                Op::Mean(a) => {
                    let t = val(a);
                    let n = t.data.len() as f64;
                    acc(a, Tensor::full(t.rows, t.cols, g.data[0] / n));
                }
                Op::SumCols(a) => {
                    let t = val(a);
                    acc(a, Tensor::from_fn(t.rows, t.cols, |r, _| g.data[r]));
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (val(a).cols, val(b).cols);
                    let ga = Tensor::from_fn(g.rows, ca, |r, c| g.get(r, c));
                    let gb = Tensor::from_fn(g.rows, cb, |r, c| g.get(r, ca + c));
                    acc(a, ga);
                    acc(b, gb);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients of a scalar loss with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

/// Result of comparing tape gradients with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat coordinate)` where the worst relative error occurred.
    pub worst: (usize, usize),
    /// Smallest distance of a non-smooth op input to its kink at the base point.
    pub kink_margin: f64,
}

/// Checks reverse-mode gradients of `f` against central finite differences.
///
/// `f` records a scalar loss on a fresh tape given one leaf per input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let kink_margin = tape.kink_margin();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        kink_margin,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, (&v, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get_or_zeros(v, input);
        for j in 0..input.data.len() {
            let orig = input.data[j];
            probe[k].data[j] = orig + step;
            let up = eval(&probe)?;
            probe[k].data[j] = orig - step;
            let down = eval(&probe)?;
            probe[k].data[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, j);
            }
        }
    }
    Ok(report)
}
