//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Values are computed eagerly as operations are recorded. Every node holds a
//! rank-2 matrix; batches are rows. Constants are leaves that do not require
//! gradients, and the backward pass skips every node that does not depend on
//! a parameter.

use nalgebra::DMatrix;

use crate::activation::Activation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Marks an output entry of a gather that is identically zero.
const ZERO: (u32, u32) = (u32::MAX, u32::MAX);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Hadamard(Var, Var),
    /// `x + 1·row` with `row` of shape `1×c`.
    AddRow(Var, Var),
    /// Row `i` of `x` times `s[i]` with `s` of shape `r×1`.
    MulRows(Var, Var),
    /// Output entry `k` (column-major) copies entry `map[k].1` of source
    /// `map[k].0`.
    Gather {
        sources: Vec<Var>,
        map: Vec<(u32, u32)>,
    },
    Sum(Var),
    Mean(Var),
    Act(Var, Activation),
    RowNorms(Var),
    Recip(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: DMatrix<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to the leaf `v`, zero if `v` does not influence
    /// the output.
    pub fn wrt(&self, v: Var) -> DMatrix<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => DMatrix::zeros(self.shapes[v.0].0, self.shapes[v.0].1),
        }
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn accumulate(slot: &mut Option<DMatrix<f64>>, g: DMatrix<f64>) {
    match slot {
        Some(s) => *s += g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &str, value: DMatrix<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable input.
    pub fn param(&mut self, value: DMatrix<f64>) -> Result<Var> {
        self.push("param", value, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: DMatrix<f64>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// The single entry of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let v = self.value(a) * self.value(b);
        let n = self.needs(&[a, b]);
        self.push("matmul", v, Op::MatMul(a, b), n)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        let n = self.needs(&[a]);
        self.push("transpose", v, Op::Transpose(a), n)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        let n = self.needs(&[a, b]);
        self.push("add", v, Op::Add(a, b), n)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        let n = self.needs(&[a, b]);
        self.push("sub", v, Op::Sub(a, b), n)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a) * c;
        let n = self.needs(&[a]);
        self.push("scale", v, Op::Scale(a, c), n)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).add_scalar(c);
        let n = self.needs(&[a]);
        self.push("add_scalar", v, Op::AddScalar(a), n)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let v = self.value(a).component_mul(self.value(b));
        let n = self.needs(&[a, b]);
        self.push("hadamard", v, Op::Hadamard(a, b), n)
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr != (1, sx.1) {
            return Err(shape_err("add_row", sx, sr));
        }
        let mut v = self.value(x).clone();
        let r = self.value(row);
        for mut xr in v.row_iter_mut() {
            xr += r;
        }
        let n = self.needs(&[x, row]);
        self.push("add_row", v, Op::AddRow(x, row), n)
    }

    /// Multiplies row `i` of `x` by `s[i]`, with `s` an `r×1` column.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if ss != (sx.0, 1) {
            return Err(shape_err("mul_rows", sx, ss));
        }
        let mut v = self.value(x).clone();
        let sv = self.value(s);
        for (i, mut xr) in v.row_iter_mut().enumerate() {
            xr *= sv[i];
        }
        let n = self.needs(&[x, s]);
        self.push("mul_rows", v, Op::MulRows(x, s), n)
    }

    /// General index-based gather from several sources. `map` lists, in
    /// column-major output order, `Some((source, row, col))` or `None` for a
    /// zero entry. Backward scatter-adds, so repeated entries broadcast.
    pub fn gather(
        &mut self,
        sources: &[Var],
        rows: usize,
        cols: usize,
        map: impl IntoIterator<Item = Option<(usize, usize, usize)>>,
    ) -> Result<Var> {
        let mut flat = Vec::with_capacity(rows * cols);
        let mut v = DMatrix::zeros(rows, cols);
        for (k, entry) in map.into_iter().enumerate() {
            if k >= rows * cols {
                return Err(Error::Shape("gather map is longer than the output".into()));
            }
            match entry {
                None => flat.push(ZERO),
                Some((s, r, c)) => {
                    let src = sources
                        .get(s)
                        .ok_or(Error::IndexOutOfRange { index: s, len: sources.len() })?;
                    let m = self.value(*src);
                    if r >= m.nrows() || c >= m.ncols() {
                        return Err(Error::Shape(format!(
                            "gather reads ({r}, {c}) from a {:?} source",
                            m.shape()
                        )));
                    }
                    v[k] = m[(r, c)];
                    flat.push((s as u32, (c * m.nrows() + r) as u32));
                }
            }
        }
        if flat.len() != rows * cols {
            return Err(Error::Shape("gather map is shorter than the output".into()));
        }
        let n = self.needs(sources);
        self.push(
            "gather",
            v,
            Op::Gather {
                sources: sources.to_vec(),
                map: flat,
            },
            n,
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (_, c) = self.shape(x);
        let map: Vec<_> = (0..c)
            .flat_map(|j| rows.iter().map(move |&i| Some((0, i, j))))
            .collect();
        self.gather(&[x], rows.len(), c, map)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select_rows(x, &rows)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::Shape(format!("column slice {start}+{len} of {c} columns")));
        }
        let map: Vec<_> = (start..start + len)
            .flat_map(|j| (0..r).map(move |i| Some((0, i, j))))
            .collect();
        self.gather(&[x], r, len, map)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map_or(0, |p| self.shape(*p).1);
        if parts.iter().any(|p| self.shape(*p).1 != c) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let mut index = Vec::new();
        for (s, p) in parts.iter().enumerate() {
            for i in 0..self.shape(*p).0 {
                index.push((s, i));
            }
        }
        let rows = index.len();
        let map: Vec<_> = (0..c)
            .flat_map(|j| index.iter().map(move |&(s, i)| Some((s, i, j))))
            .collect();
        self.gather(parts, rows, c, map)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |p| self.shape(*p).0);
        if parts.iter().any(|p| self.shape(*p).0 != r) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let mut map = Vec::new();
        for (s, p) in parts.iter().enumerate() {
            for j in 0..self.shape(*p).1 {
                map.extend((0..r).map(|i| Some((s, i, j))));
            }
        }
        let cols = map.len() / r.max(1);
        self.gather(parts, r, cols, map)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r0, c0) = self.shape(x);
        if r0 * c0 != rows * cols {
            return Err(shape_err("reshape", (r0, c0), (rows, cols)));
        }
        let map: Vec<_> = (0..cols)
            .flat_map(|j| {
                (0..rows).map(move |i| {
                    let k = i * cols + j;
                    Some((0, k / c0, k % c0))
                })
            })
            .collect();
        self.gather(&[x], rows, cols, map)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = DMatrix::from_element(1, 1, self.value(x).sum());
        let n = self.needs(&[x]);
        self.push("sum", v, Op::Sum(x), n)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x);
        if m.is_empty() {
            return Err(Error::Shape("mean of an empty matrix".into()));
        }
        let v = DMatrix::from_element(1, 1, m.sum() / m.len() as f64);
        let n = self.needs(&[x]);
        self.push("mean", v, Op::Mean(x), n)
    }

    /// Mean over rows: `r×c` to `1×c`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, _) = self.shape(x);
        if r == 0 {
            return Err(Error::Shape("mean over zero rows".into()));
        }
        let ones = self.constant(DMatrix::from_element(1, r, 1.0 / r as f64))?;
        self.matmul(ones, x)
    }

    pub fn activation(&mut self, x: Var, sigma: Activation) -> Result<Var> {
        if sigma == Activation::Identity {
            return Ok(x);
        }
        let v = self.value(x).map(|a| sigma.apply(a));
        let n = self.needs(&[x]);
        self.push(sigma.name(), v, Op::Act(x, sigma), n)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Elu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Euclidean norm of every row (`r×c` to `r×1`); the gradient at a zero
    /// row is zero.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x);
        let v = DMatrix::from_iterator(m.nrows(), 1, m.row_iter().map(|r| r.norm()));
        let n = self.needs(&[x]);
        self.push("row_norms", v, Op::RowNorms(x), n)
    }

    /// Distance of the recorded values from the points where the graph is
    /// not smooth: the smallest `|input|` of any ReLU or ELU (ELU's second
    /// derivative jumps at 0) and the smallest row norm. Infinite when no
    /// such node was recorded.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let values = match node.op {
                Op::Act(x, Activation::Relu | Activation::Elu) => &self.nodes[x.0].value,
                Op::RowNorms(_) => &node.value,
                _ => continue,
            };
            margin = values.iter().fold(margin, |m, v| m.min(v.abs()));
        }
        margin
    }

    /// `‖x‖` of a whole node as `1×1`, with a zero gradient at the origin.
    pub fn safe_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let flat = self.reshape(x, 1, r * c)?;
        self.row_norms(flat)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| 1.0 / a);
        let n = self.needs(&[x]);
        self.push("recip", v, Op::Recip(x), n)
    }

    /// Scales every row to unit norm (rows must be nonzero).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.row_norms(x)?;
        let inv = self.recip(n)?;
        self.mul_rows(x, inv)
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (b, c) = z.shape();
        if labels.len() != b || b == 0 {
            return Err(Error::Shape(format!("{} labels for {b} rows of logits", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::IndexOutOfRange { index: bad, len: c });
        }
        let mut probs = z.clone();
        let mut loss = 0.0;
        for (i, mut row) in probs.row_iter_mut().enumerate() {
            let max = row.max();
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            row.apply(|v| *v = (*v - lse).exp());
        }
        let v = DMatrix::from_element(1, 1, loss / b as f64);
        let n = self.needs(&[logits]);
        self.push(
            "softmax_cross_entropy",
            v,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            n,
        )
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.shape(out) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(DMatrix::from_element(1, 1, 1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let needs = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], &g * self.value(*b).transpose());
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], self.value(*a).transpose() * &g);
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()),
                Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], -g);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], g * *c),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g),
                Op::Hadamard(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], g.component_mul(self.value(*b)));
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], g.component_mul(self.value(*a)));
                    }
                }
                Op::AddRow(x, row) => {
                    if needs(row) {
                        accumulate(&mut grads[row.0], DMatrix::from_iterator(1, g.ncols(), g.row_sum().iter().copied()));
                    }
                    if needs(x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::MulRows(x, s) => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    if needs(s) {
                        let ds = DMatrix::from_iterator(
                            xv.nrows(),
                            1,
                            (0..xv.nrows()).map(|i| g.row(i).dot(&xv.row(i))),
                        );
                        accumulate(&mut grads[s.0], ds);
                    }
                    if needs(x) {
                        let mut dx = g;
                        for (i, mut r) in dx.row_iter_mut().enumerate() {
                            r *= sv[i];
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Gather { sources, map } => {
                    let mut local: Vec<Option<DMatrix<f64>>> = sources
                        .iter()
                        .map(|s| {
                            needs(s).then(|| {
                                let (r, c) = self.shape(*s);
                                DMatrix::zeros(r, c)
                            })
                        })
                        .collect();
                    for (k, &(s, j)) in map.iter().enumerate() {
                        if (s, j) == ZERO {
                            continue;
                        }
                        if let Some(m) = &mut local[s as usize] {
                            m[j as usize] += g[k];
                        }
                    }
                    for (s, m) in sources.iter().zip(local) {
                        if let Some(m) = m {
                            accumulate(&mut grads[s.0], m);
                        }
                    }
                }
                Op::Sum(x) => {
                    let (r, c) = self.shape(*x);
                    accumulate(&mut grads[x.0], DMatrix::from_element(r, c, g[0]));
                }
                Op::Mean(x) => {
                    let (r, c) = self.shape(*x);
                    accumulate(&mut grads[x.0], DMatrix::from_element(r, c, g[0] / (r * c) as f64));
                }
                Op::Act(x, sigma) => {
                    let d = self.value(*x).map(|a| sigma.derivative(a));
                    accumulate(&mut grads[x.0], g.component_mul(&d));
                }
                Op::RowNorms(x) => {
                    let xv = self.value(*x);
                    let nv = &node.value;
                    let mut dx = xv.clone();
                    for (i, mut r) in dx.row_iter_mut().enumerate() {
                        let n = nv[i];
                        if n > 0.0 {
                            r *= g[i] / n;
                        } else {
                            r.fill(0.0);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Recip(x) => {
                    let d = self.value(*x).map(|a| -1.0 / (a * a));
                    accumulate(&mut grads[x.0], g.component_mul(&d));
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let b = labels.len() as f64;
                    let mut d = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        d[(i, y)] -= 1.0;
                    }
                    accumulate(&mut grads[logits.0], d * (g[0] / b));
                }
            }
        }
        if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("backward pass".into()));
        }
        let shapes = self.nodes[..=out.0].iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Central-difference check of the gradient of a scalar function of several
/// inputs. Returns, per input, `max |analytic − numeric| / max(|analytic|,
/// |numeric|, 1e-8)` over its coordinates.
pub fn gradient_check_many<F>(f: F, inputs: &[DMatrix<f64>], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[DMatrix<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs
            .iter()
            .map(|x| tape.param(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| tape.param(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut work = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for (g, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut numeric = DMatrix::zeros(analytic.nrows(), analytic.ncols());
        for k in 0..inputs[g].len() {
            let orig = work[g][k];
            work[g][k] = orig + step;
            let plus = eval(&work)?;
            work[g][k] = orig - step;
            let minus = eval(&work)?;
            work[g][k] = orig;
            numeric[k] = (plus - minus) / (2.0 * step);
        }
        let worst = analytic
            .iter()
            .zip(numeric.iter())
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, f64::max);
        errors.push(worst);
    }
    Ok(errors)
}

/// Single-input form of [`gradient_check_many`].
pub fn gradient_check<F>(f: F, x: &DMatrix<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Ok(gradient_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), step)?[0])
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut DMatrix<f64>], grads: &[DMatrix<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| DMatrix::zeros(g.nrows(), g.ncols())).collect();
            self.v = self.m.clone();
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m.get(i).map(|m| m.shape()) != Some(g.shape()) {
                return Err(Error::Shape(format!("parameter {i} and its gradient or state differ in shape")));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let b = random(2, 2, 1);
        let err = gradient_check(
            |t, a| {
                let bv = t.constant(b.clone())?;
                let p = t.matmul(a, bv)?;
                let w = t.constant(DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]))?;
                let h = t.hadamard(p, w)?;
                t.sum(h)
            },
            &random(2, 2, 2),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn squared_norm_gradient_is_exact() {
        let err = gradient_check(
            |t, x| {
                let sq = t.hadamard(x, x)?;
                t.sum(sq)
            },
            &random(3, 4, 5),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn elu_is_continuously_differentiable_at_zero() {
        let mut t = Tape::new();
        let x = t.param(DMatrix::from_row_slice(1, 3, &[0.0, 1e-300, -1e-300])).unwrap();
        let y = t.elu(x).unwrap();
        assert_eq!(t.value(y)[0], 0.0);
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap().wrt(x);
        for k in 0..3 {
            assert!((g[k] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_cross_entropy_is_small() {
        let mut t = Tape::new();
        let z = t.constant(DMatrix::from_row_slice(1, 3, &[10.0, 0.0, 0.0])).unwrap();
        let loss = t.softmax_cross_entropy(z, &[0]).unwrap();
        let want = (1.0 + 2.0 * (-10.0f64).exp()).ln();
        assert!((t.scalar(loss) - want).abs() < 1e-15);
        assert!(t.scalar(loss) < 1e-4);
    }

    #[test]
    fn every_primitive_passes_a_gradient_check() {
        let x = random(3, 4, 11).map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
        let row = random(1, 4, 12);
        let col = random(3, 1, 13);
        let err = gradient_check_many(
            |t, v| {
                let (x, row, col) = (v[0], v[1], v[2]);
                let a = t.add_row(x, row)?;
                let b = t.mul_rows(a, col)?;
                let c = t.elu(b)?;
                let d = t.sigmoid(c)?;
                let e = t.relu(x)?;
                let f = t.sub(d, e)?;
                let g = t.transpose(f)?;
                let h = t.reshape(g, 2, 6)?;
                let i = t.slice_cols(h, 1, 4)?;
                let j = t.concat_rows(&[i, i])?;
                let k = t.normalize_rows(j)?;
                let n = t.row_norms(x)?;
                let n = t.add_scalar(n, 0.5)?;
                let m = t.recip(n)?;
                let m = t.scale(m, 3.0)?;
                let s = t.sum(m)?;
                let labels = [0, 3, 1, 2];
                let ce = t.softmax_cross_entropy(k, &labels)?;
                let p = t.concat_cols(&[ce, s])?;
                let sel = t.select_rows(x, &[2, 0, 2])?;
                let q = t.mean(sel)?;
                let q = t.concat_cols(&[p, q])?;
                let w = t.constant(DMatrix::from_row_slice(3, 1, &[1.0, 0.3, -0.7]))?;
                let out = t.matmul(q, w)?;
                let nr = t.safe_norm(x)?;
                let mr = t.mean_rows(x)?;
                let mr = t.sum(mr)?;
                let out = t.add(out, nr)?;
                t.add(out, mr)
            },
            &[x, row, col],
            1e-5,
        )
        .unwrap();
        for e in err {
            assert!(e < 1e-6, "{e}");
        }
    }

    #[test]
    fn gather_broadcast_accumulates() {
        let mut t = Tape::new();
        let b = t.param(DMatrix::from_row_slice(1, 2, &[1.0, 2.0])).unwrap();
        let y = t
            .gather(&[b], 3, 2, (0..6).map(|k| if k == 5 { None } else { Some((0, 0, k / 3)) }))
            .unwrap();
        assert_eq!(t.value(y).as_slice(), &[1.0, 1.0, 1.0, 2.0, 2.0, 0.0]);
        let s = t.sum(y).unwrap();
        assert_eq!(t.backward(s).unwrap().wrt(b).as_slice(), &[3.0, 2.0]);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut t = Tape::new();
        let z = t.constant(DMatrix::zeros(1, 1)).unwrap();
        assert!(matches!(t.recip(z), Err(Error::NonFinite(_))));
        assert!(t.constant(DMatrix::from_element(1, 1, f64::NAN)).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(DMatrix::zeros(2, 3)).unwrap();
        let b = t.constant(DMatrix::zeros(2, 3)).unwrap();
        assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
        assert!(t.add_row(a, b).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(random(2, 2, 3)).unwrap();
        let p = t.param(random(2, 2, 4)).unwrap();
        let m = t.matmul(c, p).unwrap();
        let s = t.sum(m).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(c), DMatrix::zeros(2, 2));
        assert_ne!(g.wrt(p), DMatrix::zeros(2, 2));
    }

    #[test]
    fn forward_values_are_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.param(random(4, 4, 9)).unwrap();
            let y = t.matmul(x, x).unwrap();
            let z = t.elu(y).unwrap();
            let z = t.normalize_rows(z).unwrap();
            t.value(z).clone()
        };
        assert_eq!(run().as_slice(), run().as_slice());
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = random(2, 3, 1);
        let before = p.clone();
        let mut adam = Adam::new(0.1);
        adam.step(&mut [&mut p], &[DMatrix::zeros(2, 3)]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        let g = DMatrix::from_row_slice(1, 3, &[0.5, -2.0, 1e-3]);
        let mut p = DMatrix::zeros(1, 3);
        let mut adam = Adam::new(0.01);
        adam.step(&mut [&mut p], &[g.clone()]).unwrap();
        for k in 0..3 {
            let want = -0.01 * g[k] / (g[k].abs() + 1e-8);
            assert!((p[k] - want).abs() < 1e-15, "{} vs {want}", p[k]);
        }
    }

    #[test]
    fn adam_constant_gradient_steps_approach_lr() {
        let mut p = DMatrix::zeros(1, 2);
        let g = DMatrix::from_row_slice(1, 2, &[3.0, -0.2]);
        let mut adam = Adam::new(0.001);
        for _ in 0..1000 {
            let before = p.clone();
            adam.step(&mut [&mut p], &[g.clone()]).unwrap();
            let step = &p - before;
            assert!((step[0] + 0.001).abs() < 1e-9 && (step[1] - 0.001).abs() < 1e-9);
        }
    }

    #[test]
    fn kink_margin_sees_relu_elu_inputs_and_norms() {
        let mut t = Tape::new();
        assert_eq!(t.kink_margin(), f64::INFINITY);
        let x = t.param(DMatrix::from_row_slice(2, 2, &[0.3, -0.5, 2.0, 0.9])).unwrap();
        let s = t.sigmoid(x).unwrap();
        assert_eq!(t.kink_margin(), f64::INFINITY);
        t.elu(x).unwrap();
        assert_eq!(t.kink_margin(), 0.3);
        let y = t.scale(x, 0.1).unwrap();
        t.relu(y).unwrap();
        assert!((t.kink_margin() - 0.03).abs() < 1e-15);
        let small = t.scale(s, 1e-3).unwrap();
        t.row_norms(small).unwrap();
        let rows = t.value(s).row_iter().map(|r| 1e-3 * r.norm()).fold(f64::INFINITY, f64::min);
        assert_eq!(t.kink_margin(), rows);
    }
}
