use crate::error::{Error, Result};
use crate::numerics::{cholesky, expand_with, matmul, matmul_t, monomial_indices, t_matmul, Matrix};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) id: usize,
    pub(crate) requires_grad: bool,
}

impl Var {
    pub fn node_id(&self) -> usize {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    ScalarMul(usize, f64),
    ElemMul(usize, usize),
    Relu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Monomial {
        x: usize,
        monos: Vec<Vec<usize>>,
    },
    GramPoly {
        x: usize,
        y: usize,
        degree: u32,
        base: Matrix,
    },
    Trace(usize),
    Mean(usize),
    Sum(usize),
    Square(usize),
    Sqrt(usize),
    LogDet {
        a: usize,
        inv: Matrix,
    },
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Transpose(usize),
    CenterCols(usize),
    ColMean(usize),
    DoubleCenter(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run reverse-mode tape. Forward values are computed eagerly.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

/// Small integer powers without the generic `powi` call.
#[inline]
fn ipow(x: f64, e: i32) -> f64 {
    match e {
        0 => 1.0,
        1 => x,
        2 => x * x,
        3 => x * x * x,
        _ => x.powi(e),
    }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.id].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            requires_grad,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(v, Op::MatMul(a.id, b.id), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(v, Op::Add(a.id, b.id), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(v, Op::Sub(a.id, b.id), rg))
    }

    /// `a + 1 rowᵀ`: adds a 1 x c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape("add_row", format!("{:?} + row {:?}", av.shape(), rv.shape())));
        }
        let mut v = av.clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let rg = self.rg(&[a.id, row.id]);
        Ok(self.push(v, Op::AddRow(a.id, row.id), rg))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a.id]);
        self.push(v, Op::ScalarMul(a.id, s), rg)
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(v, Op::ElemMul(a.id, b.id), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a.id]);
        self.push(v, Op::Relu(a.id), rg)
    }

    /// Per-row feature normalisation followed by the affine `gain`/`bias` (both 1 x c).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.value(p).shape() != (1, c) {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} {:?} for width {c}", self.value(p).shape()),
                ));
            }
        }
        let mut xhat = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mu) * inv;
            }
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = xhat.clone();
        for i in 0..n {
            for ((o, gj), bj) in out.row_mut(i).iter_mut().zip(&g).zip(&b) {
                *o = *o * gj + bj;
            }
        }
        let rg = self.rg(&[x.id, gain.id, bias.id]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// All monomials of total degree ≤ `degree`, graded-lex with the constant first.
    pub fn monomial_map(&mut self, x: Var, degree: usize) -> Var {
        let monos = monomial_indices(self.value(x).cols(), degree);
        let v = expand_with(self.value(x), &monos);
        let rg = self.rg(&[x.id]);
        self.push(v, Op::Monomial { x: x.id, monos }, rg)
    }

    /// Polynomial kernel gram matrix `(x_i·y_j + offset)^degree`.
    pub fn gram_poly_kernel(&mut self, x: Var, y: Var, degree: u32, offset: f64) -> Result<Var> {
        let mut base = matmul_t(self.value(x), self.value(y))
            .map_err(|_| Error::shape("gram_poly_kernel", "feature widths differ"))?;
        base.data_mut().iter_mut().for_each(|v| *v += offset);
        let v = base.map(|s| ipow(s, degree as i32));
        let rg = self.rg(&[x.id, y.id]);
        Ok(self.push(
            v,
            Op::GramPoly {
                x: x.id,
                y: y.id,
                degree,
                base,
            },
            rg,
        ))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != av.cols() {
            return Err(Error::shape("trace", format!("{:?} not square", av.shape())));
        }
        let v = Matrix::scalar(av.trace());
        let rg = self.rg(&[a.id]);
        Ok(self.push(v, Op::Trace(a.id), rg))
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).mean());
        let rg = self.rg(&[a.id]);
        self.push(v, Op::Mean(a.id), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a.id]);
        self.push(v, Op::Sum(a.id), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a.id]);
        self.push(v, Op::Square(a.id), rg)
    }

    /// Elementwise square root; subgradient 0 at 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0).sqrt());
        let rg = self.rg(&[a.id]);
        self.push(v, Op::Sqrt(a.id), rg)
    }

    /// `log det A` for symmetric positive-definite `A` (lower triangle is read).
    pub fn log_det(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = av.rows();
        if av.cols() != n {
            return Err(Error::shape("log_det", format!("{:?} not square", av.shape())));
        }
        let sym = Matrix::from_fn(n, n, |i, j| if i >= j { av.get(i, j) } else { av.get(j, i) });
        let chol = cholesky(&sym)?;
        let v = Matrix::scalar(chol.log_det());
        let inv = chol.inverse();
        let rg = self.rg(&[a.id]);
        Ok(self.push(v, Op::LogDet { a: a.id, inv }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {}", av.cols())));
        }
        let v = av.slice_cols(start, end);
        let rg = self.rg(&[a.id]);
        Ok(self.push(v, Op::SliceCols(a.id, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.rows() {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {}", av.rows())));
        }
        let v = av.slice_rows(start, end);
        let rg = self.rg(&[a.id]);
        Ok(self.push(v, Op::SliceRows(a.id, start), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a.id]);
        self.push(v, Op::Transpose(a.id), rg)
    }

    /// Subtracts each column's mean.
    pub fn center_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).center_cols();
        let rg = self.rg(&[a.id]);
        self.push(v, Op::CenterCols(a.id), rg)
    }

    /// Column means as a 1 x c row.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let v = self.value(a).col_means();
        let rg = self.rg(&[a.id]);
        self.push(v, Op::ColMean(a.id), rg)
    }

    /// `H A H` with the centering matrix `H = I − 11ᵀ/m`.
    pub fn double_center(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != av.cols() {
            return Err(Error::shape("double_center", format!("{:?} not square", av.shape())));
        }
        let v = double_center(av);
        let rg = self.rg(&[a.id]);
        Ok(self.push(v, Op::DoubleCenter(a.id), rg))
    }

    /// Reverse sweep from a 1x1 loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Matrix::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&g).expect("gradient shape"),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        let needs = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, matmul_t(g, val(*b))?);
                }
                if needs(*b) {
                    self.accumulate(grads, *b, t_matmul(val(*a), g)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                if needs(*r) {
                    let mut s = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (o, v) in s.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *r, Matrix::row_vector(&s));
                }
            }
            Op::ScalarMul(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::ElemMul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.hadamard(val(*b))?);
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.hadamard(val(*a))?);
                }
            }
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, c) = g.shape();
                let gv = val(*gain).data();
                if needs(*gain) || needs(*bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            dg[j] += g.get(i, j) * xhat.get(i, j);
                            db[j] += g.get(i, j);
                        }
                    }
                    self.accumulate(grads, *gain, Matrix::row_vector(&dg));
                    self.accumulate(grads, *bias, Matrix::row_vector(&db));
                }
                if needs(*x) {
                    let mut dx = Matrix::zeros(n, c);
                    let cf = c as f64;
                    for i in 0..n {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xr[j];
                        }
                        let inv = inv_std[i];
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            let d = gr[j] * gv[j];
                            *o = inv / cf * (cf * d - sum_d - xr[j] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Monomial { x, monos } => {
                let xv = val(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let row = xv.row(i);
                    let grow = g.row(i);
                    let drow = dx.row_mut(i);
                    for (m, gm) in monos.iter().zip(grow) {
                        if *gm == 0.0 {
                            continue;
                        }
                        for t in 0..m.len() {
                            let mut prod = 1.0;
                            for (s, &v) in m.iter().enumerate() {
                                if s != t {
                                    prod *= row[v];
                                }
                            }
                            drow[m[t]] += gm * prod;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GramPoly { x, y, degree, base } => {
                let d = *degree as i32;
                let gs = g.zip_map(base, |gv, s| gv * d as f64 * ipow(s, d - 1))?;
                if needs(*x) {
                    self.accumulate(grads, *x, matmul(&gs, val(*y))?);
                }
                if needs(*y) {
                    self.accumulate(grads, *y, t_matmul(&gs, val(*x))?);
                }
            }
            Op::Trace(a) => {
                let n = val(*a).rows();
                self.accumulate(grads, *a, Matrix::identity(n).scale(g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::Square(a) => {
                let d = g.zip_map(val(*a), |gv, x| 2.0 * x * gv)?;
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let d = g.zip_map(&node.value, |gv, r| if r > 0.0 { gv / (2.0 * r) } else { 0.0 })?;
                self.accumulate(grads, *a, d);
            }
            Op::LogDet { a, inv } => {
                // d log det A / dA = A⁻ᵀ; A is symmetric so A⁻¹ is too
                self.accumulate(grads, *a, inv.scale(g.item()));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                d.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                self.accumulate(grads, *a, d);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::CenterCols(a) => self.accumulate(grads, *a, g.center_cols()),
            Op::ColMean(a) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.data()) {
                        *o = v / r as f64;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::DoubleCenter(a) => self.accumulate(grads, *a, double_center(g)),
        }
        Ok(())
    }
}

/// `H A H` without forming `H`.
fn double_center(a: &Matrix) -> Matrix {
    let n = a.rows();
    let row_means: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum::<f64>() / n as f64).collect();
    let col_means = a.col_means();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    Matrix::from_fn(n, n, |i, j| a.get(i, j) - row_means[i] - col_means.data()[j] + grand)
}
