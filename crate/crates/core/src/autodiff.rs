//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameter leaves
//! borrow their values from a [`ParameterStore`] instead of copying them, so
//! recording an inference pass over a large embedding table is cheap.
//! [`Tape::backward`] walks the record in reverse and returns [`Gradients`]
//! keyed by parameter id.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::params::{Matrix, ParamId, ParameterStore};

/// Floor applied to row norms so that normalising a zero row stays finite.
pub const NORM_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Input,
    Gather { table: Var, ids: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Matrix),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    Diag(Var),
    Sum(Var),
    Mean(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
}

struct Node {
    op: Op,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Matrix>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Tape<'a> {
    store: &'a ParameterStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(m), _) => m.view(),
            (None, Op::Param(id)) => self.store.value(*id).view(),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        debug_assert!(value.iter().all(|x| !x.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    /// Constant leaf; receives no gradient unless [`Tape::input_with_grad`] is used.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(Op::Input, value, false)
    }

    /// Leaf that tracks its gradient, for checking ops against their inputs.
    pub fn input_with_grad(&mut self, value: Matrix) -> Var {
        self.push(Op::Input, value, true)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let rows = t.nrows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::TokenOutOfVocab {
                id: bad,
                vocab_size: rows,
            });
        }
        let mut out = Matrix::zeros((ids.len(), t.ncols()));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "matmul: {:?} x {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let out = av.dot(&bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "matmul_t: {:?} x {:?}ᵀ",
                av.dim(),
                bv.dim()
            )));
        }
        let out = av.dot(&bv.t());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulT(a, b), out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let out = &self.value(a) + &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let out = &self.value(a) - &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let out = &self.value(a) * &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    /// Adds the `1 × n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.nrows() != 1 || bv.ncols() != av.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "add_row: {:?} + {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let out = &av + &bv;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Op::AddRow(a, bias), out, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).mapv(|x| x * factor);
        let rg = self.rg(a);
        self.push(Op::Scale(a, factor), out, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), out, rg)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Result<Var> {
        if self.shape(a) != mask.dim() {
            return Err(Error::DimensionMismatch("mul_const".into()));
        }
        let out = &self.value(a) * &mask;
        let rg = self.rg(a);
        Ok(self.push(Op::MulConst(a, mask), out, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(Op::Relu(a), out, rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(Op::Gelu(a), out, rg)
    }

    /// Row-wise layer normalisation with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.ncols();
        if self.shape(gamma) != (1, n) || self.shape(beta) != (1, n) {
            return Err(Error::DimensionMismatch("layer_norm gain/bias".into()));
        }
        let mut xhat = Matrix::zeros(xv.raw_dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            Zip::from(xhat.row_mut(r))
                .and(&row)
                .for_each(|o, &v| *o = (v - mean) * is);
        }
        let out = &xhat * &self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
            rg,
        ))
    }

    /// Row-wise softmax where columns with `keep[c] == false` get probability zero.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let av = self.value(a);
        if keep.len() != av.ncols() {
            return Err(Error::DimensionMismatch("masked_softmax mask".into()));
        }
        let mut out = Matrix::zeros(av.raw_dim());
        for (r, row) in av.rows().into_iter().enumerate() {
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for (c, (&v, &k)) in row.iter().zip(keep).enumerate() {
                if k {
                    let e = (v - max).exp();
                    out[[r, c]] = e;
                    total += e;
                }
            }
            out.row_mut(r).mapv_inplace(|e| e / total);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::MaskedSoftmax(a), out, rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let rg = self.rg(a);
        self.push(Op::LogSoftmax(a), out, rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "slice_cols {start}..{end} of {}",
                av.ncols()
            )));
        }
        let out = av.slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols(a, start), out, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concatenate(Axis(1), &views)
            .map_err(|e| Error::DimensionMismatch(format!("concat_cols: {e}")))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concatenate(Axis(0), &views)
            .map_err(|e| Error::DimensionMismatch(format!("concat_rows: {e}")))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, rg))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let out = self.value(a).slice(s![r..r + 1, ..]).to_owned();
        let rg = self.rg(a);
        self.push(Op::Row(a, r), out, rg)
    }

    /// Diagonal of a square matrix as a `1 × n` row.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.nrows() != av.ncols() {
            return Err(Error::DimensionMismatch("diag of non-square".into()));
        }
        let out = Array2::from_shape_fn((1, av.nrows()), |(_, i)| av[[i, i]]);
        let rg = self.rg(a);
        Ok(self.push(Op::Diag(a), out, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), out, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Matrix::from_elem((1, 1), av.sum() / av.len() as f64);
        let rg = self.rg(a);
        self.push(Op::Mean(a), out, rg)
    }

    /// Divides each row by its L2 norm (floored at [`NORM_EPS`]).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.to_owned();
        let mut norms = Vec::with_capacity(av.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            norms.push(n);
            row.mapv_inplace(|v| v / n);
        }
        let rg = self.rg(a);
        self.push(Op::NormalizeRows { x: a, norms }, out, rg)
    }

    /// Cosine similarity of two `1 × n` rows as a `1 × 1` node.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "cosine")?;
        let an = self.normalize_rows(a);
        let bn = self.normalize_rows(b);
        let prod = self.mul(an, bn)?;
        Ok(self.sum(prod))
    }

    /// Reverse pass from the `1 × 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NoRecordedComputation);
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::DimensionMismatch("backward from non-scalar".into()));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = Vec::new();
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = grads[v.0].take() {
                    params.push((ParamId(pid), g));
                    grads[v.0] = None;
                }
            }
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let out = || node.value.as_ref().expect("op node has a value");
        match &node.op {
            Op::Param(_) | Op::Input => {}
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let acc = slot(grads, *table, self.shape(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = acc.row_mut(id);
                        dst += &g.row(r);
                    }
                }
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let d = g.dot(&self.value(*b).t());
                    accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = self.value(*a).t().dot(g);
                    accumulate(grads, *b, d);
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    let d = g.dot(&self.value(*b));
                    accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = g.t().dot(&self.value(*a));
                    accumulate(grads, *b, d);
                }
            }
            Op::Add(a, b) => {
                self.pass(grads, *a, g);
                self.pass(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.pass(grads, *a, g);
                if self.rg(*b) {
                    accumulate(grads, *b, g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g * &self.value(*b));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g * &self.value(*a));
                }
            }
            Op::AddRow(a, bias) => {
                self.pass(grads, *a, g);
                if self.rg(*bias) {
                    let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *bias, d);
                }
            }
            Op::Scale(a, f) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.mapv(|x| x * f));
                }
            }
            Op::AddScalar(a) => self.pass(grads, *a, g),
            Op::MulConst(a, mask) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g * mask);
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(&self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    accumulate(grads, *a, d);
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(&self.value(*a)).for_each(|d, &x| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d *= 0.5 * (1.0 + t) + 0.5 * x * dt;
                    });
                    accumulate(grads, *a, d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.rg(*beta) {
                    accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*gamma) {
                    let d = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *gamma, d);
                }
                if self.rg(*x) {
                    let gxhat = g * &self.value(*gamma);
                    let n = g.ncols() as f64;
                    let mut d = Matrix::zeros(g.raw_dim());
                    for r in 0..g.nrows() {
                        let gr = gxhat.row(r);
                        let xr = xhat.row(r);
                        let mean_g = gr.sum() / n;
                        let mean_gx = gr.dot(&xr) / n;
                        Zip::from(d.row_mut(r))
                            .and(&gr)
                            .and(&xr)
                            .for_each(|o, &gv, &xv| {
                                *o = inv_std[r] * (gv - mean_g - xv * mean_gx)
                            });
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::MaskedSoftmax(a) => {
                if self.rg(*a) {
                    let y = out();
                    let mut d = Matrix::zeros(g.raw_dim());
                    for r in 0..g.nrows() {
                        let dotp = y.row(r).dot(&g.row(r));
                        Zip::from(d.row_mut(r))
                            .and(&y.row(r))
                            .and(&g.row(r))
                            .for_each(|o, &yv, &gv| *o = yv * (gv - dotp));
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::LogSoftmax(a) => {
                if self.rg(*a) {
                    let y = out();
                    let mut d = g.clone();
                    for r in 0..g.nrows() {
                        let total = g.row(r).sum();
                        Zip::from(d.row_mut(r))
                            .and(&y.row(r))
                            .for_each(|o, &yv| *o -= yv.exp() * total);
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::SliceCols(a, start) => {
                if self.rg(*a) {
                    let acc = slot(grads, *a, self.shape(*a));
                    let mut dst = acc.slice_mut(s![.., *start..*start + g.ncols()]);
                    dst += g;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        accumulate(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.rg(p) {
                        accumulate(grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                    }
                    offset += h;
                }
            }
            Op::Row(a, r) => {
                if self.rg(*a) {
                    let acc = slot(grads, *a, self.shape(*a));
                    let mut dst = acc.row_mut(*r);
                    dst += &g.row(0);
                }
            }
            Op::Diag(a) => {
                if self.rg(*a) {
                    let acc = slot(grads, *a, self.shape(*a));
                    for i in 0..g.ncols() {
                        acc[[i, i]] += g[[0, i]];
                    }
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    accumulate(grads, *a, Matrix::from_elem(self.shape(*a), g[[0, 0]]));
                }
            }
            Op::Mean(a) => {
                if self.rg(*a) {
                    let shape = self.shape(*a);
                    let n = (shape.0 * shape.1) as f64;
                    accumulate(grads, *a, Matrix::from_elem(shape, g[[0, 0]] / n));
                }
            }
            Op::NormalizeRows { x, norms } => {
                if self.rg(*x) {
                    let y = out();
                    let mut d = Matrix::zeros(g.raw_dim());
                    for r in 0..g.nrows() {
                        let proj = y.row(r).dot(&g.row(r));
                        let n = norms[r];
                        Zip::from(d.row_mut(r))
                            .and(&y.row(r))
                            .and(&g.row(r))
                            .for_each(|o, &yv, &gv| *o = (gv - yv * proj) / n);
                    }
                    accumulate(grads, *x, d);
                }
            }
        }
    }

    fn pass(&self, grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
        if self.rg(v) {
            match &mut grads[v.0] {
                Some(acc) => *acc += g,
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }
}

fn slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape))
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &d,
        slot @ None => *slot = Some(d),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    params: Vec<(ParamId, Matrix)>,
    nodes: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradients of every parameter that the loss depends on.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Gradient with respect to a non-parameter node that was recorded with
    /// [`Tape::input_with_grad`] (or any intermediate node).
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store_with(name: &str, value: Matrix) -> (ParameterStore, ParamId) {
        let mut store = ParameterStore::new();
        let id = store.insert(name, value).unwrap();
        (store, id)
    }

    #[test]
    fn sum_of_single_weight_has_unit_gradient() {
        let mut store = ParameterStore::new();
        let w = store.insert("w", array![[0.7]]).unwrap();
        let other = store.insert("other", array![[1.5, -2.0]]).unwrap();
        let mut tape = Tape::new(&store);
        let wv = tape.param(w);
        let _unused = tape.param(other);
        let loss = tape.sum(wv);
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&grads);
        assert_eq!(store.grad(w)[[0, 0]], 1.0);
        assert!(store.grad(other).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn square_at_three_has_gradient_six() {
        let (store, id) = store_with("theta", array![[3.0]]);
        let mut tape = Tape::new(&store);
        let t = tape.param(id);
        let sq = tape.mul(t, t).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param(id).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn backward_without_forward_fails() {
        let (store, _) = store_with("w", array![[1.0]]);
        let other_store = ParameterStore::new();
        let mut other = Tape::new(&other_store);
        let foreign = other.input(array![[1.0]]);
        let tape = Tape::new(&store);
        assert!(matches!(
            tape.backward(foreign),
            Err(Error::NoRecordedComputation)
        ));
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_ignore_masked() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(array![[1.0, 2.0, 100.0], [-3.0, 0.5, 7.0]]);
        let y = tape.masked_softmax(x, &[true, true, false]).unwrap();
        let yv = tape.value(y);
        for row in yv.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert_eq!(row[2], 0.0);
        }
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let (store, id) = store_with("emb", Matrix::zeros((3, 2)));
        let mut tape = Tape::new(&store);
        let t = tape.param(id);
        assert!(matches!(
            tape.gather(t, &[0, 3]),
            Err(Error::TokenOutOfVocab { id: 3, .. })
        ));
    }

    /// Every op against central differences on its inputs.
    #[test]
    fn elementary_ops_match_finite_differences() {
        use crate::gradcheck::check_inputs;
        let a = array![[0.3, -1.2, 0.8], [1.1, 0.4, -0.6]];
        let b = array![[0.5, 0.2], [-0.7, 1.3], [0.9, -0.4]];
        let c = array![[0.2, -0.3, 0.5], [0.6, 0.1, -0.9]];
        let row = array![[0.1, -0.2, 0.3]];
        let report = check_inputs(&[a.clone(), b.clone(), c.clone(), row.clone()], |t, v| {
            let ab = t.matmul(v[0], v[1])?;
            let act = t.matmul_t(v[0], v[2])?;
            let g = t.gelu(v[0]);
            let r = t.relu(v[2]);
            let m = t.mul(g, r)?;
            let ln = t.layer_norm(m, v[3], v[3], 1e-5)?;
            let sm = t.masked_softmax(ln, &[true, false, true])?;
            let ls = t.log_softmax(ab);
            let n = t.normalize_rows(v[2]);
            let sl = t.slice_cols(n, 1, 3)?;
            let cc = t.concat_cols(&[sl, ls])?;
            let cr = t.concat_rows(&[sl, act])?;
            let ccm = t.mean(cc);
            let d = t.diag(act)?;
            let row0 = t.row(cr, 1);
            let sc = t.scale(row0, -0.7);
            let sh = t.add_scalar(sc, 0.2);
            let e = t.add_row(sm, v[3])?;
            let s1 = t.sum(e);
            let s2 = t.mean(sh);
            let s3 = t.sum(d);
            let s12 = t.add(s1, s2)?;
            let s123 = t.sub(s12, s3)?;
            let sq = t.mul(s123, s123)?;
            let m2 = t.mean(cr);
            let tail = t.add(m2, ccm)?;
            t.add(sq, tail)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
