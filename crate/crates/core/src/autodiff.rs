//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! the tape either as trainable leaves (named, gradients collected by
//! [`Graph::backward`]) or as constants; frozen weights are simply never
//! registered as trainable, so no gradient can reach them.
//!
//! Everything is two-dimensional: sequences are `rows × hidden`, biases and
//! layer-norm affines are `1 × hidden` rows, scalars are `1 × 1`.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{shape_err, Result};

pub type Mat = Array2<f64>;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Mat,
    },
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Mat>>,
    params: BTreeMap<String, Mat>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Mat> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Mat> {
        self.params
    }

    /// Gradient with respect to an arbitrary node, `None` when no gradient
    /// flowed into it.
    pub fn wrt(&self, var: Var) -> Option<&Mat> {
        self.by_node.get(var.0).and_then(Option::as_ref)
    }
}

fn check_same(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.dim(), b.dim()));
    }
    Ok(())
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Mat>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Constant input borrowed from the caller.
    pub fn constant(&mut self, value: &'a Mat) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, value: Mat) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Unnamed leaf that receives a gradient; used for probes and tests.
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Registers a named parameter. A name is registered once per graph and
    /// later calls return the same node, so shared weights accumulate.
    pub fn param(&mut self, name: &str, value: &'a Mat, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = if trainable {
            self.push(Cow::Borrowed(value), Op::Param(name.to_string()), true)
        } else {
            self.push(Cow::Borrowed(value), Op::Leaf, false)
        };
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err!("matmul {:?} x {:?}", va.dim(), vb.dim()));
        }
        let out = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(shape_err!("matmul_t {:?} x {:?}ᵀ", va.dim(), vb.dim()));
        }
        let out = va.dot(&vb.t());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "add")?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(shape_err!("add_row {:?} + {:?}", va.dim(), vr.dim()));
        }
        let out = va + vr;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Cow::Owned(out), Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "mul")?;
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Scale(a, c), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| {
            let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Gelu(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.ncols();
        for v in [gamma, beta] {
            let vv = self.value(v);
            if vv.nrows() != 1 || vv.ncols() != d {
                return Err(shape_err!("layer_norm affine {:?} for width {d}", vv.dim()));
            }
        }
        let mut xhat = vx.clone();
        let mut rstd = Vec::with_capacity(vx.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax. When `causal` is set, entry `(i, j)` is masked out
    /// for `j > i + offset`.
    pub fn softmax(&mut self, a: Var, causal: Option<usize>) -> Var {
        let mut out = self.value(a).clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let limit = causal.map_or(row.len(), |off| (i + off + 1).min(row.len()));
            let max = row.iter().take(limit).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if j < limit {
                    *v = (*v - max).exp();
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Softmax(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.ncols() {
            return Err(shape_err!("slice_cols {start}+{len} of {:?}", va.dim()));
        }
        let out = va.slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.nrows() {
            return Err(shape_err!("slice_rows {start}+{len} of {:?}", va.dim()));
        }
        let out = va.slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), Op::SliceRows(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).map_err(|e| shape_err!("concat_cols: {e}"))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).map_err(|e| shape_err!("concat_rows: {e}"))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(out), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean negative log-likelihood of `class` at each `(row, class)` pair.
    /// Rows not listed contribute nothing, neither to the value nor to the
    /// gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let vl = self.value(logits);
        if targets.is_empty() {
            return Err(crate::Error::InvalidInput(
                "cross-entropy over an empty target set".into(),
            ));
        }
        let mut probs = Mat::zeros((targets.len(), vl.ncols()));
        let mut total = 0.0;
        for (k, &(r, c)) in targets.iter().enumerate() {
            if r >= vl.nrows() || c >= vl.ncols() {
                return Err(shape_err!("cross-entropy target ({r}, {c}) outside {:?}", vl.dim()));
            }
            let row = vl.row(r);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[c];
            for (j, v) in row.iter().enumerate() {
                probs[[k, j]] = (v - lse).exp();
            }
        }
        let out = Mat::from_elem((1, 1), total / targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(out),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Back-propagates from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.dim() != (1, 1) {
            return Err(shape_err!("backward from non-scalar {:?}", out.dim()));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = g.t().dot(self.value(*a));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, &g * *c);
                }
                Op::Gelu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if self.rg(*beta) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *beta, gb);
                    }
                    if self.rg(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gamma, gg);
                    }
                    if self.rg(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let d = xhat.ncols() as f64;
                        let mut gx = Mat::zeros(xhat.raw_dim());
                        for i in 0..xhat.nrows() {
                            let dr = dxhat.row(i);
                            let xr = xhat.row(i);
                            let mean_d = dr.sum() / d;
                            let mean_dx = dr.dot(&xr) / d;
                            for j in 0..xhat.ncols() {
                                gx[[i, j]] = rstd[i] * (dr[j] - mean_d - xr[j] * mean_dx);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref();
                    let mut ga = Mat::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let dot = g.row(i).dot(&y.row(i));
                        for j in 0..y.ncols() {
                            ga[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.rg(p) {
                            let gp = g.slice(s![.., offset..offset + w]).to_owned();
                            accumulate(&mut grads, p, gp);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        if self.rg(p) {
                            let gp = g.slice(s![offset..offset + h, ..]).to_owned();
                            accumulate(&mut grads, p, gp);
                        }
                        offset += h;
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut gl = Mat::zeros(self.value(*logits).raw_dim());
                    for (k, &(r, c)) in targets.iter().enumerate() {
                        let mut row = gl.row_mut(r);
                        row.scaled_add(scale, &probs.row(k));
                        row[c] -= scale;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((
                    name.clone(),
                    grads[i].clone().unwrap_or_else(|| Mat::zeros(n.value.raw_dim())),
                )),
                _ => None,
            })
            .collect();
        Ok(Gradients { by_node: grads, params })
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
