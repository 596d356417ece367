//! A small reverse-mode tape over dense matrices.
//!
//! Every value is an `Array2`; vectors are stored as `1 × n` rows (biases,
//! gains) or `n × 1` columns (transport potentials). Forward values are
//! produced by the same kernels as the plain code paths, so a taped
//! computation reproduces the untaped one bit-for-bit.

use ndarray::{s, Array1, Array2, Axis};

use crate::kernels::{
    entropic_value, gelu, gelu_grad, layer_norm_rows, matmul, relu, softmax_rows, softmin_rows, sq_dist,
};
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `A Bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `X + 1 bᵀ` with `b` a `1 × n` row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    /// Row-wise layer norm with `1 × n` gain and bias.
    LayerNorm(Var, Var, Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    /// Row-major reshape.
    Reshape(Var, usize, usize),
    SelectRow(Var, usize),
    SqDist(Var, Var),
    /// `out_i = −ε log Σ_j exp(logw_j + (pot_j − C_ij)/ε)` with `pot` an
    /// `m × 1` column; output `n × 1`.
    SoftMin { cost: Var, pot: Var, logw: Array1<f64>, eps: f64 },
    /// `1 × 1` entropic objective of the plan induced by `(f, g)`.
    EntropicValue { cost: Var, f: Var, g: Var, log_a: Array1<f64>, log_b: Array1<f64>, eps: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SelectRow(..) => "select_row",
            Op::SqDist(..) => "sq_dist",
            Op::SoftMin { .. } => "softmin",
            Op::EntropicValue { .. } => "entropic_value",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::AddRow(a, b) | Op::SqDist(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::SliceCols(a, ..)
            | Op::Transpose(a)
            | Op::Reshape(a, ..)
            | Op::SelectRow(a, _) => vec![*a],
            Op::LayerNorm(x, g, b) => vec![*x, *g, *b],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::SoftMin { cost, pot, .. } => vec![*cost, *pot],
            Op::EntropicValue { cost, f, g, .. } => vec![*cost, *f, *g],
        }
    }
}

/// Values kept from the forward pass for the backward rule.
#[derive(Debug, Clone)]
enum Aux {
    None,
    LayerNorm { xhat: Array2<f64>, inv_std: Array1<f64> },
    Probs(Array2<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Array2<f64>,
    aux: Aux,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<(usize, &'static str)>,
}

fn col(v: &Array2<f64>) -> ndarray::ArrayView1<'_, f64> {
    v.column(0)
}

fn row(v: &Array2<f64>) -> ndarray::ArrayView1<'_, f64> {
    v.row(0)
}

fn compute<'a>(op: &Op, val: &dyn Fn(Var) -> &'a Array2<f64>, want_aux: bool) -> (Array2<f64>, Aux) {
    let get = |v: &Var| val(*v);
    match op {
        Op::Leaf => unreachable!("leaves are not recomputed"),
        Op::MatMul(a, b) => (matmul(&get(a).view(), &get(b).view()), Aux::None),
        Op::MatMulBt(a, b) => (matmul(&get(a).view(), &get(b).t()), Aux::None),
        Op::Add(a, b) => (get(a) + get(b), Aux::None),
        Op::Sub(a, b) => (get(a) - get(b), Aux::None),
        Op::AddRow(x, b) => {
            let bv = get(b);
            (crate::kernels::add_row(&get(x).view(), &row(bv)), Aux::None)
        }
        Op::Scale(a, c) => (get(a) * *c, Aux::None),
        Op::Relu(a) => (get(a).mapv(relu), Aux::None),
        Op::Gelu(a) => (get(a).mapv(gelu), Aux::None),
        Op::SoftmaxRows(a) => (softmax_rows(&get(a).view()), Aux::None),
        Op::LayerNorm(x, g, b) => {
            let (gv, bv) = (get(g), get(b));
            let (y, xhat, inv_std) = layer_norm_rows(&get(x).view(), &row(gv), &row(bv));
            let aux = if want_aux { Aux::LayerNorm { xhat, inv_std } } else { Aux::None };
            (y, aux)
        }
        Op::SliceCols(a, lo, hi) => (get(a).slice(s![.., *lo..*hi]).to_owned(), Aux::None),
        Op::ConcatCols(vs) => {
            let parts: Vec<_> = vs.iter().map(get).collect();
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            (ndarray::concatenate(Axis(1), &views).expect("row counts agree"), Aux::None)
        }
        Op::ConcatRows(vs) => {
            let parts: Vec<_> = vs.iter().map(get).collect();
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            (ndarray::concatenate(Axis(0), &views).expect("column counts agree"), Aux::None)
        }
        Op::Transpose(a) => (get(a).t().to_owned(), Aux::None),
        Op::Reshape(a, r, c) => {
            let data: Vec<f64> = get(a).iter().copied().collect();
            (Array2::from_shape_vec((*r, *c), data).expect("reshape preserves size"), Aux::None)
        }
        Op::SelectRow(a, i) => (get(a).slice(s![*i..*i + 1, ..]).to_owned(), Aux::None),
        Op::SqDist(x, y) => (sq_dist(&get(x).view(), &get(y).view()), Aux::None),
        Op::SoftMin { cost, pot, logw, eps } => {
            let c = get(cost);
            let pv = get(pot);
            let mut probs = want_aux.then(|| Array2::zeros(c.dim()));
            let out = softmin_rows(&c.view(), &col(pv), &logw.view(), *eps, probs.as_mut());
            let n = out.len();
            let aux = probs.map_or(Aux::None, Aux::Probs);
            (out.into_shape_with_order((n, 1)).unwrap(), aux)
        }
        Op::EntropicValue { cost, f, g, log_a, log_b, eps } => {
            let (fv, gv) = (get(f), get(g));
            let v = entropic_value(&get(cost).view(), &col(fv), &col(gv), &log_a.view(), &log_b.view(), *eps);
            (Array2::from_elem((1, 1), v), Aux::None)
        }
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

    /// A constant input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push_leaf(value, false)
    }

    /// An input that receives a gradient.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Array2<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, aux: Aux::None, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub(crate) fn push(&mut self, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        let (value, aux) = compute(&op, &|v: Var| &self.nodes[v.0].value, needs_grad);
        if self.first_non_finite.is_none() && value.iter().any(|x| !x.is_finite()) {
            self.first_non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { op, value, aux, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Name and index of the first primitive whose output was not finite.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.first_non_finite
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMulBt(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        self.push(Op::AddRow(x, b))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c))
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.push(Op::Gelu(a))
    }
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.push(Op::SoftmaxRows(a))
    }
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        self.push(Op::LayerNorm(x, gamma, beta))
    }
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        self.push(Op::SliceCols(a, lo, hi))
    }
    pub fn concat_cols(&mut self, vs: Vec<Var>) -> Var {
        self.push(Op::ConcatCols(vs))
    }
    pub fn concat_rows(&mut self, vs: Vec<Var>) -> Var {
        self.push(Op::ConcatRows(vs))
    }
    pub fn transpose(&mut self, a: Var) -> Var {
        self.push(Op::Transpose(a))
    }
    pub fn reshape(&mut self, a: Var, r: usize, c: usize) -> Var {
        self.push(Op::Reshape(a, r, c))
    }
    pub fn select_row(&mut self, a: Var, i: usize) -> Var {
        self.push(Op::SelectRow(a, i))
    }
    pub fn sq_dist(&mut self, x: Var, y: Var) -> Var {
        self.push(Op::SqDist(x, y))
    }
    pub fn softmin(&mut self, cost: Var, pot: Var, logw: Array1<f64>, eps: f64) -> Var {
        self.push(Op::SoftMin { cost, pot, logw, eps })
    }
    pub fn entropic_value(&mut self, cost: Var, f: Var, g: Var, log_a: Array1<f64>, log_b: Array1<f64>, eps: f64) -> Var {
        self.push(Op::EntropicValue { cost, f, g, log_a, log_b, eps })
    }

    /// Recomputes every non-leaf node from its recorded inputs and returns
    /// the value of `out`. Equal to the recorded value bit-for-bit.
    pub fn replay(&self, out: Var) -> Array2<f64> {
        let mut vals: Vec<Option<Array2<f64>>> = vec![None; out.0 + 1];
        for i in 0..=out.0 {
            let node = &self.nodes[i];
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => compute(op, &|v: Var| vals[v.0].as_ref().expect("inputs precede outputs"), false).0,
            };
            vals[i] = Some(v);
        }
        vals.pop().flatten().expect("out was computed")
    }

    /// Gradients of the scalar `out` with respect to the leaves created by
    /// [`Tape::param`]. Entry `i` is `None` for every other node.
    pub fn backward(&self, out: Var) -> Result<Vec<Option<Array2<f64>>>> {
        if self.nodes[out.0].value.len() != 1 {
            return Err(Error::Argument("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Array2::ones((1, 1)));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(grads)
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, matmul(&g.view(), &val(b).t()));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, matmul(&val(a).t(), &g.view()));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, matmul(&g.view(), &val(b).view()));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, matmul(&g.t(), &val(a).view()));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.needs(*b) {
                    self.acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g * *c),
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(a), |d, &x| *d *= gelu_grad(x));
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Array2::zeros(y.dim());
                for ((mut dr, yr), gr) in d.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(p, q)| p * q).sum();
                    for j in 0..yr.len() {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm(x, gamma, beta) => {
                let Aux::LayerNorm { xhat, inv_std } = &node.aux else {
                    unreachable!("layer norm on the gradient path keeps x̂")
                };
                let gam = val(gamma);
                if self.needs(*gamma) {
                    self.acc(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(*beta) {
                    self.acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(*x) {
                    let (n, d) = g.dim();
                    let mut dx = Array2::zeros((n, d));
                    for i in 0..n {
                        let gh: Vec<f64> = (0..d).map(|j| g[[i, j]] * gam[[0, j]]).collect();
                        let s1: f64 = gh.iter().sum();
                        let s2: f64 = gh.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum();
                        let k = inv_std[i] / d as f64;
                        for j in 0..d {
                            dx[[i, j]] = k * (d as f64 * gh[j] - s1 - xhat[[i, j]] * s2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::SliceCols(a, lo, hi) => {
                let mut d = Array2::zeros(val(a).dim());
                d.slice_mut(s![.., *lo..*hi]).assign(g);
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(vs) => {
                let mut at = 0;
                for v in vs {
                    let w = val(v).ncols();
                    self.acc(grads, *v, g.slice(s![.., at..at + w]).to_owned());
                    at += w;
                }
            }
            Op::ConcatRows(vs) => {
                let mut at = 0;
                for v in vs {
                    let h = val(v).nrows();
                    self.acc(grads, *v, g.slice(s![at..at + h, ..]).to_owned());
                    at += h;
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().to_owned()),
            Op::Reshape(a, ..) => {
                let dim = val(a).dim();
                let data: Vec<f64> = g.iter().copied().collect();
                self.acc(grads, *a, Array2::from_shape_vec(dim, data).unwrap());
            }
            Op::SelectRow(a, i) => {
                let mut d = Array2::zeros(val(a).dim());
                d.row_mut(*i).assign(&g.row(0));
                self.acc(grads, *a, d);
            }
            Op::SqDist(x, y) => {
                let (xv, yv) = (val(x), val(y));
                if self.needs(*x) {
                    let rs = g.sum_axis(Axis(1));
                    let mut dx = matmul(&g.view(), &yv.view()) * -2.0;
                    for (i, mut r) in dx.rows_mut().into_iter().enumerate() {
                        r.scaled_add(2.0 * rs[i], &xv.row(i));
                    }
                    self.acc(grads, *x, dx);
                }
                if self.needs(*y) {
                    let cs = g.sum_axis(Axis(0));
                    let mut dy = matmul(&g.t(), &xv.view()) * -2.0;
                    for (j, mut r) in dy.rows_mut().into_iter().enumerate() {
                        r.scaled_add(2.0 * cs[j], &yv.row(j));
                    }
                    self.acc(grads, *y, dy);
                }
            }
            Op::SoftMin { cost, pot, .. } => {
                let Aux::Probs(p) = &node.aux else { unreachable!("softmin on the gradient path keeps P") };
                let go = g.column(0);
                if self.needs(*cost) {
                    let mut dc = p.clone();
                    for (i, mut r) in dc.rows_mut().into_iter().enumerate() {
                        r *= go[i];
                    }
                    self.acc(grads, *cost, dc);
                }
                if self.needs(*pot) {
                    // ∂out_i/∂pot_j = −P_ij
                    let dp = -p.t().dot(&go);
                    let m = dp.len();
                    self.acc(grads, *pot, dp.into_shape_with_order((m, 1)).unwrap());
                }
            }
            Op::EntropicValue { cost, f, g: gpot, log_a, log_b, eps } => {
                let scale = g[[0, 0]];
                let (c, fv, gv) = (val(cost), val(f), val(gpot));
                let (n, m) = c.dim();
                let inv = 1.0 / eps;
                let mut df = Array2::zeros((n, 1));
                let mut dg = Array2::zeros((m, 1));
                let mut dc = self.needs(*cost).then(|| Array2::zeros((n, m)));
                for i in 0..n {
                    for j in 0..m {
                        let s = fv[[i, 0]] + gv[[j, 0]];
                        let p = (log_a[i] + log_b[j] + (s - c[[i, j]]) * inv).exp();
                        let w = p * s * inv * scale;
                        df[[i, 0]] += w;
                        dg[[j, 0]] += w;
                        if let Some(dc) = dc.as_mut() {
                            dc[[i, j]] = -p * (s - eps) * inv * scale;
                        }
                    }
                }
                self.acc(grads, *f, df);
                self.acc(grads, *gpot, dg);
                if let Some(dc) = dc {
                    self.acc(grads, *cost, dc);
                }
            }
        }
    }
}
