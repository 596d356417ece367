//! Entropic optimal transport between weighted point clouds.
//!
//! `W_ε(α, β) = min_π ⟨π, C⟩ + ε KL(π ‖ α⊗β)` is solved with log-domain
//! Sinkhorn iterations. The Sinkhorn divergence subtracts the two self terms:
//! `S_ε = W_ε(α, β) − ½ W_ε(α, α) − ½ W_ε(β, β)`.
//!
//! Iteration schedule (shared with the differentiable path in [`crate::grad`]):
//!
//! * iteration 0 initialises `f = softmin(C, 0)`, `g = softmin(Cᵀ, 0)` at the
//!   first temperature;
//! * every further iteration updates both potentials from the previous pair,
//!   `(f, g) ← (softmin(C, g), softmin(Cᵀ, f))`;
//! * the temperature starts at `eps_start` and is multiplied by
//!   `eps_scaling` each iteration until it reaches `epsilon`;
//! * the returned potentials are the mean of the last two iterates.
//!
//! The simultaneous update runs two interleaved alternating Sinkhorn chains.
//! Their additive constants differ by a mode that flips sign every
//! iteration, and the final two-step mean cancels it. Updating both
//! potentials from the same state makes `W_ε(α, β)` and `W_ε(β, α)` the same
//! computation with roles swapped, and makes `W_ε(α, α)` produce `f == g`.

mod exact;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::kernels::{entropic_value, plan, softmin_rows, sq_dist};
use crate::{Error, Result};

pub use exact::{exact_ot, EXACT_OT_MAX_CELLS};

/// Weighted point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Array2<f64>,
    weights: Array1<f64>,
}

impl PointCloud {
    pub fn new(points: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::Validation("point cloud has no points".into()));
        }
        if weights.len() != n {
            return Err(Error::Validation(format!("{} weights for {n} points", weights.len())));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Validation("point weights must be nonnegative".into()));
        }
        let total = weights.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("point weights sum to {total}, not 1")));
        }
        Ok(Self { points, weights })
    }

    /// Uniform weights `1/N`.
    pub fn uniform(points: Array2<f64>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::Validation("point cloud has no points".into()));
        }
        Self::new(points, Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Whitespace-separated rows of numbers, one point per line, uniform
    /// weights. Lines starting with `#` are skipped.
    pub fn parse_text(text: &str, source: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |msg: String| Error::Parse { path: source.to_string(), line: n + 1, msg };
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| perr(format!("not a number: {t:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(perr(format!("expected {} columns, found {}", first.len(), row.len())));
                }
            }
            rows.push(row);
        }
        let d = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let points = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::Validation(e.to_string()))?;
        Self::uniform(points)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = crate::audit::read_text(path)?;
        Self::parse_text(&text, &path.display().to_string())
    }

}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CostKind {
    #[default]
    SquaredEuclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OTConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Iteration count of the differentiable path.
    pub unroll_iters: usize,
    /// Tolerance on the sup-norm marginal violation.
    pub tol: f64,
    pub cost: CostKind,
    /// First annealing temperature. Fixed rather than derived from the data
    /// so the iteration graph does not depend on the inputs.
    pub eps_start: f64,
    pub eps_scaling: f64,
}

impl Default for OTConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 500,
            unroll_iters: 50,
            tol: 1e-9,
            cost: CostKind::SquaredEuclidean,
            eps_start: 64.0,
            eps_scaling: 0.5,
        }
    }
}

impl OTConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.unroll_iters < 2 || self.unroll_iters > self.max_iters {
            return Err(Error::Config(format!(
                "unroll_iters must lie in [2, max_iters = {}], got {}",
                self.max_iters, self.unroll_iters
            )));
        }
        if !(self.eps_scaling > 0.0 && self.eps_scaling < 1.0) {
            return Err(Error::Config(format!("eps_scaling must lie in (0, 1), got {}", self.eps_scaling)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        Ok(())
    }

    /// Temperature of iteration `k`; the final iteration always uses
    /// `epsilon`.
    pub fn temperature(&self, k: usize) -> f64 {
        let start = self.eps_start.max(self.epsilon);
        let t = start * self.eps_scaling.powi(k.min(4096) as i32);
        t.max(self.epsilon)
    }

    /// Index of the first iteration that runs at `epsilon`.
    pub fn annealing_len(&self) -> usize {
        (0..).find(|&k| self.temperature(k) <= self.epsilon).unwrap_or(0)
    }
}

/// Output of one entropic transport solve.
#[derive(Debug, Clone)]
pub struct SinkhornResult {
    pub value: f64,
    pub potentials_f: Array1<f64>,
    pub potentials_g: Array1<f64>,
    pub plan: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Sup-norm violation of both marginals by `plan`.
    pub marginal_error: f64,
}

pub fn cost_matrix(a: &PointCloud, b: &PointCloud, _cfg: &OTConfig) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!(
            "point clouds have dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(sq_dist(&a.points(), &b.points()))
}

fn check_finite(c: &Array2<f64>) -> Result<()> {
    if c.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric("cost_matrix", "non-finite cost entry"))
    }
}

/// Marginal violation of the plan induced by `(f, g)`.
fn marginal_error(pi: &Array2<f64>, a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    let rows = pi.rows().into_iter().zip(a).map(|(r, &w)| (r.sum() - w).abs());
    let cols = pi.columns().into_iter().zip(b).map(|(c, &w)| (c.sum() - w).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Sup-norm violation of the row marginal predicted from a soft-min update:
/// row `i` of the plan sums to `α_i exp((f_i − f̃_i) / ε)`.
fn predicted_violation(w: &ArrayView1<f64>, f: &Array1<f64>, ft: &Array1<f64>, eps: f64) -> f64 {
    w.iter()
        .zip(f.iter().zip(ft))
        .map(|(&w, (&a, &b))| w * ((a - b) / eps).exp_m1().abs())
        .fold(0.0, f64::max)
}

pub fn sinkhorn_w(a: &PointCloud, b: &PointCloud, cfg: &OTConfig) -> Result<SinkhornResult> {
    cfg.validate()?;
    let c = cost_matrix(a, b, cfg)?;
    check_finite(&c)?;
    Ok(solve(&c, &a.weights(), &b.weights(), cfg, false))
}

/// Sinkhorn on a precomputed cost matrix.
pub fn sinkhorn_with_cost(
    c: &Array2<f64>,
    a: &ArrayView1<f64>,
    b: &ArrayView1<f64>,
    cfg: &OTConfig,
) -> Result<SinkhornResult> {
    cfg.validate()?;
    check_finite(c)?;
    if c.dim() != (a.len(), b.len()) {
        return Err(Error::Argument("cost matrix shape does not match the weights".into()));
    }
    Ok(solve(c, a, b, cfg, false))
}

/// Runs the schedule on `(C, Cᵀ)`; `Cᵀ` is `None` for a self term, where
/// `g` is `f`. With `fixed` the loop runs exactly `unroll_iters` iterations
/// and never checks convergence. Returns the final potentials and the
/// iteration count.
#[allow(clippy::too_many_arguments)]
fn iterate(
    c: &Array2<f64>,
    ct: Option<&Array2<f64>>,
    la: &Array1<f64>,
    lb: &Array1<f64>,
    a: &ArrayView1<f64>,
    b: &ArrayView1<f64>,
    cfg: &OTConfig,
    fixed: bool,
) -> (Array1<f64>, Array1<f64>, usize) {
    let zero_n = Array1::zeros(b.len());
    let t0 = cfg.temperature(0);
    let mut f = softmin_rows(&c.view(), &zero_n.view(), &lb.view(), t0, None);
    let mut g = match ct {
        Some(ct) => softmin_rows(&ct.view(), &Array1::zeros(a.len()).view(), &la.view(), t0, None),
        None => f.clone(),
    };
    let (mut f_prev, mut g_prev) = (f.clone(), g.clone());
    let settled = cfg.annealing_len();
    let mut next_check = 0;
    let limit = if fixed { cfg.unroll_iters } else { cfg.max_iters };
    let mut k = 1;
    while k < limit {
        let t = cfg.temperature(k);
        let ft = softmin_rows(&c.view(), &g.view(), &lb.view(), t, None);
        let gt = match ct {
            Some(ct) => softmin_rows(&ct.view(), &f.view(), &la.view(), t, None),
            None => ft.clone(),
        };
        let f_prev2 = std::mem::replace(&mut f_prev, std::mem::replace(&mut f, ft));
        let g_prev2 = std::mem::replace(&mut g_prev, std::mem::replace(&mut g, gt));
        k += 1;
        // `f` and `f_prev2` lie on the same alternating chain, so their gap
        // measures that chain's marginal violation.
        // The chain step underestimates the distance to the fixed point, so a
        // passing step is confirmed against the plan of the averaged pair.
        if !fixed
            && k > settled + 2
            && k >= next_check
            && predicted_violation(a, &f, &f_prev2, t) < cfg.tol
            && predicted_violation(b, &g, &g_prev2, t) < cfg.tol
        {
            let fa = 0.5 * (&f + &f_prev);
            let ga = 0.5 * (&g + &g_prev);
            let pi = plan(&c.view(), &fa.view(), &ga.view(), &la.view(), &lb.view(), t);
            if marginal_error(&pi, a, b) < cfg.tol {
                break;
            }
            next_check = k + 5;
        }
    }
    (0.5 * (&f + &f_prev), 0.5 * (&g + &g_prev), k)
}

fn solve(c: &Array2<f64>, a: &ArrayView1<f64>, b: &ArrayView1<f64>, cfg: &OTConfig, fixed: bool) -> SinkhornResult {
    let ct = c.t().to_owned();
    let la = a.mapv(f64::ln);
    let lb = b.mapv(f64::ln);
    let (f, g, k) = iterate(c, Some(&ct), &la, &lb, a, b, cfg, fixed);
    let eps = cfg.epsilon;
    let value = entropic_value(&c.view(), &f.view(), &g.view(), &la.view(), &lb.view(), eps);
    let pi = plan(&c.view(), &f.view(), &g.view(), &la.view(), &lb.view(), eps);
    let err = marginal_error(&pi, a, b);
    SinkhornResult {
        value,
        potentials_f: f,
        potentials_g: g,
        plan: pi,
        iterations: k,
        converged: err < cfg.tol,
        marginal_error: err,
    }
}

/// `W_ε(α, α)`, which only needs one potential since `f == g`.
pub(crate) fn self_value(c: &Array2<f64>, a: &ArrayView1<f64>, cfg: &OTConfig, fixed: bool) -> f64 {
    let la = a.mapv(f64::ln);
    let (f, _, _) = iterate(c, None, &la, &la, a, a, cfg, fixed);
    entropic_value(&c.view(), &f.view(), &f.view(), &la.view(), &la.view(), cfg.epsilon)
}

/// Debiased divergence `W_ε(α, β) − ½ W_ε(α, α) − ½ W_ε(β, β)`.
pub fn sinkhorn_divergence(a: &PointCloud, b: &PointCloud, cfg: &OTConfig) -> Result<f64> {
    divergence(a, b, cfg, false)
}

/// The divergence after exactly `unroll_iters` iterations per term, which
/// is the quantity the training gradient differentiates.
pub fn sinkhorn_divergence_unrolled(a: &PointCloud, b: &PointCloud, cfg: &OTConfig) -> Result<f64> {
    divergence(a, b, cfg, true)
}

fn divergence(a: &PointCloud, b: &PointCloud, cfg: &OTConfig, fixed: bool) -> Result<f64> {
    cfg.validate()?;
    let c = cost_matrix(a, b, cfg)?;
    check_finite(&c)?;
    let ab = solve(&c, &a.weights(), &b.weights(), cfg, fixed).value;
    let caa = sq_dist(&a.points(), &a.points());
    let cbb = sq_dist(&b.points(), &b.points());
    let aa = self_value(&caa, &a.weights(), cfg, fixed);
    let bb = self_value(&cbb, &b.weights(), cfg, fixed);
    let s = ab - 0.5 * aa - 0.5 * bb;
    if !s.is_finite() {
        return Err(Error::numeric("sinkhorn_divergence", format!("value {s}")));
    }
    Ok(s)
}
