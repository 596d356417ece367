//! Dense numeric kernels shared by the plain forward passes and the
//! differentiable tape. Both paths call these exact functions so their
//! values agree bit-for-bit.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    a.dot(b)
}

/// `x + 1 bᵀ`
pub fn add_row(x: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    x + &b.view().insert_axis(Axis(0))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn softmax_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise layer normalisation. Returns the output, the normalised input
/// `x̂` and the per-row inverse standard deviation.
pub fn layer_norm_rows(
    x: &ArrayView2<f64>,
    gamma: &ArrayView1<f64>,
    beta: &ArrayView1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            xhat[[i, j]] = (row[j] - mean) * is;
        }
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        for j in 0..d {
            row[j] = row[j] * gamma[j] + beta[j];
        }
    }
    (y, xhat, inv_std)
}

/// Squared Euclidean cost `C[i][j] = ‖x_i − y_j‖²`.
pub fn sq_dist(x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let m = y.nrows();
    debug_assert_eq!(d, y.ncols());
    let mut c = Array2::zeros((n, m));
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..m {
            let yj = y.row(j);
            let mut s = 0.0;
            for k in 0..d {
                let t = xi[k] - yj[k];
                s += t * t;
            }
            c[[i, j]] = s;
        }
    }
    c
}

/// Soft-min over columns:
/// `out_i = −ε log Σ_j exp(logw_j + (pot_j − C_ij) / ε)`.
///
/// When `probs` is given it receives the row-normalised weights
/// `P_ij = ∂out_i/∂C_ij`.
pub fn softmin_rows(
    cost: &ArrayView2<f64>,
    pot: &ArrayView1<f64>,
    logw: &ArrayView1<f64>,
    eps: f64,
    mut probs: Option<&mut Array2<f64>>,
) -> Array1<f64> {
    let (n, m) = cost.dim();
    let mut out = Array1::zeros(n);
    let mut z = vec![0.0; m];
    let inv = 1.0 / eps;
    let pot = pot.to_vec();
    let logw = logw.to_vec();
    for (i, row) in cost.rows().into_iter().enumerate() {
        let mut zmax = f64::NEG_INFINITY;
        let row = row.to_slice().map(std::borrow::Cow::Borrowed).unwrap_or_else(|| row.to_vec().into());
        for (((zj, &c), &p), &l) in z.iter_mut().zip(row.iter()).zip(&pot).zip(&logw) {
            let v = l + (p - c) * inv;
            *zj = v;
            if v > zmax {
                zmax = v;
            }
        }
        let mut s = 0.0;
        for v in z.iter_mut() {
            *v = (*v - zmax).exp();
            s += *v;
        }
        out[i] = -eps * (zmax + s.ln());
        if let Some(p) = probs.as_deref_mut() {
            for (dst, &v) in p.row_mut(i).iter_mut().zip(&z) {
                *dst = v / s;
            }
        }
    }
    out
}

/// Entropic transport objective of the plan induced by potentials `(f, g)`:
///
/// `π_ij = α_i β_j exp((f_i + g_j − C_ij) / ε)`,
/// `value = ⟨π, C⟩ + ε KL(π ‖ α⊗β) = Σ π_ij (f_i + g_j) − ε (Σ π_ij − 1)`
///
/// where KL is the generalised divergence (it includes the mass term, which
/// vanishes for an exact coupling).
pub fn entropic_value(
    cost: &ArrayView2<f64>,
    f: &ArrayView1<f64>,
    g: &ArrayView1<f64>,
    log_a: &ArrayView1<f64>,
    log_b: &ArrayView1<f64>,
    eps: f64,
) -> f64 {
    let (n, m) = cost.dim();
    let inv = 1.0 / eps;
    let mut total = 0.0;
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..m {
            let s = f[i] + g[j];
            let p = (log_a[i] + log_b[j] + (s - cost[[i, j]]) * inv).exp();
            total += p * s;
            mass += p;
        }
    }
    total - eps * (mass - 1.0)
}

/// The plan `π_ij = α_i β_j exp((f_i + g_j − C_ij) / ε)`.
pub fn plan(
    cost: &ArrayView2<f64>,
    f: &ArrayView1<f64>,
    g: &ArrayView1<f64>,
    log_a: &ArrayView1<f64>,
    log_b: &ArrayView1<f64>,
    eps: f64,
) -> Array2<f64> {
    let (n, m) = cost.dim();
    let inv = 1.0 / eps;
    Array2::from_shape_fn((n, m), |(i, j)| {
        (log_a[i] + log_b[j] + (f[i] + g[j] - cost[[i, j]]) * inv).exp()
    })
}
