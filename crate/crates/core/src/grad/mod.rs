//! Gradient of the alignment loss with respect to the hypernetwork weights.
//!
//! The loss is the unrolled Sinkhorn divergence between the adapted token
//! cloud of a dialect batch and the frozen SAE cloud of the paired
//! sentences. The whole chain, hypernetwork through adapters, encoder and
//! every Sinkhorn iteration, is recorded on a [`Tape`]. Frozen encoder
//! weights enter as constants, so no gradient for them exists.

mod tape;

pub use tape::{Tape, Var};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{BlockWeights, Encoder};
use crate::hypernet::{generate_lora, input_matrix, HypernetConfig, HypernetWeights, Mlp};
use crate::kernels::{layer_norm_rows, sq_dist};
use crate::ot::{self, sinkhorn_divergence_unrolled, OTConfig, PointCloud};
use crate::transform::TokenSentence;
use crate::typology::FeatureVector;
use crate::{Error, Result};

/// Everything the loss depends on besides the trainable weights.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub encoder: &'a Encoder,
    pub hypernet: &'a HypernetConfig,
    pub ot: &'a OTConfig,
}

/// Loss value and gradients shaped like the hypernetwork weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub loss: f64,
    pub grads: HypernetWeights,
}

impl<'a> Objective<'a> {
    pub fn new(encoder: &'a Encoder, hypernet: &'a HypernetConfig, ot: &'a OTConfig) -> Result<Self> {
        hypernet.check_encoder(encoder.config())?;
        ot.validate()?;
        Ok(Self { encoder, hypernet, ot })
    }

    /// The loss through the plain (untaped) code paths.
    pub fn loss(
        &self,
        hw: &HypernetWeights,
        d: &FeatureVector,
        batch: &[TokenSentence],
        h_sae: &PointCloud,
    ) -> Result<f64> {
        let lora = generate_lora(hw, d, self.hypernet)?;
        let cloud = self.encoder.batch_encode(Some(&lora), batch)?;
        sinkhorn_divergence_unrolled(&cloud, h_sae, self.ot)
    }
}

struct MlpVars {
    w_d: Var,
    b_d: Var,
    w_u: Var,
    b_u: Var,
}

fn row_of(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(Axis(0))
}

fn mlp_params(t: &mut Tape, m: &Mlp) -> MlpVars {
    MlpVars {
        w_d: t.param(m.w_d.clone()),
        b_d: t.param(row_of(&m.b_d)),
        w_u: t.param(m.w_u.clone()),
        b_u: t.param(row_of(&m.b_u)),
    }
}

fn mlp_forward(t: &mut Tape, m: &MlpVars, x: Var) -> Var {
    let a = t.matmul(x, m.w_d);
    let a = t.add_row(a, m.b_d);
    let h = t.relu(a);
    let o = t.matmul(h, m.w_u);
    t.add_row(o, m.b_u)
}

fn mlp_grads(grads: &[Option<Array2<f64>>], m: &MlpVars, like: &Mlp) -> Mlp {
    let get = |v: Var, shape: (usize, usize)| grads[v.0].clone().unwrap_or_else(|| Array2::zeros(shape));
    Mlp {
        w_d: get(m.w_d, like.w_d.dim()),
        b_d: get(m.b_d, (1, like.b_d.len())).row(0).to_owned(),
        w_u: get(m.w_u, like.w_u.dim()),
        b_u: get(m.b_u, (1, like.b_u.len())).row(0).to_owned(),
    }
}

struct BlockVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1_g: Var,
    ln1_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    ln2_g: Var,
    ln2_b: Var,
}

fn block_constants(t: &mut Tape, b: &BlockWeights) -> BlockVars {
    BlockVars {
        wq: t.constant(b.wq.clone()),
        bq: t.constant(row_of(&b.bq)),
        wk: t.constant(b.wk.clone()),
        bk: t.constant(row_of(&b.bk)),
        wv: t.constant(b.wv.clone()),
        bv: t.constant(row_of(&b.bv)),
        wo: t.constant(b.wo.clone()),
        bo: t.constant(row_of(&b.bo)),
        ln1_g: t.constant(row_of(&b.ln1_g)),
        ln1_b: t.constant(row_of(&b.ln1_b)),
        w1: t.constant(b.w1.clone()),
        b1: t.constant(row_of(&b.b1)),
        w2: t.constant(b.w2.clone()),
        b2: t.constant(row_of(&b.b2)),
        ln2_g: t.constant(row_of(&b.ln2_g)),
        ln2_b: t.constant(row_of(&b.ln2_b)),
    }
}

struct AdapterVars {
    dq: Var,
    uq: Var,
    dv: Var,
    uv: Var,
}

fn tape_block(t: &mut Tape, b: &BlockVars, l: &AdapterVars, h: Var, heads: usize, d_model: usize) -> Var {
    let q = t.matmul(h, b.wq);
    let q = t.add_row(q, b.bq);
    let hd = t.matmul(h, l.dq);
    let dq = t.matmul(hd, l.uq);
    let q = t.add(q, dq);
    let k = t.matmul(h, b.wk);
    let k = t.add_row(k, b.bk);
    let v = t.matmul(h, b.wv);
    let v = t.add_row(v, b.bv);
    let hd = t.matmul(h, l.dv);
    let dv = t.matmul(hd, l.uv);
    let v = t.add(v, dv);

    let dh = d_model / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Vec::with_capacity(heads);
    for head in 0..heads {
        let (lo, hi) = (head * dh, (head + 1) * dh);
        let qs = t.slice_cols(q, lo, hi);
        let ks = t.slice_cols(k, lo, hi);
        let vs = t.slice_cols(v, lo, hi);
        let sc = t.matmul_bt(qs, ks);
        let sc = t.scale(sc, scale);
        let p = t.softmax_rows(sc);
        ctx.push(t.matmul(p, vs));
    }
    let ctx = t.concat_cols(ctx);
    let a = t.matmul(ctx, b.wo);
    let a = t.add_row(a, b.bo);
    let r1 = t.add(h, a);
    let h1 = t.layer_norm(r1, b.ln1_g, b.ln1_b);
    let pre = t.matmul(h1, b.w1);
    let pre = t.add_row(pre, b.b1);
    let act = t.gelu(pre);
    let ff = t.matmul(act, b.w2);
    let ff = t.add_row(ff, b.b2);
    let r2 = t.add(h1, ff);
    t.layer_norm(r2, b.ln2_g, b.ln2_b)
}

/// Unrolled Sinkhorn on the tape; mirrors the fixed-iteration plain solver.
/// `ct` is `None` for a self term.
fn tape_sinkhorn(
    t: &mut Tape,
    c: Var,
    ct: Option<Var>,
    la: &Array1<f64>,
    lb: &Array1<f64>,
    cfg: &OTConfig,
) -> Var {
    let (n, m) = (la.len(), lb.len());
    let t0 = cfg.temperature(0);
    let zero_m = t.constant(Array2::zeros((m, 1)));
    let mut f = t.softmin(c, zero_m, lb.clone(), t0);
    let mut g = match ct {
        Some(ct) => {
            let zero_n = t.constant(Array2::zeros((n, 1)));
            t.softmin(ct, zero_n, la.clone(), t0)
        }
        None => f,
    };
    let (mut f_prev, mut g_prev) = (f, g);
    for k in 1..cfg.unroll_iters {
        let temp = cfg.temperature(k);
        let ft = t.softmin(c, g, lb.clone(), temp);
        let gt = match ct {
            Some(ct) => t.softmin(ct, f, la.clone(), temp),
            None => ft,
        };
        f_prev = f;
        g_prev = g;
        f = ft;
        g = gt;
    }
    let fs = t.add(f, f_prev);
    let f_bar = t.scale(fs, 0.5);
    let g_bar = match ct {
        Some(_) => {
            let gs = t.add(g, g_prev);
            t.scale(gs, 0.5)
        }
        None => f_bar,
    };
    t.entropic_value(c, f_bar, g_bar, la.clone(), lb.clone(), cfg.epsilon)
}

/// Records the full loss. Returns the tape, the loss node and the
/// hypernetwork parameter nodes.
fn record(
    obj: &Objective,
    hw: &HypernetWeights,
    d: &FeatureVector,
    batch: &[TokenSentence],
    h_sae: &PointCloud,
) -> Result<(Tape, Var, MlpVars, MlpVars)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let enc = obj.encoder;
    let ecfg = enc.config();
    if h_sae.dim() != ecfg.d_model {
        return Err(Error::Argument(format!(
            "SAE cloud has dimension {}, encoder produces {}",
            h_sae.dim(),
            ecfg.d_model
        )));
    }
    // Validates shapes and feature count before anything is recorded.
    generate_lora(hw, d, obj.hypernet)?;
    let x_in = input_matrix(d, obj.hypernet)?;

    let mut t = Tape::new();
    let down = mlp_params(&mut t, &hw.down);
    let up = mlp_params(&mut t, &hw.up);
    let x = t.constant(x_in);
    let d_out = mlp_forward(&mut t, &down, x);
    let u_out = mlp_forward(&mut t, &up, x);
    let (dm, r) = (ecfg.d_model, ecfg.lora_rank);
    let adapters: Vec<AdapterVars> = (0..ecfg.n_blocks)
        .map(|k| {
            let mut piece = |src: Var, row: usize, shape: (usize, usize)| {
                let s = t.select_row(src, row);
                t.reshape(s, shape.0, shape.1)
            };
            AdapterVars {
                dq: piece(d_out, 2 * k, (dm, r)),
                uq: piece(u_out, 2 * k, (r, dm)),
                dv: piece(d_out, 2 * k + 1, (dm, r)),
                uv: piece(u_out, 2 * k + 1, (r, dm)),
            }
        })
        .collect();

    let w = enc.weights();
    let blocks: Vec<BlockVars> = w.blocks.iter().map(|b| block_constants(&mut t, b)).collect();
    let mut outs = Vec::with_capacity(batch.len());
    for s in batch {
        let ids = enc.check_input(None, s)?;
        let n = ids.len();
        let x0 = w.tok_emb.select(Axis(0), &ids) + w.pos_emb.slice(ndarray::s![..n, ..]);
        let (h0, _, _) = layer_norm_rows(&x0.view(), &w.emb_ln_g.view(), &w.emb_ln_b.view());
        let mut h = t.constant(h0);
        for (bv, av) in blocks.iter().zip(&adapters) {
            h = tape_block(&mut t, bv, av, h, ecfg.n_heads, dm);
        }
        outs.push(h);
    }
    let cloud = t.concat_rows(outs);

    let n_pts = t.value(cloud).nrows();
    let a_w = Array1::from_elem(n_pts, 1.0 / n_pts as f64);
    let la = a_w.mapv(f64::ln);
    let lb = h_sae.weights().mapv(f64::ln);
    let y = t.constant(h_sae.points().to_owned());
    let c = t.sq_dist(cloud, y);
    let ct = t.transpose(c);
    let ab = tape_sinkhorn(&mut t, c, Some(ct), &la, &lb, obj.ot);
    let caa = t.sq_dist(cloud, cloud);
    let aa = tape_sinkhorn(&mut t, caa, None, &la, &la, obj.ot);
    let cbb = sq_dist(&h_sae.points(), &h_sae.points());
    let bb_val = ot::self_value(&cbb, &h_sae.weights(), obj.ot, true);
    let bb = t.constant(Array2::from_elem((1, 1), bb_val));
    let half_aa = t.scale(aa, 0.5);
    let half_bb = t.scale(bb, 0.5);
    let diff = t.sub(ab, half_aa);
    let loss = t.sub(diff, half_bb);
    Ok((t, loss, down, up))
}

/// Loss and exact gradients with respect to `hw`.
pub fn loss_and_grad(
    obj: &Objective,
    hw: &HypernetWeights,
    d: &FeatureVector,
    batch: &[TokenSentence],
    h_sae: &PointCloud,
) -> Result<GradReport> {
    let (t, loss, down, up) = record(obj, hw, d, batch, h_sae)?;
    let value = t.value(loss)[[0, 0]];
    if !value.is_finite() {
        let origin = t.first_non_finite().map_or("loss", |(_, name)| name);
        return Err(Error::numeric(origin, format!("loss is {value}")));
    }
    let grads = t.backward(loss)?;
    let report = GradReport {
        loss: value,
        grads: HypernetWeights { down: mlp_grads(&grads, &down, &hw.down), up: mlp_grads(&grads, &up, &hw.up) },
    };
    if !report.grads.is_finite() {
        return Err(Error::numeric("backward", "non-finite gradient"));
    }
    Ok(report)
}

/// The recorded loss recomputed from the tape alone.
pub fn replay_loss(
    obj: &Objective,
    hw: &HypernetWeights,
    d: &FeatureVector,
    batch: &[TokenSentence],
    h_sae: &PointCloud,
) -> Result<(f64, f64)> {
    let (t, loss, _, _) = record(obj, hw, d, batch, h_sae)?;
    Ok((t.value(loss)[[0, 0]], t.replay(loss)[[0, 0]]))
}

/// One finite-difference probe.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference of the plain loss along one flat coordinate.
pub fn central_difference(
    obj: &Objective,
    hw: &HypernetWeights,
    d: &FeatureVector,
    batch: &[TokenSentence],
    h_sae: &PointCloud,
    index: usize,
    h: f64,
) -> Result<f64> {
    let base = hw.to_flat();
    let mut w = hw.clone();
    let mut shifted = base.clone();
    shifted[index] = base[index] + h;
    w.set_flat(&shifted)?;
    let plus = obj.loss(&w, d, batch, h_sae)?;
    shifted[index] = base[index] - h;
    w.set_flat(&shifted)?;
    let minus = obj.loss(&w, d, batch, h_sae)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Compares analytic gradients with central differences (step `1e-6`) at
/// `n_probes` coordinates drawn uniformly with `seed`.
pub fn finite_diff_check(
    obj: &Objective,
    hw: &HypernetWeights,
    d: &FeatureVector,
    batch: &[TokenSentence],
    h_sae: &PointCloud,
    n_probes: usize,
    seed: u64,
) -> Result<FdReport> {
    if n_probes == 0 {
        return Err(Error::Argument("n_probes must be at least 1".into()));
    }
    let report = loss_and_grad(obj, hw, d, batch, h_sae)?;
    let analytic = report.grads.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let index = rng.random_range(0..analytic.len());
        let numeric = central_difference(obj, hw, d, batch, h_sae, index, 1e-6)?;
        let (tensor, _) = hw.locate(index).expect("index in range");
        probes.push(Probe {
            tensor,
            index,
            analytic: analytic[index],
            numeric,
            rel_error: relative_error(analytic[index], numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(FdReport { max_rel_error, probes })
}
