//! Gradients of the alignment loss against central differences.
//!
//! At step `1e-6` the difference quotient carries roughly `1e-8` of rounding
//! noise from the loss itself, so coordinates with tiny gradients are
//! compared at step `1e-4` with an absolute floor instead.

use hyperlora::encoder::{Encoder, EncoderConfig};
use hyperlora::grad::{central_difference, loss_and_grad, Objective};
use hyperlora::hypernet::{HypernetConfig, HypernetWeights, InitScheme};
use hyperlora::ot::{OTConfig, PointCloud};
use hyperlora::transform::{build_parallel_corpus, toy::toy_corpus, TokenSentence};
use hyperlora::typology::{builtin_ewave, FeatureVector};
use hyperlora::Error;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    enc: Encoder,
    hcfg: HypernetConfig,
    ot: OTConfig,
    d: FeatureVector,
    batch: Vec<TokenSentence>,
    sae: PointCloud,
}

fn case(id: &str, seed: u64) -> Case {
    let ew = builtin_ewave();
    let enc = Encoder::toy(EncoderConfig::default()).unwrap();
    let hcfg = HypernetConfig { init_scheme: InitScheme::SmallUniform, ..HypernetConfig::for_encoder(enc.config(), 236) };
    let d = ew[id].clone();
    let corpus = build_parallel_corpus(&toy_corpus(8, 300 + seed), &d, seed).unwrap();
    let sae = enc.batch_encode(None, &corpus.sae_sentences()).unwrap();
    Case { enc, hcfg, ot: OTConfig::default(), d, batch: corpus.dialect_sentences(), sae }
}

#[test]
fn analytic_gradients_match_wide_central_differences() {
    for (seed, id) in ["AAVE", "IndE", "NgE", "ChcE", "JamE"].iter().enumerate() {
        let c = case(id, seed as u64);
        let obj = Objective::new(&c.enc, &c.hcfg, &c.ot).unwrap();
        let hw = HypernetWeights::init(&c.hcfg, 10 + seed as u64).unwrap();
        let g = loss_and_grad(&obj, &hw, &c.d, &c.batch, &c.sae).unwrap().grads.to_flat();
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        for _ in 0..40 {
            let i = rng.random_range(0..g.len());
            let n = central_difference(&obj, &hw, &c.d, &c.batch, &c.sae, i, 1e-4).unwrap();
            let tol = 1e-4 * g[i].abs().max(n.abs()) + 1e-9;
            assert!((g[i] - n).abs() <= tol, "{id} [{i}] {} vs {n}", g[i]);
        }
    }
}

#[test]
fn central_difference_error_shrinks_quadratically() {
    let c = case("NgE", 3);
    let obj = Objective::new(&c.enc, &c.hcfg, &c.ot).unwrap();
    let hw = HypernetWeights::init(&c.hcfg, 2).unwrap();
    let g = loss_and_grad(&obj, &hw, &c.d, &c.batch, &c.sae).unwrap().grads.to_flat();
    let i = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
    let err = |h: f64| (central_difference(&obj, &hw, &c.d, &c.batch, &c.sae, i, h).unwrap() - g[i]).abs();
    let (e1, e2) = (err(1e-2), err(2e-2));
    assert!(e2 > 3.0 * e1 && e2 < 5.0 * e1, "{e1} {e2}");
}

#[test]
fn reordering_the_sae_cloud_leaves_loss_and_gradients_unchanged() {
    let c = case("IndE", 1);
    let obj = Objective::new(&c.enc, &c.hcfg, &c.ot).unwrap();
    let hw = HypernetWeights::init(&c.hcfg, 6).unwrap();
    let a = loss_and_grad(&obj, &hw, &c.d, &c.batch, &c.sae).unwrap();
    let p = c.sae.points();
    let n = p.nrows();
    let rev = PointCloud::new(Array2::from_shape_fn(p.dim(), |(i, k)| p[[n - 1 - i, k]]), Array1::from_elem(n, 1.0 / n as f64)).unwrap();
    let b = loss_and_grad(&obj, &hw, &c.d, &c.batch, &rev).unwrap();
    assert!((a.loss - b.loss).abs() <= 1e-12 * a.loss.abs(), "{} {}", a.loss, b.loss);
    let (ga, gb) = (a.grads.to_flat(), b.grads.to_flat());
    let scale = ga.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(ga.iter().zip(&gb).all(|(x, y)| (x - y).abs() <= 1e-10 * scale));
}

#[test]
fn overflowing_weights_report_a_numeric_error() {
    let c = case("AAVE", 0);
    let obj = Objective::new(&c.enc, &c.hcfg, &c.ot).unwrap();
    let mut hw = HypernetWeights::init(&c.hcfg, 0).unwrap();
    hw.up.b_u.fill(1e300);
    hw.down.b_u.fill(1e300);
    match loss_and_grad(&obj, &hw, &c.d, &c.batch, &c.sae) {
        Err(e @ Error::Numeric { .. }) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}
