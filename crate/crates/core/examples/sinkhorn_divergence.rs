//! Entropic transport between two small clouds: plan marginals, the
//! debiased divergence, and the exact optimum for comparison.

use hyperlora::ot::{exact_ot, sinkhorn_divergence, sinkhorn_w, OTConfig, PointCloud};
use ndarray::{array, Axis};

fn main() -> hyperlora::Result<()> {
    let a = PointCloud::uniform(array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])?;
    let b = PointCloud::uniform(array![[0.5, 0.5], [1.5, 0.5]])?;
    println!("exact W = {:.6}", exact_ot(&a, &b)?);
    for eps in [1.0, 0.1, 0.01] {
        let cfg = OTConfig { max_iters: 10_000, ..OTConfig::with_epsilon(eps) };
        let r = sinkhorn_w(&a, &b, &cfg)?;
        println!(
            "eps {eps:<5} W_eps {:.6}  S_eps {:.6}  iterations {:>5}  marginal error {:.1e}",
            r.value,
            sinkhorn_divergence(&a, &b, &cfg)?,
            r.iterations,
            r.marginal_error
        );
        if eps == 0.01 {
            println!("  row sums {}\n  col sums {}", r.plan.sum_axis(Axis(1)), r.plan.sum_axis(Axis(0)));
        }
    }
    println!("S_eps(a, a) = {}", sinkhorn_divergence(&a, &a, &OTConfig::default())?);
    Ok(())
}
