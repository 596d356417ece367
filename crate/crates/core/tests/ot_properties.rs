//! Randomised properties of the transport solvers.

use hyperlora::ot::{exact_ot, sinkhorn_divergence, sinkhorn_w, OTConfig, PointCloud};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn cloud(n: usize, d: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(-2.0f64..2.0, n * d)
        .prop_map(move |v| PointCloud::uniform(Array2::from_shape_vec((n, d), v).unwrap()).unwrap())
}

fn weighted(n: usize, d: usize) -> impl Strategy<Value = PointCloud> {
    (prop::collection::vec(-2.0f64..2.0, n * d), prop::collection::vec(0.1f64..1.0, n)).prop_map(move |(v, w)| {
        let s: f64 = w.iter().sum();
        PointCloud::new(Array2::from_shape_vec((n, d), v).unwrap(), Array1::from_iter(w.iter().map(|x| x / s))).unwrap()
    })
}

fn permuted(c: &PointCloud, perm: &[usize]) -> PointCloud {
    let p = c.points();
    let pts = Array2::from_shape_fn(p.dim(), |(i, k)| p[[perm[i], k]]);
    let w = Array1::from_iter(perm.iter().map(|&i| c.weights()[i]));
    PointCloud::new(pts, w).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn divergence_is_nonnegative(a in (1usize..10).prop_flat_map(|n| cloud(n, 3)), b in (1usize..10).prop_flat_map(|n| cloud(n, 3))) {
        let s = sinkhorn_divergence(&a, &b, &OTConfig::default()).unwrap();
        prop_assert!(s >= -1e-8, "{s}");
    }

    #[test]
    fn divergence_vanishes_under_point_permutation(
        a in (2usize..10).prop_flat_map(|n| weighted(n, 2)),
        seed in any::<u64>(),
    ) {
        let n = a.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut x = seed;
        for i in (1..n).rev() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (x >> 33) as usize % (i + 1));
        }
        let s = sinkhorn_divergence(&a, &permuted(&a, &perm), &OTConfig::default()).unwrap();
        prop_assert!(s.abs() <= 1e-8, "{s}");
    }

    #[test]
    fn distinct_clouds_have_positive_divergence(a in (1usize..8).prop_flat_map(|n| cloud(n, 2)), shift in 0.3f64..2.0) {
        let moved = PointCloud::uniform(a.points().mapv(|v| v + shift)).unwrap();
        let s = sinkhorn_divergence(&a, &moved, &OTConfig::default()).unwrap();
        prop_assert!(s > 1e-6, "{s}");
    }

    #[test]
    fn converged_plans_meet_both_marginals(
        a in (1usize..9).prop_flat_map(|n| weighted(n, 2)),
        b in (1usize..9).prop_flat_map(|n| weighted(n, 2)),
    ) {
        let cfg = OTConfig { max_iters: 20_000, ..OTConfig::with_epsilon(0.1) };
        let r = sinkhorn_w(&a, &b, &cfg).unwrap();
        prop_assume!(r.converged);
        let rows = r.plan.sum_axis(ndarray::Axis(1));
        let cols = r.plan.sum_axis(ndarray::Axis(0));
        let row_gap = (&rows - &a.weights()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let col_gap = (&cols - &b.weights()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(row_gap < cfg.tol && col_gap < cfg.tol, "{row_gap} {col_gap}");
        prop_assert!(r.plan.iter().all(|&p| p >= 0.0));
        // The entropic value never undercuts the unregularised optimum.
        prop_assert!(r.value >= exact_ot(&a, &b).unwrap() - 1e-9);
    }
}
