//! Randomized invariants of the kernels and the transport oracles.

use itertools::Itertools;
use ndarray::Array1;
use proptest::prelude::*;

use cot_core::diffengine::Matrix;
use cot_core::kernels::{mmd2, Kernel, WeightedSamples};
use cot_core::oracles::{
    assignment_cost, converge_conditionals, empirical_w1_1d, exact_assignment_ot, exact_ot_1d,
    gaussian_w2sq, true_conditional_w2sq, Gaussian1D, OtCost,
};
use cot_core::rng::RngStream;

fn points(seed: u64, n: usize, d: usize) -> Matrix {
    RngStream::new(seed).normal_matrix(n, d)
}

fn kernel(family: u8, bw: f64) -> Kernel {
    match family % 3 {
        0 => Kernel::rbf(bw),
        1 => Kernel::imq(bw),
        _ => Kernel::imq2(bw),
    }
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mmd_is_symmetric_and_nonnegative(seed in 0u64..10_000, n in 1usize..12, p in 1usize..12, d in 1usize..4,
                                        family in 0u8..3, bw in 0.2f64..3.0) {
        let k = kernel(family, bw);
        let a = WeightedSamples::uniform(points(seed, n, d)).unwrap();
        let b = WeightedSamples::uniform(points(seed + 1, p, d) + 0.3).unwrap();
        let ab = mmd2(&k, &a, &b).unwrap();
        let ba = mmd2(&k, &b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab.abs()));
        prop_assert!(mmd2(&k, &a, &a).unwrap() <= 1e-12);
    }

    #[test]
    fn normalized_kernel_bounds_mmd_by_four(seed in 0u64..10_000, n in 1usize..10, family in 0u8..3, bw in 0.2f64..3.0) {
        let k = kernel(family, bw).normalized();
        let a = WeightedSamples::uniform(points(seed, n, 2) * 5.0).unwrap();
        let b = WeightedSamples::uniform(points(seed + 7, n, 2) * 5.0 - 20.0).unwrap();
        prop_assert!(mmd2(&k, &a, &b).unwrap() <= 4.0 + 1e-12);
    }

    #[test]
    fn w2_is_a_metric_on_gaussians(m in proptest::array::uniform3(-5.0f64..5.0), v in proptest::array::uniform3(0.05f64..9.0)) {
        let g: Vec<Gaussian1D> = (0..3).map(|i| Gaussian1D::new(m[i], v[i]).unwrap()).collect();
        let w = |i: usize, j: usize| gaussian_w2sq(g[i], g[j]).sqrt();
        prop_assert_eq!(gaussian_w2sq(g[0], g[0]), 0.0);
        prop_assert!((w(0, 1) - w(1, 0)).abs() <= 1e-15);
        prop_assert!(w(0, 2) <= w(0, 1) + w(1, 2) + 1e-9);
    }

    #[test]
    fn conditional_formula_matches_gaussian_w2(x in 0.0f64..=1.0) {
        let (s, t) = converge_conditionals(x);
        prop_assert!((true_conditional_w2sq(x).unwrap() - gaussian_w2sq(s, t)).abs() <= 1e-12);
    }

    #[test]
    fn sorted_matching_equals_assignment_in_one_dimension(seed in 0u64..10_000, n in 1usize..9) {
        let a = points(seed, n, 1);
        let b = points(seed + 3, n, 1) * 2.0;
        let (av, bv) = (a.column(0).to_vec(), b.column(0).to_vec());
        let sq = exact_assignment_ot(&a, &b, OtCost::SqEuclidean).unwrap();
        prop_assert!((sq.cost - exact_ot_1d(&av, &bv, OtCost::SqEuclidean).unwrap()).abs() <= 1e-12);
        let abs = exact_assignment_ot(&a, &b, OtCost::Euclidean).unwrap();
        prop_assert!((abs.cost - empirical_w1_1d(&av, &bv).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn hungarian_matches_exhaustive_search(seed in 0u64..10_000, n in 1usize..=6, d in 1usize..4) {
        let a = points(seed, n, d);
        let b = points(seed + 11, n, d);
        let got = exact_assignment_ot(&a, &b, OtCost::SqEuclidean).unwrap();
        let cost = Matrix::from_shape_fn((n, n), |(i, j)| {
            OtCost::SqEuclidean.eval(&a.row(i).to_vec(), &b.row(j).to_vec())
        });
        let best = (0..n).permutations(n).map(|p| assignment_cost(&cost, &p)).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(got.cost, best);
    }

    #[test]
    fn weighted_mmd_matches_duplicated_points(seed in 0u64..10_000) {
        // weight 2/3 on one point equals listing it twice among three
        let k = Kernel::rbf(1.0).unwrap();
        let p = points(seed, 2, 2);
        let dup = ndarray::concatenate![ndarray::Axis(0), p.clone(), p.slice(ndarray::s![0..1, ..])];
        let w = WeightedSamples::new(p, Array1::from(vec![2.0 / 3.0, 1.0 / 3.0])).unwrap();
        let u = WeightedSamples::uniform(dup).unwrap();
        let q = WeightedSamples::uniform(points(seed + 5, 3, 2)).unwrap();
        prop_assert!((mmd2(&k, &w, &q).unwrap() - mmd2(&k, &u, &q).unwrap()).abs() <= 1e-12);
    }
}
