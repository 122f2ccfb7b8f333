use std::path::Path;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ftopinn::assemble::{lstsq, WeightedSystem};
use ftopinn::basis::{
    make_pascal_basis, make_random_feature, make_scaled_union, Activation, BasisSet, Layer, MlpSpec, ScaleSet,
};
use ftopinn::field_sampler::{sample_rbf_grf, GrfSpec};
use ftopinn::harness::error_metrics;
use ftopinn::linalg::solve_tridiagonal;
use ftopinn::problems::{Astroid, Group, ResidualRow};
use ftopinn::weight_io::{from_json, to_json, Model, WeightFile};

fn random_mlp(dims: &[usize], seed: u64) -> MlpSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .map(|w| {
            let weight = DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-1.0..1.0));
            let bias = DVector::from_fn(w[1], |_, _| rng.gen_range(-1.0..1.0));
            Layer::new(weight, bias).unwrap()
        })
        .collect();
    MlpSpec::new(layers, Activation::Tanh).unwrap()
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

// Fourth-order central differences of values (order 1) or of exact gradients
// (order 2) along coordinate `k`.
fn central(basis: &BasisSet, x: &[f64], k: usize, h: f64, of_grad: bool) -> Vec<Vec<f64>> {
    let at = |s: f64| -> Vec<Vec<f64>> {
        let mut y = x.to_vec();
        y[k] += s;
        let jets = basis.jets(&y).unwrap();
        (0..jets.len())
            .map(|i| {
                let j = jets.get(i);
                if of_grad {
                    j.grad
                } else {
                    vec![j.value]
                }
            })
            .collect()
    };
    let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
    (0..p1.len())
        .map(|i| {
            (0..p1[i].len())
                .map(|c| (-p2[i][c] + 8.0 * p1[i][c] - 8.0 * m1[i][c] + m2[i][c]) / (12.0 * h))
                .collect()
        })
        .collect()
}

fn max_jet_error(basis: &BasisSet, x: &[f64]) -> f64 {
    let jets = basis.jets(x).unwrap();
    let d = x.len();
    let mut worst: f64 = 0.0;
    for k in 0..d {
        let dv = central(basis, x, k, 1e-3, false);
        let dg = central(basis, x, k, 1e-3, true);
        for i in 0..jets.len() {
            let j = jets.get(i);
            let scale = 1.0 + j.grad.iter().chain(&j.hess).fold(0.0f64, |m, v| m.max(v.abs()));
            worst = worst.max((j.grad[k] - dv[i][0]).abs() / scale);
            for c in 0..d {
                worst = worst.max((j.hess_at(c, k) - dg[i][c]).abs() / scale);
            }
        }
    }
    worst
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_feature_jets_match_differences(seed in 0u64..1000, depth in 1usize..4, x in point()) {
        let b = make_random_feature(2, depth, 12, 15, seed).unwrap();
        let e = max_jet_error(&b, &x);
        prop_assert!(e < 1e-6, "error {e:e}");
    }

    #[test]
    fn trunk_and_scaled_union_jets_match_differences(seed in 0u64..1000, x in point(), p in 0.1f64..0.9) {
        let net = random_mlp(&[2, 10, 10, 6], seed);
        let trunk = BasisSet::trunk(net.clone());
        prop_assert!(max_jet_error(&trunk, &x) < 1e-6);
        let union = make_scaled_union(net, ScaleSet::new(vec![p, 1.0]).unwrap());
        prop_assert!(max_jet_error(&union, &x) < 1e-6);
    }

    #[test]
    fn pascal_jets_match_differences(degree in 0usize..7, x in point()) {
        let b = make_pascal_basis(degree);
        prop_assert!(max_jet_error(&b, &x) < 1e-6);
    }

    #[test]
    fn unit_scale_union_equals_trunk(seed in 0u64..1000, x in point()) {
        let net = random_mlp(&[2, 8, 5], seed);
        let a = BasisSet::trunk(net.clone()).jets(&x).unwrap().to_vec();
        let b = make_scaled_union(net, ScaleSet::identity()).jets(&x).unwrap().to_vec();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn random_features_are_seeded(seed in 0u64..1000, x in point()) {
        let a = make_random_feature(2, 2, 10, 10, seed).unwrap().values(&x).unwrap();
        let b = make_random_feature(2, 2, 10, 10, seed).unwrap().values(&x).unwrap();
        let c = make_random_feature(2, 2, 10, 10, seed + 1).unwrap().values(&x).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_ne!(&a, &c);
    }

    #[test]
    fn evaluation_is_pure(seed in 0u64..1000, x in point()) {
        let b = make_random_feature(2, 3, 10, 10, seed).unwrap();
        let first = b.jets(&x).unwrap().to_vec();
        for _ in 0..3 {
            prop_assert_eq!(&first, &b.jets(&x).unwrap().to_vec());
        }
    }

    #[test]
    fn appending_columns_never_increases_residual(seed in 0u64..1000, cols in 1usize..8, extra in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = 30;
        let a = random_matrix(rows, cols + extra, &mut rng);
        let b = DVector::from_fn(rows, |_, _| rng.gen_range(-1.0..1.0));
        let small = lstsq(a.columns(0, cols).into_owned(), &b, 1e-14).unwrap();
        let big = lstsq(a, &b, 1e-14).unwrap();
        prop_assert!(big.residual_norm <= small.residual_norm * (1.0 + 1e-10) + 1e-12);
    }

    #[test]
    fn lstsq_satisfies_normal_equations(seed in 0u64..1000, cols in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = 3 * cols + 5;
        let a = random_matrix(rows, cols, &mut rng);
        let b = DVector::from_fn(rows, |_, _| rng.gen_range(-1.0..1.0));
        let r = lstsq(a.clone(), &b, 1e-10).unwrap();
        let normal = a.transpose() * (&a * &r.x - &b);
        let scale = (a.transpose() * &b).norm().max(1e-300);
        prop_assert!(normal.norm() / scale < 1e-8);
    }

    #[test]
    fn weighted_rows_are_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coefficients: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rhs = rng.gen_range(-1.0..1.0);
        let row = |s: f64| ResidualRow {
            coefficients: coefficients.iter().map(|v| s * v).collect(),
            rhs: s * rhs,
            group: Group::Pde,
        };
        let a = WeightedSystem::from_rows(vec![(row(1.0), vec![0.0, 0.0])], 5).unwrap();
        let b = WeightedSystem::from_rows(vec![(row(c), vec![0.0, 0.0])], 5).unwrap();
        let (wa, wb) = (a.weighted_matrix(), b.weighted_matrix());
        prop_assert!((&wa - &wb).amax() < 1e-14);
        prop_assert!((wb.row(0).norm() - 1.0).abs() < 1e-14);
        prop_assert!((a.weighted_rhs()[0] - b.weighted_rhs()[0]).abs() < 1e-14);
    }

    #[test]
    fn grf_is_deterministic(seed in 0u64..1000, l in 0.05f64..0.5) {
        let spec = GrfSpec::rbf(l, 40, seed);
        let a = sample_rbf_grf(&spec, 2).unwrap();
        let b = sample_rbf_grf(&spec, 2).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert_eq!(u.values(), v.values());
        }
    }

    #[test]
    fn weight_files_round_trip_exactly(seed in 0u64..1000, w1 in 1usize..6, w2 in 1usize..6, x in point()) {
        let net = random_mlp(&[2, w1, w2, 3], seed);
        let file = WeightFile::new(Model::Mlp(net.clone()));
        let back = from_json(&to_json(&file).unwrap(), Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &file);
        if let Model::Mlp(loaded) = &back.model {
            prop_assert_eq!(loaded.forward(&x), net.forward(&x));
        }
    }

    #[test]
    fn error_metrics_ignore_point_order(seed in 0u64..1000, n in 2usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let approx: Vec<f64> = truth.iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let pt: Vec<f64> = order.iter().map(|&i| truth[i]).collect();
        let pa: Vec<f64> = order.iter().map(|&i| approx[i]).collect();
        let (r1, l1) = error_metrics(&truth, &approx).unwrap();
        let (r2, l2) = error_metrics(&pt, &pa).unwrap();
        prop_assert!((r1.unwrap() - r2.unwrap()).abs() <= 1e-12 * r1.unwrap().max(1e-300));
        prop_assert_eq!(l1, l2);
    }

    #[test]
    fn astroid_points_lie_on_the_curve(theta in 0.0f64..std::f64::consts::TAU, r in 0.2f64..1.0) {
        let g = Astroid { radius: r };
        let p = g.point(theta);
        prop_assert!(g.level(&p).abs() < 1e-10);
    }

    #[test]
    fn tridiagonal_solution_satisfies_system(seed in 0u64..1000, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lower: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upper: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let diag: Vec<f64> = (0..n).map(|_| 3.0 + rng.gen_range(0.0..1.0)).collect();
        let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = solve_tridiagonal(&lower, &diag, &upper, &rhs);
        for i in 0..n {
            let mut s = diag[i] * x[i];
            if i > 0 {
                s += lower[i] * x[i - 1];
            }
            if i + 1 < n {
                s += upper[i] * x[i + 1];
            }
            prop_assert!((s - rhs[i]).abs() < 1e-12);
        }
    }
}
