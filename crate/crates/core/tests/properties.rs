use proptest::prelude::*;
use tak_core::curvature::{exact_ggn, Criterion, Factor};
use tak_core::linalg::{kron_matvec, kron_quadratic_form, sym_eig, Matrix, Rng};
use tak_core::linearized::{Regime, TaskModel};
use tak_core::metrics::{auc, disentanglement_map, representation_drift};
use tak_core::network::{Activation, ClassSlice, Dataset, NetSpec, ParamVector, Split};
use tak_core::regfactors::{block_factor, block_sizes, lowrank_factor, prune_factor, quant8_factor, RankSpec};
use tak_core::taskvec::{compose, TaskVector};

fn psd(rng: &mut Rng, n: usize) -> Matrix {
    let g = rng.normal_matrix(n + 1, n, 1.0);
    g.matmul_tn(&g).unwrap()
}

fn vector(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn small_net(seed: u64) -> (NetSpec, ParamVector) {
    let net = NetSpec::mlp(&[3, 5, 4], Activation::Tanh).unwrap();
    let theta0 = net.init_params(&mut Rng::new(seed));
    (net, theta0)
}

fn blob(rng: &mut Rng, n: usize, offset: f64, id: &str) -> Dataset {
    let x = Matrix::new(n, 3, (0..n * 3).map(|_| offset + rng.normal()).collect()).unwrap();
    let labels = (0..n).map(|i| i % 2).collect();
    Dataset::new(x, labels, id, Split::Test, ClassSlice { offset: 0, count: 2 }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kron_form_matches_matvec_and_dense(seed in any::<u64>(), d1 in 1usize..7, d2 in 1usize..7) {
        let mut rng = Rng::new(seed);
        let b = psd(&mut rng, d1);
        let a = psd(&mut rng, d2);
        let tau = vector(&mut rng, d1 * d2);
        let qf = kron_quadratic_form(&b, &a, &tau).unwrap();
        let mv = kron_matvec(&b, &a, &tau).unwrap();
        let via_mv: f64 = tau.iter().zip(&mv).map(|(x, y)| x * y).sum();
        let dense = b.kron(&a).quadratic_form(&tau).unwrap();
        prop_assert!(rel(qf, via_mv) < 1e-10);
        prop_assert!(rel(qf, dense) < 1e-10);
        prop_assert!(qf >= -1e-10 * dense.abs().max(1.0));
    }

    #[test]
    fn compose_is_linear_and_order_free(seed in any::<u64>(), a1 in -2.0f64..2.0, a2 in -2.0f64..2.0) {
        let (_, theta0) = small_net(seed);
        let mut rng = Rng::new(seed ^ 1);
        let layout = theta0.layout().clone();
        let tv = |rng: &mut Rng, id: &str| {
            let d = ParamVector::from_values(&layout, vector(rng, layout.total())).unwrap();
            TaskVector::from_delta(&theta0, d, id).unwrap()
        };
        let (t1, t2) = (tv(&mut rng, "a"), tv(&mut rng, "b"));
        let fwd = compose(&theta0, &[(&t1, a1), (&t2, a2)]).unwrap();
        let rev = compose(&theta0, &[(&t2, a2), (&t1, a1)]).unwrap();
        let mut manual = theta0.clone();
        manual.add_scaled(a1, &t1.delta).unwrap();
        manual.add_scaled(a2, &t2.delta).unwrap();
        for ((x, y), z) in fwd.values().iter().zip(rev.values()).zip(manual.values()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            prop_assert!((x - z).abs() <= 1e-12 * (1.0 + x.abs()));
        }
        prop_assert_eq!(compose(&theta0, &[(&t1, 0.0)]).unwrap(), theta0.clone());
    }

    #[test]
    fn drift_is_curvature_quadratic_form(seed in any::<u64>(), alpha in 0.1f64..2.0) {
        let (net, theta0) = small_net(seed);
        let mut rng = Rng::new(seed ^ 2);
        let data = blob(&mut rng, 6, 0.0, "d");
        let layout = theta0.layout().clone();
        let tau = ParamVector::from_values(&layout, vector(&mut rng, layout.total())).unwrap();
        let zero = ParamVector::zeros(&layout);
        let model = TaskModel::new(net.clone(), theta0.clone(), Regime::Linearized).unwrap();
        let drift = representation_drift(&model, &zero, &tau, 1.0, alpha, &data).unwrap();
        let g = exact_ggn(&net, &theta0, &data, Criterion::Squared).unwrap();
        let expected = alpha * alpha * g.g.quadratic_form(tau.values()).unwrap();
        prop_assert!(rel(drift, expected) < 1e-8);
    }

    #[test]
    fn auc_flips_under_relabeling(pos in prop::collection::vec(-5.0f64..5.0, 1..20), neg in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let forward = auc(&pos, &neg).unwrap();
        let swapped = auc(&neg, &pos).unwrap();
        prop_assert!((0.0..=1.0).contains(&forward));
        prop_assert!((forward + swapped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disentanglement_error_is_bounded(seed in any::<u64>()) {
        let (net, theta0) = small_net(seed);
        let mut rng = Rng::new(seed ^ 3);
        let layout = theta0.layout().clone();
        let t1 = ParamVector::from_values(&layout, vector(&mut rng, layout.total())).unwrap();
        let t2 = ParamVector::from_values(&layout, vector(&mut rng, layout.total())).unwrap();
        let d1 = blob(&mut rng, 8, -2.0, "a");
        let d2 = blob(&mut rng, 8, 2.0, "b");
        let model = TaskModel::new(net, theta0, Regime::Linearized).unwrap();
        let grid = [0.0, 0.5, 1.0];
        let map = disentanglement_map(&model, &t1, &t2, &grid, &grid, &d1, &d2).unwrap();
        prop_assert_eq!(map.xi[0][0], 0.0);
        for row in &map.xi {
            for &x in row {
                prop_assert!((0.0..=2.0).contains(&x));
            }
        }
    }

    #[test]
    fn block_keeps_diagonal_blocks_only(seed in any::<u64>(), n in 2usize..20, k in 1usize..5) {
        prop_assume!(k <= n);
        let mut rng = Rng::new(seed);
        let m = psd(&mut rng, n);
        let dense = block_factor(&m, k).unwrap().to_dense();
        let sizes = block_sizes(n, k).unwrap();
        let owner: Vec<usize> = sizes.iter().enumerate().flat_map(|(b, &s)| std::iter::repeat_n(b, s)).collect();
        for i in 0..n {
            for j in 0..n {
                let expect = if owner[i] == owner[j] { m.get(i, j) } else { 0.0 };
                prop_assert_eq!(dense.get(i, j), expect);
            }
        }
    }

    #[test]
    fn lowrank_error_is_discarded_spectrum(seed in any::<u64>(), n in 2usize..10, k in 1usize..10) {
        prop_assume!(k <= n);
        let mut rng = Rng::new(seed);
        let m = psd(&mut rng, n);
        let approx = lowrank_factor(&m, RankSpec::Fixed(k)).unwrap().to_dense();
        let eig = sym_eig(&m).unwrap();
        let tail: f64 = eig.eigenvalues[k..].iter().map(|l| l * l).sum::<f64>().sqrt();
        let err = approx.sub(&m).unwrap().frobenius_norm();
        prop_assert!((err - tail).abs() <= 1e-8 * m.frobenius_norm());
        prop_assert!(sym_eig(&approx).unwrap().min_eigenvalue() >= -1e-8 * m.frobenius_norm());
    }

    #[test]
    fn prune_drops_only_small_entries(seed in any::<u64>(), n in 2usize..10, r in 0.05f64..1.0) {
        let mut rng = Rng::new(seed);
        let m = psd(&mut rng, n);
        let f = prune_factor(&m, r).unwrap();
        let dense = f.to_dense();
        let Factor::Sparse { entries, .. } = &f else { panic!("sparse expected") };
        let kept_min = entries.iter().map(|e| e.value.abs()).fold(f64::INFINITY, f64::min);
        for i in 0..n {
            for j in 0..n {
                let (v, p) = (m.get(i, j), dense.get(i, j));
                if p != 0.0 || v == 0.0 {
                    prop_assert_eq!(p, v);
                } else {
                    prop_assert!(v.abs() <= kept_min);
                }
            }
        }
        prop_assert!(dense.is_symmetric(0.0));
    }

    #[test]
    fn quant8_error_within_half_step(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = Rng::new(seed);
        let m = psd(&mut rng, n);
        let q = quant8_factor(&m);
        let Factor::Quant8 { scales, .. } = &q else { panic!("quant8 expected") };
        let rows = q.dequantized_rows().unwrap();
        let dense = q.to_dense();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((rows.get(i, j) - m.get(i, j)).abs() <= 0.5 * scales[i] * (1.0 + 1e-12));
                let step = scales[i].max(scales[j]);
                prop_assert!((dense.get(i, j) - m.get(i, j)).abs() <= 0.5 * step * (1.0 + 1e-12));
            }
        }
        prop_assert!(dense.is_symmetric(0.0));
    }
}
