use fsketch::densela::{rank_of, singular_values};
use fsketch::lowrank::{best_rank_k_residual, lowrank_run, LowRankConfig, ProductMode};
use fsketch::regress::{min_norm_lstsq, regress_solve, RegressionConfig};
use fsketch::streams::{block_fixture, gen_rank_fixture, gen_regression, vandermonde_fixture};
use fsketch::{Layout, LogSumConfig, LogSumSketch, MatProdConfig, MatrixProductSketch, RowNormSketch, Transform};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn logsum_matches_dense_sum_when_the_first_level_decodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 200;
    let x: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let mut y = vec![0i64; n];
    let mut cfg = LogSumConfig::new(0.25, 0.1).with_seed(1);
    cfg.capacity = Some(n);
    let mut s = LogSumSketch::new(x.clone(), cfg).unwrap();
    for _ in 0..5000 {
        let i = rng.random_range(0..n);
        let d = if rng.random::<bool>() { 1 } else { -1 };
        y[i] += d;
        s.update(i as u64, d as f64).unwrap();
    }
    let exact: f64 = x.iter().zip(&y).map(|(a, &b)| a * (b.abs() as f64).ln_1p()).sum();
    assert_eq!(s.selected_level(), Some(0));
    assert!((s.query().unwrap() - exact).abs() < 1e-9);
}

#[test]
fn product_sketch_matches_dense_product_at_full_capacity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (r, c) = (12, 30);
    let b = DMatrix::from_fn(c, 3, |_, _| [-1.0, 0.0, 1.0][rng.random_range(0..3)]);
    for layout in [Layout::Independent, Layout::SharedRow] {
        let mut cfg = MatProdConfig::new(0.25, 0.1).with_seed(2).with_layout(layout);
        cfg.capacity = Some(c);
        let mut s = MatrixProductSketch::new(r, b.clone(), Transform::LOG1P, cfg).unwrap();
        let mut a = DMatrix::<f64>::zeros(r, c);
        for _ in 0..2000 {
            let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
            let d = rng.random_range(-3i64..=3) as f64;
            a[(i, j)] += d;
            s.update(i, j, d).unwrap();
        }
        let est = s.query();
        assert_eq!(est.failures(), 0);
        let want = Transform::LOG1P.apply_matrix(&a) * &b;
        assert!((est.z - want).abs().max() < 1e-9);
    }
}

#[test]
fn row_norms_match_dense_at_full_capacity() {
    let mut cfg = MatProdConfig::new(0.25, 0.1).with_seed(4);
    cfg.capacity = Some(20);
    let mut s = RowNormSketch::new(4, 20, Transform::LOG1P, cfg).unwrap();
    let mut a = DMatrix::<f64>::zeros(4, 20);
    for i in 0..4 {
        for j in 0..20 {
            let v = ((i * 7 + j * 3) % 11) as f64 - 5.0;
            a[(i, j)] = v;
            s.update(i, j, v).unwrap();
        }
    }
    let est = s.query();
    let m = Transform::LOG1P.apply_matrix(&a);
    for i in 0..4 {
        assert!((est.values[i] - m.row(i).norm_squared()).abs() < 1e-9);
    }
}

#[test]
fn entrywise_log_changes_rank() {
    let alphas = [1.5, 2.0, 2.5, 3.0, 3.5, 4.0];
    let (a, log_a) = vandermonde_fixture(&alphas).unwrap();
    assert_eq!(rank_of(&a, 1e-8), 6);
    assert_eq!(rank_of(&log_a, 1e-8), 1);
    let (b, log_b) = block_fixture(6).unwrap();
    assert_eq!(rank_of(&b, 1e-8), 3);
    assert_eq!(rank_of(&log_b, 1e-8), 6);
}

#[test]
fn sketched_lowrank_on_exact_rank_input() {
    let g = gen_rank_fixture(40, 4, 11).unwrap();
    let m = Transform::LOG1P.apply_matrix(&g.a);
    let mut s = g.stream.clone();
    let cfg = LowRankConfig::with_budget(4, 0.25, 40).with_seed(6);
    let res = lowrank_run(&mut s, &cfg, Transform::LOG1P).unwrap();
    assert!(res.residual_fro(&m) <= 1e-3 * m.norm());
    assert!(best_rank_k_residual(&m, 4) <= 1e-4 * m.norm());
}

#[test]
fn exact_product_ablation_stays_near_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..5 {
        let g = gen_rank_fixture(50, 8, seed).unwrap();
        let mut noise = g.stream.clone().into_events();
        for e in noise.iter_mut() {
            e.value += rng.random_range(-20_000i64..20_000);
        }
        let mut s = fsketch::streams::MemoryStream::new(50, 50, 20, noise).unwrap();
        let a = fsketch::streams::accumulate(&mut s).unwrap();
        let m = Transform::LOG1P.apply_matrix(&a);
        let mut cfg = LowRankConfig::with_budget(3, 0.25, 15).with_seed(seed);
        cfg.mode = ProductMode::Exact;
        let res = lowrank_run(&mut s, &cfg, Transform::LOG1P).unwrap();
        let opt = best_rank_k_residual(&m, 3);
        assert!(res.residual_fro(&m).powi(2) <= 10.0 * opt * opt + 1e-12);
    }
}

#[test]
fn regression_oracle_mode_matches_sketch_and_solve_theory() {
    let data = gen_regression(400, 4, 0.3, 12).unwrap();
    let m = Transform::LOG1P.apply_matrix(&data.generated.a);
    let (x_opt, _) = min_norm_lstsq(&m, &data.b).unwrap();
    let opt = (&m * x_opt - &data.b).norm();
    let mut cfg = RegressionConfig::new(4, 0.25).with_seed(1);
    cfg.mode = ProductMode::Exact;
    let mut s = data.generated.stream.clone();
    let r = regress_solve(&mut s, &data.b, &cfg, Transform::LOG1P).unwrap();
    assert!((&m * &r.x - &data.b).norm() <= 1.25 * opt);
    assert!(singular_values(&m)[3] > 0.0);
}
