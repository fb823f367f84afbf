mod common;

use std::f64::consts::PI;

use common::*;
use dislocgas_core::fieldcalc::{self, ElasticParams, GridSpec, TensorField, ZeroMode};
use dislocgas_core::report::Verdict;
use dislocgas_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid16() -> GridSpec {
    GridSpec::new(16, 4.0, [0.0; 3]).unwrap()
}

/// Rank-0 field v·cos(q·x) with q on the reciprocal lattice of `grid`.
fn cos_wave(grid: &GridSpec, m: [i64; 3], v: [f64; 3]) -> ([f64; 3], TensorField) {
    let q = m.map(|a| 2.0 * PI * a as f64 / grid.length());
    let f = TensorField::from_fn(0, grid, |k, x| v[k] * (q[0] * x[0] + q[1] * x[1] + q[2] * x[2]).cos());
    (q, f)
}

fn max_diff(a: &TensorField, b: &TensorField) -> f64 {
    a.sub(b).unwrap().max_abs()
}

#[test]
fn identity_suite_passes_at_n32() {
    let grid = GridSpec::new(32, 4.0, [0.0; 3]).unwrap();
    let params = ElasticParams::new(0.7, 1.3).unwrap();
    let start = std::time::Instant::now();
    let report = fieldcalc::identity_suite(&grid, &params, 50, 7).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    for row in &report.rows {
        println!("{:<20} trials={} max_error={:.3e}", row.name, row.trials, row.max_error);
        assert_eq!(row.trials, 50);
        assert_eq!(row.verdict, Verdict::Pass, "{}", row.name);
    }
    assert_eq!(report.rows.len(), 17);
    assert_eq!(report.verdict, Verdict::Pass);
    assert!(elapsed < 60.0, "suite took {elapsed:.1} s");
}

#[test]
fn identity_suite_is_seed_deterministic() {
    let grid = GridSpec::new(8, 2.0, [0.0; 3]).unwrap();
    let p = unit_params();
    let a = fieldcalc::identity_suite(&grid, &p, 3, 11).unwrap();
    let b = fieldcalc::identity_suite(&grid, &p, 3, 11).unwrap();
    assert_eq!(a, b);
}

#[test]
fn d_operator_eigenvalues_on_plane_waves() {
    let grid = grid16();
    let p = ElasticParams::new(0.7, 1.3).unwrap();
    // q ∥ (1,2,0): longitudinal and transverse polarizations.
    let m = [1, 2, 0];
    let (q, long) = cos_wave(&grid, m, [1.0, 2.0, 0.0]);
    let (_, trans) = cos_wave(&grid, m, [-2.0, 1.0, 3.0]);
    let q2 = q.iter().map(|a| a * a).sum::<f64>();
    let dl = fieldcalc::apply_d_operator(&long, &p).unwrap();
    let dt = fieldcalc::apply_d_operator(&trans, &p).unwrap();
    assert!(max_diff(&dl, &long.scale((2.0 * p.mu + p.lambda) * q2)) < 1e-10);
    assert!(max_diff(&dt, &trans.scale(p.mu * q2)) < 1e-10);
    let il = fieldcalc::apply_d_operator_inverse(&long, &p).unwrap();
    assert!(max_diff(&il, &long.scale(1.0 / ((2.0 * p.mu + p.lambda) * q2))) < 1e-12);
    let lap = fieldcalc::inv_laplace(&trans, ZeroMode::RequireZero).unwrap();
    assert!(max_diff(&lap, &trans.scale(-1.0 / q2)) < 1e-12);
    let c = TensorField::from_fn(0, &grid, |k, _| k as f64 - 0.5);
    assert!(fieldcalc::apply_d_operator(&c, &p).unwrap().max_abs() < 1e-14);
}

#[test]
fn sobolev_norm_of_a_plane_wave() {
    let grid = grid16();
    let v = [1.0, -0.5, 2.0];
    let (q, f) = cos_wave(&grid, [2, -1, 1], v);
    let qn = q.iter().map(|a| a * a).sum::<f64>().sqrt();
    let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    // ∫cos² = L³/2 on a whole number of periods.
    let l2 = vn * (grid.length().powi(3) / 2.0).sqrt();
    assert!(rel_err(fieldcalc::sobolev_norm(&f, 0.0).unwrap(), l2) < 1e-12);
    assert!(rel_err(fieldcalc::sobolev_norm(&f, 1.0).unwrap(), qn * l2) < 1e-12);
    assert!(rel_err(fieldcalc::sobolev_norm(&f, -0.5).unwrap(), l2 / qn.sqrt()) < 1e-12);
    let c = TensorField::from_fn(0, &grid, |_, _| 1.0);
    assert!(matches!(fieldcalc::sobolev_norm(&c, -1.0), Err(Error::NonzeroMean { .. })));
}

#[test]
fn weitzenbock_on_a_rank_one_plane_wave() {
    let grid = grid16();
    let q = [2.0 * PI / 4.0, -2.0 * PI / 4.0, 4.0 * PI / 4.0];
    let q2 = q.iter().map(|a| a * a).sum::<f64>();
    let w = TensorField::from_fn(1, &grid, |c, x| (1.0 + c as f64) * (q[0] * x[0] + q[1] * x[1] + q[2] * x[2]).sin());
    let dd = fieldcalc::d_star(&fieldcalc::d(&w).unwrap()).unwrap();
    let dd2 = fieldcalc::d(&fieldcalc::d_star(&w).unwrap()).unwrap();
    let lhs = dd.add(&dd2).unwrap().scale(-1.0);
    assert!(max_diff(&lhs, &w.scale(-q2)) < 1e-10 * q2 * 9.0);
}

#[test]
fn f_energy_vanishes_on_rotations_and_dominates_the_symmetric_part() {
    let grid = GridSpec::new(8, 2.0, [0.0; 3]).unwrap();
    let p = ElasticParams::new(-0.3, 0.8).unwrap();
    let rot = [[0.0, 1.5, -0.2], [-1.5, 0.0, 0.7], [0.2, -0.7, 0.0]];
    let w = TensorField::from_fn(1, &grid, |c, _| rot[c / 3][c % 3]);
    assert!(fieldcalc::inner_f(&w, &w, &p).unwrap().norm() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let w = fieldcalc::random_field(1, &grid, &mut rng, false);
        let e = fieldcalc::inner_f(&w, &w, &p).unwrap().re;
        let samples = w.samples();
        let np = grid.num_points();
        let sym2: f64 = (0..np)
            .map(|q| {
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        let a = 0.5 * (samples[(3 * i + j) * np + q].re + samples[(3 * j + i) * np + q].re);
                        s += a * a;
                    }
                }
                s
            })
            .sum::<f64>()
            * grid.cell_volume();
        assert!(e >= 2.0 * p.mu * sym2 * (1.0 - 1e-12), "{e} < {}", 2.0 * p.mu * sym2);
    }
}

#[test]
fn rank_and_mean_contracts() {
    let grid = grid16();
    assert!(matches!(fieldcalc::d(&TensorField::zeros(3, &grid)), Err(Error::Rank(_))));
    assert!(matches!(fieldcalc::d_star(&TensorField::zeros(0, &grid)), Err(Error::Rank(_))));
    let c = TensorField::from_fn(0, &grid, |_, _| 2.0);
    assert!(matches!(fieldcalc::apply_d_operator_inverse(&c, &unit_params()), Err(Error::NonzeroMean { .. })));
    assert!(fieldcalc::d(&c).unwrap().max_abs() < 1e-14);
    let g = TensorField::from_fn(1, &grid, |c, _| c as f64);
    assert!(fieldcalc::grad_f(&g, &unit_params()).unwrap().max_abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn d_is_linear_and_adjoint(seed in any::<u64>(), rank in 0usize..3, s in -3.0f64..3.0) {
        let grid = GridSpec::new(8, 2.0, [0.1, -0.2, 0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = fieldcalc::random_field(rank, &grid, &mut rng, false);
        let b = fieldcalc::random_field(rank, &grid, &mut rng, false);
        let c = fieldcalc::random_field(rank + 1, &grid, &mut rng, false);
        let mut comb = a.clone();
        comb.axpy(s, &b).unwrap();
        let mut expect = fieldcalc::d(&a).unwrap();
        expect.axpy(s, &fieldcalc::d(&b).unwrap()).unwrap();
        let got = fieldcalc::d(&comb).unwrap();
        prop_assert!(max_diff(&got, &expect) <= 1e-12 * (1.0 + expect.max_abs()));
        let lhs = fieldcalc::inner(&fieldcalc::d_star(&c).unwrap(), &a).unwrap();
        let da = fieldcalc::d(&a).unwrap();
        let rhs = fieldcalc::inner(&c, &da).unwrap();
        let scale = (fieldcalc::inner(&c, &c).unwrap().re * fieldcalc::inner(&da, &da).unwrap().re).sqrt();
        prop_assert!((lhs - rhs).norm() <= 1e-10 * scale);
    }
}
