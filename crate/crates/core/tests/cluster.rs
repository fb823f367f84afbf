mod common;

use std::collections::BTreeMap;

use common::System;
use dislocgas_core::cluster::{self, PeierlsConstants, PolymerFamily, UrsellCache};
use dislocgas_core::currents::{self, Current, ExpansionConstants};
use dislocgas_core::elastic::{self, ObservablePoint};
use dislocgas_core::gibbs::{DislocationEnergy, Ensemble};
use dislocgas_core::report::Verdict;
use num_rational::Rational64;
use num_traits::Zero;
use proptest::prelude::*;

fn norm1() -> DislocationEnergy {
    DislocationEnergy::norm1(1.0).unwrap()
}

fn family(s: &System, size_cap: f64, beta: f64) -> PolymerFamily {
    PolymerFamily::new(&s.graph, &s.cycles, &s.lattice, &norm1(), size_cap, beta).unwrap()
}

/// Spanning trees of the graph by the matrix-tree theorem.
fn spanning_trees(adj: &[Vec<bool>]) -> f64 {
    let n = adj.len();
    if n == 1 {
        return 1.0;
    }
    let mut lap = nalgebra::DMatrix::<f64>::zeros(n - 1, n - 1);
    for i in 0..n - 1 {
        for j in 0..n {
            if i != j && adj[i][j] {
                lap[(i, i)] += 1.0;
                if j < n - 1 {
                    lap[(i, j)] -= 1.0;
                }
            }
        }
    }
    lap.determinant().round()
}

fn random_graph(n: usize, bits: u32) -> Vec<Vec<bool>> {
    let mut adj = vec![vec![true; n]; n];
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let on = bits & (1 << k) != 0;
            adj[i][j] = on;
            adj[j][i] = on;
            k += 1;
        }
    }
    adj
}

#[test]
fn ursell_values_on_small_graphs() {
    let path3 = vec![vec![true, true, false], vec![true, true, true], vec![false, true, true]];
    // Only the path itself is a connected spanning subgraph: (−1)²/3!.
    assert_eq!(cluster::ursell(&path3).unwrap(), Rational64::new(1, 6));
    let two_components = random_graph(4, 0b000001);
    assert!(cluster::ursell(&two_components).unwrap().is_zero());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ursell_is_permutation_invariant_and_tree_bounded(n in 1usize..=6, bits in 0u32..(1 << 15), seed in any::<u64>()) {
        let adj = random_graph(n, bits);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut r = seed;
        for i in (1..n).rev() {
            r = r.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (r >> 33) as usize % (i + 1));
        }
        let permuted: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| adj[perm[i]][perm[j]]).collect()).collect();
        let mut cache = UrsellCache::new();
        let u = cache.ursell(&adj).unwrap();
        prop_assert_eq!(u, cluster::ursell(&permuted).unwrap());
        prop_assert_eq!(u, cache.ursell(&permuted).unwrap());
        let factorial: i64 = (1..=n as i64).product();
        let scaled = (u * Rational64::from_integer(factorial)).to_integer().abs() as f64;
        prop_assert!(scaled <= spanning_trees(&adj));
    }
}

#[test]
fn first_order_coefficients_are_the_polymer_weights() {
    let s = System::domino();
    let fam = family(&s, 10.0, 1.5);
    let z = cluster::z_coefficients(&s.graph, &s.lattice, &fam, 1).unwrap();
    assert_eq!(z.entries.len(), fam.polymers.len());
    for (p, w) in fam.polymers.iter().zip(&fam.weights) {
        let e = z.get(&p.current).unwrap();
        assert_eq!(e.z, *w);
        assert_eq!(e.z_plus, *w);
        let expected = (-1.5 * p.current.norm1(&s.lattice)).exp();
        assert!((w - expected).abs() <= 1e-15 * expected);
    }
}

#[test]
fn coefficients_are_even_and_dominated_by_their_absolute_version() {
    let s = System::domino();
    let z = cluster::z_coefficients(&s.graph, &s.lattice, &family(&s, 10.0, 1.0), 3).unwrap();
    assert!(z.entries.len() > 100);
    for e in &z.entries {
        let mirror = z.get(&e.current.scale(-1)).expect("negated current present");
        assert_eq!(e.z, mirror.z, "{:?}", e.current);
        assert_eq!(e.z_plus, mirror.z_plus);
        assert!(e.z.abs() <= e.z_plus * (1.0 + 1e-12));
    }
    let zero = Current::zero(s.graph.num_edges());
    assert!(z.get(&zero).unwrap().z < 0.0);
}

/// On a single cycle every polymer overlaps every other, so the expansion is the
/// power series of log(1 + f) with f = Σ_J w_J e^{i⟨φ,J⟩}.
#[test]
fn single_cycle_expansion_matches_the_log_series() {
    let s = System::square();
    let fam = family(&s, 10.0, 1.0);
    assert!(fam.polymers.iter().all(|p| p.support.len() == 4));
    let n_max = 4;
    let z = cluster::z_coefficients(&s.graph, &s.lattice, &fam, n_max).unwrap();

    let f: BTreeMap<Current, f64> =
        fam.polymers.iter().zip(&fam.weights).map(|(p, w)| (p.current.clone(), *w)).collect();
    let mut power = f.clone();
    let mut series: BTreeMap<Current, f64> = BTreeMap::new();
    for n in 1..=n_max {
        let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
        for (k, v) in &power {
            *series.entry(k.clone()).or_default() += sign * v / n as f64;
        }
        let mut next = BTreeMap::new();
        for (a, va) in &power {
            for (b, vb) in &f {
                *next.entry(a.add(b)).or_default() += va * vb;
            }
        }
        power = next;
    }
    assert_eq!(series.len(), z.entries.len());
    for e in &z.entries {
        let expected = series[&e.current];
        assert!((e.z - expected).abs() <= 1e-14 * e.z_plus.max(1e-300), "{:?}: {} vs {}", e.current, e.z, expected);
    }
}

#[test]
fn coefficient_matches_the_fourier_coefficient_of_log_partition() {
    let s = System::square();
    let beta = 3.0;
    let fam = family(&s, 14.0, beta);
    let z = cluster::z_coefficients(&s.graph, &s.lattice, &fam, 3).unwrap();
    let grid = cluster::log_partition_grid(&s.graph, &s.cycles, &s.lattice, &norm1(), beta, 24.0, 16).unwrap();
    for gamma in [[1, 0, 0], [0, 0, 1], [1, 1, 0], [2, 0, 0]] {
        let m = [gamma[0], gamma[1], gamma[2]];
        let i = s.loop_current(0, gamma);
        assert_eq!(i.cycle_coords(&s.cycles), vec![gamma]);
        let oracle = grid.coefficient(&m).unwrap();
        let alias = grid.aliasing_bound(&fam, &s.lattice, &m);
        let zi = z.get(&i).unwrap().z;
        let allowed = z.tail_bound + grid.log_error + alias + 1e-15;
        assert!((zi - oracle).abs() <= allowed, "γ {gamma:?}: {zi} vs {oracle} (allowed {allowed})");
        if gamma != [2, 0, 0] {
            assert!(allowed < 1e-2 * zi.abs(), "γ {gamma:?}: bound {allowed} not informative for {zi}");
        }
    }
}

fn phis(dim: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; dim]];
    for k in 1..=3 {
        let phi: Vec<f64> = (0..dim).map(|i| 0.7 * k as f64 + 0.31 * i as f64).collect();
        out.push(phi.iter().map(|v| -v).collect());
        out.push(phi);
    }
    out
}

#[test]
fn log_partition_identity_holds_within_its_bound() {
    for (s, name) in [(System::square(), "square"), (System::domino(), "domino")] {
        for (beta, cap, n_max) in [(3.0, 12.0, 3), (6.0, 10.0, 4), (10.0, 10.0, 4)] {
            let fam = family(&s, cap, beta);
            let z = cluster::z_coefficients(&s.graph, &s.lattice, &fam, n_max).unwrap();
            let dim = 3 * s.cycles.rank();
            let rep =
                cluster::partition_identity_check(&s.graph, &s.cycles, &s.lattice, &norm1(), &z, &phis(dim), 24.0)
                    .unwrap();
            assert_eq!(rep.verdict, Verdict::Pass, "{name} β {beta}: {rep:?}");
            for pair in rep.rows[1..].chunks(2) {
                assert!((pair[0].log_brute - pair[1].log_brute).abs() <= 1e-14);
                assert!((pair[0].series - pair[1].series).abs() <= 1e-14);
                assert!(pair[0].z_brute.im.abs() <= 1e-14 * pair[0].z_brute.re);
            }
            if beta >= 6.0 {
                assert!(rep.max_discrepancy <= 1e-6, "{name} β {beta}: {}", rep.max_discrepancy);
            }
        }
    }
}

#[test]
fn identity_check_rejects_wrong_coefficients() {
    let s = System::square();
    let fam = family(&s, 14.0, 3.0);
    let mut z = cluster::z_coefficients(&s.graph, &s.lattice, &fam, 3).unwrap();
    let k = z.entries.iter().position(|e| e.current == s.loop_current(0, [1, 0, 0])).unwrap();
    z.entries[k].z *= 1.5;
    let rep = cluster::partition_identity_check(&s.graph, &s.cycles, &s.lattice, &norm1(), &z, &phis(3), 24.0).unwrap();
    assert_eq!(rep.verdict, Verdict::Fail);
}

#[test]
fn coefficients_agree_across_size_caps() {
    let s = System::square();
    let small = cluster::z_coefficients(&s.graph, &s.lattice, &family(&s, 10.0, 2.0), 3).unwrap();
    let large = cluster::z_coefficients(&s.graph, &s.lattice, &family(&s, 14.0, 2.0), 3).unwrap();
    assert!(large.entries.len() > small.entries.len());
    let allowed = small.tail_bound + large.tail_bound;
    for e in &small.entries {
        let other = large.get(&e.current).map_or(0.0, |o| o.z);
        assert!((e.z - other).abs() <= allowed, "{:?}", e.current);
    }
}

#[test]
fn coefficients_are_reproducible() {
    let s = System::domino();
    let fam = family(&s, 10.0, 1.0);
    let a = cluster::z_coefficients(&s.graph, &s.lattice, &fam, 3).unwrap();
    let b = cluster::z_coefficients(&s.graph, &s.lattice, &fam, 3).unwrap();
    assert_eq!(a, b);
    assert!(cluster::z_coefficients(&s.graph, &s.lattice, &fam, 7).is_err());
}

fn cube_setup() -> (System, PeierlsConstants, Vec<currents::Polymer>) {
    let s = System::cube();
    let ec = ExpansionConstants::new(norm1().lower_bound(&s.graph, &s.lattice), s.lattice.eta()).unwrap();
    let polymers = currents::enumerate_polymers(&s.graph, &s.lattice, 10.0).unwrap();
    (s, PeierlsConstants::new(ec, 6), polymers)
}

#[test]
fn peierls_bound_has_a_finite_threshold() {
    let (s, pc, polymers) = cube_setup();
    let betas = [0.1, 1.0, 5.0, 10.0, 20.0, 40.0, 60.0, 80.0, 120.0, 160.0, 240.0];
    let rep = cluster::peierls_check(&s.graph, &s.lattice, &pc, &polymers, 10.0, &betas);
    assert!(!rep.rows[0].holds);
    assert!(rep.rows[0].tail.is_infinite());
    let threshold = rep.threshold.expect("bound holds at large β");
    assert!(threshold <= 240.0);
    assert!(rep.analytic_threshold.is_finite());
    let tail_rows: Vec<_> = rep.rows.iter().filter(|r| r.beta >= threshold).collect();
    assert!(tail_rows.iter().all(|r| r.holds && r.margin > 0.0));
    assert!(tail_rows.windows(2).all(|w| w[1].margin >= w[0].margin), "{tail_rows:?}");
    let last = rep.rows.last().unwrap();
    assert!(last.c8_within_c10);
    assert!(last.lhs_k_exp_a <= last.rhs);
}

#[test]
fn kp_condition_holds_cold_and_fails_hot() {
    let (s, pc, polymers) = cube_setup();
    let cold = cluster::kp_condition_check(&s.graph, &s.lattice, &pc, &polymers, 10.0, 160.0);
    assert_eq!(cold.verdict, Verdict::Pass);
    assert!(cold.rows.iter().all(|r| r.closure > r.support));
    let hot = cluster::kp_condition_check(&s.graph, &s.lattice, &pc, &polymers, 10.0, 0.1);
    assert_eq!(hot.verdict, Verdict::Fail);
}

#[test]
fn closure_of_a_cube_edge() {
    let s = System::cube();
    // An edge of the cube touches two vertices of degree 3: itself plus four neighbours.
    assert_eq!(cluster::closure(&s.graph, &[0]).len(), 5);
    assert_eq!(cluster::closure(&s.graph, &(0..12).collect::<Vec<_>>()).len(), 12);
}

#[test]
fn absolute_coefficients_decay_exponentially() {
    let s = System::domino();
    let ec = ExpansionConstants::new(1.0, 1.0).unwrap();
    let pc = PeierlsConstants::new(ec, 6);
    let beta = 80.0;
    let fam = family(&s, 10.0, beta);
    let z = cluster::z_coefficients(&s.graph, &s.lattice, &fam, 3).unwrap();
    let kp = cluster::kp_condition_check(&s.graph, &s.lattice, &pc, &fam.polymers, 10.0, beta);
    assert_eq!(kp.verdict, Verdict::Pass);
    let rep = cluster::z_plus_bound_check(&s.graph, &s.lattice, &pc, &fam.polymers, 10.0, &z, &kp);
    assert_eq!(rep.verdict, Verdict::Pass, "{rep:?}");
    assert!(rep.rows.iter().all(|r| r.lhs_truncated > 0.0));

    let hot = cluster::z_coefficients(&s.graph, &s.lattice, &family(&s, 10.0, 0.1), 1).unwrap();
    let kp_hot = cluster::kp_condition_check(&s.graph, &s.lattice, &pc, &fam.polymers, 10.0, 0.1);
    let rep_hot = cluster::z_plus_bound_check(&s.graph, &s.lattice, &pc, &fam.polymers, 10.0, &hot, &kp_hot);
    assert_eq!(rep_hot.verdict, Verdict::Fail);
}

#[test]
fn gaussian_lower_bound_and_variance_on_the_square() {
    let s = System::square();
    let (x, y) = ([0.5, 0.5, 0.5], [2.0, -1.0, 0.5]);
    let obs = [ObservablePoint { i: 0, j: 1, x }, ObservablePoint { i: 0, j: 1, x: y }];
    let gram = elastic::gram_form(
        &s.graph,
        &s.cycles,
        &s.lattice,
        &common::phi(),
        &s.grid(32, 8.0),
        &common::unit_params(),
        &obs,
    )
    .unwrap();
    let sigma = gram.observable(0, 1, &x, &y).unwrap();
    let ens = Ensemble::build(&s.graph, &s.cycles, &s.lattice, &gram, &norm1(), 24.0).unwrap();
    for beta in [3.0, 4.0, 6.0, 8.0] {
        let fam = family(&s, 14.0, beta);
        let z = cluster::z_coefficients(&s.graph, &s.lattice, &fam, 3).unwrap();
        let rep = cluster::gaussian_lower_bound_check(&ens, &s.lattice, &s.cycles, &fam, &z, &sigma, &[0.5, 1.0, 2.0])
            .unwrap();
        assert_eq!(rep.verdict, Verdict::Pass, "β {beta}: {rep:?}");
        assert!(rep.quadratic > 0.0);
        assert!(rep.slack < 1e-3 * rep.quadratic, "β {beta}: slack {} vs {}", rep.slack, rep.quadratic);
        assert!(rep.variance <= rep.quadratic + rep.slack);
        for r in &rep.rows {
            assert!(r.lhs <= 1.0 + r.lhs_error);
        }
    }
}
