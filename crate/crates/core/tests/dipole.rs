use std::f64::consts::PI;

use dislocgas_core::burgers::FormFunction;
use dislocgas_core::dipole::{self, ChargeDensity, Profile, Term};
use dislocgas_core::quad::GaussLegendre;
use dislocgas_core::report::Verdict;
use dislocgas_core::{Error, Vec3};
use proptest::prelude::*;

fn norm(x: &Vec3) -> f64 {
    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// ∫₀¹ sᵖ exp(−1/(1 − s²)) ds by a fine composite rule, independent of the crate's quadrature.
fn bump_moment(p: i32) -> f64 {
    let n = 200_000;
    let h = 1.0 / n as f64;
    (0..n)
        .map(|k| {
            let s = (k as f64 + 0.5) * h;
            h * s.powi(p) * (-1.0 / (1.0 - s * s)).exp()
        })
        .sum()
}

fn centred() -> ChargeDensity {
    ChargeDensity::bump([0.0; 3], 1.0, 1.0).unwrap()
}

fn shifted() -> ChargeDensity {
    ChargeDensity::bump([0.4, 0.2, -0.1], 1.0, 1.0).unwrap()
}

/// Two opposite bumps: zero charge, nonzero dipole moment.
fn odd_pair() -> ChargeDensity {
    let t = |x: f64, a: f64| Term { center: [x, 0.0, 0.0], amplitude: a, profile: Profile::Bump { radius: 0.5 } };
    ChargeDensity::new(vec![t(0.5, 1.0), t(-0.5, -1.0)]).unwrap()
}

#[test]
fn charge_and_first_moment() {
    let c = centred();
    let q = 4.0 * PI * bump_moment(2);
    assert!((c.q - q).abs() <= 1e-9 * q);
    let quad = c.charge_by_quadrature().unwrap();
    assert!((quad.value - c.q).abs() <= 1e-8 * c.q);
    let m1 = 4.0 * PI * bump_moment(3);
    assert!((c.m1 - m1).abs() <= 1e-8 * m1, "{} vs {m1}", c.m1);
    assert!(c.m1_error <= 1e-8 * c.m1);
    assert_eq!(c.r, 1.0);

    let s = shifted();
    assert!((s.q - c.q).abs() <= 1e-14);
    assert!(s.m1 > c.m1);
    assert!((s.r - (1.0 + norm(&[0.4, 0.2, -0.1]))).abs() < 1e-15);
    let p = s.dipole_moment();
    assert!((p[0] - 0.4 * s.q).abs() < 1e-14);

    let odd = odd_pair();
    assert!(odd.q.abs() < 1e-15);
    assert!(odd.dipole_moment()[0] > 0.0);
}

#[test]
fn newton_theorem_for_radial_densities() {
    let c = centred();
    let mut samples = dipole::far_samples(c.r, 50);
    samples.push([1.2, 0.0, 0.0]);
    samples.push([0.0, -1.01, 0.0]);
    for x in &samples {
        let v = dipole::coulomb_eval(&c, x).unwrap();
        let exact = c.q / (4.0 * PI * norm(x));
        assert!((v.value - exact).abs() <= 1e-8 * exact, "{x:?}: {} vs {exact}", v.value);
    }
}

#[test]
fn centre_value_matches_radial_reduction() {
    let c = centred();
    let v = dipole::coulomb_eval(&c, &[0.0; 3]).unwrap();
    // (G∗ρ)(0) = ∫ρ(y)/(4π|y|) dy = ∫₀¹ s ρ(s) ds.
    let exact = bump_moment(1);
    assert!((v.value - exact).abs() <= 1e-8 * exact);
    let reduced = dipole::coulomb_at_center_radial(&Profile::Bump { radius: 1.0 }, 1.0);
    assert!((reduced - exact).abs() <= 1e-9 * exact);
}

#[test]
fn neutral_density_decays_faster_than_coulomb() {
    let odd = odd_pair();
    let near = [2.0 * odd.r, 0.3, 0.0];
    let far = [20.0 * odd.r, 3.0, 0.0];
    let vn = dipole::coulomb_eval(&odd, &near).unwrap().value * norm(&near);
    let vf = dipole::coulomb_eval(&odd, &far).unwrap().value * norm(&far);
    assert!(vf.abs() < 0.2 * vn.abs(), "{vn} {vf}");
    let kn = dipole::kernel_values(&odd, &near, 1e-10).unwrap();
    let kf = dipole::kernel_values(&odd, &far, 1e-10).unwrap();
    let amp = |k: &dipole::KernelValues, x: &Vec3| {
        k.biharmonic.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())) * norm(x).powi(2)
    };
    assert!(amp(&kf, &far) <= 1.5 * amp(&kn, &near));
}

#[test]
fn remainder_bounds_hold_for_centred_and_shifted_bumps() {
    for (rho, name) in [(centred(), "centred"), (shifted(), "shifted")] {
        let samples = dipole::far_samples(rho.r, 50);
        assert!((norm(&samples[0]) - 2.0 * rho.r).abs() < 1e-12);
        let reps = dipole::dipole_remainder_check(&rho, &samples, true).unwrap();
        assert_eq!(reps.len(), 2);
        let bih = dipole::biharmonic_kernel_check(&rho, &samples).unwrap();
        for r in reps.iter().chain(&bih.remainders) {
            assert_eq!(r.rows.len(), 50);
            assert_eq!(r.verdict, Verdict::Pass, "{name} {}: max ratio {}", r.name, r.max_ratio);
            assert!(r.max_ratio < 1.0);
        }
        assert_eq!(bih.verdict, Verdict::Pass, "{name}: trace {}", bih.trace_defect);
        if name == "centred" {
            assert!(reps[0].max_ratio < 1e-9, "Newton: r₁ vanishes outside the support");
            assert!(reps[1].max_ratio < 1e-9);
        } else {
            assert!(reps[0].max_ratio > 1e-3, "shifted bump has a genuine dipole remainder");
        }
    }
}

#[test]
fn radial_biharmonic_remainder_is_the_second_moment_term() {
    // Δ⁻²ρ = −(1/8π)∫|x − y|ρ(y)dy and the sphere mean of |x − y| is |x| + s²/(3|x|),
    // so outside a radial density r₁′ = −(M₂/24π) ∂ᵢ∂ⱼ(1/|x|).
    let c = centred();
    let m2 = 4.0 * PI * bump_moment(4);
    for x in dipole::far_samples(c.r, 12) {
        let k = dipole::kernel_values(&c, &x, 1e-11).unwrap();
        let lead = dipole::biharmonic_leading(c.q, &x);
        let n = norm(&x);
        for i in 0..3 {
            for j in 0..3 {
                let d = if i == j { 1.0 } else { 0.0 };
                let exact = lead[i][j] - m2 / (24.0 * PI) * (3.0 * x[i] * x[j] / n.powi(5) - d / n.powi(3));
                let scale = c.q / (8.0 * PI * n);
                assert!((k.biharmonic[i][j] - exact).abs() <= 1e-9 * scale, "{x:?} ({i},{j})");
            }
        }
    }
}

#[test]
fn samples_inside_the_excluded_ball_are_rejected() {
    let c = centred();
    let err = dipole::dipole_remainder_check(&c, &[[1.9, 0.0, 0.0]], false).unwrap_err();
    assert!(matches!(err, Error::SampleInside { .. }));
    assert!(dipole::biharmonic_kernel_check(&c, &[[0.0, 0.0, 1.0]]).is_err());
    let boundary = dipole::dipole_remainder_check(&c, &[[0.0, 2.0, 0.0]], false).unwrap();
    assert_eq!(boundary[0].verdict, Verdict::Pass);
}

#[test]
fn kernel_quadrature_matches_the_fourier_multiplier() {
    let points = [[0.0, 0.0, 0.0], [0.3, 0.1, -0.2], [1.0, 0.5, 0.2], [2.0, -1.0, 1.0], [0.0, 0.0, 3.5]];
    let rep = dipole::biharmonic_spectral_check(0.5, &points, 1e-4).unwrap();
    assert_eq!(rep.verdict, Verdict::Pass);
    assert!(rep.max_rel_error < 1e-8, "{}", rep.max_rel_error);
}

#[test]
fn spectral_route_reproduces_the_trace_identity() {
    // Σᵢ∂ᵢ∂ᵢΔ⁻²f = Δ⁻¹f; for a Gaussian, Δ⁻¹f(0) = −a σ².
    let s = dipole::gaussian_biharmonic_spectral(1.0, 0.5, &[0.0; 3]);
    let trace = s[0][0] + s[1][1] + s[2][2];
    assert!((trace + 0.25).abs() < 1e-12, "{trace}");
}

#[test]
fn uniform_bounds_are_finite_stable_and_scale_with_the_radius() {
    let phi = FormFunction::new(0.2).unwrap();
    let coarse = dipole::uniform_bounds_check(&phi, 5).unwrap();
    let fine = dipole::uniform_bounds_check(&phi, 9).unwrap();
    for u in [&coarse, &fine] {
        assert!(u.c18.is_finite() && u.c18 > 0.0);
        assert!(u.c19.is_finite() && u.c19 > 0.0);
        assert!(u.c18 <= u.c18_radial * (1.0 + 1e-6));
    }
    assert!((fine.c18 - fine.c18_radial).abs() <= 0.01 * fine.c18_radial);
    assert!((fine.c18 - coarse.c18).abs() <= 0.05 * fine.c18);
    assert!((fine.c19 - coarse.c19).abs() <= 0.05 * fine.c19);

    // Both kernels are homogeneous of degree −2, so halving r₀ at unit mass scales the sups by 4.
    let half = dipole::uniform_bounds_check(&FormFunction::new(0.1).unwrap(), 5).unwrap();
    assert!((half.c18 / coarse.c18 - 4.0).abs() <= 0.8);
    assert!((half.c19 / coarse.c19 - 4.0).abs() <= 0.8);
    assert!((half.c18_radial / coarse.c18_radial - 4.0).abs() <= 1e-6);
}

#[test]
fn line_measure_gradient_is_bounded_by_its_mass() {
    let phi = FormFunction::new(0.2).unwrap();
    let c18 = dipole::radial_field_sup(&phi);
    let segments = [([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], 1.0), ([1.0, 0.0, 0.0], [1.0, 1.0, 0.0], -2.0)];
    for x in [[0.5, 0.05, 0.0], [1.0, 0.1, 0.02], [0.9, 0.5, -0.1], [3.0, 2.0, 1.0]] {
        let (value, mass) = dipole::line_measure_gradient(&phi, &segments, &x).unwrap();
        assert!((mass - 3.0).abs() < 1e-15);
        assert!(value <= c18 * mass, "{x:?}: {value} > {}", c18 * mass);
        assert!(value > 0.0);
    }
}

#[test]
fn form_function_density_has_unit_charge() {
    let phi = FormFunction::new(0.2).unwrap();
    let rho = ChargeDensity::form_function(&phi).unwrap();
    assert!((rho.q - 1.0).abs() < 1e-10);
    let gl = GaussLegendre::new(16);
    let m1 = 4.0 * PI * gl.integrate(0.0, 0.2, 64, |s| phi.radial(s) * s * s * s);
    assert!((rho.m1 - m1).abs() <= 1e-8 * m1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn coulomb_is_translation_covariant(c in prop::array::uniform3(-0.5f64..0.5), d in prop::array::uniform3(-1.0f64..1.0), scale in 2.0f64..6.0) {
        let nd = norm(&d).max(1e-3);
        let x = [c[0] + scale * d[0] / nd, c[1] + scale * d[1] / nd, c[2] + scale * d[2] / nd];
        let moved = ChargeDensity::bump(c, 1.0, 1.0).unwrap();
        let a = dipole::coulomb_eval(&moved, &x).unwrap().value;
        let rel = [x[0] - c[0], x[1] - c[1], x[2] - c[2]];
        let b = dipole::coulomb_eval(&centred(), &rel).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-9 * b.abs());
    }

    #[test]
    fn shifted_remainders_stay_within_bounds(c in prop::array::uniform3(-0.6f64..0.6), k in 0usize..50) {
        let rho = ChargeDensity::bump(c, 0.8, 1.0).unwrap();
        let x = dipole::far_samples(rho.r, 50)[k];
        for r in dipole::dipole_remainder_check(&rho, &[x], true).unwrap() {
            prop_assert_eq!(r.verdict, Verdict::Pass);
        }
        let bih = dipole::biharmonic_kernel_check(&rho, &[x]).unwrap();
        prop_assert_eq!(bih.verdict, Verdict::Pass);
    }
}
