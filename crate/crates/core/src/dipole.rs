//! Free-space kernels of −Δ⁻¹ and ∂ᵢ∂ⱼΔ⁻² applied to compactly supported
//! charge densities, their dipole-expansion remainders, and the uniform
//! bounds of the differentiated kernels on the form function.
//!
//! All values come from direct spherical product quadrature (radial
//! Gauss–Legendre panels, Gauss–Legendre in cos θ, trapezoid in the azimuth)
//! with level doubling; the difference between the last two levels is the
//! reported error.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::burgers::{bump, FormFunction};
use crate::quad::GaussLegendre;
use crate::report::Verdict;
use crate::{dot3, norm3, sub3, Error, Result, Vec3};

/// Gaussian terms are cut off at this many standard deviations.
pub const GAUSSIAN_CUTOFF: f64 = 8.0;

const RADIAL_ORDER: usize = 16;
const MAX_LEVEL: u32 = 3;
/// Distance, in support radii, from which a term is integrated about its centre.
const SOURCE_CENTRED: f64 = 1.5;

/// Radial profile of one term of a charge density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    /// exp(−1/(1 − |y/r|²)) on |y| < r.
    Bump { radius: f64 },
    /// exp(−|y|²/(2σ²)) cut off at |y| = 8σ.
    Gaussian { sigma: f64 },
}

impl Profile {
    pub fn support_radius(&self) -> f64 {
        match *self {
            Profile::Bump { radius } => radius,
            Profile::Gaussian { sigma } => GAUSSIAN_CUTOFF * sigma,
        }
    }

    pub fn radial(&self, s: f64) -> f64 {
        match *self {
            Profile::Bump { radius } => bump(s / radius),
            Profile::Gaussian { sigma } => {
                if s >= GAUSSIAN_CUTOFF * sigma {
                    0.0
                } else {
                    (-0.5 * (s / sigma).powi(2)).exp()
                }
            }
        }
    }

    /// ∫ s^{p} profile(s) ds over the support, by composite Gauss–Legendre.
    fn radial_moment(&self, p: i32) -> f64 {
        let gl = GaussLegendre::new(RADIAL_ORDER);
        gl.integrate(0.0, self.support_radius(), 64, |s| s.powi(p) * self.radial(s))
    }
}

/// a · profile(|y − center|).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub center: Vec3,
    pub amplitude: f64,
    pub profile: Profile,
}

/// Sum of radial terms with pairwise disjoint supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeDensity {
    pub terms: Vec<Term>,
    /// Support radius about the origin.
    pub r: f64,
    /// Total charge ∫ρ.
    pub q: f64,
    /// First unsigned moment ∫|y||ρ(y)|dy and its quadrature error.
    pub m1: f64,
    pub m1_error: f64,
}

impl ChargeDensity {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::invalid("charge density needs at least one term"));
        }
        for t in &terms {
            let r = t.profile.support_radius();
            if !(r > 0.0 && r.is_finite() && t.amplitude.is_finite() && t.center.iter().all(|c| c.is_finite())) {
                return Err(Error::invalid(format!("invalid density term {t:?}")));
            }
        }
        for (i, a) in terms.iter().enumerate() {
            for b in &terms[i + 1..] {
                let gap = norm3(&sub3(&a.center, &b.center));
                if gap < a.profile.support_radius() + b.profile.support_radius() {
                    return Err(Error::invalid("density terms must have disjoint supports"));
                }
            }
        }
        let r = terms.iter().map(|t| norm3(&t.center) + t.profile.support_radius()).fold(0.0, f64::max);
        let q = terms.iter().map(|t| t.amplitude * 4.0 * PI * t.profile.radial_moment(2)).sum();
        let mut rho = ChargeDensity { terms, r, q, m1: 0.0, m1_error: 0.0 };
        let mut m1 = Adaptive { values: vec![0.0], errors: vec![0.0] };
        for t in &rho.terms {
            let region = Region::seen_from([0.0; 3], t.center, t.profile.support_radius());
            let part = adaptive(1, 1e-9, |lvl, acc: &mut [f64], abs: &mut [f64]| {
                region_rule(&region, lvl, &mut |y, w| {
                    let v = norm3(y) * (t.amplitude * t.profile.radial(norm3(&sub3(y, &t.center)))).abs();
                    acc[0] += w * v;
                    abs[0] += w * v;
                })
            })?;
            m1.values[0] += part.values[0];
            m1.errors[0] += part.errors[0];
        }
        rho.m1 = m1.values[0];
        rho.m1_error = m1.errors[0];
        Ok(rho)
    }

    /// A single bump of the given radius and amplitude centred at `center`.
    pub fn bump(center: Vec3, radius: f64, amplitude: f64) -> Result<Self> {
        Self::new(vec![Term { center, amplitude, profile: Profile::Bump { radius } }])
    }

    /// The form function as a charge density centred at the origin.
    pub fn form_function(phi: &FormFunction) -> Result<Self> {
        Self::bump([0.0; 3], phi.radius(), phi.norm_const())
    }

    pub fn eval(&self, y: &Vec3) -> f64 {
        self.terms.iter().map(|t| t.amplitude * t.profile.radial(norm3(&sub3(y, &t.center)))).sum()
    }

    /// ∫ y ρ(y) dy (each term is radial about its centre).
    pub fn dipole_moment(&self) -> Vec3 {
        let mut p = [0.0; 3];
        for t in &self.terms {
            let charge = t.amplitude * 4.0 * PI * t.profile.radial_moment(2);
            for a in 0..3 {
                p[a] += charge * t.center[a];
            }
        }
        p
    }

    /// Q by three-dimensional quadrature about the origin, as a cross-check of
    /// the radial reduction used for `q`.
    pub fn charge_by_quadrature(&self) -> Result<QuadValue> {
        let mut total = QuadValue { value: 0.0, error: 0.0 };
        for t in &self.terms {
            let region = Region::seen_from([0.0; 3], t.center, t.profile.support_radius());
            let out = adaptive(1, 1e-9, |lvl, acc: &mut [f64], abs: &mut [f64]| {
                region_rule(&region, lvl, &mut |y, w| {
                    let v = t.amplitude * t.profile.radial(norm3(&sub3(y, &t.center)));
                    acc[0] += w * v;
                    abs[0] += w * v.abs();
                })
            })?;
            total.value += out.values[0];
            total.error += out.errors[0];
        }
        Ok(total)
    }
}

/// A quadrature value with its error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadValue {
    pub value: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Copy)]
struct Level {
    panels: usize,
    polar: usize,
    azimuth: usize,
}

fn level(l: u32) -> Level {
    Level { panels: 8 << l, polar: 8 << l, azimuth: 16 << l }
}

/// Region of a spherical product rule about `center`: radii in [s0, s1] and
/// directions within the cone cos∠(ω, axis) ≥ cos_min.
#[derive(Debug, Clone, Copy)]
struct Region {
    center: Vec3,
    s0: f64,
    s1: f64,
    axis: Vec3,
    cos_min: f64,
}

impl Region {
    fn ball(center: Vec3, radius: f64) -> Self {
        Region { center, s0: 0.0, s1: radius, axis: [0.0, 0.0, 1.0], cos_min: -1.0 }
    }

    /// The part of the view from `x` that meets the ball |y − c| ≤ r.
    fn seen_from(x: Vec3, c: Vec3, r: f64) -> Self {
        let d = sub3(&c, &x);
        let dist = norm3(&d);
        if dist <= r {
            return Region::ball(x, dist + r);
        }
        let axis = [d[0] / dist, d[1] / dist, d[2] / dist];
        let sin = r / dist;
        Region { center: x, s0: dist - r, s1: dist + r, axis, cos_min: (1.0 - sin * sin).sqrt() }
    }
}

fn frame(axis: &Vec3) -> (Vec3, Vec3) {
    let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let d = dot3(&helper, axis);
    let u = [helper[0] - d * axis[0], helper[1] - d * axis[1], helper[2] - d * axis[2]];
    let nu = norm3(&u);
    let u = [u[0] / nu, u[1] / nu, u[2] / nu];
    let v = [axis[1] * u[2] - axis[2] * u[1], axis[2] * u[0] - axis[0] * u[2], axis[0] * u[1] - axis[1] * u[0]];
    (u, v)
}

/// Product rule over a region; calls f(y, weight).
fn region_rule(region: &Region, lvl: Level, f: &mut dyn FnMut(&Vec3, f64)) {
    let radial = GaussLegendre::new(RADIAL_ORDER).composite(region.s0, region.s1, lvl.panels);
    let polar = GaussLegendre::new(lvl.polar);
    let dphi = 2.0 * PI / lvl.azimuth as f64;
    let (u, v) = frame(&region.axis);
    let a = &region.axis;
    let dirs: Vec<(Vec3, f64)> = polar
        .on(region.cos_min, 1.0)
        .flat_map(|(ct, wt)| {
            let st = (1.0 - ct * ct).max(0.0).sqrt();
            (0..lvl.azimuth).map(move |k| {
                let ph = (k as f64 + 0.5) * dphi;
                let (c1, c2) = (st * ph.cos(), st * ph.sin());
                (
                    [
                        ct * a[0] + c1 * u[0] + c2 * v[0],
                        ct * a[1] + c1 * u[1] + c2 * v[1],
                        ct * a[2] + c1 * u[2] + c2 * v[2],
                    ],
                    wt * dphi,
                )
            })
        })
        .collect();
    let c = &region.center;
    for &(s, ws) in &radial {
        let w_r = ws * s * s;
        for (d, wd) in &dirs {
            let y = [c[0] + s * d[0], c[1] + s * d[1], c[2] + s * d[2]];
            f(&y, w_r * wd);
        }
    }
}

struct Adaptive {
    values: Vec<f64>,
    errors: Vec<f64>,
}

/// Evaluates successive levels until consecutive results agree to `tol`
/// relative to the integral of the absolute integrand.
fn adaptive(dim: usize, tol: f64, mut run: impl FnMut(Level, &mut [f64], &mut [f64])) -> Result<Adaptive> {
    let mut eval = |l: u32| {
        let mut acc = vec![0.0; dim];
        let mut abs = vec![0.0; dim];
        run(level(l), &mut acc, &mut abs);
        (acc, abs)
    };
    let (mut prev, _) = eval(0);
    let mut worst = f64::INFINITY;
    for l in 1..=MAX_LEVEL {
        let (cur, abs) = eval(l);
        let errors: Vec<f64> = cur.iter().zip(&prev).map(|(a, b)| (a - b).abs()).collect();
        let scale = abs.iter().fold(0.0f64, |m, v| m.max(*v)).max(f64::MIN_POSITIVE);
        worst = errors.iter().fold(0.0f64, |m, v| m.max(*v)) / scale;
        if worst <= tol {
            return Ok(Adaptive { values: cur, errors });
        }
        prev = cur;
    }
    Err(Error::Quadrature { error: worst, tol })
}

/// Symmetric index pairs (i ≤ j) and triples (i ≤ j ≤ k).
const PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
const TRIPLES: [(usize, usize, usize); 10] =
    [(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 1, 1), (0, 1, 2), (0, 2, 2), (1, 1, 1), (1, 1, 2), (1, 2, 2), (2, 2, 2)];
const KERNELS: usize = 20;

fn delta(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        0.0
    }
}

/// Kernel values at z = x − y: G, −∂ᵢG... see `KernelValues`.
fn kernels(z: &Vec3, out: &mut [f64; KERNELS]) {
    let r2 = dot3(z, z);
    let r = r2.sqrt();
    let inv = 1.0 / r;
    let inv3 = inv / r2;
    let inv5 = inv3 / r2;
    out[0] = inv / (4.0 * PI);
    for i in 0..3 {
        out[1 + i] = -z[i] * inv3 / (4.0 * PI);
    }
    for (k, &(i, j)) in PAIRS.iter().enumerate() {
        out[4 + k] = (z[i] * z[j] * inv3 - delta(i, j) * inv) / (8.0 * PI);
    }
    for (k, &(i, j, l)) in TRIPLES.iter().enumerate() {
        out[10 + k] = ((delta(i, l) * z[j] + delta(j, l) * z[i] + delta(i, j) * z[l]) * inv3
            - 3.0 * z[i] * z[j] * z[l] * inv5)
            / (8.0 * PI);
    }
}

/// Kernel convolutions of a density at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelValues {
    pub x: Vec3,
    /// (−Δ⁻¹ρ)(x) = (G∗ρ)(x), G(z) = 1/(4π|z|).
    pub coulomb: f64,
    /// ∂ᵢ(−Δ⁻¹ρ)(x).
    pub coulomb_grad: Vec3,
    /// ∂ᵢ∂ⱼΔ⁻²ρ(x).
    pub biharmonic: [[f64; 3]; 3],
    /// ∂ₖ∂ᵢ∂ⱼΔ⁻²ρ(x), indexed [i][j][k].
    pub biharmonic_grad: [[[f64; 3]; 3]; 3],
    /// Quadrature error estimates for the four groups above.
    pub errors: [f64; 4],
}

fn unpack(x: Vec3, v: &[f64], e: &[f64]) -> KernelValues {
    let mut biharmonic = [[0.0; 3]; 3];
    for (k, &(i, j)) in PAIRS.iter().enumerate() {
        biharmonic[i][j] = v[4 + k];
        biharmonic[j][i] = v[4 + k];
    }
    let mut biharmonic_grad = [[[0.0; 3]; 3]; 3];
    for (k, &(i, j, l)) in TRIPLES.iter().enumerate() {
        for (a, b, c) in [(i, j, l), (i, l, j), (j, i, l), (j, l, i), (l, i, j), (l, j, i)] {
            biharmonic_grad[a][b][c] = v[10 + k];
        }
    }
    let max = |r: std::ops::Range<usize>| e[r].iter().fold(0.0f64, |m, v| m.max(*v));
    KernelValues {
        x,
        coulomb: v[0],
        coulomb_grad: [v[1], v[2], v[3]],
        biharmonic,
        biharmonic_grad,
        errors: [max(0..1), max(1..4), max(4..10), max(10..20)],
    }
}

/// Default relative quadrature tolerance.
pub const QUAD_TOL: f64 = 1e-10;

/// All kernel convolutions of ρ at x.
///
/// A term is integrated about its own centre when x is well outside its
/// support (smooth kernel), and otherwise about x over the cone of directions
/// that meet the support, where the s² Jacobian cancels the kernel singularity.
pub fn kernel_values(rho: &ChargeDensity, x: &Vec3, tol: f64) -> Result<KernelValues> {
    let mut values = [0.0; KERNELS];
    let mut errors = [0.0; KERNELS];
    for t in &rho.terms {
        let rt = t.profile.support_radius();
        let dist = norm3(&sub3(x, &t.center));
        let region =
            if dist >= SOURCE_CENTRED * rt { Region::ball(t.center, rt) } else { Region::seen_from(*x, t.center, rt) };
        let out = adaptive(KERNELS, tol, |lvl, acc: &mut [f64], abs: &mut [f64]| {
            let mut k = [0.0; KERNELS];
            region_rule(&region, lvl, &mut |y, w| {
                let dens = t.amplitude * t.profile.radial(norm3(&sub3(y, &t.center)));
                if dens == 0.0 {
                    return;
                }
                kernels(&sub3(x, y), &mut k);
                for c in 0..KERNELS {
                    acc[c] += w * dens * k[c];
                    abs[c] += (w * dens * k[c]).abs();
                }
            })
        })?;
        for c in 0..KERNELS {
            values[c] += out.values[c];
            errors[c] += out.errors[c];
        }
    }
    Ok(unpack(*x, &values, &errors))
}

/// (−Δ⁻¹ρ)(x) by quadrature.
pub fn coulomb_eval(rho: &ChargeDensity, x: &Vec3) -> Result<QuadValue> {
    let k = kernel_values(rho, x, QUAD_TOL)?;
    Ok(QuadValue { value: k.coulomb, error: k.errors[0] })
}

/// (−Δ⁻¹ρ)(0) = ∫ ρ(r) r dr for a density radial about the origin.
pub fn coulomb_at_center_radial(profile: &Profile, amplitude: f64) -> f64 {
    amplitude * profile.radial_moment(1)
}

/// `n` points with |x| log-spaced in [2R, 20R] cycling through the 26
/// lattice directions (tilted slightly so no coordinate vanishes identically).
pub fn far_samples(r: f64, n: usize) -> Vec<Vec3> {
    let mut dirs = Vec::with_capacity(26);
    for a in -1i32..=1 {
        for b in -1i32..=1 {
            for c in -1i32..=1 {
                if (a, b, c) != (0, 0, 0) {
                    let v = [a as f64 + 0.11, b as f64 - 0.07, c as f64 + 0.05];
                    let nv = norm3(&v);
                    dirs.push([v[0] / nv, v[1] / nv, v[2] / nv]);
                }
            }
        }
    }
    (0..n)
        .map(|k| {
            let frac = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
            let radius = 2.0 * r * 10f64.powf(frac);
            let d = dirs[k % dirs.len()];
            [radius * d[0], radius * d[1], radius * d[2]]
        })
        .collect()
}

fn check_far(rho: &ChargeDensity, samples: &[Vec3]) -> Result<()> {
    for x in samples {
        let n = norm3(x);
        // Closed inequality |x| ≥ 2R, with rounding slack on the boundary.
        if n < 2.0 * rho.r * (1.0 - 1e-12) {
            return Err(Error::SampleInside { norm: n, radius: 2.0 * rho.r });
        }
    }
    Ok(())
}

/// One sample of a remainder bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderRow {
    pub x: Vec3,
    pub norm: f64,
    pub remainder: f64,
    pub bound: f64,
    pub quad_error: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderReport {
    pub name: String,
    pub rows: Vec<RemainderRow>,
    /// max remainder/bound over the samples.
    pub max_ratio: f64,
    pub verdict: Verdict,
}

impl RemainderReport {
    fn new(name: &str, rows: Vec<RemainderRow>) -> Self {
        RemainderReport {
            name: name.to_string(),
            max_ratio: rows.iter().map(|r| r.remainder / r.bound).fold(0.0, f64::max),
            verdict: Verdict::from_bool(rows.iter().all(|r| r.holds)),
            rows,
        }
    }
}

fn row(x: &Vec3, remainder: f64, bound: f64, quad_error: f64) -> RemainderRow {
    RemainderRow { x: *x, norm: norm3(x), remainder, bound, quad_error, holds: remainder <= bound + quad_error }
}

fn far_values(rho: &ChargeDensity, samples: &[Vec3]) -> Result<Vec<KernelValues>> {
    check_far(rho, samples)?;
    samples.par_iter().map(|x| kernel_values(rho, x, QUAD_TOL)).collect()
}

/// |r₁(x)| ≤ M₁/(π|x|²) for r₁ = −Δ⁻¹ρ − Q/(4π|x|), and optionally
/// |∂ᵢr₁(x)| ≤ 8M₁/(π|x|³).
pub fn dipole_remainder_check(
    rho: &ChargeDensity,
    samples: &[Vec3],
    with_derivative: bool,
) -> Result<Vec<RemainderReport>> {
    let vals = far_values(rho, samples)?;
    let m1 = rho.m1 + rho.m1_error;
    let mut value_rows = Vec::new();
    let mut grad_rows = Vec::new();
    for k in &vals {
        let n = norm3(&k.x);
        let r1 = (k.coulomb - rho.q / (4.0 * PI * n)).abs();
        value_rows.push(row(&k.x, r1, m1 / (PI * n * n), k.errors[0]));
        let dr1 =
            (0..3).map(|i| (k.coulomb_grad[i] + rho.q * k.x[i] / (4.0 * PI * n.powi(3))).abs()).fold(0.0, f64::max);
        grad_rows.push(row(&k.x, dr1, 8.0 * m1 / (PI * n.powi(3)), k.errors[1]));
    }
    let mut out = vec![RemainderReport::new("coulomb", value_rows)];
    if with_derivative {
        out.push(RemainderReport::new("coulomb_gradient", grad_rows));
    }
    Ok(out)
}

/// Leading far-field term (Q/8π)(xᵢxⱼ/|x|³ − δᵢⱼ/|x|).
pub fn biharmonic_leading(q: f64, x: &Vec3) -> [[f64; 3]; 3] {
    let n = norm3(x);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = q / (8.0 * PI) * (x[i] * x[j] / n.powi(3) - delta(i, j) / n);
        }
    }
    out
}

/// Leading far-field term of ∂ₖ∂ᵢ∂ⱼΔ⁻²ρ, indexed [i][j][k].
pub fn biharmonic_grad_leading(q: f64, x: &Vec3) -> [[[f64; 3]; 3]; 3] {
    let n = norm3(x);
    let mut out = [[[0.0; 3]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j][k] = q / (8.0 * PI)
                    * ((delta(i, k) * x[j] + delta(j, k) * x[i] + delta(i, j) * x[k]) / n.powi(3)
                        - 3.0 * x[i] * x[j] * x[k] / n.powi(5));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiharmonicReport {
    pub remainders: Vec<RemainderReport>,
    /// max over samples of |Σᵢ∂ᵢ∂ᵢΔ⁻²ρ + (−Δ⁻¹ρ)| and the matching quadrature error.
    pub trace_defect: f64,
    pub trace_error: f64,
    pub verdict: Verdict,
}

/// |r₁′| ≤ 3M₁/(π|x|²) and |∂ₖr₁′| ≤ 36M₁/(π|x|³) for the ∂ᵢ∂ⱼΔ⁻² kernel, plus the
/// trace identity Σᵢ∂ᵢ∂ᵢΔ⁻²ρ = Δ⁻¹ρ.
pub fn biharmonic_kernel_check(rho: &ChargeDensity, samples: &[Vec3]) -> Result<BiharmonicReport> {
    let vals = far_values(rho, samples)?;
    let m1 = rho.m1 + rho.m1_error;
    let mut value_rows = Vec::new();
    let mut grad_rows = Vec::new();
    let (mut trace_defect, mut trace_error) = (0.0f64, 0.0f64);
    for k in &vals {
        let n = norm3(&k.x);
        let lead = biharmonic_leading(rho.q, &k.x);
        let lead_grad = biharmonic_grad_leading(rho.q, &k.x);
        let mut r = 0.0f64;
        let mut dr = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                r = r.max((k.biharmonic[i][j] - lead[i][j]).abs());
                for l in 0..3 {
                    dr = dr.max((k.biharmonic_grad[i][j][l] - lead_grad[i][j][l]).abs());
                }
            }
        }
        value_rows.push(row(&k.x, r, 3.0 * m1 / (PI * n * n), k.errors[2]));
        grad_rows.push(row(&k.x, dr, 36.0 * m1 / (PI * n.powi(3)), k.errors[3]));
        let trace: f64 = (0..3).map(|i| k.biharmonic[i][i]).sum();
        trace_defect = trace_defect.max((trace + k.coulomb).abs());
        trace_error = trace_error.max(3.0 * k.errors[2] + k.errors[0]);
    }
    let remainders =
        vec![RemainderReport::new("biharmonic", value_rows), RemainderReport::new("biharmonic_gradient", grad_rows)];
    let trace_ok = trace_defect <= 10.0 * trace_error + 1e-13 * rho.q.abs().max(rho.m1);
    let verdict = Verdict::all(remainders.iter().map(|r| r.verdict)).combine(Verdict::from_bool(trace_ok));
    Ok(BiharmonicReport { remainders, trace_defect, trace_error, verdict })
}

/// j_n(u)/uⁿ = Σ_k (−u²/2)^k / (k! (2n+2k+1)!!) for small u.
fn sph_series(n: i32, u: f64) -> f64 {
    let mut odd = 1.0;
    for m in 1..=n {
        odd *= (2 * m + 1) as f64;
    }
    let x = -0.5 * u * u;
    let mut term = 1.0 / odd;
    let mut sum = term;
    for k in 1..20 {
        term *= x / (k as f64 * (2 * n + 2 * k + 1) as f64);
        sum += term;
    }
    sum
}

fn sph_j1_over_u(u: f64) -> f64 {
    if u < 1.0 {
        sph_series(1, u)
    } else {
        (u.sin() / u - u.cos()) / (u * u)
    }
}

fn sph_j2(u: f64) -> f64 {
    if u < 1.0 {
        u * u * sph_series(2, u)
    } else {
        (3.0 / (u * u * u) - 1.0 / u) * u.sin() - 3.0 * u.cos() / (u * u)
    }
}

/// ∂ᵢ∂ⱼΔ⁻²f(x) for f(y) = a·exp(−|y|²/(2σ²)) from the multiplier −kᵢkⱼ/|k|⁴.
///
/// The angular integral of k̂ᵢk̂ⱼ e^{ik·x} is 4π(δᵢⱼ j₁(u)/u − x̂ᵢx̂ⱼ j₂(u)),
/// u = |k||x|, leaving a one-dimensional integral against f̂.
pub fn gaussian_biharmonic_spectral(amplitude: f64, sigma: f64, x: &Vec3) -> [[f64; 3]; 3] {
    let r = norm3(x);
    let kmax = 12.0 / sigma;
    let panels = 64usize.max((kmax * r / PI).ceil() as usize * 4);
    let gl = GaussLegendre::new(RADIAL_ORDER);
    let fhat = |k: f64| amplitude * (2.0 * PI).powf(1.5) * sigma.powi(3) * (-0.5 * (k * sigma).powi(2)).exp();
    let a = gl.integrate(0.0, kmax, panels, |k| fhat(k) * sph_j1_over_u(k * r));
    let b = gl.integrate(0.0, kmax, panels, |k| fhat(k) * sph_j2(k * r));
    let pref = -4.0 * PI / (2.0 * PI).powi(3);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let xx = if r > 0.0 { x[i] * x[j] / (r * r) } else { 0.0 };
            out[i][j] = pref * (delta(i, j) * a - xx * b);
        }
    }
    out
}

/// Kernel quadrature against the spectral route on a Gaussian density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralCrossCheck {
    pub points: Vec<Vec3>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
}

pub fn biharmonic_spectral_check(sigma: f64, points: &[Vec3], tolerance: f64) -> Result<SpectralCrossCheck> {
    let rho =
        ChargeDensity::new(vec![Term { center: [0.0; 3], amplitude: 1.0, profile: Profile::Gaussian { sigma } }])?;
    let errs: Vec<f64> = points
        .par_iter()
        .map(|x| {
            let k = kernel_values(&rho, x, 1e-11)?;
            let s = gaussian_biharmonic_spectral(1.0, sigma, x);
            let scale = s.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            let diff = (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| (k.biharmonic[i][j] - s[i][j]).abs())
                .fold(0.0, f64::max);
            Ok(diff / scale)
        })
        .collect::<Result<_>>()?;
    let max_rel_error = errs.into_iter().fold(0.0, f64::max);
    Ok(SpectralCrossCheck {
        points: points.to_vec(),
        max_rel_error,
        tolerance,
        verdict: Verdict::from_bool(max_rel_error <= tolerance),
    })
}

/// Sup norms of ∂ₗΔ⁻¹φ and ∂ₗ∂ᵢ∂ⱼΔ⁻²φ over an evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBounds {
    pub c18: f64,
    pub c19: f64,
    /// sup_r m(r)/(4πr²), the exact sup of |∇Δ⁻¹φ| for radial φ (m the enclosed mass).
    pub c18_radial: f64,
    pub grid_points: usize,
    pub points: usize,
    pub max_quad_error: f64,
}

/// Relative quadrature tolerance for the sup-norm evaluations.
const UNIFORM_TOL: f64 = 1e-6;

/// Evaluates on the points of an n-per-axis grid over [0, 4r₀]³ with
/// x ≥ y ≥ z, plus 4n points on each of three symmetry rays; for radial φ the cubic symmetries map this wedge onto the
/// whole cube and permute the derivative components.
pub fn uniform_bounds_check(phi: &FormFunction, grid_points: usize) -> Result<UniformBounds> {
    if grid_points < 2 {
        return Err(Error::invalid("uniform bound grid needs at least two points per axis"));
    }
    let rho = ChargeDensity::form_function(phi)?;
    let r0 = phi.radius();
    let h = 4.0 * r0 / (grid_points - 1) as f64;
    let mut pts = Vec::new();
    for a in 0..grid_points {
        for b in 0..=a {
            for c in 0..=b {
                pts.push([a as f64 * h, b as f64 * h, c as f64 * h]);
            }
        }
    }
    // Dense samples along the axis, face and body diagonals resolve the
    // radial profile, where the sup of the gradient lies.
    let ray_points = 4 * grid_points;
    let s3 = 1.0 / 3f64.sqrt();
    let s2 = 1.0 / 2f64.sqrt();
    for dir in [[1.0, 0.0, 0.0], [s2, s2, 0.0], [s3, s3, s3]] {
        for k in 1..=ray_points {
            let t = 4.0 * r0 * k as f64 / ray_points as f64;
            pts.push([t * dir[0], t * dir[1], t * dir[2]]);
        }
    }
    // The centre is a removable point of both kernels' convolutions; skip it.
    pts.retain(|p| norm3(p) > 0.0);
    let vals: Vec<KernelValues> = pts.par_iter().map(|x| kernel_values(&rho, x, UNIFORM_TOL)).collect::<Result<_>>()?;
    let mut c18 = 0.0f64;
    let mut c19 = 0.0f64;
    let mut err = 0.0f64;
    for k in &vals {
        c18 = k.coulomb_grad.iter().fold(c18, |m, v| m.max(v.abs()));
        c19 = k.biharmonic_grad.iter().flatten().flatten().fold(c19, |m, v| m.max(v.abs()));
        err = err.max(k.errors[1]).max(k.errors[3]);
    }
    Ok(UniformBounds {
        c18,
        c19,
        c18_radial: radial_field_sup(phi),
        grid_points,
        points: pts.len(),
        max_quad_error: err,
    })
}

/// sup_r m(r)/(4πr²) on a fine radial grid.
pub fn radial_field_sup(phi: &FormFunction) -> f64 {
    let gl = GaussLegendre::new(RADIAL_ORDER);
    let r0 = phi.radius();
    let steps = 4000;
    let dr = r0 / steps as f64;
    let mut mass = 0.0;
    let mut best = 0.0f64;
    for k in 0..steps {
        let a = k as f64 * dr;
        mass += 4.0 * PI * gl.integrate(a, a + dr, 1, |s| phi.radial(s) * s * s);
        let r = a + dr;
        best = best.max(mass / (4.0 * PI * r * r));
    }
    best
}

/// |(k∗J)(x)| for a scalar line measure J = Σ w_e·(segment e), where k is the
/// ∂ₗΔ⁻¹φ kernel; returns (max over l of |value|, ‖J‖₁).
pub fn line_measure_gradient(phi: &FormFunction, segments: &[(Vec3, Vec3, f64)], x: &Vec3) -> Result<(f64, f64)> {
    let rho = ChargeDensity::form_function(phi)?;
    let gl = GaussLegendre::new(RADIAL_ORDER);
    let mut total = [0.0; 3];
    let mut mass = 0.0;
    for (a, b, w) in segments {
        let d = sub3(b, a);
        let len = norm3(&d);
        mass += w.abs() * len;
        for (t, wt) in gl.composite(0.0, 1.0, 8) {
            let p = [x[0] - a[0] - t * d[0], x[1] - a[1] - t * d[1], x[2] - a[2] - t * d[2]];
            let k = kernel_values(&rho, &p, UNIFORM_TOL)?;
            for l in 0..3 {
                total[l] += wt * len * w * k.coulomb_grad[l];
            }
        }
    }
    Ok((total.iter().fold(0.0f64, |m, v| m.max(v.abs())), mass))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_trace_is_the_coulomb_kernel() {
        let mut k = [0.0; KERNELS];
        kernels(&[0.3, -1.2, 0.7], &mut k);
        let trace = k[4] + k[7] + k[9];
        assert!((trace + k[0]).abs() < 1e-15);
    }

    #[test]
    fn spherical_bessel_branches_agree() {
        for u in [0.99999, 1.0] {
            let big = |u: f64| (u.sin() / u - u.cos()) / (u * u);
            assert!((sph_j1_over_u(u) - big(u)).abs() < 1e-12);
            let j2 = (3.0 / (u * u * u) - 1.0 / u) * u.sin() - 3.0 * u.cos() / (u * u);
            assert!((sph_j2(u) - j2).abs() < 1e-12);
        }
    }

    #[test]
    fn overlapping_terms_are_rejected() {
        let t = |c: Vec3| Term { center: c, amplitude: 1.0, profile: Profile::Bump { radius: 1.0 } };
        assert!(ChargeDensity::new(vec![t([0.0; 3]), t([1.5, 0.0, 0.0])]).is_err());
        assert!(ChargeDensity::new(vec![t([0.0; 3]), t([2.0, 0.0, 0.0])]).is_ok());
    }
}
