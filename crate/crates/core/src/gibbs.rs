//! The Gibbs measure on Kirchhoff currents: dislocation energies, exact
//! enumeration, Metropolis loop updates and the Sine-Gordon Gaussian field.

use std::collections::{BTreeMap, HashMap};

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::burgers::{self, CurrentMeasure, FormFunction};
use crate::currents::{self, Current, KirchhoffSearch, DEFAULT_BUDGET};
use crate::elastic::{GramForm, ObservableFunctional};
use crate::lattice::{BurgersLattice, CycleBasis, MesoGraph};
use crate::report::Verdict;
use crate::{norm3, sub3, Error, Result};

/// Local dislocation energy H_disl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DislocationEnergy {
    /// H = c ‖I‖₁.
    Norm1 { c: f64 },
    /// H = c₁ ∫ |b(I)(x)|₁ dx, by a Riemann sum at `spacing`.
    DensityL1 { c1: f64, radius: f64, spacing: f64 },
}

impl DislocationEnergy {
    pub fn norm1(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::invalid(format!("H_disl constant must be positive (got {c})")));
        }
        Ok(DislocationEnergy::Norm1 { c })
    }

    /// Density kind with the default quadrature spacing r₀/4.
    pub fn density_l1(c1: f64, radius: f64) -> Result<Self> {
        if !(c1 > 0.0 && c1.is_finite()) || !(radius > 0.0) {
            return Err(Error::invalid(format!("density H_disl needs c1 > 0 and r0 > 0 (got {c1}, {radius})")));
        }
        Ok(DislocationEnergy::DensityL1 { c1, radius, spacing: radius / 4.0 })
    }

    pub fn energy(&self, g: &MesoGraph, lattice: &BurgersLattice, i: &Current) -> Result<f64> {
        match self {
            DislocationEnergy::Norm1 { c } => Ok(c * i.norm1(lattice)),
            DislocationEnergy::DensityL1 { c1, radius, spacing } => {
                let phi = FormFunction::new(*radius)?;
                let measure = CurrentMeasure::new(g, lattice, i);
                Ok(c1 * burgers::density_l1(&measure, &phi, *spacing))
            }
        }
    }

    /// A constant c with H(I) ≥ c ‖I‖₁ for every current on `g`.
    ///
    /// For the density kind: away from the r₀/sin α neighbourhoods of its
    /// endpoints (α the smallest angle to an adjacent edge), an edge's smoothed
    /// segment is the only contribution, and the r₀-balls centred on the
    /// middle part of the edge lie inside that region. This needs vertex-disjoint
    /// edges at distance ≥ 2r₀; otherwise no positive constant is certified.
    pub fn lower_bound(&self, g: &MesoGraph, lattice: &BurgersLattice) -> f64 {
        match self {
            DislocationEnergy::Norm1 { c } => *c,
            DislocationEnergy::DensityL1 { c1, radius, .. } => {
                let _ = lattice;
                density_lower_fraction(g, *radius).map_or(0.0, |f| 2.0 * c1 * f)
            }
        }
    }

    /// Whether two currents with vertex-disjoint supports add their energies.
    pub fn is_local(&self, g: &MesoGraph) -> bool {
        match self {
            DislocationEnergy::Norm1 { .. } => true,
            DislocationEnergy::DensityL1 { radius, .. } => min_disjoint_distance(g) >= 2.0 * radius,
        }
    }
}

fn min_disjoint_distance(g: &MesoGraph) -> f64 {
    let mut best = f64::INFINITY;
    let edges = g.edges();
    for a in 0..edges.len() {
        for b in a + 1..edges.len() {
            let (ea, eb) = (&edges[a], &edges[b]);
            if ea.tail == eb.tail || ea.tail == eb.head || ea.head == eb.tail || ea.head == eb.head {
                continue;
            }
            best = best.min(segment_distance(
                &g.vertex(ea.tail),
                &g.vertex(ea.head),
                &g.vertex(eb.tail),
                &g.vertex(eb.head),
            ));
        }
    }
    best
}

/// Distance between two segments by dense sampling of one and exact projection onto the other.
fn segment_distance(p0: &crate::Vec3, p1: &crate::Vec3, q0: &crate::Vec3, q1: &crate::Vec3) -> f64 {
    let d = sub3(q1, q0);
    let dd = crate::dot3(&d, &d);
    let to_q = |x: &crate::Vec3| {
        let t = (crate::dot3(&sub3(x, q0), &d) / dd).clamp(0.0, 1.0);
        norm3(&sub3(x, &[q0[0] + t * d[0], q0[1] + t * d[1], q0[2] + t * d[2]]))
    };
    // The distance to a segment is convex along the other segment: ternary search.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let at = |t: f64| to_q(&[p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1]), p0[2] + t * (p1[2] - p0[2])]);
    for _ in 0..100 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if at(m1) <= at(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    at(0.5 * (lo + hi))
}

/// Certified c/(2c₁) for the density kind, or None when no positive constant is certified.
fn density_lower_fraction(g: &MesoGraph, r0: f64) -> Option<f64> {
    if g.num_edges() == 0 {
        return Some(1.0);
    }
    if min_disjoint_distance(g) < 2.0 * r0 {
        return None;
    }
    let mut frac = f64::INFINITY;
    for (e, ed) in g.edges().iter().enumerate() {
        let mut sin_min: f64 = 1.0;
        for v in [ed.tail, ed.head] {
            let out_e = if v == ed.tail { ed.direction } else { ed.direction.map(|x| -x) };
            for &(f, _) in g.incident(v) {
                if f == e {
                    continue;
                }
                let fd = g.edge(f);
                let out_f = if fd.tail == v { fd.direction } else { fd.direction.map(|x| -x) };
                let cos = crate::dot3(&out_e, &out_f);
                if cos > 0.0 {
                    sin_min = sin_min.min((1.0 - cos * cos).max(0.0).sqrt());
                }
            }
        }
        if sin_min <= 0.0 {
            return None;
        }
        // Exclusive region: s ∈ [r₀/sin α, ℓ − r₀/sin α]; full balls need another r₀.
        let usable = ed.length - 2.0 * (r0 / sin_min + r0);
        frac = frac.min(usable / ed.length);
    }
    // Per edge the integrand dominates ‖γ‖₁‖d‖₁ ≥ ‖γ‖₁ over length ≥ frac·ℓ.
    let min_len = g.edges().iter().map(|e| e.length).fold(f64::INFINITY, f64::min);
    (frac > 0.0).then_some(frac * min_len)
}

/// All Kirchhoff currents with ‖I‖₁ ≤ cap, ordered by (‖I‖₁, cycle coordinates).
pub fn enumerate_states(
    g: &MesoGraph,
    cycles: &CycleBasis,
    lattice: &BurgersLattice,
    cap: f64,
) -> Result<Vec<Current>> {
    enumerate_states_with_budget(g, cycles, lattice, cap, DEFAULT_BUDGET)
}

pub fn enumerate_states_with_budget(
    g: &MesoGraph,
    cycles: &CycleBasis,
    lattice: &BurgersLattice,
    cap: f64,
    budget: u64,
) -> Result<Vec<Current>> {
    if cycles.num_edges != g.num_edges() {
        return Err(Error::invalid("cycle basis does not match the graph"));
    }
    let mut found: Vec<(f64, Vec<i64>, Current)> = Vec::new();
    let mut search = KirchhoffSearch::new(lattice, cycles, cap, false, budget);
    search.run(&mut |chords, flow| {
        let cur = Current { values: flow.to_vec() };
        let coords: Vec<i64> = chords.iter().flatten().copied().collect();
        found.push((cur.norm1(lattice), coords, cur));
    })?;
    found.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    Ok(found.into_iter().map(|(_, _, c)| c).collect())
}

/// Cycle coordinates of a current flattened to length 3·rank.
pub fn flat_coords(i: &Current, cycles: &CycleBasis) -> Vec<i64> {
    i.cycle_coords(cycles).into_iter().flatten().collect()
}

/// A state with its energies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub coords: Vec<i64>,
    pub current: Current,
    pub norm1: f64,
    pub energy_el: f64,
    pub energy_disl: f64,
}

/// Truncated state space {‖I‖₁ ≤ cap} with precomputed energies.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub states: Vec<State>,
    pub cap: f64,
    pub rank: usize,
    /// Certified H_disl ≥ c ‖I‖₁.
    pub c_lower: f64,
}

impl Ensemble {
    /// Enumerate and evaluate H*_el through the Gram form.
    pub fn build(
        g: &MesoGraph,
        cycles: &CycleBasis,
        lattice: &BurgersLattice,
        gram: &GramForm,
        hd: &DislocationEnergy,
        cap: f64,
    ) -> Result<Self> {
        if gram.dim != 3 * cycles.rank() {
            return Err(Error::invalid(format!(
                "Gram form has dimension {} but the cycle space needs {}",
                gram.dim,
                3 * cycles.rank()
            )));
        }
        let currents = enumerate_states(g, cycles, lattice, cap)?;
        let mut states = Vec::with_capacity(currents.len());
        for current in currents {
            let coords = flat_coords(&current, cycles);
            states.push(State {
                energy_el: gram.quadratic(&coords).max(0.0),
                energy_disl: hd.energy(g, lattice, &current)?,
                norm1: current.norm1(lattice),
                coords,
                current,
            });
        }
        Ok(Ensemble { states, cap, rank: cycles.rank(), c_lower: hd.lower_bound(g, lattice) })
    }

    pub fn weight(&self, s: &State, beta: f64) -> f64 {
        (-beta * (s.energy_el + s.energy_disl)).exp()
    }

    /// Rigorous bound on the Boltzmann mass of the excluded states.
    ///
    /// H_el ≥ 0, H_disl ≥ c‖I‖₁ and ‖I‖₁ ≥ Σ_chords |x_c| give, for θ ∈ (0, 1),
    /// Σ_{‖I‖₁>cap} e^{−βH} ≤ e^{−θβc·cap} ((1 + S((1−θ)βc))^rank − 1)
    /// with S(b) ≥ Σ_{γ≠0} e^{−b|γ|}.
    pub fn tail_bound(&self, lattice: &BurgersLattice, beta: f64) -> f64 {
        tail_bound(lattice, self.rank, beta * self.c_lower, self.cap)
    }

    /// Index of the state with the given coordinates.
    pub fn find(&self, coords: &[i64]) -> Option<usize> {
        self.states.iter().position(|s| s.coords == coords)
    }
}

/// min over θ of e^{−θ b cap}((1 + S((1−θ) b))^rank − 1), b = βc.
pub fn tail_bound(lattice: &BurgersLattice, rank: usize, b: f64, cap: f64) -> f64 {
    if rank == 0 {
        return 0.0;
    }
    if !(b > 0.0) {
        return f64::INFINITY;
    }
    (1..100)
        .map(|k| {
            let theta = k as f64 / 100.0;
            let s = lattice.exp_sum_bound((1.0 - theta) * b, 0);
            let ln_prod = rank as f64 * s.ln_1p();
            (-theta * b * cap).exp() * ln_prod.exp_m1()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Neumaier-compensated complex accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    re: (f64, f64),
    im: (f64, f64),
}

fn neumaier(acc: &mut (f64, f64), x: f64) {
    let t = acc.0 + x;
    if acc.0.abs() >= x.abs() {
        acc.1 += (acc.0 - t) + x;
    } else {
        acc.1 += (x - t) + acc.0;
    }
    acc.0 = t;
}

impl CompensatedSum {
    pub fn add(&mut self, z: Complex64) {
        neumaier(&mut self.re, z.re);
        neumaier(&mut self.im, z.im);
    }

    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re.0 + self.re.1, self.im.0 + self.im.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionFunction {
    pub z: f64,
    pub tail_bound: f64,
}

pub fn partition_function(ens: &Ensemble, lattice: &BurgersLattice, beta: f64) -> PartitionFunction {
    let mut acc = CompensatedSum::default();
    for s in &ens.states {
        acc.add(Complex64::new(ens.weight(s, beta), 0.0));
    }
    PartitionFunction { z: acc.value().re, tail_bound: ens.tail_bound(lattice, beta) }
}

/// Estimate of E[e^{i t⟨σ,I⟩}] with an error bar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierEstimate {
    pub value: Complex64,
    pub error: f64,
}

/// Z(tσ)/Z(0) over the truncated ensemble; the error bar 2T/Z covers truncation.
pub fn expectation_fourier(
    ens: &Ensemble,
    lattice: &BurgersLattice,
    sigma: &ObservableFunctional,
    t: f64,
    beta: f64,
) -> Result<FourierEstimate> {
    check_sigma(sigma, ens.rank)?;
    let mut num = CompensatedSum::default();
    let mut den = CompensatedSum::default();
    for s in &ens.states {
        let w = ens.weight(s, beta);
        num.add(Complex64::from_polar(w, t * sigma.eval(&s.coords)));
        den.add(Complex64::new(w, 0.0));
    }
    let z = den.value().re;
    let value =
        if t == 0.0 || sigma.sigma.iter().all(|&v| v == 0.0) { Complex64::new(1.0, 0.0) } else { num.value() / z };
    Ok(FourierEstimate { value, error: 2.0 * ens.tail_bound(lattice, beta) / z })
}

/// s with |⟨σ, I⟩| ≤ s ‖I‖₁ (chord values are the cycle coordinates).
pub fn observable_lipschitz(lattice: &BurgersLattice, sigma: &ObservableFunctional) -> f64 {
    let rows = lattice.coordinate_norms();
    sigma.sigma.chunks(3).map(|c| c.iter().zip(&rows).map(|(s, r)| s.abs() * r).sum::<f64>()).fold(0.0, f64::max)
}

/// Var⟨σ, I⟩ over the truncated ensemble and a bound on the change from the
/// excluded states, using ⟨σ,I⟩² ≤ s²(2/(eε))² e^{ε‖I‖₁}.
pub fn observable_variance(
    ens: &Ensemble,
    lattice: &BurgersLattice,
    sigma: &ObservableFunctional,
    beta: f64,
) -> Result<(f64, f64)> {
    check_sigma(sigma, ens.rank)?;
    let (mut z, mut m1, mut m2) = (CompensatedSum::default(), CompensatedSum::default(), CompensatedSum::default());
    for s in &ens.states {
        let w = ens.weight(s, beta);
        let v = sigma.eval(&s.coords);
        z.add(Complex64::new(w, 0.0));
        m1.add(Complex64::new(w * v, 0.0));
        m2.add(Complex64::new(w * v * v, 0.0));
    }
    let z = z.value().re;
    let (mean, second) = (m1.value().re / z, m2.value().re / z);
    let variance = second - mean * mean;
    let s = observable_lipschitz(lattice, sigma);
    let b = beta * ens.c_lower;
    let weighted = if s == 0.0 {
        0.0
    } else {
        (1..40)
            .map(|k| {
                let eps = b * k as f64 / 40.0;
                s * s * (2.0 / (std::f64::consts::E * eps)).powi(2) * tail_bound(lattice, ens.rank, b - eps, ens.cap)
            })
            .fold(f64::INFINITY, f64::min)
    };
    let t = ens.tail_bound(lattice, beta);
    let first_moment = if s == 0.0 {
        0.0
    } else {
        (1..40)
            .map(|k| {
                let eps = b * k as f64 / 40.0;
                s / (std::f64::consts::E * eps) * tail_bound(lattice, ens.rank, b - eps, ens.cap)
            })
            .fold(f64::INFINITY, f64::min)
    };
    // Second moment shifts by ≤ (weighted + second·T)/Z; the squared mean by ≤ 2|mean|δ + δ².
    let d1 = (first_moment + mean.abs() * t) / z;
    let error = (weighted + second * t) / z + 2.0 * mean.abs() * d1 + d1 * d1;
    Ok((variance, error))
}

/// One inverse temperature of a variance sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub beta: f64,
    pub variance: f64,
    pub variance_error: f64,
    /// Probability of a nonzero current.
    pub p_excited: f64,
}

/// Var⟨σ, I⟩ against β with log-linear fits.
///
/// `gap` is minus the least-squares slope of ln P(I ≠ 0) in β and `c2` minus
/// the slope of ln Var; `min_excitation` is the smallest total energy of a
/// nonzero state. The sweep passes when the variance decreases strictly
/// (beyond its error bars) and the variance slope is at most −gap/2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSweep {
    pub rows: Vec<VarianceRow>,
    pub min_excitation: f64,
    pub gap: f64,
    pub c2: f64,
    pub monotone: bool,
    pub verdict: Verdict,
}

fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub fn variance_sweep(
    ens: &Ensemble,
    lattice: &BurgersLattice,
    sigma: &ObservableFunctional,
    betas: &[f64],
) -> Result<VarianceSweep> {
    if betas.len() < 2 || betas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("variance sweep needs at least two increasing β values"));
    }
    let min_excitation = ens
        .states
        .iter()
        .filter(|s| s.coords.iter().any(|&c| c != 0))
        .map(|s| s.energy_el + s.energy_disl)
        .fold(f64::INFINITY, f64::min);
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let (variance, variance_error) = observable_variance(ens, lattice, sigma, beta)?;
        let (mut z, mut excited) = (CompensatedSum::default(), CompensatedSum::default());
        for s in &ens.states {
            let w = Complex64::new(ens.weight(s, beta), 0.0);
            z.add(w);
            if s.coords.iter().any(|&c| c != 0) {
                excited.add(w);
            }
        }
        rows.push(VarianceRow { beta, variance, variance_error, p_excited: excited.value().re / z.value().re });
    }
    let bs: Vec<f64> = rows.iter().map(|r| r.beta).collect();
    let gap = -ls_slope(&bs, &rows.iter().map(|r| r.p_excited.ln()).collect::<Vec<_>>());
    let c2 = -ls_slope(&bs, &rows.iter().map(|r| r.variance.ln()).collect::<Vec<_>>());
    let monotone = rows.windows(2).all(|w| w[1].variance + w[1].variance_error < w[0].variance - w[0].variance_error);
    let verdict = if !(c2.is_finite() && gap.is_finite()) {
        Verdict::Inconclusive
    } else {
        Verdict::from_bool(monotone && -c2 <= -0.5 * gap)
    };
    Ok(VarianceSweep { rows, min_excitation, gap, c2, monotone, verdict })
}

fn check_sigma(sigma: &ObservableFunctional, rank: usize) -> Result<()> {
    if sigma.sigma.len() != 3 * rank {
        return Err(Error::invalid(format!(
            "observable has {} coordinates, cycle space has {}",
            sigma.sigma.len(),
            3 * rank
        )));
    }
    Ok(())
}

/// Metropolis chain parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub beta: f64,
    pub steps: u64,
    pub burn_in: u64,
    pub seed: u64,
    pub batches: usize,
    /// Keep every n-th post-burn-in state as a record (0 disables).
    pub record_every: u64,
}

/// One recorded chain state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub step: u64,
    pub cycle_coords: Vec<i64>,
    pub energy_el: f64,
    pub energy_disl: f64,
}

/// Per-batch visit counts of a chain after burn-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub accepted: u64,
    pub proposed: u64,
    pub batch_len: u64,
    pub batches: Vec<BTreeMap<Vec<i64>, u64>>,
    pub records: Vec<ChainRecord>,
}

impl ChainResult {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.proposed.max(1) as f64
    }

    /// Batch-means estimate of E[f] and its standard error.
    pub fn estimate(&self, f: impl Fn(&[i64]) -> Complex64) -> (Complex64, f64) {
        let means: Vec<Complex64> = self
            .batches
            .iter()
            .map(|b| {
                let s: Complex64 = b.iter().map(|(k, &n)| f(k) * n as f64).sum();
                s / self.batch_len as f64
            })
            .collect();
        batch_stats(&means)
    }

    /// Occupation frequency of a state with batch-means standard error.
    pub fn occupancy(&self, coords: &[i64]) -> (f64, f64) {
        let (m, e) = self.estimate(|k| Complex64::new(if k == coords { 1.0 } else { 0.0 }, 0.0));
        (m.re, e)
    }
}

fn batch_stats(means: &[Complex64]) -> (Complex64, f64) {
    let b = means.len() as f64;
    let mean: Complex64 = means.iter().sum::<Complex64>() / b;
    if means.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = means.iter().map(|m| (m - mean).norm_sqr()).sum::<f64>() / (b - 1.0);
    (mean, (var / b).sqrt())
}

/// Metropolis sampler over cycle coordinates with loop updates x_a → x_a ± 1.
pub struct Chain<'a> {
    g: &'a MesoGraph,
    cycles: &'a CycleBasis,
    lattice: &'a BurgersLattice,
    gram: &'a GramForm,
    hd: &'a DislocationEnergy,
    beta: f64,
    disl_cache: HashMap<Vec<i64>, f64>,
}

impl<'a> Chain<'a> {
    pub fn new(
        g: &'a MesoGraph,
        cycles: &'a CycleBasis,
        lattice: &'a BurgersLattice,
        gram: &'a GramForm,
        hd: &'a DislocationEnergy,
        beta: f64,
    ) -> Result<Self> {
        if cycles.rank() == 0 {
            return Err(Error::invalid("MCMC needs a nonempty cycle basis"));
        }
        if gram.dim != 3 * cycles.rank() {
            return Err(Error::invalid("Gram form does not match the cycle basis"));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be finite and non-negative (got {beta})")));
        }
        Ok(Chain { g, cycles, lattice, gram, hd, beta, disl_cache: HashMap::new() })
    }

    fn current(&self, coords: &[i64]) -> Current {
        let chunks: Vec<[i64; 3]> = coords.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Current::from_cycle_coords(self.cycles, &chunks)
    }

    fn disl(&mut self, coords: &[i64]) -> Result<f64> {
        if let DislocationEnergy::Norm1 { c } = self.hd {
            return Ok(c * self.current(coords).norm1(self.lattice));
        }
        if let Some(&v) = self.disl_cache.get(coords) {
            return Ok(v);
        }
        let v = self.hd.energy(self.g, self.lattice, &self.current(coords))?;
        self.disl_cache.insert(coords.to_vec(), v);
        Ok(v)
    }

    /// Total energy H*_el + H_disl of a coordinate vector.
    pub fn energy(&mut self, coords: &[i64]) -> Result<f64> {
        Ok(self.gram.quadratic(coords).max(0.0) + self.disl(coords)?)
    }

    /// P(x → y) of one chain step (rejections included in the diagonal).
    pub fn transition_probability(&mut self, x: &[i64], y: &[i64]) -> Result<f64> {
        let dim = x.len();
        let moves = (2 * dim) as f64;
        let diff: Vec<usize> = (0..dim).filter(|&a| x[a] != y[a]).collect();
        let hx = self.energy(x)?;
        let accept = |this: &mut Self, z: &[i64]| -> Result<f64> {
            let hz = this.energy(z)?;
            Ok((-(this.beta) * (hz - hx)).exp().min(1.0))
        };
        match diff.as_slice() {
            [a] if (x[*a] - y[*a]).abs() == 1 => Ok(accept(self, y)? / moves),
            [] => {
                let mut stay = 1.0;
                for a in 0..dim {
                    for s in [-1, 1] {
                        let mut z = x.to_vec();
                        z[a] += s;
                        stay -= accept(self, &z)? / moves;
                    }
                }
                Ok(stay)
            }
            _ => Ok(0.0),
        }
    }

    /// Run the chain from I = 0.
    pub fn run(&mut self, cfg: &ChainConfig) -> Result<ChainResult> {
        if cfg.batches == 0 || cfg.steps <= cfg.burn_in {
            return Err(Error::invalid("chain needs steps > burn_in and at least one batch"));
        }
        let dim = self.gram.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut x = vec![0i64; dim];
        let mut qx = vec![0.0; dim];
        let mut h_disl = 0.0;
        let kept = cfg.steps - cfg.burn_in;
        let batch_len = kept / cfg.batches as u64;
        if batch_len == 0 {
            return Err(Error::invalid("fewer kept steps than batches"));
        }
        let mut batches = vec![BTreeMap::new(); cfg.batches];
        let mut records = Vec::new();
        let (mut accepted, mut proposed) = (0u64, 0u64);
        for step in 0..cfg.steps {
            let a = rng.gen_range(0..dim);
            let s: i64 = if rng.gen::<bool>() { 1 } else { -1 };
            proposed += 1;
            let d_el = 2.0 * s as f64 * qx[a] + self.gram.entry(a, a);
            x[a] += s;
            let new_disl = self.disl(&x)?;
            let d_h = d_el + new_disl - h_disl;
            if d_h <= 0.0 || rng.gen::<f64>() < (-self.beta * d_h).exp() {
                accepted += 1;
                h_disl = new_disl;
                for (b, q) in qx.iter_mut().enumerate() {
                    *q += s as f64 * self.gram.entry(b, a);
                }
            } else {
                x[a] -= s;
            }
            if step >= cfg.burn_in {
                let k = step - cfg.burn_in;
                let bi = (k / batch_len) as usize;
                if bi < cfg.batches {
                    *batches[bi].entry(x.clone()).or_insert(0) += 1;
                }
                if cfg.record_every > 0 && k.is_multiple_of(cfg.record_every) {
                    records.push(ChainRecord {
                        step,
                        cycle_coords: x.clone(),
                        energy_el: x.iter().zip(&qx).map(|(&v, q)| v as f64 * q).sum::<f64>().max(0.0),
                        energy_disl: h_disl,
                    });
                }
            }
        }
        Ok(ChainResult { accepted, proposed, batch_len, batches, records })
    }
}

/// Chain occupancy of one state against its exact Boltzmann probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyRow {
    pub coords: Vec<i64>,
    pub exact: f64,
    pub frequency: f64,
    /// Batch-means error, floored at the alternating-renewal value
    /// (see [`renewal_sigma`]).
    pub sigma: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyReport {
    pub beta: f64,
    pub kept_steps: u64,
    pub acceptance_rate: f64,
    pub n_sigma: f64,
    pub rows: Vec<OccupancyRow>,
    pub verdict: Verdict,
}

/// Standard error of the time fraction spent in a state with stationary
/// probability `p` and holding probability `stay`, over `n` steps.
///
/// Sojourns are geometric with mean m_in = 1/(1 − stay); excursions are
/// modelled as geometric with the mean m_out = m_in(1 − p)/p fixed by
/// stationarity. The alternating-renewal variance is then
/// m_in m_out (2 m_in m_out − m_in − m_out) / ((m_in + m_out)³ n),
/// which reduces to p(2m_in − 1)/n for rare states and to its mirror image
/// for a dominant one. Batch means underestimate the error when a state is
/// visited in only a few clumps, so it serves as a floor.
pub fn renewal_sigma(p: f64, stay: f64, n: u64) -> f64 {
    if p <= 0.0 || p >= 1.0 || n == 0 {
        return 0.0;
    }
    let m_in = 1.0 / (1.0 - stay);
    let m_out = m_in * (1.0 - p) / p;
    let var = m_in * m_out * (2.0 * m_in * m_out - m_in - m_out) / ((m_in + m_out).powi(3) * n as f64);
    var.max(0.0).sqrt()
}

/// Compare chain frequencies of `states` with weights normalised over `reference`.
pub fn occupancy_check(
    chain: &mut Chain,
    result: &ChainResult,
    cfg: &ChainConfig,
    reference: &Ensemble,
    lattice: &BurgersLattice,
    states: &[State],
    n_sigma: f64,
) -> Result<OccupancyReport> {
    if cfg.beta != chain.beta {
        return Err(Error::invalid("chain configuration and chain disagree on beta"));
    }
    let z = partition_function(reference, lattice, cfg.beta).z;
    let kept = cfg.steps.saturating_sub(cfg.burn_in);
    let mut rows = Vec::with_capacity(states.len());
    for st in states {
        let exact = reference.weight(st, cfg.beta) / z;
        let (frequency, batch) = result.occupancy(&st.coords);
        let stay = chain.transition_probability(&st.coords, &st.coords)?;
        let sigma = batch.max(renewal_sigma(exact, stay, kept));
        rows.push(OccupancyRow {
            coords: st.coords.clone(),
            exact,
            frequency,
            sigma,
            holds: (frequency - exact).abs() <= n_sigma * sigma,
        });
    }
    Ok(OccupancyReport {
        beta: cfg.beta,
        kept_steps: kept,
        acceptance_rate: result.acceptance_rate(),
        n_sigma,
        verdict: Verdict::from_bool(rows.iter().all(|r| r.holds)),
        rows,
    })
}

/// K(I, φ) = e^{i⟨φ,I⟩} e^{−βH_disl(I)} with φ over cycle coordinates.
pub fn activity(
    g: &MesoGraph,
    cycles: &CycleBasis,
    lattice: &BurgersLattice,
    hd: &DislocationEnergy,
    phi: &[f64],
    i: &Current,
    beta: f64,
) -> Result<Complex64> {
    let x = flat_coords(i, cycles);
    let phase: f64 = phi.iter().zip(&x).map(|(p, &v)| p * v as f64).sum();
    Ok(Complex64::from_polar((-beta * hd.energy(g, lattice, i)?).exp(), phase))
}

/// Gaussian field on cycle coordinates with covariance 2βQ.
#[derive(Debug, Clone)]
pub struct SineGordonField {
    pub beta: f64,
    dim: usize,
    /// Column-major symmetric square root factor V diag(√(2βλ⁺)).
    factor: Vec<f64>,
}

impl SineGordonField {
    pub fn new(gram: &GramForm, beta: f64) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(Error::invalid(format!("beta must be non-negative (got {beta})")));
        }
        let (vals, vecs) = gram.eigen();
        let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if let Some(&low) = vals.first() {
            if low < -1e-9 * scale {
                return Err(Error::NotPsd(low));
            }
        }
        let dim = gram.dim;
        let mut factor = vec![0.0; dim * dim];
        for c in 0..dim {
            let s = (2.0 * beta * vals[c].max(0.0)).sqrt();
            for r in 0..dim {
                factor[c * dim + r] = vecs[(r, c)] * s;
            }
        }
        Ok(SineGordonField { beta, dim, factor })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let xi: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = vec![0.0; self.dim];
        for c in 0..self.dim {
            for r in 0..self.dim {
                out[r] += self.factor[c * self.dim + r] * xi[c];
            }
        }
        out
    }
}

/// Characteristic-function check for one test current.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicCheck {
    pub coords: Vec<i64>,
    pub empirical: Complex64,
    pub exact: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineGordonReport {
    pub beta: f64,
    pub samples: usize,
    pub tolerance: f64,
    pub checks: Vec<CharacteristicCheck>,
    /// Z_β(σ) exact on the truncated ensemble.
    pub z_sigma_exact: Option<Complex64>,
    /// Monte Carlo mean of 𝓩_{β,σ+φ} and its standard error.
    pub z_sigma_mc: Option<(Complex64, f64)>,
    pub pass: bool,
}

/// E[e^{i⟨φ,x⟩}] against e^{−βxᵀQx} for each test vector, and optionally
/// Z_β(σ) = E[𝓩_{β,σ+φ}] over a truncated ensemble.
pub fn sine_gordon_check(
    gram: &GramForm,
    beta: f64,
    tests: &[Vec<i64>],
    ensemble_sigma: Option<(&Ensemble, &ObservableFunctional)>,
    n_samples: usize,
    seed: u64,
) -> Result<SineGordonReport> {
    if n_samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let field = SineGordonField::new(gram, beta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = vec![CompensatedSum::default(); tests.len()];
    let mut zs: Vec<Complex64> = Vec::new();
    let ens_weights: Option<Vec<(f64, f64)>> = ensemble_sigma.map(|(ens, sigma)| {
        ens.states.iter().map(|s| ((-beta * s.energy_disl).exp(), sigma.eval(&s.coords))).collect()
    });
    for _ in 0..n_samples {
        let phi = field.sample(&mut rng);
        for (acc, x) in sums.iter_mut().zip(tests) {
            let phase: f64 = phi.iter().zip(x).map(|(p, &v)| p * v as f64).sum();
            acc.add(Complex64::from_polar(1.0, phase));
        }
        if let (Some((ens, _)), Some(w)) = (ensemble_sigma, &ens_weights) {
            let mut z = CompensatedSum::default();
            for (s, &(wd, sx)) in ens.states.iter().zip(w) {
                let phase: f64 = sx + phi.iter().zip(&s.coords).map(|(p, &v)| p * v as f64).sum::<f64>();
                z.add(Complex64::from_polar(wd, phase));
            }
            zs.push(z.value());
        }
    }
    let tolerance = 4.0 / (n_samples as f64).sqrt();
    let checks: Vec<CharacteristicCheck> = sums
        .iter()
        .zip(tests)
        .map(|(acc, x)| {
            let empirical = acc.value() / n_samples as f64;
            let exact = (-beta * gram.quadratic(x).max(0.0)).exp();
            CharacteristicCheck { coords: x.clone(), empirical, exact, deviation: (empirical - exact).norm() }
        })
        .collect();
    let mut pass = checks.iter().all(|c| c.deviation <= tolerance);
    let (mut z_sigma_exact, mut z_sigma_mc) = (None, None);
    if let Some((ens, sigma)) = ensemble_sigma {
        check_sigma(sigma, ens.rank)?;
        let mut exact = CompensatedSum::default();
        for s in &ens.states {
            exact.add(Complex64::from_polar(ens.weight(s, beta), sigma.eval(&s.coords)));
        }
        let (mean, err) = batch_stats(&zs);
        // Batch means of single samples: the standard error of the mean.
        let exact = exact.value();
        pass &= (mean - exact).norm() <= 4.0 * err;
        z_sigma_exact = Some(exact);
        z_sigma_mc = Some((mean, err));
    }
    Ok(SineGordonReport { beta, samples: n_samples, tolerance, checks, z_sigma_exact, z_sigma_mc, pass })
}

/// Exact-mode Fourier ratio recomputed without the Gram form: each state's
/// H*_el and observable values come from a fresh minimization.
#[allow(clippy::too_many_arguments)]
pub fn fourier_without_gram(
    g: &MesoGraph,
    lattice: &BurgersLattice,
    states: &[Current],
    hd: &DislocationEnergy,
    phi: &FormFunction,
    grid: &crate::fieldcalc::GridSpec,
    params: &crate::fieldcalc::ElasticParams,
    observable: (usize, usize, crate::Vec3, crate::Vec3),
    t: f64,
    beta: f64,
) -> Result<Complex64> {
    let (i, j, x, y) = observable;
    let nx = grid.flat(grid.nearest_node(&x));
    let ny = grid.flat(grid.nearest_node(&y));
    let mut num = CompensatedSum::default();
    let mut den = CompensatedSum::default();
    for cur in states {
        let m = crate::elastic::minimize(g, lattice, cur, phi, grid, params)?;
        let s = m.w_star.component_samples(i, j);
        let obs = s[nx].re - s[ny].re;
        let w = (-beta * (m.energy + hd.energy(g, lattice, cur)?)).exp();
        num.add(Complex64::from_polar(w, t * obs));
        den.add(Complex64::new(w, 0.0));
    }
    Ok(num.value() / den.value().re)
}

/// Decompose and check K(I, φ) = ∏_j K(I_j, φ); returns the absolute discrepancy.
pub fn factorization_defect(
    g: &MesoGraph,
    cycles: &CycleBasis,
    lattice: &BurgersLattice,
    hd: &DislocationEnergy,
    phi: &[f64],
    i: &Current,
    beta: f64,
) -> Result<f64> {
    let whole = activity(g, cycles, lattice, hd, phi, i, beta)?;
    let mut prod = Complex64::new(1.0, 0.0);
    for p in currents::decompose(g, lattice, i)? {
        prod *= activity(g, cycles, lattice, hd, phi, &p.current, beta)?;
    }
    Ok((whole - prod).norm())
}
