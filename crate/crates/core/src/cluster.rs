//! Polymer cluster expansion: Ursell functions, the coefficients z(β, I) and
//! z⁺(β, I), and the checks that certify the expansion on finite graphs.
//!
//! Truncation errors use the tree-graph bound |U(I₁..I_n)| ≤ (1/n!)·#spanning
//! trees of the incompatibility graph, so an n-fold cluster sum is bounded by
//! n^{n−2}/n! · W · Δ^{n−1}, with W the total polymer weight and Δ ≥ the
//! weight incompatible with any single polymer.

use std::collections::{BTreeMap, HashMap};

use num_complex::Complex64;
use num_rational::Rational64;
use num_traits::{Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::currents::{self, Current, ExpansionConstants, Polymer};
use crate::elastic::ObservableFunctional;
use crate::gibbs::{self, CompensatedSum, DislocationEnergy, Ensemble};
use crate::lattice::{BurgersLattice, CycleBasis, MesoGraph};
use crate::report::Verdict;
use crate::{Error, Result};

/// Largest cluster order with exhaustive Ursell evaluation.
pub const URSELL_MAX: usize = 6;

fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

fn graph_mask(incompat: &[Vec<bool>]) -> Result<u16> {
    let n = incompat.len();
    if n > URSELL_MAX {
        return Err(Error::UrsellCap(n));
    }
    let mut mask = 0u16;
    for i in 0..n {
        if incompat[i].len() != n {
            return Err(Error::invalid("incompatibility matrix must be square"));
        }
        for j in i + 1..n {
            if incompat[i][j] != incompat[j][i] {
                return Err(Error::invalid("incompatibility matrix must be symmetric"));
            }
            if incompat[i][j] {
                mask |= 1 << pair_index(n, i, j);
            }
        }
    }
    Ok(mask)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for v in 0..used.len() {
            if !used[v] {
                used[v] = true;
                prefix.push(v);
                rec(prefix, used, out);
                prefix.pop();
                used[v] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Smallest relabelling of the edge mask over all vertex permutations.
fn canonical_mask(n: usize, mask: u16, perms: &[Vec<usize>]) -> u16 {
    let mut best = u16::MAX;
    for p in perms {
        let mut m = 0u16;
        for i in 0..n {
            for j in i + 1..n {
                if mask & (1 << pair_index(n, i, j)) != 0 {
                    let (a, b) = if p[i] < p[j] { (p[i], p[j]) } else { (p[j], p[i]) };
                    m |= 1 << pair_index(n, a, b);
                }
            }
        }
        best = best.min(m);
    }
    best
}

fn connected(n: usize, edges: &[(usize, usize)], chosen: u32) -> bool {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let next = p[y];
            p[y] = r;
            y = next;
        }
        r
    }
    let mut comps = n;
    for (k, &(i, j)) in edges.iter().enumerate() {
        if chosen & (1 << k) != 0 {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a] = b;
                comps -= 1;
            }
        }
    }
    comps == 1
}

fn factorial(n: usize) -> i64 {
    (1..=n as i64).product()
}

/// U from the edge mask by exhaustive subgraph enumeration.
fn ursell_of_mask(n: usize, mask: u16) -> Rational64 {
    if n == 0 {
        return Rational64::zero();
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if mask & (1 << pair_index(n, i, j)) != 0 {
                edges.push((i, j));
            }
        }
    }
    let mut total = 0i64;
    for chosen in 0u32..(1u32 << edges.len()) {
        if connected(n, &edges, chosen) {
            total += if chosen.count_ones() % 2 == 0 { 1 } else { -1 };
        }
    }
    Rational64::new(total, factorial(n))
}

/// Memoised Ursell values keyed by the canonical incompatibility graph.
#[derive(Debug, Default, Clone)]
pub struct UrsellCache {
    memo: HashMap<(usize, u16), Rational64>,
    raw: HashMap<(usize, u16), Rational64>,
    perms: HashMap<usize, Vec<Vec<usize>>>,
}

impl UrsellCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// U(I₁, …, I_n) for the given symmetric incompatibility matrix (diagonal ignored).
    pub fn ursell(&mut self, incompat: &[Vec<bool>]) -> Result<Rational64> {
        let n = incompat.len();
        let mask = graph_mask(incompat)?;
        if let Some(v) = self.raw.get(&(n, mask)) {
            return Ok(*v);
        }
        let perms = self.perms.entry(n).or_insert_with(|| permutations(n));
        let canon = canonical_mask(n, mask, perms);
        let value = *self.memo.entry((n, canon)).or_insert_with(|| ursell_of_mask(n, canon));
        self.raw.insert((n, mask), value);
        Ok(value)
    }

    /// Number of distinct canonical graphs evaluated so far.
    pub fn canonical_entries(&self) -> usize {
        self.memo.len()
    }
}

/// U for a single incompatibility matrix without caching.
pub fn ursell(incompat: &[Vec<bool>]) -> Result<Rational64> {
    let n = incompat.len();
    Ok(ursell_of_mask(n, graph_mask(incompat)?))
}

/// n^{n−2}/n!: spanning trees on n labelled vertices over n!.
fn tree_coefficient(n: usize) -> f64 {
    if n == 1 {
        return 1.0;
    }
    let nf = n as f64;
    ((nf - 2.0) * nf.ln() - ln_factorial(n)).exp()
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// Tree-graph bound ingredients for (possibly tilted) polymer weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeBound {
    /// Σ of enumerated weights.
    pub w_enum: f64,
    /// Bound on Σ of weights beyond the size cap.
    pub w_big: f64,
}

impl TreeBound {
    fn total(&self) -> f64 {
        self.w_enum + self.w_big
    }

    /// Δ: every polymer is incompatible with at most the whole family.
    fn delta(&self) -> f64 {
        self.total()
    }

    fn series_from(&self, n0: usize, coeff: impl Fn(usize) -> f64) -> f64 {
        let d = self.delta();
        if !(d * std::f64::consts::E < 1.0) {
            return f64::INFINITY;
        }
        let mut sum = 0.0;
        let mut n = n0;
        loop {
            let term = coeff(n) * tree_coefficient(n) * d.powi(n as i32 - 1);
            sum += term;
            // Consecutive tree coefficients grow by at most e.
            let ratio = d * std::f64::consts::E;
            if n > n0 + 4 && term * ratio / (1.0 - ratio) <= 1e-17 * sum.max(f64::MIN_POSITIVE) {
                return sum + term * ratio / (1.0 - ratio);
            }
            if n > n0 + 10_000 {
                return f64::INFINITY;
            }
            n += 1;
        }
    }

    /// Bound on Σ over all clusters of |U|∏w.
    pub fn total_mass(&self) -> f64 {
        let w = self.total();
        if w == 0.0 {
            return 0.0;
        }
        w * self.series_from(1, |_| 1.0)
    }

    /// Bound on Σ|U|∏w over clusters of order > n_max or containing a polymer beyond the cap.
    pub fn omitted_mass(&self, n_max: usize) -> f64 {
        let w = self.total();
        if w == 0.0 {
            return 0.0;
        }
        let high = w * self.series_from(n_max + 1, |_| 1.0);
        let d = self.delta();
        let low: f64 = (1..=n_max).map(|n| n as f64 * tree_coefficient(n) * self.w_big * d.powi(n as i32 - 1)).sum();
        high + low
    }
}

/// Largest finite graph distance between two vertices.
pub fn component_diameter(g: &MesoGraph) -> u32 {
    (0..g.num_vertices())
        .map(|v| g.bfs_distances(v).into_iter().filter(|&d| d != u32::MAX).max().unwrap_or(0))
        .max()
        .unwrap_or(0)
}

/// Size-capped polymer family 𝒥_m with its weights at inverse temperature β.
#[derive(Debug, Clone)]
pub struct PolymerFamily {
    pub polymers: Vec<Polymer>,
    pub size_cap: f64,
    pub beta: f64,
    /// e^{−βH_disl(J)}.
    pub weights: Vec<f64>,
    /// Certified H_disl ≥ c‖I‖₁ and graph data for the beyond-cap tail.
    pub c_lower: f64,
    pub diameter: f64,
    pub rank: usize,
}

impl PolymerFamily {
    pub fn new(
        g: &MesoGraph,
        cycles: &CycleBasis,
        lattice: &BurgersLattice,
        hd: &DislocationEnergy,
        size_cap: f64,
        beta: f64,
    ) -> Result<Self> {
        let polymers = currents::enumerate_polymers(g, lattice, size_cap)?;
        let weights = polymers
            .iter()
            .map(|p| hd.energy(g, lattice, &p.current).map(|h| (-beta * h).exp()))
            .collect::<Result<Vec<_>>>()?;
        Ok(PolymerFamily {
            polymers,
            size_cap,
            beta,
            weights,
            c_lower: hd.lower_bound(g, lattice),
            diameter: component_diameter(g) as f64,
            rank: cycles.rank(),
        })
    }

    /// Tree-bound data for weights tilted by e^{ε size J}.
    ///
    /// Beyond the cap, size J > S forces ‖J‖₁ > S − D (D the graph diameter),
    /// and e^{−βH + ε size} ≤ e^{εD} e^{−(βc − ε)‖J‖₁}.
    pub fn tree(&self, lattice: &BurgersLattice, eps: f64) -> TreeBound {
        let w_enum = self.weights.iter().zip(&self.polymers).map(|(w, p)| w * (eps * p.size).exp()).sum();
        let b = self.beta * self.c_lower - eps;
        let w_big = if b > 0.0 {
            (eps * self.diameter).exp() * gibbs::tail_bound(lattice, self.rank, b, self.size_cap - self.diameter)
        } else {
            f64::INFINITY
        };
        TreeBound { w_enum, w_big }
    }

    fn incompatibility(&self) -> Vec<Vec<bool>> {
        let p = &self.polymers;
        (0..p.len()).map(|i| (0..p.len()).map(|j| i == j || currents::incompatible(&p[i], &p[j])).collect()).collect()
    }
}

/// One coefficient z(β, I) with its absolute counterpart z⁺(β, I).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZEntry {
    pub current: Current,
    pub z: f64,
    pub z_plus: f64,
    /// size I (None for I = 0).
    pub size: Option<f64>,
    pub support: Vec<usize>,
}

/// Truncated cluster coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZCoefficients {
    pub beta: f64,
    pub n_max: usize,
    pub size_cap: f64,
    pub polymer_count: usize,
    pub entries: Vec<ZEntry>,
    /// Bound on Σ_I |z(β,I) − z_trunc(β,I)| (and on the omitted z⁺ mass).
    pub tail_bound: f64,
    pub tree: TreeBound,
}

impl ZCoefficients {
    pub fn get(&self, i: &Current) -> Option<&ZEntry> {
        self.entries.binary_search_by(|e| e.current.cmp(i)).ok().map(|k| &self.entries[k])
    }

    /// Σ_I z(β,I) e^{i⟨φ,I⟩} with φ on cycle coordinates.
    pub fn series(&self, cycles: &CycleBasis, phi: &[f64]) -> Complex64 {
        let mut acc = CompensatedSum::default();
        for e in &self.entries {
            let x = gibbs::flat_coords(&e.current, cycles);
            let phase: f64 = phi.iter().zip(&x).map(|(p, &v)| p * v as f64).sum();
            acc.add(Complex64::from_polar(e.z, phase));
        }
        acc.value()
    }
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut acc = CompensatedSum::default();
    for x in v {
        acc.add(Complex64::new(x, 0.0));
    }
    acc.value().re
}

/// z(β, I) and z⁺(β, I) from all clusters of at most `n_max` polymers of the family.
///
/// Clusters are enumerated as multisets with a connected incompatibility graph;
/// each contributes (n!/∏mult!)·U·∏w. Per current, contributions are summed in
/// sorted order, so the result does not depend on enumeration order.
pub fn z_coefficients(
    g: &MesoGraph,
    lattice: &BurgersLattice,
    family: &PolymerFamily,
    n_max: usize,
) -> Result<ZCoefficients> {
    if n_max == 0 || n_max > URSELL_MAX {
        return Err(Error::invalid(format!("n_max must lie in 1..={URSELL_MAX} (got {n_max})")));
    }
    let p = family.polymers.len();
    let incompat = family.incompatibility();
    type Acc = BTreeMap<Current, (Vec<f64>, Vec<f64>)>;
    let partials: Vec<Acc> = (0..p)
        .into_par_iter()
        .map(|first| {
            let mut cache = UrsellCache::new();
            let mut acc: Acc = BTreeMap::new();
            let mut tuple = vec![first];
            cluster_dfs(family, &incompat, n_max, &mut tuple, &mut cache, &mut acc);
            acc
        })
        .collect();
    let mut merged: Acc = BTreeMap::new();
    for part in partials {
        for (k, (a, b)) in part {
            let e = merged.entry(k).or_default();
            e.0.extend(a);
            e.1.extend(b);
        }
    }
    let mut entries = Vec::with_capacity(merged.len());
    for (current, (zs, zps)) in merged {
        let support = current.support();
        let size = if support.is_empty() { None } else { Some(currents::size_of(g, lattice, &current)?) };
        entries.push(ZEntry { z: sorted_sum(zs), z_plus: sorted_sum(zps), size, support, current });
    }
    let tree = family.tree(lattice, 0.0);
    Ok(ZCoefficients {
        beta: family.beta,
        n_max,
        size_cap: family.size_cap,
        polymer_count: p,
        entries,
        tail_bound: tree.omitted_mass(n_max),
        tree,
    })
}

fn cluster_dfs(
    family: &PolymerFamily,
    incompat: &[Vec<bool>],
    n_max: usize,
    tuple: &mut Vec<usize>,
    cache: &mut UrsellCache,
    acc: &mut BTreeMap<Current, (Vec<f64>, Vec<f64>)>,
) {
    let n = tuple.len();
    let sub: Vec<Vec<bool>> = tuple.iter().map(|&a| tuple.iter().map(|&b| incompat[a][b]).collect()).collect();
    let u = cache.ursell(&sub).expect("order within the exhaustive cap");
    if !u.is_zero() {
        let mut mult = Rational64::from_integer(factorial(n));
        let mut k = 0;
        while k < n {
            let mut m = 1;
            while k + m < n && tuple[k + m] == tuple[k] {
                m += 1;
            }
            mult /= Rational64::from_integer(factorial(m));
            k += m;
        }
        let coeff = (mult * u).to_f64().expect("finite rational");
        let coeff_abs = (mult * u.abs()).to_f64().expect("finite rational");
        let mut ws: Vec<f64> = tuple.iter().map(|&a| family.weights[a]).collect();
        ws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let prod: f64 = ws.iter().product();
        let mut sum = family.polymers[tuple[0]].current.clone();
        for &a in &tuple[1..] {
            sum = sum.add(&family.polymers[a].current);
        }
        let e = acc.entry(sum).or_default();
        e.0.push(coeff * prod);
        e.1.push(coeff_abs * prod);
    }
    if n < n_max {
        let last = *tuple.last().expect("nonempty tuple");
        for next in last..family.polymers.len() {
            tuple.push(next);
            cluster_dfs(family, incompat, n_max, tuple, cache, acc);
            tuple.pop();
        }
    }
}

/// Per-φ comparison of log 𝓩 against the truncated cosine series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRow {
    pub phi: Vec<f64>,
    pub z_brute: Complex64,
    pub log_brute: f64,
    pub series: f64,
    pub series_imag: f64,
    pub discrepancy: f64,
    pub bound: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub beta: f64,
    pub norm_cap: f64,
    pub states: usize,
    pub enumeration_tail: f64,
    pub order_tail: f64,
    pub rows: Vec<IdentityRow>,
    pub max_discrepancy: f64,
    pub verdict: Verdict,
}

/// Truncated 𝓩_{β,φ} = Σ_{‖I‖₁ ≤ cap} e^{i⟨φ,I⟩} e^{−βH_disl(I)} over precomputed states.
fn brute_partition(states: &[(Vec<i64>, f64)], phi: &[f64], beta: f64) -> Complex64 {
    let mut acc = CompensatedSum::default();
    for (x, h) in states {
        let phase: f64 = phi.iter().zip(x).map(|(p, &v)| p * v as f64).sum();
        acc.add(Complex64::from_polar((-beta * h).exp(), phase));
    }
    acc.value()
}

fn disl_states(
    g: &MesoGraph,
    cycles: &CycleBasis,
    lattice: &BurgersLattice,
    hd: &DislocationEnergy,
    norm_cap: f64,
) -> Result<Vec<(Vec<i64>, f64)>> {
    gibbs::enumerate_states(g, cycles, lattice, norm_cap)?
        .into_iter()
        .map(|c| Ok((gibbs::flat_coords(&c, cycles), hd.energy(g, lattice, &c)?)))
        .collect()
}

/// Compare log 𝓩_{β,φ} (brute force) with Σ z(β,I) cos⟨φ,I⟩ for each φ.
///
/// The allowed discrepancy is −ln(1 − T/𝓩_trunc) for the enumeration tail T
/// plus the omitted cluster mass.
#[allow(clippy::too_many_arguments)]
pub fn partition_identity_check(
    g: &MesoGraph,
    cycles: &CycleBasis,
    lattice: &BurgersLattice,
    hd: &DislocationEnergy,
    z: &ZCoefficients,
    phis: &[Vec<f64>],
    norm_cap: f64,
) -> Result<IdentityReport> {
    let dim = 3 * cycles.rank();
    if let Some(bad) = phis.iter().find(|p| p.len() != dim) {
        return Err(Error::invalid(format!("φ has {} coordinates, cycle space has {dim}", bad.len())));
    }
    let beta = z.beta;
    let states = disl_states(g, cycles, lattice, hd, norm_cap)?;
    let enumeration_tail = gibbs::tail_bound(lattice, cycles.rank(), beta * hd.lower_bound(g, lattice), norm_cap);
    let mut rows = Vec::with_capacity(phis.len());
    for phi in phis {
        let zb = brute_partition(&states, phi, beta);
        let ser = z.series(cycles, phi);
        let real_positive = zb.re > 0.0 && zb.im.abs() <= 1e-12 * zb.re;
        let log_brute = zb.re.ln();
        let discrepancy = (log_brute - ser.re).abs();
        let rel = enumeration_tail / zb.re;
        let bound = if real_positive && rel < 1.0 { -(-rel).ln_1p() + z.tail_bound } else { f64::INFINITY };
        let slack = 1e-12 * (1.0 + log_brute.abs());
        let verdict = if !real_positive {
            Verdict::Fail
        } else if !bound.is_finite() {
            Verdict::Inconclusive
        } else {
            Verdict::from_bool(discrepancy <= bound + slack)
        };
        rows.push(IdentityRow {
            phi: phi.clone(),
            z_brute: zb,
            log_brute,
            series: ser.re,
            series_imag: ser.im,
            discrepancy,
            bound,
            verdict,
        });
    }
    Ok(IdentityReport {
        beta,
        norm_cap,
        states: states.len(),
        enumeration_tail,
        order_tail: z.tail_bound,
        max_discrepancy: rows.iter().map(|r| r.discrepancy).fold(0.0, f64::max),
        verdict: Verdict::all(rows.iter().map(|r| r.verdict)),
        rows,
    })
}

/// log 𝓩_{β,φ} sampled on the grid φ ∈ (2π/n)ℤ_n^d; its discrete Fourier
/// coefficients recover z(β, I) up to aliasing.
#[derive(Debug, Clone)]
pub struct LogPartitionGrid {
    pub n: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    /// Bound on |log 𝓩 − log 𝓩_trunc| over the grid.
    pub log_error: f64,
}

pub const FOURIER_GRID_BUDGET: usize = 1 << 21;

pub fn log_partition_grid(
    g: &MesoGraph,
    cycles: &CycleBasis,
    lattice: &BurgersLattice,
    hd: &DislocationEnergy,
    beta: f64,
    norm_cap: f64,
    n: usize,
) -> Result<LogPartitionGrid> {
    let dim = 3 * cycles.rank();
    let points = (n as f64).powi(dim as i32);
    if n < 2 || points > FOURIER_GRID_BUDGET as f64 {
        return Err(Error::Budget {
            what: format!("φ grid {n}^{dim}"),
            budget: FOURIER_GRID_BUDGET as u64,
            estimate: points,
        });
    }
    let states = disl_states(g, cycles, lattice, hd, norm_cap)?;
    let tail = gibbs::tail_bound(lattice, cycles.rank(), beta * hd.lower_bound(g, lattice), norm_cap);
    let total = points as usize;
    let step = 2.0 * std::f64::consts::PI / n as f64;
    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let mut k = flat;
            let phi: Vec<f64> = (0..dim)
                .map(|_| {
                    let c = k % n;
                    k /= n;
                    c as f64 * step
                })
                .collect();
            brute_partition(&states, &phi, beta).re
        })
        .collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > tail) {
        return Err(Error::invalid("truncated partition function is not bounded away from zero on the grid"));
    }
    Ok(LogPartitionGrid {
        n,
        dim,
        log_error: -(-tail / min).ln_1p(),
        values: values.into_iter().map(f64::ln).collect(),
    })
}

impl LogPartitionGrid {
    /// (1/n^d) Σ_φ log 𝓩(φ) e^{−i⟨φ,m⟩}.
    pub fn coefficient(&self, m: &[i64]) -> Result<f64> {
        if m.len() != self.dim {
            return Err(Error::invalid("coefficient index has the wrong dimension"));
        }
        let step = 2.0 * std::f64::consts::PI / self.n as f64;
        let mut acc = CompensatedSum::default();
        for (flat, v) in self.values.iter().enumerate() {
            let mut k = flat;
            let mut phase = 0.0;
            for &mi in m {
                phase -= (k % self.n) as f64 * step * mi as f64;
                k /= self.n;
            }
            acc.add(Complex64::from_polar(*v, phase));
        }
        Ok(acc.value().re / self.values.len() as f64)
    }

    /// Bound on the aliased contributions: currents congruent to m with some
    /// coordinate off by at least n have ‖I‖₁ ≥ (n − max|m_i|)/max‖row‖, and
    /// Σ_{‖I‖₁≥L}|z| ≤ e^{−εL} · (tilted total cluster mass).
    pub fn aliasing_bound(&self, family: &PolymerFamily, lattice: &BurgersLattice, m: &[i64]) -> f64 {
        let row = lattice.coordinate_norms().into_iter().fold(0.0, f64::max);
        let reach = m.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0) as f64;
        let l = (self.n as f64 - reach) / row;
        let top = family.beta * family.c_lower;
        (1..40)
            .map(|k| {
                let eps = top * k as f64 / 40.0;
                (-eps * l).exp() * family.tree(lattice, eps).total_mass()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Rigorous bound on Σ_{J ∋ o, size J > S} e^{−b size J} by the closed-path count
/// of supports: Σ_{J ∋ o} e^{−b' size J} ≤ Σ_n (M² c₈(b'))^n.
pub fn peierls_tail(lattice: &BurgersLattice, lambda_degree: usize, b: f64, size_cap: f64) -> f64 {
    if !(b > 0.0) {
        return f64::INFINITY;
    }
    let m2 = (lambda_degree * lambda_degree) as f64;
    (1..100)
        .map(|k| {
            let theta = k as f64 / 100.0;
            let q = m2 * lattice.exp_sum_bound((1.0 - theta) * b, 0);
            if q >= 1.0 {
                f64::INFINITY
            } else {
                (-theta * b * size_cap).exp() * q / (1.0 - q)
            }
        })
        .fold(f64::INFINITY, f64::min)
}

/// The Peierls-chain constants chosen from c₆ and η.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeierlsConstants {
    pub expansion: ExpansionConstants,
    /// Maximal vertex degree of the ambient mesoscopic lattice.
    pub lambda_degree: usize,
    /// c₈(β) ≤ e^{−βc₁₀} for large β; c₁₀ = c₆η/2.
    pub c10: f64,
    /// 2M²e^{−βc₁₀} ≤ e^{−βc₇} for large β; c₇ = c₁₀/2.
    pub c7: f64,
}

impl PeierlsConstants {
    pub fn new(expansion: ExpansionConstants, lambda_degree: usize) -> Self {
        let c10 = expansion.c6 * expansion.eta / 2.0;
        PeierlsConstants { expansion, lambda_degree, c10, c7: c10 / 2.0 }
    }

    /// Smallest β from which the analytic chain c₈ ≤ e^{−βc₁₀}, 2M²e^{−βc₁₀} ≤ e^{−βc₇} holds.
    pub fn analytic_threshold(&self, lattice: &BurgersLattice) -> f64 {
        let m2 = (self.lambda_degree * self.lambda_degree) as f64;
        let chain_ok = |beta: f64| {
            lattice.exp_sum_bound(beta * self.expansion.c6, 0) <= (-beta * self.c10).exp()
                && 2.0 * m2 * (-beta * self.c10).exp() <= (-beta * self.c7).exp()
                && m2 * (-beta * self.c10).exp() <= 0.5
        };
        let mut hi = 1.0;
        while !chain_ok(hi) {
            hi *= 2.0;
            if hi > 1e9 {
                return f64::INFINITY;
            }
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if chain_ok(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeierlsRow {
    pub beta: f64,
    pub c8: f64,
    pub c8_within_c10: bool,
    /// max over anchors of the truncated Σ_{J∋o} e^{−βc₆ size J}.
    pub lhs_truncated: f64,
    pub tail: f64,
    pub lhs: f64,
    /// max over anchors of Σ_{J∋o} e^{−βc₄ size J + βc₅η|supp J|} (truncated + tail).
    pub lhs_k_exp_a: f64,
    pub rhs: f64,
    /// ln(rhs / lhs); positive when the bound holds.
    pub margin: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeierlsReport {
    pub constants: PeierlsConstants,
    pub size_cap: f64,
    pub polymers: usize,
    pub rows: Vec<PeierlsRow>,
    /// Smallest grid β from which the bound holds at every larger grid β.
    pub threshold: Option<f64>,
    pub analytic_threshold: f64,
}

fn anchor_sums(g: &MesoGraph, polymers: &[Polymer], f: impl Fn(&Polymer) -> f64) -> Vec<f64> {
    let mut sums = vec![0.0; g.num_edges()];
    for p in polymers {
        let v = f(p);
        for &e in &p.support {
            sums[e] += v;
        }
    }
    sums
}

pub fn peierls_check(
    g: &MesoGraph,
    lattice: &BurgersLattice,
    constants: &PeierlsConstants,
    polymers: &[Polymer],
    size_cap: f64,
    betas: &[f64],
) -> PeierlsReport {
    let ec = &constants.expansion;
    let rows: Vec<PeierlsRow> = betas
        .iter()
        .map(|&beta| {
            let tail = peierls_tail(lattice, constants.lambda_degree, beta * ec.c6, size_cap);
            let lhs_truncated =
                anchor_sums(g, polymers, |p| (-beta * ec.c6 * p.size).exp()).into_iter().fold(0.0, f64::max);
            let k_exp_a = anchor_sums(g, polymers, |p| {
                (-beta * (ec.c4 * p.size - ec.c5 * ec.eta * p.support.len() as f64)).exp()
            })
            .into_iter()
            .fold(0.0, f64::max);
            let lhs = lhs_truncated + tail;
            let rhs = (-beta * constants.c7).exp();
            let c8 = lattice.exp_sum_bound(beta * ec.c6, 0);
            PeierlsRow {
                beta,
                c8,
                c8_within_c10: c8 <= (-beta * constants.c10).exp(),
                lhs_truncated,
                tail,
                lhs,
                lhs_k_exp_a: k_exp_a + tail,
                rhs,
                margin: (rhs / lhs).ln(),
                holds: lhs <= rhs && k_exp_a + tail <= rhs,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].beta.partial_cmp(&rows[b].beta).unwrap());
    let mut threshold = None;
    for &k in order.iter().rev() {
        if rows[k].holds {
            threshold = Some(rows[k].beta);
        } else {
            break;
        }
    }
    PeierlsReport {
        constants: *constants,
        size_cap,
        polymers: polymers.len(),
        rows,
        threshold,
        analytic_threshold: constants.analytic_threshold(lattice),
    }
}

/// Edges sharing a vertex with some edge of `edges` (including the edges themselves).
pub fn closure(g: &MesoGraph, edges: &[usize]) -> Vec<usize> {
    let mut hit = vec![false; g.num_edges()];
    for &e in edges {
        let ed = g.edge(e);
        for v in [ed.tail, ed.head] {
            for &(f, _) in g.incident(v) {
                hit[f] = true;
            }
        }
    }
    (0..g.num_edges()).filter(|&f| hit[f]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpRow {
    pub polymer: usize,
    pub support: usize,
    pub closure: usize,
    pub lhs_truncated: f64,
    pub tail: f64,
    pub lhs: f64,
    /// a(I) = βc₅η|supp I|.
    pub a: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpReport {
    pub beta: f64,
    pub rows: Vec<KpRow>,
    /// The proof's sufficient condition e^{−βc₇}(2M−1)|supp I| ≤ a(I), per unit support.
    pub chain_holds: bool,
    pub verdict: Verdict,
}

/// Σ_J |K(J)| 1_{I∼J} e^{a(J)} ≤ a(I) with K(J) = e^{−βc₄ size J}, for every enumerated I.
pub fn kp_condition_check(
    g: &MesoGraph,
    lattice: &BurgersLattice,
    constants: &PeierlsConstants,
    polymers: &[Polymer],
    size_cap: f64,
    beta: f64,
) -> KpReport {
    let ec = &constants.expansion;
    let tail_per_anchor = peierls_tail(lattice, constants.lambda_degree, beta * ec.c6, size_cap);
    let ka: Vec<f64> =
        polymers.iter().map(|p| (-beta * (ec.c4 * p.size - ec.c5 * ec.eta * p.support.len() as f64)).exp()).collect();
    let rows: Vec<KpRow> = polymers
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let lhs_truncated: f64 =
                polymers.iter().zip(&ka).filter(|(q, _)| currents::incompatible(p, q)).map(|(_, w)| w).sum();
            let closure = closure(g, &p.support).len();
            let tail = closure as f64 * tail_per_anchor;
            let a = beta * ec.c5 * ec.eta * p.support.len() as f64;
            KpRow {
                polymer: i,
                support: p.support.len(),
                closure,
                lhs_truncated,
                tail,
                lhs: lhs_truncated + tail,
                a,
                holds: lhs_truncated + tail <= a,
            }
        })
        .collect();
    let m = constants.lambda_degree as f64;
    let chain_holds = (-beta * constants.c7).exp() * (2.0 * m - 1.0) <= beta * ec.c5 * ec.eta;
    KpReport { beta, verdict: Verdict::from_bool(rows.iter().all(|r| r.holds)), rows, chain_holds }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZPlusRow {
    pub anchor: usize,
    /// Truncated Σ_{I: o∈supp I} e^{βc₄ size I} z⁺(β, I).
    pub lhs_truncated: f64,
    /// Σ_{J∋o} K(J) e^{a(J)} (truncated + tail), which dominates the full lhs under KP.
    pub chain_bound: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZPlusReport {
    pub beta: f64,
    pub rows: Vec<ZPlusRow>,
    /// Truncated Σ_I z⁺ against |E| e^{−βc₇}.
    pub z_plus_total: f64,
    pub z_plus_total_bound: f64,
    pub verdict: Verdict,
}

/// The exponential decay bound on z⁺, certified through the KP chain.
pub fn z_plus_bound_check(
    g: &MesoGraph,
    lattice: &BurgersLattice,
    constants: &PeierlsConstants,
    polymers: &[Polymer],
    size_cap: f64,
    z: &ZCoefficients,
    kp: &KpReport,
) -> ZPlusReport {
    let beta = z.beta;
    let ec = &constants.expansion;
    let tail = peierls_tail(lattice, constants.lambda_degree, beta * ec.c6, size_cap);
    let chain =
        anchor_sums(g, polymers, |p| (-beta * (ec.c4 * p.size - ec.c5 * ec.eta * p.support.len() as f64)).exp());
    let mut lhs = vec![0.0; g.num_edges()];
    for e in &z.entries {
        if let Some(size) = e.size {
            let v = if e.z_plus > 0.0 { (beta * ec.c4 * size + e.z_plus.ln()).exp() } else { 0.0 };
            for &o in &e.support {
                lhs[o] += v;
            }
        }
    }
    let rhs = (-beta * constants.c7).exp();
    let rows: Vec<ZPlusRow> = (0..g.num_edges())
        .map(|o| {
            let chain_bound = chain[o] + tail;
            ZPlusRow {
                anchor: o,
                lhs_truncated: lhs[o],
                chain_bound,
                rhs,
                holds: kp.verdict == Verdict::Pass && lhs[o] <= chain_bound && chain_bound <= rhs,
            }
        })
        .collect();
    let z_plus_total: f64 = z.entries.iter().filter(|e| e.size.is_some()).map(|e| e.z_plus).sum();
    let z_plus_total_bound = g.num_edges() as f64 * rhs;
    let ok = rows.iter().all(|r| r.holds) && z_plus_total <= z_plus_total_bound;
    ZPlusReport { beta, rows, z_plus_total, z_plus_total_bound, verdict: Verdict::from_bool(ok) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianRow {
    pub t: f64,
    /// Exact E[e^{it⟨σ,I⟩}] (real part) and its truncation error.
    pub lhs: f64,
    pub lhs_error: f64,
    /// exp(−t²/2 · Σ|z_trunc|⟨σ,I⟩²).
    pub rhs: f64,
    /// Right-hand side with the exponent weakened by the truncation slack.
    pub rhs_certified: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianReport {
    pub beta: f64,
    /// Σ_I |z_trunc(β,I)| ⟨σ,I⟩².
    pub quadratic: f64,
    /// Bound on Σ_I |z − z_trunc| ⟨σ,I⟩².
    pub slack: f64,
    pub rows: Vec<GaussianRow>,
    /// Exact Var⟨σ,I⟩ on the truncated ensemble and its truncation error.
    pub variance: f64,
    pub variance_error: f64,
    /// Var ≤ Σ|z|⟨σ,I⟩² + slack.
    pub variance_verdict: Verdict,
    pub verdict: Verdict,
}

/// E[e^{it⟨σ,I⟩}] ≥ exp(−t²/2 Σ|z(β,I)|⟨σ,I⟩²) for each t.
///
/// Verified only when the exact lower end exceeds the right side with the
/// quadratic form reduced by the slack; violated only when even the increased
/// form is not reached.
pub fn gaussian_lower_bound_check(
    ens: &Ensemble,
    lattice: &BurgersLattice,
    cycles: &CycleBasis,
    family: &PolymerFamily,
    z: &ZCoefficients,
    sigma: &ObservableFunctional,
    ts: &[f64],
) -> Result<GaussianReport> {
    let beta = z.beta;
    let quadratic: f64 = z
        .entries
        .iter()
        .map(|e| {
            let s = sigma.eval(&gibbs::flat_coords(&e.current, cycles));
            e.z.abs() * s * s
        })
        .sum();
    let s = gibbs::observable_lipschitz(lattice, sigma);
    let top = beta * family.c_lower;
    let c_eps = |eps: f64| (2.0 / (std::f64::consts::E * eps)).powi(2);
    let slack = if s == 0.0 {
        0.0
    } else {
        (1..40)
            .map(|k| {
                let eps = top * k as f64 / 40.0;
                s * s * c_eps(eps) * family.tree(lattice, eps).omitted_mass(z.n_max)
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut rows = Vec::with_capacity(ts.len());
    for &t in ts {
        let est = gibbs::expectation_fourier(ens, lattice, sigma, t, beta)?;
        let half = 0.5 * t * t;
        let rhs = (-half * quadratic).exp();
        let rhs_certified = (-half * (quadratic - slack).max(0.0)).exp();
        let rhs_upper = (-half * (quadratic + slack)).exp();
        let (lo, hi) = (est.value.re - est.error, est.value.re + est.error);
        let verdict = if lo >= rhs_certified {
            Verdict::Pass
        } else if hi < rhs_upper {
            Verdict::Fail
        } else {
            Verdict::Inconclusive
        };
        rows.push(GaussianRow { t, lhs: est.value.re, lhs_error: est.error, rhs, rhs_certified, verdict });
    }
    let (variance, variance_error) = gibbs::observable_variance(ens, lattice, sigma, beta)?;
    let variance_verdict = if variance - variance_error <= quadratic + slack { Verdict::Pass } else { Verdict::Fail };
    Ok(GaussianReport {
        beta,
        quadratic,
        slack,
        verdict: Verdict::all(rows.iter().map(|r| r.verdict)).combine(variance_verdict),
        rows,
        variance,
        variance_error,
        variance_verdict,
    })
}
