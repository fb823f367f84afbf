//! Spectral calculus of ℂ³-valued antisymmetric forms on a periodic grid.
//!
//! A rank-j field w_{i₁…i_j,k}(x) is antisymmetric in the form indices
//! i₁…i_j and carries one free Burgers index k. Only strictly increasing
//! multi-indices are stored (1, 3, 3, 1 of them for ranks 0..3), which makes
//! the plain sum over stored components equal to the V_j norm with its 1/j!
//! weight. Every operator is a Fourier multiplier applied mode by mode to the
//! unitary DFT spectrum; the Nyquist wavenumber is mapped to zero in all
//! multipliers so that real fields stay real and identities hold per mode.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::report::{CheckRow, SuiteReport};
use crate::{Error, Result, Vec3};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Periodic grid of N³ points covering a box of side L centred at `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    points_per_axis: usize,
    box_length: f64,
    center: Vec3,
}

impl GridSpec {
    pub fn new(points_per_axis: usize, box_length: f64, center: Vec3) -> Result<Self> {
        if points_per_axis < 8 || !points_per_axis.is_multiple_of(2) {
            return Err(Error::invalid(format!("points per axis must be even and at least 8 (got {points_per_axis})")));
        }
        if !(box_length > 0.0 && box_length.is_finite()) {
            return Err(Error::invalid(format!("box length must be positive (got {box_length})")));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("grid center must be finite"));
        }
        Ok(GridSpec { points_per_axis, box_length, center })
    }

    pub fn n(&self) -> usize {
        self.points_per_axis
    }

    pub fn length(&self) -> f64 {
        self.box_length
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn spacing(&self) -> f64 {
        self.box_length / self.points_per_axis as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(3)
    }

    pub fn num_points(&self) -> usize {
        self.points_per_axis.pow(3)
    }

    /// Lower corner of the box; node (0,0,0) sits here.
    pub fn origin(&self) -> Vec3 {
        self.center.map(|c| c - 0.5 * self.box_length)
    }

    pub fn flat(&self, idx: [usize; 3]) -> usize {
        let n = self.points_per_axis;
        (idx[0] * n + idx[1]) * n + idx[2]
    }

    pub fn unflat(&self, p: usize) -> [usize; 3] {
        let n = self.points_per_axis;
        [p / (n * n), (p / n) % n, p % n]
    }

    pub fn node_position(&self, idx: [usize; 3]) -> Vec3 {
        let o = self.origin();
        let h = self.spacing();
        [0, 1, 2].map(|a| o[a] + h * idx[a] as f64)
    }

    /// Nearest grid node to `x` (periodically wrapped).
    pub fn nearest_node(&self, x: &Vec3) -> [usize; 3] {
        let o = self.origin();
        let h = self.spacing();
        let n = self.points_per_axis as i64;
        [0, 1, 2].map(|a| (((x[a] - o[a]) / h).round() as i64).rem_euclid(n) as usize)
    }

    /// Signed integer frequency of DFT index `m`, with the Nyquist index mapped to 0.
    pub fn frequency(&self, m: usize) -> i64 {
        let n = self.points_per_axis;
        if m < n / 2 {
            m as i64
        } else if m == n / 2 {
            0
        } else {
            m as i64 - n as i64
        }
    }

    pub fn wavenumber(&self, m: usize) -> f64 {
        2.0 * PI / self.box_length * self.frequency(m) as f64
    }

    /// Wavevector of flat mode index `p`.
    pub fn k_vec(&self, p: usize) -> Vec3 {
        self.unflat(p).map(|m| self.wavenumber(m))
    }

    /// All wavevectors in flat order.
    pub fn k_vectors(&self) -> Vec<Vec3> {
        let n = self.points_per_axis;
        let ks: Vec<f64> = (0..n).map(|m| self.wavenumber(m)).collect();
        let mut out = Vec::with_capacity(self.num_points());
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    out.push([ks[a], ks[b], ks[c]]);
                }
            }
        }
        out
    }

    fn check_same(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// Lamé coefficients of the isotropic elastic energy density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    pub lambda: f64,
    pub mu: f64,
}

impl ElasticParams {
    pub fn new(lambda: f64, mu: f64) -> Result<Self> {
        if !(mu > 0.0) || !(mu + 1.5 * lambda > 0.0) {
            return Err(Error::invalid(format!(
                "Lamé coefficients need mu > 0 and mu + 3 lambda / 2 > 0 (lambda = {lambda}, mu = {mu})"
            )));
        }
        Ok(ElasticParams { lambda, mu })
    }

    /// P-wave modulus 2μ + λ.
    pub fn p_modulus(&self) -> f64 {
        2.0 * self.mu + self.lambda
    }
}

/// Strictly increasing form multi-indices of a rank.
pub fn multi_indices(rank: usize) -> &'static [&'static [usize]] {
    const R0: &[&[usize]] = &[&[]];
    const R1: &[&[usize]] = &[&[0], &[1], &[2]];
    const R2: &[&[usize]] = &[&[0, 1], &[0, 2], &[1, 2]];
    const R3: &[&[usize]] = &[&[0, 1, 2]];
    match rank {
        0 => R0,
        1 => R1,
        2 => R2,
        3 => R3,
        _ => &[],
    }
}

pub fn num_multi(rank: usize) -> usize {
    multi_indices(rank).len()
}

/// Packed position and permutation sign of an arbitrary multi-index, or
/// `None` if it has a repeated index.
pub fn packed(idx: &[usize]) -> Option<(usize, f64)> {
    let mut sorted = idx.to_vec();
    let mut sign = 1.0;
    for i in 0..sorted.len() {
        for j in 0..sorted.len() - 1 - i {
            if sorted[j] > sorted[j + 1] {
                sorted.swap(j, j + 1);
                sign = -sign;
            } else if sorted[j] == sorted[j + 1] {
                return None;
            }
        }
    }
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return None;
    }
    multi_indices(idx.len()).iter().position(|m| *m == sorted.as_slice()).map(|m| (m, sign))
}

/// Unitary 3D DFT on N³ arrays stored with the last axis contiguous.
pub(crate) struct Fft3 {
    n: usize,
    forward: std::sync::Arc<dyn Fft<f64>>,
    inverse: std::sync::Arc<dyn Fft<f64>>,
}

impl Fft3 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft3 { n, forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, &self.forward);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, &self.inverse);
    }

    fn transform(&self, data: &mut [Complex64], fft: &std::sync::Arc<dyn Fft<f64>>) {
        let n = self.n;
        debug_assert_eq!(data.len(), n * n * n);
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        // Last axis: contiguous rows.
        fft.process_with_scratch(data, &mut scratch);
        let mut line = vec![Complex64::new(0.0, 0.0); n * n];
        // Middle axis: for each slab, transpose-gather columns.
        for a in 0..n {
            let slab = &mut data[a * n * n..(a + 1) * n * n];
            for b in 0..n {
                for c in 0..n {
                    line[c * n + b] = slab[b * n + c];
                }
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for b in 0..n {
                for c in 0..n {
                    slab[b * n + c] = line[c * n + b];
                }
            }
        }
        // First axis: gather lines of stride n².
        let mut lines = vec![Complex64::new(0.0, 0.0); n * n];
        for b in 0..n {
            for c in 0..n {
                for a in 0..n {
                    lines[c * n + a] = data[(a * n + b) * n + c];
                }
            }
            fft.process_with_scratch(&mut lines, &mut scratch);
            for c in 0..n {
                for a in 0..n {
                    data[(a * n + b) * n + c] = lines[c * n + a];
                }
            }
        }
        let norm = 1.0 / ((n * n * n) as f64).sqrt();
        for z in data.iter_mut() {
            *z *= norm;
        }
    }
}

/// How inverse elliptic operators treat the k = 0 mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroMode {
    /// Fail if the field mean is not negligible.
    RequireZero,
    /// Silently drop the mean.
    Project,
}

/// Relative tolerance on the mean for `ZeroMode::RequireZero`.
pub const MEAN_TOL: f64 = 1e-10;

/// A rank-j antisymmetric ℂ³-valued field, stored as its unitary DFT spectrum.
///
/// Components are laid out component-major: component (m, k) occupies
/// `spectrum[(3m + k)·N³ ..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    rank: usize,
    grid: GridSpec,
    spectrum: Vec<Complex64>,
}

impl TensorField {
    pub fn zeros(rank: usize, grid: &GridSpec) -> Self {
        assert!(rank <= 3, "form rank must be at most 3");
        TensorField {
            rank,
            grid: *grid,
            spectrum: vec![Complex64::new(0.0, 0.0); 3 * num_multi(rank) * grid.num_points()],
        }
    }

    /// Field from real-space samples in component-major layout.
    pub fn from_samples(rank: usize, grid: &GridSpec, mut samples: Vec<Complex64>) -> Result<Self> {
        let np = grid.num_points();
        if rank > 3 || samples.len() != 3 * num_multi(rank) * np {
            return Err(Error::invalid(format!(
                "expected {} samples for rank {rank}, got {}",
                3 * num_multi(rank.min(3)) * np,
                samples.len()
            )));
        }
        let fft = Fft3::new(grid.n());
        for chunk in samples.chunks_mut(np) {
            fft.forward(chunk);
        }
        Ok(TensorField { rank, grid: *grid, spectrum: samples })
    }

    /// Field from a real function `f(component, x)` sampled at the nodes.
    pub fn from_fn(rank: usize, grid: &GridSpec, f: impl Fn(usize, Vec3) -> f64) -> Self {
        let np = grid.num_points();
        let ncomp = 3 * num_multi(rank);
        let mut samples = Vec::with_capacity(ncomp * np);
        for c in 0..ncomp {
            for p in 0..np {
                let x = grid.node_position(grid.unflat(p));
                samples.push(Complex64::new(f(c, x), 0.0));
            }
        }
        Self::from_samples(rank, grid, samples).expect("sample count matches")
    }

    pub fn from_spectrum(rank: usize, grid: &GridSpec, spectrum: Vec<Complex64>) -> Result<Self> {
        if rank > 3 || spectrum.len() != 3 * num_multi(rank) * grid.num_points() {
            return Err(Error::invalid("spectrum length does not match rank and grid"));
        }
        Ok(TensorField { rank, grid: *grid, spectrum })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn num_components(&self) -> usize {
        3 * num_multi(self.rank)
    }

    pub fn spectrum(&self) -> &[Complex64] {
        &self.spectrum
    }

    pub fn spectrum_mut(&mut self) -> &mut [Complex64] {
        &mut self.spectrum
    }

    /// Spectrum of component (multi-index position m, Burgers index k).
    pub fn component_spectrum(&self, m: usize, k: usize) -> &[Complex64] {
        let np = self.grid.num_points();
        let c = 3 * m + k;
        &self.spectrum[c * np..(c + 1) * np]
    }

    /// Real-space samples of all components (component-major).
    pub fn samples(&self) -> Vec<Complex64> {
        let np = self.grid.num_points();
        let fft = Fft3::new(self.grid.n());
        let mut out = self.spectrum.clone();
        for chunk in out.chunks_mut(np) {
            fft.inverse(chunk);
        }
        out
    }

    /// Real-space samples of a single component.
    pub fn component_samples(&self, m: usize, k: usize) -> Vec<Complex64> {
        let mut out = self.component_spectrum(m, k).to_vec();
        Fft3::new(self.grid.n()).inverse(&mut out);
        out
    }

    /// Value of the component with full form multi-index `idx` (any order) and
    /// Burgers index k at every node.
    pub fn entry_samples(&self, idx: &[usize], k: usize) -> Vec<Complex64> {
        match packed(idx) {
            Some((m, sign)) => self.component_samples(m, k).into_iter().map(|z| z * sign).collect(),
            None => vec![Complex64::new(0.0, 0.0); self.grid.num_points()],
        }
    }

    /// Box mean of every component.
    pub fn means(&self) -> Vec<Complex64> {
        let np = self.grid.num_points();
        let scale = 1.0 / (np as f64).sqrt();
        (0..self.num_components()).map(|c| self.spectrum[c * np] * scale).collect()
    }

    /// Root-mean-square amplitude over all components and nodes.
    pub fn rms(&self) -> f64 {
        let np = self.grid.num_points() as f64;
        (self.spectrum.iter().map(|z| z.norm_sqr()).sum::<f64>() / np).sqrt()
    }

    /// Largest modulus over real-space samples.
    pub fn max_abs(&self) -> f64 {
        self.samples().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn add(&self, other: &TensorField) -> Result<TensorField> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (a, b) in out.spectrum.iter_mut().zip(&other.spectrum) {
            *a += b;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &TensorField) -> Result<TensorField> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (a, b) in out.spectrum.iter_mut().zip(&other.spectrum) {
            *a -= b;
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> TensorField {
        let mut out = self.clone();
        for a in out.spectrum.iter_mut() {
            *a *= s;
        }
        out
    }

    /// In-place a ← a + s·b.
    pub fn axpy(&mut self, s: f64, b: &TensorField) -> Result<()> {
        self.check_compatible(b)?;
        for (a, b) in self.spectrum.iter_mut().zip(&b.spectrum) {
            *a += b * s;
        }
        Ok(())
    }

    /// Periodic shift by whole grid steps: result(x) = self(x − shift·h).
    pub fn roll(&self, shift: [i64; 3]) -> TensorField {
        let n = self.grid.n();
        let np = self.grid.num_points();
        let phase_axis = |a: usize| -> Vec<Complex64> {
            (0..n)
                .map(|m| {
                    let theta = -2.0 * PI * (m as f64) * shift[a] as f64 / n as f64;
                    Complex64::from_polar(1.0, theta)
                })
                .collect()
        };
        let ph = [phase_axis(0), phase_axis(1), phase_axis(2)];
        let mut out = self.clone();
        for c in 0..self.num_components() {
            for p in 0..np {
                let [a, b, d] = self.grid.unflat(p);
                out.spectrum[c * np + p] *= ph[0][a] * ph[1][b] * ph[2][d];
            }
        }
        out
    }

    fn check_compatible(&self, other: &TensorField) -> Result<()> {
        self.grid.check_same(&other.grid)?;
        if self.rank != other.rank {
            return Err(Error::Rank(format!("rank {} vs rank {}", self.rank, other.rank)));
        }
        Ok(())
    }

    /// Apply a per-mode map from the input components to `out_rank` components.
    fn map_modes(&self, out_rank: usize, f: impl Fn(Vec3, &[Complex64], &mut [Complex64])) -> TensorField {
        let np = self.grid.num_points();
        let nin = self.num_components();
        let nout = 3 * num_multi(out_rank);
        let ks = self.grid.k_vectors();
        let mut out = vec![Complex64::new(0.0, 0.0); nout * np];
        let mut vin = vec![Complex64::new(0.0, 0.0); nin];
        let mut vout = vec![Complex64::new(0.0, 0.0); nout];
        for (p, k) in ks.iter().enumerate() {
            for c in 0..nin {
                vin[c] = self.spectrum[c * np + p];
            }
            vout.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            f(*k, &vin, &mut vout);
            for c in 0..nout {
                out[c * np + p] = vout[c];
            }
        }
        TensorField { rank: out_rank, grid: self.grid, spectrum: out }
    }

    fn require_zero_mean(&self) -> Result<()> {
        let scale = self.rms();
        let mean = self.means().iter().map(|z| z.norm()).fold(0.0, f64::max);
        if mean > MEAN_TOL * scale {
            return Err(Error::NonzeroMean { mean, scale });
        }
        Ok(())
    }
}

/// A scalar field (no Burgers index), stored as its spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: GridSpec,
    pub spectrum: Vec<Complex64>,
}

impl ScalarField {
    pub fn samples(&self) -> Vec<Complex64> {
        let mut out = self.spectrum.clone();
        Fft3::new(self.grid.n()).inverse(&mut out);
        out
    }

    pub fn inner(&self, other: &ScalarField) -> Result<Complex64> {
        self.grid.check_same(&other.grid)?;
        let s: Complex64 = self.spectrum.iter().zip(&other.spectrum).map(|(a, b)| a.conj() * b).sum();
        Ok(s * self.grid.cell_volume())
    }
}

/// Exterior derivative d_j: rank j → rank j+1.
pub fn d(a: &TensorField) -> Result<TensorField> {
    let j = a.rank;
    if j >= 3 {
        return Err(Error::Rank("d is undefined on rank-3 fields (V_4 = {0})".into()));
    }
    let outs = multi_indices(j + 1);
    // For each output multi-index and each removed slot: (axis, input position, sign).
    let terms: Vec<Vec<(usize, usize, f64)>> = outs
        .iter()
        .map(|mi| {
            (0..mi.len())
                .map(|l| {
                    let rest: Vec<usize> = mi.iter().enumerate().filter(|&(s, _)| s != l).map(|(_, &x)| x).collect();
                    let (m_in, _) = packed(&rest).expect("sub-index of sorted index is sorted");
                    let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
                    (mi[l], m_in, sign)
                })
                .collect()
        })
        .collect();
    Ok(a.map_modes(j + 1, |k, vin, vout| {
        for (mo, list) in terms.iter().enumerate() {
            for &(axis, m_in, sign) in list {
                let factor = I * k[axis] * sign;
                for kb in 0..3 {
                    vout[3 * mo + kb] += factor * vin[3 * m_in + kb];
                }
            }
        }
    }))
}

/// Co-derivative d_j*: rank j+1 → rank j.
pub fn d_star(a: &TensorField) -> Result<TensorField> {
    if a.rank == 0 {
        return Err(Error::Rank("d* needs a field of rank at least 1".into()));
    }
    let j = a.rank - 1;
    let outs = multi_indices(j);
    let terms: Vec<Vec<(usize, usize, f64)>> = outs
        .iter()
        .map(|mi| {
            (0..3)
                .filter_map(|i0| {
                    let mut full = vec![i0];
                    full.extend_from_slice(mi);
                    packed(&full).map(|(m_in, sign)| (i0, m_in, sign))
                })
                .collect()
        })
        .collect();
    Ok(a.map_modes(j, |k, vin, vout| {
        for (mo, list) in terms.iter().enumerate() {
            for &(axis, m_in, sign) in list {
                let factor = -I * k[axis] * sign;
                for kb in 0..3 {
                    vout[3 * mo + kb] += factor * vin[3 * m_in + kb];
                }
            }
        }
    }))
}

/// Component-wise Laplacian (symbol −|k|²).
pub fn laplacian(a: &TensorField) -> TensorField {
    a.map_modes(a.rank, |k, vin, vout| {
        let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
        for (o, i) in vout.iter_mut().zip(vin) {
            *o = -i * k2;
        }
    })
}

/// Inverse Laplacian (symbol −1/|k|²), dropping modes with |k| = 0.
pub fn inv_laplace(a: &TensorField, zero_mode: ZeroMode) -> Result<TensorField> {
    if zero_mode == ZeroMode::RequireZero {
        a.require_zero_mean()?;
    }
    Ok(a.map_modes(a.rank, |k, vin, vout| {
        let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
        if k2 > 0.0 {
            for (o, i) in vout.iter_mut().zip(vin) {
                *o = -i / k2;
            }
        }
    }))
}

/// D ψ = −μΔψ − (μ+λ) grad div ψ on rank-0 fields.
pub fn apply_d_operator(psi: &TensorField, p: &ElasticParams) -> Result<TensorField> {
    require_rank(psi, 0)?;
    let (mu, ml) = (p.mu, p.mu + p.lambda);
    Ok(psi.map_modes(0, |k, vin, vout| {
        let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
        let kv = k[0] * vin[0] + k[1] * vin[1] + k[2] * vin[2];
        for j in 0..3 {
            vout[j] = vin[j] * (mu * k2) + kv * (ml * k[j]);
        }
    }))
}

/// D⁻¹ψ = −Δ⁻¹(ψ/μ + (1/(2μ+λ) − 1/μ) Δ⁻¹ grad div ψ).
pub fn apply_d_operator_inverse(v: &TensorField, p: &ElasticParams) -> Result<TensorField> {
    require_rank(v, 0)?;
    v.require_zero_mean()?;
    let gamma = 1.0 / p.p_modulus() - 1.0 / p.mu;
    let mu = p.mu;
    Ok(v.map_modes(0, |k, vin, vout| {
        let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
        if k2 == 0.0 {
            return;
        }
        let kv = k[0] * vin[0] + k[1] * vin[1] + k[2] * vin[2];
        for j in 0..3 {
            // grad div ↦ −k kᵀ, Δ⁻¹ ↦ −1/|k|².
            let inner = vin[j] / mu + (kv * k[j]) * (gamma / k2);
            vout[j] = inner / k2;
        }
    }))
}

/// (∇^F g)_j = −2 Σ_i [λ ∂_j g_ii + μ ∂_i (g_ij + g_ji)] on rank-1 fields.
pub fn grad_f(g: &TensorField, p: &ElasticParams) -> Result<TensorField> {
    require_rank(g, 1)?;
    let (lambda, mu) = (p.lambda, p.mu);
    Ok(g.map_modes(0, |k, vin, vout| {
        let comp = |i: usize, j: usize| vin[3 * i + j];
        let trace = comp(0, 0) + comp(1, 1) + comp(2, 2);
        for j in 0..3 {
            let mut s = I * k[j] * trace * lambda;
            for i in 0..3 {
                s += I * k[i] * (comp(i, j) + comp(j, i)) * mu;
            }
            vout[j] = -2.0 * s;
        }
    }))
}

/// Plain L² pairing ⟨a, b⟩ = ∫ Σ conj(a) b over stored components.
pub fn inner(a: &TensorField, b: &TensorField) -> Result<Complex64> {
    a.check_compatible(b)?;
    let s: Complex64 = a.spectrum.iter().zip(&b.spectrum).map(|(x, y)| x.conj() * y).sum();
    Ok(s * a.grid.cell_volume())
}

/// ⟨w, w̃⟩_F = ∫ 2 Σ [λ conj(w_ii) w̃_jj + μ conj(w_ij + w_ji) w̃_ij].
pub fn inner_f(w: &TensorField, w2: &TensorField, p: &ElasticParams) -> Result<Complex64> {
    require_rank(w, 1)?;
    w.check_compatible(w2)?;
    let np = w.grid.num_points();
    let c = |f: &TensorField, i: usize, j: usize, q: usize| f.spectrum[(3 * i + j) * np + q];
    let mut total = Complex64::new(0.0, 0.0);
    for q in 0..np {
        let tr1 = c(w, 0, 0, q) + c(w, 1, 1, q) + c(w, 2, 2, q);
        let tr2 = c(w2, 0, 0, q) + c(w2, 1, 1, q) + c(w2, 2, 2, q);
        let mut s = tr1.conj() * tr2 * p.lambda;
        for i in 0..3 {
            for j in 0..3 {
                s += (c(w, i, j, q) + c(w, j, i, q)).conj() * c(w2, i, j, q) * p.mu;
            }
        }
        total += s;
    }
    Ok(total * 2.0 * w.grid.cell_volume())
}

/// Sobolev norm ‖a‖_{2,α} = (∫ |k|^{2α} |â(k)|²)^{1/2} in the discrete box convention.
pub fn sobolev_norm(a: &TensorField, alpha: f64) -> Result<f64> {
    let np = a.grid.num_points();
    let ks = a.grid.k_vectors();
    let scale = a.rms();
    let mut total = 0.0;
    for c in 0..a.num_components() {
        for (q, k) in ks.iter().enumerate() {
            let z = a.spectrum[c * np + q];
            let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
            if k2 == 0.0 {
                if alpha == 0.0 {
                    total += z.norm_sqr();
                } else if alpha < 0.0 {
                    let amp = z.norm() / (np as f64).sqrt();
                    if amp > MEAN_TOL * scale {
                        return Err(Error::NonzeroMean { mean: amp, scale });
                    }
                }
            } else {
                total += k2.powf(alpha) * z.norm_sqr();
            }
        }
    }
    Ok((total * a.grid.cell_volume()).sqrt())
}

/// div ψ = Σ_i ∂_i ψ_i for a rank-0 field (contracting the Burgers index).
pub fn div_vector(psi: &TensorField) -> Result<ScalarField> {
    require_rank(psi, 0)?;
    let np = psi.grid.num_points();
    let ks = psi.grid.k_vectors();
    let spectrum =
        ks.iter().enumerate().map(|(q, k)| (0..3).map(|i| I * k[i] * psi.spectrum[i * np + q]).sum()).collect();
    Ok(ScalarField { grid: psi.grid, spectrum })
}

fn require_rank(a: &TensorField, rank: usize) -> Result<()> {
    if a.rank != rank {
        return Err(Error::Rank(format!("expected rank {rank}, got {}", a.rank)));
    }
    Ok(())
}

/// Metadata written next to a binary field snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub rank: usize,
    pub points_per_axis: usize,
    pub box_length: f64,
    pub center: Vec3,
    pub components: usize,
    pub layout: String,
    pub max_abs_imag: f64,
}

/// Write real parts of the samples as little-endian f64 after a header of
/// (rank: u64, N: u64, L: f64), plus a JSON sidecar `<path>.json`.
pub fn write_snapshot(field: &TensorField, path: &Path) -> Result<()> {
    let samples = field.samples();
    let mut bytes = Vec::with_capacity(24 + 8 * samples.len());
    bytes.extend_from_slice(&(field.rank as u64).to_le_bytes());
    bytes.extend_from_slice(&(field.grid.n() as u64).to_le_bytes());
    bytes.extend_from_slice(&field.grid.length().to_le_bytes());
    for z in &samples {
        bytes.extend_from_slice(&z.re.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&bytes)?;
    let meta = SnapshotMeta {
        rank: field.rank,
        points_per_axis: field.grid.n(),
        box_length: field.grid.length(),
        center: field.grid.center(),
        components: field.num_components(),
        layout: "component-major (3*m + k), then x-major node order".into(),
        max_abs_imag: samples.iter().map(|z| z.im.abs()).fold(0.0, f64::max),
    };
    let mut json_path = path.as_os_str().to_owned();
    json_path.push(".json");
    std::fs::write(json_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Read a snapshot written by [`write_snapshot`]; the grid center comes from the sidecar if present.
pub fn read_snapshot(path: &Path) -> Result<TensorField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 {
        return Err(Error::invalid("snapshot shorter than its header"));
    }
    let word = |i: usize| <[u8; 8]>::try_from(&bytes[8 * i..8 * i + 8]).expect("8 bytes");
    let rank = u64::from_le_bytes(word(0)) as usize;
    let n = u64::from_le_bytes(word(1)) as usize;
    let length = f64::from_le_bytes(word(2));
    let mut json_path = path.as_os_str().to_owned();
    json_path.push(".json");
    let center = match std::fs::read_to_string(&json_path) {
        Ok(text) => serde_json::from_str::<SnapshotMeta>(&text)?.center,
        Err(_) => [0.0; 3],
    };
    let grid = GridSpec::new(n, length, center)?;
    let count = (bytes.len() - 24) / 8;
    let samples = (0..count).map(|i| Complex64::new(f64::from_le_bytes(word(3 + i)), 0.0)).collect();
    TensorField::from_samples(rank, &grid, samples)
}

/// Random real rank-`rank` field with unit-variance samples and the Nyquist
/// planes removed; with `zero_mean` the k = 0 mode is dropped as well.
pub fn random_field(rank: usize, grid: &GridSpec, rng: &mut impl Rng, zero_mean: bool) -> TensorField {
    let np = grid.num_points();
    let samples: Vec<Complex64> =
        (0..3 * num_multi(rank) * np).map(|_| Complex64::new(rng.sample(StandardNormal), 0.0)).collect();
    let mut f = TensorField::from_samples(rank, grid, samples).expect("sample count matches");
    let n = grid.n();
    let drop: Vec<bool> = (0..np)
        .map(|q| {
            let idx = grid.unflat(q);
            idx.contains(&(n / 2)) || (zero_mean && idx == [0, 0, 0])
        })
        .collect();
    for chunk in f.spectrum.chunks_mut(np) {
        for (z, &d) in chunk.iter_mut().zip(&drop) {
            if d {
                *z = Complex64::new(0.0, 0.0);
            }
        }
    }
    f
}

fn norm2(a: &TensorField) -> f64 {
    a.spectrum.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt() * a.grid.cell_volume().sqrt()
}

fn rel(defect: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        defect / scale
    } else {
        defect
    }
}

/// Residual of a pairing identity relative to its Cauchy–Schwarz scale.
fn pairing_error(lhs: Complex64, rhs: Complex64, scale: f64) -> f64 {
    rel((lhs - rhs).norm(), scale)
}

/// Operator identities of the calculus on `trials` random fields per check.
///
/// Identities are measured relative to the natural scale of both sides
/// (norms for field identities, Cauchy–Schwarz products for pairings);
/// inequalities report their relative violation (0 when they hold).
pub fn identity_suite(grid: &GridSpec, params: &ElasticParams, trials: usize, seed: u64) -> Result<SuiteReport> {
    const TOL: f64 = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errs: Vec<(&str, Vec<f64>)> = [
        "d_d_rank0",
        "d_d_rank1",
        "d_adjoint_rank0",
        "d_adjoint_rank1",
        "d_adjoint_rank2",
        "grad_f_adjoint",
        "weitzenbock_rank0",
        "weitzenbock_rank1",
        "weitzenbock_rank2",
        "weitzenbock_rank3",
        "d_symmetric",
        "d_inverse",
        "d_spectral_bounds",
        "div_bound",
        "grad_f_d0_is_2d",
        "f_energy_coercive",
        "sobolev_isometry",
    ]
    .into_iter()
    .map(|n| (n, Vec::with_capacity(trials)))
    .collect();
    let mut push = |name: &str, e: f64| {
        errs.iter_mut().find(|(n, _)| *n == name).expect("known check").1.push(e);
    };
    let (mu, pmod) = (params.mu, params.p_modulus());
    for _ in 0..trials {
        let a: Vec<TensorField> = (0..4).map(|r| random_field(r, grid, &mut rng, false)).collect();
        let b: Vec<TensorField> = (1..4).map(|r| random_field(r, grid, &mut rng, false)).collect();
        for j in 0..2 {
            let dd = d(&d(&a[j])?)?;
            push(["d_d_rank0", "d_d_rank1"][j], rel(norm2(&dd), norm2(&laplacian(&a[j]))));
        }
        for j in 0..3 {
            let da = d(&a[j])?;
            let lhs = inner(&d_star(&b[j])?, &a[j])?;
            let rhs = inner(&b[j], &da)?;
            push(
                ["d_adjoint_rank0", "d_adjoint_rank1", "d_adjoint_rank2"][j],
                pairing_error(lhs, rhs, norm2(&b[j]) * norm2(&da)),
            );
        }
        for j in 0..4 {
            let mut lhs = TensorField::zeros(j, grid);
            if j < 3 {
                lhs.axpy(-1.0, &d_star(&d(&a[j])?)?)?;
            }
            if j > 0 {
                lhs.axpy(-1.0, &d(&d_star(&a[j])?)?)?;
            }
            let lap = laplacian(&a[j]);
            let name = ["weitzenbock_rank0", "weitzenbock_rank1", "weitzenbock_rank2", "weitzenbock_rank3"][j];
            push(name, rel(norm2(&lhs.sub(&lap)?), norm2(&lap)));
        }
        let (f, g) = (&a[0], &b[0]);
        let d0f = d(f)?;
        let gf = grad_f(g, params)?;
        let lhs = inner_f(g, &d0f, params)?;
        let rhs = inner(&gf, f)?;
        push("grad_f_adjoint", pairing_error(lhs, rhs, norm2(&gf) * norm2(f)));

        let psi = random_field(0, grid, &mut rng, true);
        let psi2 = random_field(0, grid, &mut rng, true);
        let dpsi = apply_d_operator(&psi, params)?;
        let dpsi2 = apply_d_operator(&psi2, params)?;
        let lhs = inner(&psi2, &dpsi)?;
        let rhs = inner(&dpsi2, &psi)?;
        push("d_symmetric", pairing_error(lhs, rhs, norm2(&psi2) * norm2(&dpsi)));

        let back = apply_d_operator(&apply_d_operator_inverse(&psi, params)?, params)?;
        push("d_inverse", rel(norm2(&back.sub(&psi)?), norm2(&psi)));

        let quad = inner(&psi, &dpsi)?.re;
        let grad2 = -inner(&psi, &laplacian(&psi))?.re;
        let low = mu * grad2 - quad;
        let high = quad - pmod * grad2;
        push("d_spectral_bounds", rel(low.max(high).max(0.0), pmod * grad2));

        let div = div_vector(&psi)?;
        let div2 = div.inner(&div)?.re;
        push("div_bound", rel((div2 - grad2).max(0.0), grad2));

        let d0psi = d(&psi)?;
        let two_d = dpsi.scale(2.0);
        push("grad_f_d0_is_2d", rel(norm2(&grad_f(&d0psi, params)?.sub(&two_d)?), norm2(&two_d)));

        let energy = inner_f(&d0psi, &d0psi, params)?.re;
        let coercive = 2.0 * mu * inner(&d0psi, &d0psi)?.re;
        let consistency = (energy - 2.0 * quad).abs();
        push("f_energy_coercive", rel(consistency + (coercive - energy).max(0.0), energy));

        let alpha = -1.0 + 2.0 * rng.gen::<f64>();
        let mean_free = random_field(1, grid, &mut rng, true);
        let lhs = sobolev_norm(&laplacian(&mean_free), alpha)?;
        let rhs = sobolev_norm(&mean_free, alpha + 2.0)?;
        push("sobolev_isometry", rel((lhs - rhs).abs(), rhs));
    }
    let rows = errs.iter().map(|(name, e)| CheckRow::from_errors(name, e, TOL)).collect();
    Ok(SuiteReport::new("calculus", rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(8, 2.0, [0.0; 3]).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(7, 1.0, [0.0; 3]).is_err());
        assert!(GridSpec::new(6, 1.0, [0.0; 3]).is_err());
        assert!(GridSpec::new(8, 0.0, [0.0; 3]).is_err());
        let g = grid();
        assert_eq!(g.frequency(4), 0);
        assert_eq!(g.frequency(5), -3);
        assert_eq!(g.nearest_node(&[-1.0, 0.0, 0.99]), [0, 4, 0]);
    }

    #[test]
    fn elastic_params_validation() {
        assert!(ElasticParams::new(1.0, 0.0).is_err());
        assert!(ElasticParams::new(-1.0, 1.0).is_err());
        assert!(ElasticParams::new(-0.5, 1.0).is_ok());
    }

    #[test]
    fn packing_signs() {
        assert_eq!(packed(&[1, 0]), Some((0, -1.0)));
        assert_eq!(packed(&[2, 0, 1]), Some((0, 1.0)));
        assert_eq!(packed(&[1, 1]), None);
        assert_eq!(packed(&[]), Some((0, 1.0)));
    }

    #[test]
    fn round_trip_and_constant() {
        let g = grid();
        let f = TensorField::from_fn(1, &g, |c, x| (c as f64) + x[0].sin() * x[2]);
        let back = TensorField::from_samples(1, &g, f.samples()).unwrap();
        for (a, b) in f.spectrum().iter().zip(back.spectrum()) {
            assert!((a - b).norm() < 1e-12);
        }
        let c = TensorField::from_fn(0, &g, |c, _| 1.0 + c as f64);
        assert!(d(&c).unwrap().rms() < 1e-13);
        assert!(d_star(&d(&c).unwrap()).unwrap().rms() < 1e-13);
        assert!(matches!(d(&TensorField::zeros(3, &g)), Err(Error::Rank(_))));
    }

    #[test]
    fn plane_wave_gradient() {
        let g = GridSpec::new(16, 4.0, [0.0; 3]).unwrap();
        let q = [2.0 * PI / 4.0, 0.0, -2.0 * 2.0 * PI / 4.0];
        let v = [1.0, -2.0, 0.5];
        let wave = |x: Vec3| q[0] * x[0] + q[1] * x[1] + q[2] * x[2];
        let f = TensorField::from_fn(0, &g, |k, x| v[k] * wave(x).cos());
        let df = d(&f).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                let s = df.component_samples(i, k);
                for p in [0usize, 17, 301] {
                    let x = g.node_position(g.unflat(p));
                    let expect = -q[i] * v[k] * wave(x).sin();
                    assert!((s[p].re - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn inv_laplace_modes() {
        let g = grid();
        let c = TensorField::from_fn(0, &g, |_, _| 3.0);
        assert!(matches!(inv_laplace(&c, ZeroMode::RequireZero), Err(Error::NonzeroMean { .. })));
        assert!(inv_laplace(&c, ZeroMode::Project).unwrap().rms() < 1e-14);
    }

    #[test]
    fn identity_multiple_energy() {
        let g = GridSpec::new(16, 4.0, [0.0; 3]).unwrap();
        let p = ElasticParams::new(0.7, 1.3).unwrap();
        let chi = |x: Vec3| (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2])).exp();
        let w = TensorField::from_fn(1, &g, |c, x| if c % 4 == 0 { chi(x) } else { 0.0 });
        let chi_sq: f64 =
            (0..g.num_points()).map(|q| chi(g.node_position(g.unflat(q))).powi(2)).sum::<f64>() * g.cell_volume();
        let e = inner_f(&w, &w, &p).unwrap().re;
        let expect = (4.5 * p.lambda + 3.0 * p.mu) * 4.0 * chi_sq;
        assert!((e - expect).abs() < 1e-10 * expect);
    }

    #[test]
    fn snapshot_round_trip() {
        let g = GridSpec::new(8, 2.0, [0.5, 0.5, 0.0]).unwrap();
        let f = TensorField::from_fn(2, &g, |c, x| c as f64 * x[1]);
        let dir = std::env::temp_dir().join(format!("dislocgas-snap-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("field.bin");
        write_snapshot(&f, &path).unwrap();
        let back = read_snapshot(&path).unwrap();
        assert_eq!(back.grid(), f.grid());
        for (a, b) in f.spectrum().iter().zip(back.spectrum()) {
            assert!((a - b).norm() < 1e-12);
        }
        std::fs::remove_dir_all(dir).ok();
    }
}
