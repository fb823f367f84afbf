//! The elastic minimizer w* = w^b + d₀ψ*, its energy, the Gram form on
//! cycle space and the observable functionals w*_ij(x, ·).

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::burgers::{self, CurrentMeasure, FormFunction};
use crate::currents::Current;
use crate::fieldcalc::{
    self, apply_d_operator_inverse, d, d_star, grad_f, inner_f, inv_laplace, packed, ElasticParams, GridSpec,
    TensorField, ZeroMode,
};
use crate::lattice::{BurgersLattice, CycleBasis, MesoGraph};
use crate::{norm3, sub3, Error, Result, Vec3};

/// Relative tolerance on the integrability defect ‖d₂b‖ / ‖∇b‖.
pub const INTEGRABILITY_TOL: f64 = 1e-8;

/// All fields of the elastic minimization for one current.
#[derive(Debug, Clone)]
pub struct MinimizerFields {
    /// b̃(I), rank 1.
    pub btilde: TensorField,
    /// b(I), rank 2.
    pub b: TensorField,
    pub w_b: TensorField,
    pub psi_star: TensorField,
    pub w_star: TensorField,
    pub energy: f64,
}

/// ‖d₂b‖₂ / ‖∇b‖₂, zero for b = 0.
pub fn integrability_defect(b: &TensorField) -> Result<f64> {
    let db = d(b)?;
    let np = b.grid().num_points();
    let ks = b.grid().k_vectors();
    let mut grad2 = 0.0;
    for c in 0..b.num_components() {
        for (q, k) in ks.iter().enumerate() {
            grad2 += (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) * b.spectrum()[c * np + q].norm_sqr();
        }
    }
    let num: f64 = db.spectrum().iter().map(|z| z.norm_sqr()).sum();
    Ok(if grad2 > 0.0 { (num / grad2).sqrt() } else { 0.0 })
}

/// w^b = −Δ⁻¹ d₁* b.
pub fn w_b_field(b: &TensorField) -> Result<TensorField> {
    if b.rank() != 2 {
        return Err(Error::Rank(format!("w_b_field expects rank 2, got {}", b.rank())));
    }
    let defect = integrability_defect(b)?;
    if defect > INTEGRABILITY_TOL {
        return Err(Error::Integrability { defect, tol: INTEGRABILITY_TOL });
    }
    let ds = d_star(b)?;
    Ok(inv_laplace(&ds, ZeroMode::RequireZero)?.scale(-1.0))
}

/// w^b_ij = Σ_l Δ⁻¹ ∂_l b_lij, evaluated component by component.
pub fn w_b_componentwise(b: &TensorField) -> Result<TensorField> {
    let grid = *b.grid();
    let np = grid.num_points();
    let ks = grid.k_vectors();
    let mut out = TensorField::zeros(1, &grid);
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = vec![Complex64::new(0.0, 0.0); np];
            for l in 0..3 {
                let Some((m, sign)) = packed(&[l, i]) else { continue };
                let src = b.component_spectrum(m, j);
                for q in 0..np {
                    let k = ks[q];
                    let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
                    if k2 > 0.0 {
                        acc[q] += src[q] * Complex64::new(0.0, k[l]) * (-sign / k2);
                    }
                }
            }
            out.spectrum_mut()[(3 * i + j) * np..(3 * i + j + 1) * np].copy_from_slice(&acc);
        }
    }
    Ok(out)
}

/// ψ* = D⁻¹ v^b with v^b = −½ ∇^F w^b.
pub fn psi_star_field(w_b: &TensorField, params: &ElasticParams) -> Result<TensorField> {
    let v_b = grad_f(w_b, params)?.scale(-0.5);
    apply_d_operator_inverse(&v_b, params)
}

/// ψ*_j = −Δ⁻² Σ_{k,l} (∂_k∂_l b_ljk + λ/(2μ+λ) ∂_j∂_l b_lkk), straight from b.
pub fn psi_star_closed_form(b: &TensorField, params: &ElasticParams) -> Result<TensorField> {
    if b.rank() != 2 {
        return Err(Error::Rank(format!("expected rank 2, got {}", b.rank())));
    }
    let grid = *b.grid();
    let np = grid.num_points();
    let ks = grid.k_vectors();
    let ratio = params.lambda / params.p_modulus();
    let entry = |l: usize, a: usize, kb: usize, q: usize| -> Complex64 {
        match packed(&[l, a]) {
            Some((m, sign)) => b.component_spectrum(m, kb)[q] * sign,
            None => Complex64::new(0.0, 0.0),
        }
    };
    let mut out = TensorField::zeros(0, &grid);
    for q in 0..np {
        let k = ks[q];
        let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
        if k2 == 0.0 {
            continue;
        }
        for j in 0..3 {
            let mut s = Complex64::new(0.0, 0.0);
            for kk in 0..3 {
                for l in 0..3 {
                    // ∂∂ ↦ −k k and −Δ⁻² ↦ −1/|k|⁴ combine to +k k/|k|⁴.
                    s += entry(l, j, kk, q) * (k[kk] * k[l]);
                    s += entry(l, kk, kk, q) * (ratio * k[j] * k[l]);
                }
            }
            out.spectrum_mut()[j * np + q] = s / (k2 * k2);
        }
    }
    Ok(out)
}

/// Minimize the elastic energy for a prescribed rank-1 density b̃.
pub fn minimize_density(btilde: TensorField, params: &ElasticParams) -> Result<MinimizerFields> {
    let b = burgers::antisymmetrize(&btilde)?;
    let w_b = w_b_field(&b)?;
    let psi_star = psi_star_field(&w_b, params)?;
    let w_star = w_b.add(&d(&psi_star)?)?;
    let energy = inner_f(&w_star, &w_star, params)?.re;
    Ok(MinimizerFields { btilde, b, w_b, psi_star, w_star, energy })
}

/// Relative residuals of a minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizerDefects {
    /// ‖d₂b‖ / ‖∇b‖.
    pub integrability: f64,
    /// ‖d₁w* − b‖ / ‖b‖.
    pub constraint: f64,
    /// ‖∇^F w*‖ / ‖∇^F w^b‖ (zero at the minimizer).
    pub orthogonality: f64,
}

impl MinimizerFields {
    pub fn defects(&self, params: &ElasticParams) -> Result<MinimizerDefects> {
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { num };
        let constraint = d(&self.w_star)?.sub(&self.b)?;
        let dual = grad_f(&self.w_star, params)?;
        let reference = grad_f(&self.w_b, params)?;
        Ok(MinimizerDefects {
            integrability: integrability_defect(&self.b)?,
            constraint: ratio(constraint.rms(), self.b.rms()),
            orthogonality: ratio(dual.rms(), reference.rms()),
        })
    }
}

/// Minimize the elastic energy subject to d₁w = b(I).
pub fn minimize(
    g: &MesoGraph,
    lattice: &BurgersLattice,
    i: &Current,
    phi: &FormFunction,
    grid: &GridSpec,
    params: &ElasticParams,
) -> Result<MinimizerFields> {
    crate::currents::kirchhoff_check(g, i).violations.first().map_or(Ok(()), |&(first, _)| {
        Err(Error::Kirchhoff { count: crate::currents::kirchhoff_check(g, i).violations.len(), first })
    })?;
    let btilde = burgers::smoothed_density(g, lattice, i, phi, grid)?;
    minimize_density(btilde, params)
}

/// A requested observable w*_ij(x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservablePoint {
    pub i: usize,
    pub j: usize,
    pub x: Vec3,
}

/// Linear coefficients of w*_ij at a grid node over the Gram basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableRow {
    pub i: usize,
    pub j: usize,
    /// Requested point.
    pub x: Vec3,
    /// Grid node the point was snapped to, and its position.
    pub node: [usize; 3],
    pub node_position: Vec3,
    pub coeffs: Vec<f64>,
}

/// The elastic energy as a quadratic form in Γ-valued cycle coordinates.
///
/// Coordinate index a = 3c + k stands for the current c-th cycle ⊗ (k-th
/// generator of Γ); Γ-coordinates of a current on the chords are exactly
/// these coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramForm {
    pub dim: usize,
    /// Row-major dim × dim matrix.
    pub matrix: Vec<f64>,
    pub observable_rows: Vec<ObservableRow>,
    pub key: String,
}

#[derive(Serialize)]
struct GramKey<'a> {
    graph: crate::lattice::GraphJson,
    generators: &'a [Vec3; 3],
    phi_radius: f64,
    grid: &'a GridSpec,
    params: &'a ElasticParams,
    observables: &'a [ObservablePoint],
}

impl GramForm {
    pub fn entry(&self, a: usize, b: usize) -> f64 {
        self.matrix[a * self.dim + b]
    }

    /// xᵀQx for integer cycle coordinates (flattened 3·rank vector).
    pub fn quadratic(&self, x: &[i64]) -> f64 {
        let mut s = 0.0;
        for a in 0..self.dim {
            if x[a] == 0 {
                continue;
            }
            let mut row = 0.0;
            for b in 0..self.dim {
                row += self.matrix[a * self.dim + b] * x[b] as f64;
            }
            s += x[a] as f64 * row;
        }
        s
    }

    /// Q x as a real vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|a| (0..self.dim).map(|b| self.matrix[a * self.dim + b] * x[b]).sum()).collect()
    }

    /// Symmetric eigen-decomposition (eigenvalues ascending, eigenvectors as columns).
    pub fn eigen(&self) -> (Vec<f64>, nalgebra::DMatrix<f64>) {
        let m = nalgebra::DMatrix::from_row_slice(self.dim, self.dim, &self.matrix);
        let eig = nalgebra::SymmetricEigen::new(m);
        let mut order: Vec<usize> = (0..self.dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
        let values = order.iter().map(|&a| eig.eigenvalues[a]).collect();
        let vectors = nalgebra::DMatrix::from_columns(
            &order.iter().map(|&a| eig.eigenvectors.column(a).into_owned()).collect::<Vec<_>>(),
        );
        (values, vectors)
    }

    pub fn row(&self, i: usize, j: usize, x: &Vec3) -> Option<&ObservableRow> {
        self.observable_rows.iter().find(|r| r.i == i && r.j == j && r.x == *x)
    }

    /// σ with ⟨σ, I⟩ = w*_ij(x, I) − w*_ij(y, I).
    pub fn observable(&self, i: usize, j: usize, x: &Vec3, y: &Vec3) -> Result<ObservableFunctional> {
        let rx =
            self.row(i, j, x).ok_or_else(|| Error::invalid(format!("no observable row for ({i},{j}) at {x:?}")))?;
        let ry =
            self.row(i, j, y).ok_or_else(|| Error::invalid(format!("no observable row for ({i},{j}) at {y:?}")))?;
        Ok(ObservableFunctional { sigma: rx.coeffs.iter().zip(&ry.coeffs).map(|(a, b)| a - b).collect() })
    }

    /// Write `gram-<key>.json` and `gram-<key>.bin` (little-endian f64 matrix).
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let json = dir.join(format!("gram-{}.json", self.key));
        std::fs::write(&json, serde_json::to_string_pretty(self)?)?;
        let bytes: Vec<u8> = self.matrix.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.join(format!("gram-{}.bin", self.key)), bytes)?;
        Ok(json)
    }

    /// Load a persisted form by key; the binary blob must match the JSON matrix.
    pub fn load(dir: &Path, key: &str) -> Result<Option<GramForm>> {
        let json = dir.join(format!("gram-{key}.json"));
        if !json.exists() {
            return Ok(None);
        }
        let form: GramForm = serde_json::from_str(&std::fs::read_to_string(json)?)?;
        let bytes = std::fs::read(dir.join(format!("gram-{key}.bin")))?;
        let blob: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if blob != form.matrix {
            return Err(Error::invalid(format!("gram blob for {key} does not match its metadata")));
        }
        Ok(Some(form))
    }
}

/// Content hash of everything the Gram form depends on.
pub fn gram_key(
    g: &MesoGraph,
    lattice: &BurgersLattice,
    phi: &FormFunction,
    grid: &GridSpec,
    params: &ElasticParams,
    observables: &[ObservablePoint],
) -> String {
    let key = GramKey {
        graph: g.to_json(),
        generators: lattice.generators(),
        phi_radius: phi.radius(),
        grid,
        params,
        observables,
    };
    let text = serde_json::to_string(&key).expect("key serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// The current of basis coordinate a = 3c + k.
pub fn basis_current(cycles: &CycleBasis, a: usize) -> Current {
    let mut gamma = [0i64; 3];
    gamma[a % 3] = 1;
    Current::from_cycle(&cycles.cycles[a / 3], gamma)
}

/// Assemble the Gram form from per-basis minimizer fields.
pub fn gram_form(
    g: &MesoGraph,
    cycles: &CycleBasis,
    lattice: &BurgersLattice,
    phi: &FormFunction,
    grid: &GridSpec,
    params: &ElasticParams,
    observables: &[ObservablePoint],
) -> Result<GramForm> {
    if cycles.rank() == 0 {
        return Err(Error::invalid("Gram form needs a nonempty cycle basis"));
    }
    let dim = 3 * cycles.rank();
    let fields: Vec<TensorField> = (0..dim)
        .into_par_iter()
        .map(|a| minimize(g, lattice, &basis_current(cycles, a), phi, grid, params).map(|m| m.w_star))
        .collect::<Result<_>>()?;
    let mut matrix = vec![0.0; dim * dim];
    for a in 0..dim {
        for b in a..dim {
            let v = inner_f(&fields[a], &fields[b], params)?.re;
            matrix[a * dim + b] = v;
            matrix[b * dim + a] = v;
        }
    }
    let observable_rows = observable_rows(&fields, grid, observables);
    Ok(GramForm { dim, matrix, observable_rows, key: gram_key(g, lattice, phi, grid, params, observables) })
}

fn observable_rows(fields: &[TensorField], grid: &GridSpec, observables: &[ObservablePoint]) -> Vec<ObservableRow> {
    let mut rows: Vec<ObservableRow> = observables
        .iter()
        .map(|o| {
            let node = grid.nearest_node(&o.x);
            ObservableRow {
                i: o.i,
                j: o.j,
                x: o.x,
                node,
                node_position: grid.node_position(node),
                coeffs: vec![0.0; fields.len()],
            }
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = observables.iter().map(|o| (o.i, o.j)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    for (a, f) in fields.iter().enumerate() {
        for &(i, j) in &pairs {
            let samples = f.component_samples(i, j);
            for row in rows.iter_mut().filter(|r| r.i == i && r.j == j) {
                row.coeffs[a] = samples[grid.flat(row.node)].re;
            }
        }
    }
    rows
}

/// σ over cycle coordinates with ⟨σ, I⟩ = w*_ij(x, I) − w*_ij(y, I).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableFunctional {
    pub sigma: Vec<f64>,
}

impl ObservableFunctional {
    pub fn zero(dim: usize) -> Self {
        ObservableFunctional { sigma: vec![0.0; dim] }
    }

    pub fn eval(&self, x: &[i64]) -> f64 {
        self.sigma.iter().zip(x).map(|(s, &v)| s * v as f64).sum()
    }

    pub fn scaled(&self, t: f64) -> Self {
        ObservableFunctional { sigma: self.sigma.iter().map(|s| s * t).collect() }
    }
}

/// Prefactor of the far-field bound |w*_ij(x)| ≤ K M₁ / |x − v(o)|³ for |x − v(o)| ≥ 2R:
/// 24/π from the w^b part plus 2·9·36/π from the d₀ψ* part.
pub const FAR_FIELD_PREFACTOR: f64 = (24.0 + 648.0) / std::f64::consts::PI;

/// Near- and far-field behaviour of w*_ij around an anchor edge of a current.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableBoundReport {
    pub anchor_edge: usize,
    pub anchor_vertex: Vec3,
    /// max_ij Σ_l ∫ |u − v(o)| |b_lij(u)| du.
    pub m1: f64,
    /// Radius around v(o) containing supp b(I).
    pub radius: f64,
    /// max over components of |∫ b|.
    pub charge: f64,
    pub norm1: f64,
    pub size: f64,
    /// R / size.
    pub c12: f64,
    /// max_lij ‖b_lij‖₁ / ‖I‖₁.
    pub c13: f64,
    pub samples: Vec<ObservableSample>,
    /// Least-squares slope of −log|w*| against log distance over far samples.
    pub decay_exponent: Option<f64>,
    /// max over far samples of |w*| · dist³.
    pub far_prefactor: f64,
    /// max over the grid of |w*_ij| / ‖I‖₁.
    pub c16: f64,
    /// Far samples exceeding FAR_FIELD_PREFACTOR · M₁ / dist³.
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSample {
    /// Grid node the requested point was snapped to.
    pub x: Vec3,
    pub distance: f64,
    pub far: bool,
    /// max_ij |w*_ij(x)|.
    pub value: f64,
    /// Far-field bound, for far samples.
    pub bound: Option<f64>,
}

/// Measure w*(x, I) around the anchor edge `o` against the far-field bound.
#[allow(clippy::too_many_arguments)]
pub fn observable_bound_check(
    g: &MesoGraph,
    lattice: &BurgersLattice,
    i: &Current,
    o: usize,
    phi: &FormFunction,
    grid: &GridSpec,
    params: &ElasticParams,
    points: &[Vec3],
) -> Result<ObservableBoundReport> {
    if i.is_zero() {
        return Err(Error::EmptySupport { what: "observable bound" });
    }
    if i.values.get(o).is_none_or(|v| *v == [0, 0, 0]) {
        return Err(Error::invalid(format!("anchor edge {o} is not in the support")));
    }
    let fields = minimize(g, lattice, i, phi, grid, params)?;
    let v_o = g.vertex(g.edge(o).tail);
    let measure = CurrentMeasure::new(g, lattice, i);
    let radius =
        measure.segments.iter().flat_map(|s| [s.tail, s.head]).map(|p| norm3(&sub3(&p, &v_o))).fold(0.0, f64::max)
            + phi.radius();
    let (mass, moment) = density_moments(&measure, phi, &v_o, phi.radius() / 4.0);
    // b_lij = ±b̃_mj with {l, i, m} = {0, 1, 2}, so Σ_l |b_lij| = Σ_{m≠i} |b̃_mj|.
    let mut m1: f64 = 0.0;
    for a in 0..3 {
        for j in 0..3 {
            m1 = m1.max((0..3).filter(|&m| m != a).map(|m| moment[m][j]).sum());
        }
    }
    let max_mass = mass.iter().flatten().fold(0.0f64, |a, &v| a.max(v));
    let charge = burgers::field_integral(&fields.b).iter().map(|z| z.norm()).fold(0.0, f64::max);
    let comps: Vec<Vec<Complex64>> = (0..9).map(|c| fields.w_star.component_samples(c / 3, c % 3)).collect();
    let near_max =
        (0..grid.num_points()).map(|p| comps.iter().map(|c| c[p].re.abs()).fold(0.0, f64::max)).fold(0.0, f64::max);
    let norm1 = i.norm1(lattice);
    let size = crate::currents::size_of(g, lattice, i)?;
    let samples: Vec<ObservableSample> = points
        .iter()
        .map(|x| {
            let node = grid.nearest_node(x);
            let pos = grid.node_position(node);
            let p = grid.flat(node);
            let distance = norm3(&sub3(&pos, &v_o));
            let far = distance >= 2.0 * radius;
            ObservableSample {
                x: pos,
                distance,
                far,
                value: comps.iter().map(|c| c[p].re.abs()).fold(0.0, f64::max),
                bound: far.then(|| FAR_FIELD_PREFACTOR * m1 / distance.powi(3)),
            }
        })
        .collect();
    let far: Vec<&ObservableSample> = samples.iter().filter(|s| s.far && s.value > 0.0).collect();
    let decay_exponent = if far.len() >= 2 {
        let xs: Vec<f64> = far.iter().map(|s| s.distance.ln()).collect();
        let ys: Vec<f64> = far.iter().map(|s| s.value.ln()).collect();
        Some(-least_squares_slope(&xs, &ys))
    } else {
        None
    };
    let far_prefactor = far.iter().map(|s| s.value * s.distance.powi(3)).fold(0.0, f64::max);
    let violations = samples.iter().filter(|s| s.bound.is_some_and(|b| s.value > b)).count();
    Ok(ObservableBoundReport {
        anchor_edge: o,
        anchor_vertex: v_o,
        m1,
        radius,
        charge,
        norm1,
        size,
        c12: radius / size,
        c13: max_mass / norm1,
        samples,
        decay_exponent,
        far_prefactor,
        c16: near_max / norm1,
        violations,
    })
}

/// Per-entry ∫ |b̃_mj| and ∫ |u − center| |b̃_mj| by a Riemann sum on `spacing`·ℤ³.
fn density_moments(
    measure: &CurrentMeasure,
    phi: &FormFunction,
    center: &Vec3,
    spacing: f64,
) -> ([[f64; 3]; 3], [[f64; 3]; 3]) {
    let mut mass = [[0.0; 3]; 3];
    let mut moment = [[0.0; 3]; 3];
    let Some((lo, hi)) = burgers::bounding_box(measure, phi.radius()) else {
        return (mass, moment);
    };
    let start = lo.map(|v| (v / spacing).floor() as i64);
    let end = hi.map(|v| (v / spacing).ceil() as i64);
    let cell = spacing.powi(3);
    for a in start[0]..=end[0] {
        for b in start[1]..=end[1] {
            for c in start[2]..=end[2] {
                let x = [a as f64 * spacing, b as f64 * spacing, c as f64 * spacing];
                let bt = burgers::smoothed_density_at(measure, phi, &x);
                let r = norm3(&sub3(&x, center));
                for m in 0..3 {
                    for j in 0..3 {
                        let v = bt[m][j].abs() * cell;
                        mass[m][j] += v;
                        moment[m][j] += v * r;
                    }
                }
            }
        }
    }
    (mass, moment)
}

pub(crate) fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Energy of an arbitrary rank-1 field in the F form.
pub fn field_energy(w: &TensorField, params: &ElasticParams) -> Result<f64> {
    Ok(fieldcalc::inner_f(w, w, params)?.re)
}
