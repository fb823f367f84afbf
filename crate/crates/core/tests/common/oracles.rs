//! Independent reference computations used only by tests.

use dislocgas_core::fieldcalc::{self, ElasticParams, TensorField, ZeroMode};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A Gaussian vector potential ψ(x) = a exp(−|x − c|²/(2s²)), periodized on the grid box.
#[derive(Debug, Clone, Copy)]
pub struct GaussBump {
    pub center: [f64; 3],
    pub width: f64,
    pub dir: [f64; 3],
}

/// Bumps with centres scattered around `anchors`, log-uniform widths and random directions.
pub fn random_bumps(
    rng: &mut ChaCha8Rng,
    anchors: &[[f64; 3]],
    count: usize,
    widths: (f64, f64),
    spread: f64,
) -> Vec<GaussBump> {
    (0..count)
        .map(|_| {
            let a = anchors[rng.gen_range(0..anchors.len())];
            let center = [0, 1, 2].map(|k| a[k] + spread * (rng.gen::<f64>() * 2.0 - 1.0));
            let width = (widths.0.ln() + rng.gen::<f64>() * (widths.1 / widths.0).ln()).exp();
            let mut dir = [0, 1, 2].map(|_| rng.gen::<f64>() * 2.0 - 1.0);
            let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            dir.iter_mut().for_each(|v| *v /= n);
            GaussBump { center, width, dir }
        })
        .collect()
}

/// λ/2 tr(S) tr(T) + μ tr(ST) for S = U + Uᵀ, T = V + Vᵀ, in real space.
pub fn f_energy_density(u: &[[f64; 3]; 3], v: &[[f64; 3]; 3], p: &ElasticParams) -> f64 {
    let mut tr_s = 0.0;
    let mut tr_t = 0.0;
    let mut st = 0.0;
    for i in 0..3 {
        tr_s += 2.0 * u[i][i];
        tr_t += 2.0 * v[i][i];
        for j in 0..3 {
            st += (u[i][j] + u[j][i]) * (v[j][i] + v[i][j]);
        }
    }
    0.5 * p.lambda * tr_s * tr_t + p.mu * st
}

/// Real-space samples w_ij(x) as 3×3 matrices.
pub fn matrix_samples(w: &TensorField) -> Vec<[[f64; 3]; 3]> {
    let comps: Vec<Vec<f64>> =
        (0..9).map(|c| w.component_samples(c / 3, c % 3).iter().map(|z| z.re).collect()).collect();
    (0..w.grid().num_points())
        .map(|p| {
            let mut m = [[0.0; 3]; 3];
            for c in 0..9 {
                m[c / 3][c % 3] = comps[c][p];
            }
            m
        })
        .collect()
}

/// ⟨w, w⟩_F by a real-space Riemann sum.
pub fn real_space_energy(w: &TensorField, p: &ElasticParams) -> f64 {
    let h3 = w.grid().cell_volume();
    matrix_samples(w).iter().map(|m| f_energy_density(m, m, p)).sum::<f64>() * h3
}

fn wrap(d: f64, l: f64) -> f64 {
    d - l * (d / l).round()
}

/// ∫ ∂_k g ∂_l h over the periodic box for periodized Gaussians g, h.
fn gradient_overlap(a: &GaussBump, b: &GaussBump, l: f64) -> [[f64; 3]; 3] {
    let s = a.width * a.width + b.width * b.width;
    let c = (2.0 * std::f64::consts::PI * a.width * a.width * b.width * b.width / s).powf(1.5);
    let base = [0, 1, 2].map(|k| wrap(a.center[k] - b.center[k], l));
    let mut m = [[0.0; 3]; 3];
    for n0 in -2..=2 {
        for n1 in -2..=2 {
            for n2 in -2..=2 {
                let d = [base[0] + n0 as f64 * l, base[1] + n1 as f64 * l, base[2] + n2 as f64 * l];
                let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let e = c * (-d2 / (2.0 * s)).exp();
                if e == 0.0 {
                    continue;
                }
                for k in 0..3 {
                    for q in 0..3 {
                        let delta = if k == q { 1.0 / s } else { 0.0 };
                        m[k][q] += e * (delta - d[k] * d[q] / (s * s));
                    }
                }
            }
        }
    }
    m
}

/// Minimize ⟨w^b + d₀ψ, w^b + d₀ψ⟩_F over ψ in the span of the first `k` bumps for each k in `sizes`.
///
/// The Gram matrix of the gradients is exact (Gaussian overlap integrals); the
/// coupling to w^b is a Riemann sum. Each returned value is the energy of an
/// explicit competitor, hence an upper bound on the minimum.
pub fn variational_energies(w_b: &TensorField, p: &ElasticParams, bumps: &[GaussBump], sizes: &[usize]) -> Vec<f64> {
    let e_b = real_space_energy(w_b, p);
    let r = couplings(w_b, p, bumps);
    let gram = gradient_gram(bumps, w_b.grid().length(), p);
    sizes
        .iter()
        .map(|&k| {
            let g = gram.view((0, 0), (k, k)).into_owned();
            let rv = DVector::from_column_slice(&r[..k]);
            let svd = g.clone().svd(true, true);
            let c = svd.solve(&(-&rv), 1e-13 * svd.singular_values.max()).expect("svd solve");
            e_b + 2.0 * rv.dot(&c) + c.dot(&(&g * &c))
        })
        .collect()
}

/// ⟨w, d₀ψ_m⟩_F for each bump, exact for a band-limited w.
pub fn couplings(w_b: &TensorField, p: &ElasticParams, bumps: &[GaussBump]) -> Vec<f64> {
    let grid = *w_b.grid();
    let l = grid.length();
    // ⟨w^b, d₀ψ_m⟩_F mode by mode: w^b is band-limited, so only its modes pair
    // with the exact Fourier coefficients of ∂_i ψ_j = a_j ∂_i g.
    let np = grid.num_points();
    let x0 = grid.origin();
    let norm = (np as f64).powf(-0.5);
    let ks = grid.k_vectors();
    let spec = w_b.spectrum();
    let r: Vec<f64> = bumps
        .iter()
        .map(|b| {
            let pref = (2.0 * std::f64::consts::PI * b.width * b.width).powf(1.5) / l.powi(3);
            let mut acc = 0.0;
            for (q, k) in ks.iter().enumerate() {
                let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
                let damp = (-0.5 * b.width * b.width * k2).exp();
                if damp < 1e-30 {
                    continue;
                }
                let phase: f64 = (0..3).map(|a| k[a] * (x0[a] - b.center[a])).sum();
                // Series coefficient of g times the grid phase, times i for the derivative.
                let gq = Complex64::from_polar(pref * damp, phase) * Complex64::new(0.0, 1.0);
                let w = |i: usize, j: usize| spec[(3 * i + j) * np + q] * norm;
                let tr_w = w(0, 0) + w(1, 1) + w(2, 2);
                let tr_v: Complex64 = (0..3).map(|i| gq * (k[i] * b.dir[i])).sum();
                let mut s = tr_w.conj() * tr_v * p.lambda;
                for i in 0..3 {
                    for j in 0..3 {
                        s += (w(i, j) + w(j, i)).conj() * gq * (k[i] * b.dir[j]) * p.mu;
                    }
                }
                acc += 2.0 * s.re;
            }
            acc * l.powi(3)
        })
        .collect();
    r
}

/// Exact Gram matrix ⟨d₀ψ_a, d₀ψ_b⟩_F of the bump gradients.
pub fn gradient_gram(bumps: &[GaussBump], l: f64, p: &ElasticParams) -> DMatrix<f64> {
    let m = bumps.len();
    let mut gram = DMatrix::<f64>::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let mm = gradient_overlap(&bumps[a], &bumps[b], l);
            let (da, db) = (bumps[a].dir, bumps[b].dir);
            let mut amb = 0.0;
            for k in 0..3 {
                for q in 0..3 {
                    amb += da[k] * mm[k][q] * db[q];
                }
            }
            let trm = mm[0][0] + mm[1][1] + mm[2][2];
            let ab: f64 = (0..3).map(|k| da[k] * db[k]).sum();
            let v = 2.0 * (p.lambda + p.mu) * amb + 2.0 * p.mu * ab * trm;
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    gram
}

/// The pointwise stiffness map A with ⟨w, w'⟩_F = ⟨w, A w'⟩:
/// (A w)_ij = 2λ δ_ij tr w + 2μ (w_ij + w_ji).
pub fn stiffness(w: &TensorField, p: &ElasticParams) -> TensorField {
    let np = w.grid().num_points();
    let src = w.spectrum();
    let mut out = TensorField::zeros(1, w.grid());
    let dst = out.spectrum_mut();
    for q in 0..np {
        let c = |i: usize, j: usize| src[(3 * i + j) * np + q];
        let tr = c(0, 0) + c(1, 1) + c(2, 2);
        for i in 0..3 {
            for j in 0..3 {
                let mut v = (c(i, j) + c(j, i)) * (2.0 * p.mu);
                if i == j {
                    v += tr * (2.0 * p.lambda);
                }
                dst[(3 * i + j) * np + q] = v;
            }
        }
    }
    out
}

fn energy_of(w: &TensorField, p: &ElasticParams) -> f64 {
    fieldcalc::inner(w, &stiffness(w, p)).unwrap().re
}

/// Preconditioned conjugate gradients for min_ψ ⟨w^b + dψ, A(w^b + dψ)⟩ using only
/// d, its adjoint and the pointwise stiffness; returns the energy of every iterate.
///
/// Each iterate is an explicit competitor, so the sequence is a decreasing
/// family of upper bounds on the minimum.
pub fn cg_energies(w_b: &TensorField, p: &ElasticParams, iters: usize) -> Vec<f64> {
    let grid = *w_b.grid();
    let hess = |x: &TensorField| fieldcalc::d_star(&stiffness(&fieldcalc::d(x).unwrap(), p)).unwrap();
    let precond = |r: &TensorField| fieldcalc::inv_laplace(r, ZeroMode::Project).unwrap().scale(-1.0);
    let mut psi = TensorField::zeros(0, &grid);
    // Residual of H ψ = −d* A w^b.
    let mut r = fieldcalc::d_star(&stiffness(w_b, p)).unwrap().scale(-1.0);
    let mut z = precond(&r);
    let mut dir = z.clone();
    let mut rz = fieldcalc::inner(&r, &z).unwrap().re;
    let rz0 = rz;
    let mut energies = vec![energy_of(w_b, p)];
    for _ in 0..iters {
        let hd = hess(&dir);
        let alpha = rz / fieldcalc::inner(&dir, &hd).unwrap().re;
        psi.axpy(alpha, &dir).unwrap();
        r.axpy(-alpha, &hd).unwrap();
        let w = w_b.add(&fieldcalc::d(&psi).unwrap()).unwrap();
        energies.push(energy_of(&w, p));
        z = precond(&r);
        let rz_new = fieldcalc::inner(&r, &z).unwrap().re;
        if rz_new <= 1e-28 * rz0 {
            break;
        }
        dir = z.add(&dir.scale(rz_new / rz)).unwrap();
        rz = rz_new;
    }
    energies
}
