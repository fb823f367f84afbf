//! Mesoscopic dislocation-line gas.
//!
//! Dislocation lines live on the edges of a finite cubic graph and carry
//! Burgers vectors from a microscopic lattice Γ subject to Kirchhoff's node
//! law. The crate provides:
//!
//! - [`lattice`]: graph geometry, incidence algebra, cycle bases and Γ.
//! - [`currents`]: Γ-valued currents, Kirchhoff validation, polymers.
//! - [`fieldcalc`]: spectral calculus of vector-valued forms on a periodic grid.
//! - [`burgers`]: the smoothed Burgers vector density of a current.
//! - [`elastic`]: the elastic minimizer, its energy and the Gram form.
//! - [`gibbs`]: the Gibbs measure (exact enumeration and Metropolis sampling)
//!   and the Sine-Gordon Gaussian field.
//! - [`cluster`]: Ursell functions, cluster-expansion coefficients and the
//!   Peierls / Kotecký–Preiss certification machinery.
//! - [`dipole`]: free-space kernel quadrature and dipole remainder bounds.

pub mod burgers;
pub mod cluster;
pub mod currents;
pub mod dipole;
pub mod elastic;
mod error;
pub mod fieldcalc;
pub mod gibbs;
pub mod lattice;
pub mod quad;
pub mod report;

pub use error::{Error, Result};

/// A point or vector in ℝ³.
pub type Vec3 = [f64; 3];

pub(crate) fn norm3(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn sub3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
