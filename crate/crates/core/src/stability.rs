//! Discrete stability constants: the largest `λ` with `H u = λ Q u`, where
//! `H` is the broken H² form and `Q` the homogeneous functional.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

use crate::basis::{gauss_rule, Rect, Table1d};
use crate::functional::{Functional, FunctionalConfig, FunctionalError};
use crate::geometry::{CurvilinearPolygon, ElementKind, GeometricMesh, GeometryError, MeshConfig};
use crate::operator::CoefficientField;
use crate::solver::{DofLayout, LayoutMode, SolverError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    /// The functional has a (numerical) null vector on the layout.
    #[error("functional is singular on the layout (smallest generalized eigenvalue {min:.3e})")]
    Singular { min: f64, null_vector: Vec<f64> },
    #[error("broken H² form is not positive definite")]
    Form,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// `Σ_c w_c ∫ D_c φ_m D_c φ_n` over `rect` for the Legendre tensor basis,
/// with `D = [1, ∂_s, ∂_t, ∂_ss, ∂_st, ∂_tt]`.
pub fn sobolev_gram(degree: usize, rect: &Rect, w: [f64; 6]) -> DMatrix<f64> {
    let n = degree + 1;
    let g = gauss_rule(degree + 2).expect("positive order");
    let s: Vec<f64> = g.nodes.iter().map(|&r| rect.s.from_ref(r)).collect();
    let t: Vec<f64> = g.nodes.iter().map(|&r| rect.t.from_ref(r)).collect();
    let ta = Table1d::new(degree, rect.s, &s);
    let tb = Table1d::new(degree, rect.t, &t);
    let area = 0.25 * rect.s.len() * rect.t.len();
    // derivative orders (in s, in t) of each component
    let orders = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)];
    let mut gram = DMatrix::zeros(n * n, n * n);
    let mut vals = DMatrix::zeros(6, n * n);
    for i in 0..s.len() {
        for j in 0..t.len() {
            for (c, &(os, ot)) in orders.iter().enumerate() {
                for a in 0..n {
                    for b in 0..n {
                        vals[(c, a * n + b)] = ta.get(os, i, a) * tb.get(ot, j, b);
                    }
                }
            }
            let wq = g.weights[i] * g.weights[j] * area;
            for (c, &wc) in w.iter().enumerate() {
                if wc != 0.0 {
                    let row = vals.row(c);
                    gram += (wq * wc) * row.transpose() * row;
                }
            }
        }
    }
    gram
}

/// Broken H² form over the layout: full H² norms on every mapped element in
/// its local coordinates plus `|g_k|²` per vertex.
pub fn h2_form(mesh: &GeometricMesh, layout: &DofLayout) -> DMatrix<f64> {
    let n = layout.len();
    let mut h = DMatrix::zeros(n, n);
    let ones = [1.0; 6];
    for (el, f) in mesh.elements.iter().zip(layout.fields()) {
        if f.globals.is_empty() {
            continue;
        }
        let local = match el.kind {
            // each core strip carries 1/I_k of |g_k|²
            ElementKind::Core { vertex, .. } => {
                DMatrix::from_element(1, 1, 1.0 / mesh.sectors[vertex].slices() as f64)
            }
            _ => sobolev_gram(layout.degree, &el.domain.expect("mapped element"), ones),
        };
        let g = f.matrix.transpose() * local * &f.matrix;
        for (i, &gi) in f.globals.iter().enumerate() {
            for (j, &gj) in f.globals.iter().enumerate() {
                h[(gi, gj)] += g[(i, j)];
            }
        }
    }
    0.5 * (&h + h.transpose())
}

/// Largest eigenvalue of `H u = λ Q u`, via the Cholesky factor of `H`.
pub fn stability_constant(h: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64, StabilityError> {
    let n = h.nrows();
    if n == 0 {
        return Err(StabilityError::Form);
    }
    let ch = Cholesky::new(h.clone()).ok_or(StabilityError::Form)?;
    let l = ch.l();
    // C = L⁻¹ Q L⁻ᵀ
    let x = l.solve_lower_triangular(q).ok_or(StabilityError::Form)?;
    let c = l.solve_lower_triangular(&x.transpose()).ok_or(StabilityError::Form)?;
    let c = 0.5 * (&c + c.transpose());
    let ev = c.symmetric_eigenvalues();
    let max = ev.amax();
    let min = ev.min();
    if !(min > 1e-13 * max) {
        let eig = SymmetricEigen::new(c);
        let k = eig.eigenvalues.imin();
        let v = eig.eigenvectors.column(k).into_owned();
        let null = l.transpose().solve_upper_triangular(&v).unwrap_or(v);
        return Err(StabilityError::Singular {
            min,
            null_vector: null.as_slice().to_vec(),
        });
    }
    Ok(1.0 / min)
}

/// Rayleigh quotient `uᵀHu / uᵀQu`.
pub fn rayleigh(h: &DMatrix<f64>, q: &DMatrix<f64>, u: &DVector<f64>) -> f64 {
    (u.transpose() * h * u)[(0, 0)] / (u.transpose() * q * u)[(0, 0)]
}

/// Least-squares line `y = a x + b` with its `R²`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityPoint {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub unknowns: usize,
    pub lambda_max: f64,
}

/// Discretization used at each sweep point.
#[derive(Debug, Clone)]
pub struct ProbeSetup {
    pub polygon: CurvilinearPolygon,
    pub field: Arc<CoefficientField>,
    pub rho: f64,
    pub mu: f64,
    pub mode: LayoutMode,
    pub quad_order: Option<usize>,
}

pub fn probe_point(setup: &ProbeSetup, m: usize, w: usize) -> Result<StabilityPoint, StabilityError> {
    let mesh = GeometricMesh::build(setup.polygon.clone(), &MeshConfig::new(setup.rho, m).with_mu(setup.mu))?;
    let cfg = FunctionalConfig {
        quad_order: setup.quad_order,
        ..FunctionalConfig::new(w)
    };
    let fun = Functional::homogeneous(&mesh, setup.field.clone(), cfg)?;
    let layout = DofLayout::free(&mesh, w, setup.mode)?;
    let q = fun.assemble(&layout)?.q;
    let h = h2_form(&mesh, &layout);
    Ok(StabilityPoint {
        m,
        w,
        unknowns: layout.len(),
        lambda_max: stability_constant(&h, &q)?,
    })
}

/// Sweep summary: spread of `λ/(ln W)²` and the fitted exponent of `λ`
/// against `M` (both need at least three points).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub points: Vec<StabilityPoint>,
    pub ln_w_sq_spread: Option<f64>,
    pub m_exponent: Option<f64>,
}

pub fn ln_w_sq_ratio(p: &StabilityPoint) -> f64 {
    let l = (p.w as f64).ln();
    p.lambda_max / (l * l)
}

pub fn growth_report(points: Vec<StabilityPoint>) -> SweepReport {
    let enough = points.len() >= 3;
    let ratios: Vec<f64> = points.iter().map(ln_w_sq_ratio).collect();
    let spread = enough.then(|| {
        let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        hi / lo
    });
    let distinct_m = points.windows(2).any(|w| w[0].m != w[1].m);
    let exponent = (enough && distinct_m).then(|| {
        let x: Vec<f64> = points.iter().map(|p| (p.m as f64).ln()).collect();
        let y: Vec<f64> = points.iter().map(|p| p.lambda_max.ln()).collect();
        linear_fit(&x, &y).0
    });
    SweepReport {
        points,
        ln_w_sq_spread: spread,
        m_exponent: exponent,
    }
}
