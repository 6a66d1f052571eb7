//! Unknown layouts for the three discrete spaces and dense solves of the
//! normal equations, directly or through the vertex Schur complement.

use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{project_to_degree, Rect, TensorPolynomial};
use crate::expr::ExprError;
use crate::functional::{ProblemData, QuadraticSystem};
use crate::geometry::{dist, BcKind, ElementKind, GeometricMesh, GeometryError, P2};
use crate::stability::sobolev_gram;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("singular system (smallest eigenvalue {min_eig:.3e})")]
    Singular { min_eig: f64 },
    #[error("singular interior block in the Schur path")]
    InteriorSingular,
    #[error("the Schur path needs a vertex-continuous layout, got {0:?}")]
    Mode(LayoutMode),
    #[error("point ({:.6}, {:.6}) is outside the domain", .0[0], .0[1])]
    Outside(P2),
    #[error("{0} vertex values for {1} vertices")]
    VertexCount(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    Nonconforming,
    VertexContinuous,
    /// Element corner values forced to zero.
    Pi0,
}

/// Treatment of the core constant `g_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VertexValue {
    Free,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Free(usize),
    Fixed(f64),
}

/// Element coefficients as `matrix · u[globals] + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    pub globals: Vec<usize>,
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct DofLayout {
    pub mode: LayoutMode,
    pub degree: usize,
    fields: Vec<FieldMap>,
    len: usize,
    vertex: Range<usize>,
    shared: Vec<P2>,
}

/// Per-element coefficients (a single value for core strips).
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub degree: usize,
    pub coeffs: Vec<DVector<f64>>,
}

/// Legendre coefficients of the bilinear hat at corner `c` and of the
/// corner-vanishing interior functions, as columns.
pub fn modified_basis(degree: usize) -> DMatrix<f64> {
    let n = degree + 1;
    let signs = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    let hat = |c: usize| -> [(usize, f64); 4] {
        let (a, b) = signs[c];
        [(0, 0.25), (n, 0.25 * a), (1, 0.25 * b), (n + 1, 0.25 * a * b)]
    };
    let interior: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .filter(|&(a, b)| a >= 2 || b >= 2)
        .collect();
    let mut t = DMatrix::zeros(n * n, 4 + interior.len());
    for c in 0..4 {
        for (idx, v) in hat(c) {
            t[(idx, c)] += v;
        }
    }
    for (col, &(a, b)) in interior.iter().enumerate() {
        let col = col + 4;
        t[(a * n + b, col)] = 1.0;
        for (c, &(sa, sb)) in signs.iter().enumerate() {
            let corner = sa.powi(a as i32) * sb.powi(b as i32);
            for (idx, v) in hat(c) {
                t[(idx, col)] -= corner * v;
            }
        }
    }
    t
}

/// Values for `g_k` fixed from Dirichlet data at vertices touching a
/// Dirichlet arc; free elsewhere.
pub fn dirichlet_vertex_values(mesh: &GeometricMesh, data: &ProblemData) -> Result<Vec<VertexValue>, ExprError> {
    let poly = &mesh.polygon;
    (0..poly.len())
        .map(|k| {
            let arc = [poly.incoming(k), poly.outgoing(k)]
                .into_iter()
                .find(|&a| poly.bc(a) == BcKind::Dirichlet);
            match arc.and_then(|a| data.g0.get(&a)) {
                Some(g) => {
                    let v = poly.vertex(k);
                    Ok(VertexValue::Fixed(g.eval(v[0], v[1])?))
                }
                None => Ok(VertexValue::Free),
            }
        })
        .collect()
}

impl DofLayout {
    /// `gk[k]` says how the core constant at vertex `k` is treated; ignored
    /// in [`LayoutMode::Pi0`], where it is zero.
    pub fn build(
        mesh: &GeometricMesh,
        degree: usize,
        mode: LayoutMode,
        gk: &[VertexValue],
    ) -> Result<DofLayout, SolverError> {
        if !mesh.sectors.is_empty() && gk.len() != mesh.sectors.len() {
            return Err(SolverError::VertexCount(gk.len(), mesh.sectors.len()));
        }
        // no sectors, no core constants
        let gk = if mesh.sectors.is_empty() { &[] } else { gk };
        match mode {
            LayoutMode::Nonconforming => Ok(Self::nonconforming(mesh, degree, gk)),
            _ => Self::constrained(mesh, degree, mode, gk),
        }
    }

    /// Free `g_k` everywhere (the homogeneous form).
    pub fn free(mesh: &GeometricMesh, degree: usize, mode: LayoutMode) -> Result<DofLayout, SolverError> {
        Self::build(mesh, degree, mode, &vec![VertexValue::Free; mesh.sectors.len()])
    }

    fn nonconforming(mesh: &GeometricMesh, degree: usize, gk: &[VertexValue]) -> DofLayout {
        let nc = (degree + 1) * (degree + 1);
        let mut next = 0;
        let mut fields: Vec<Option<FieldMap>> = vec![None; mesh.elements.len()];
        for (id, el) in mesh.elements.iter().enumerate() {
            if !el.is_core() {
                fields[id] = Some(FieldMap {
                    globals: (next..next + nc).collect(),
                    matrix: DMatrix::identity(nc, nc),
                    offset: DVector::zeros(nc),
                });
                next += nc;
            }
        }
        let start = next;
        let slots: Vec<Slot> = gk
            .iter()
            .map(|v| match v {
                VertexValue::Free => {
                    next += 1;
                    Slot::Free(next - 1)
                }
                VertexValue::Fixed(x) => Slot::Fixed(*x),
            })
            .collect();
        for (id, el) in mesh.elements.iter().enumerate() {
            if let ElementKind::Core { vertex, .. } = el.kind {
                fields[id] = Some(scalar_field(slots[vertex]));
            }
        }
        DofLayout {
            mode: LayoutMode::Nonconforming,
            degree,
            fields: fields.into_iter().map(|f| f.expect("every element assigned")).collect(),
            len: next,
            vertex: start..next,
            shared: Vec::new(),
        }
    }

    fn constrained(
        mesh: &GeometricMesh,
        degree: usize,
        mode: LayoutMode,
        gk: &[VertexValue],
    ) -> Result<DofLayout, SolverError> {
        let t = modified_basis(degree);
        let nint = t.ncols() - 4;
        let pi0 = mode == LayoutMode::Pi0;
        let scale = mesh.polygon.vertices().iter().map(|v| v[0].abs().max(v[1].abs())).fold(1.0, f64::max);
        let tol = 1e-9 * scale;

        // vertex unknowns are numbered after all interior blocks; collect
        // them first as provisional ids
        let mut shared: Vec<P2> = Vec::new();
        let mut vid = 0usize;
        let gslots: Vec<Slot> = gk
            .iter()
            .enumerate()
            .map(|(k, v)| match (pi0, v) {
                (true, _) => Slot::Fixed(0.0),
                (false, VertexValue::Fixed(x)) => Slot::Fixed(*x),
                (false, VertexValue::Free) => {
                    shared.push(mesh.sectors[k].apex);
                    vid += 1;
                    Slot::Free(vid - 1)
                }
            })
            .collect();
        let mut positions: Vec<(P2, usize)> = Vec::new();
        let mut corner_slots: Vec<Option<[Slot; 4]>> = Vec::with_capacity(mesh.elements.len());
        for (id, el) in mesh.elements.iter().enumerate() {
            if el.is_core() {
                corner_slots.push(None);
                continue;
            }
            let corners = mesh.corners(id)?;
            let mut s = [Slot::Fixed(0.0); 4];
            for (c, p) in corners.iter().enumerate() {
                if pi0 {
                    continue;
                }
                let on_core = matches!(el.kind, ElementKind::Sector { layer: 1, .. }) && (c == 0 || c == 3);
                s[c] = if on_core {
                    let k = el.vertex().expect("sector element");
                    gslots[k]
                } else if let Some(&(_, i)) = positions.iter().find(|(q, _)| dist(*q, *p) < tol) {
                    Slot::Free(i)
                } else {
                    positions.push((*p, vid));
                    shared.push(*p);
                    vid += 1;
                    Slot::Free(vid - 1)
                };
            }
            corner_slots.push(Some(s));
        }
        let nonempty = mesh.elements.iter().filter(|e| !e.is_core()).count();
        let ninterior = nonempty * nint;
        let mut fields = Vec::with_capacity(mesh.elements.len());
        let mut next = 0;
        for (el, slots) in mesh.elements.iter().zip(&corner_slots) {
            match (el.kind, slots) {
                (ElementKind::Core { vertex, .. }, _) => fields.push(scalar_field(match gslots[vertex] {
                    Slot::Free(i) => Slot::Free(ninterior + i),
                    fixed => fixed,
                })),
                (_, Some(slots)) => {
                    let mut globals: Vec<usize> = (next..next + nint).collect();
                    let mut cols: Vec<usize> = (4..4 + nint).collect();
                    let mut offset = DVector::zeros(t.nrows());
                    for (c, s) in slots.iter().enumerate() {
                        match s {
                            Slot::Free(i) => {
                                globals.push(ninterior + i);
                                cols.push(c);
                            }
                            Slot::Fixed(x) => offset += *x * t.column(c),
                        }
                    }
                    next += nint;
                    fields.push(FieldMap {
                        globals,
                        matrix: t.select_columns(&cols),
                        offset,
                    });
                }
                _ => unreachable!("non-core elements have corner slots"),
            }
        }
        Ok(DofLayout {
            mode,
            degree,
            fields,
            len: ninterior + vid,
            vertex: ninterior..ninterior + vid,
            shared,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn fields(&self) -> &[FieldMap] {
        &self.fields
    }

    /// Unknowns forming the vertex block (shared corner values and free
    /// `g_k`; free `g_k` only in nonconforming mode).
    pub fn vertex_range(&self) -> Range<usize> {
        self.vertex.clone()
    }

    /// Positions of the vertex unknowns in constrained modes (apex for a
    /// free `g_k`).
    pub fn shared_vertices(&self) -> &[P2] {
        &self.shared
    }

    pub fn expand(&self, u: &DVector<f64>) -> Solution {
        let coeffs = self
            .fields
            .iter()
            .map(|f| {
                let sub = DVector::from_iterator(f.globals.len(), f.globals.iter().map(|&g| u[g]));
                &f.matrix * sub + &f.offset
            })
            .collect();
        Solution {
            degree: self.degree,
            coeffs,
        }
    }

    /// Least-squares fit of layout unknowns to given element coefficients.
    pub fn restrict(&self, sol: &Solution) -> DVector<f64> {
        let mut normal = DMatrix::zeros(self.len, self.len);
        let mut rhs = DVector::zeros(self.len);
        for (f, c) in self.fields.iter().zip(&sol.coeffs) {
            let r = c - &f.offset;
            let mtm = f.matrix.transpose() * &f.matrix;
            let mtr = f.matrix.transpose() * r;
            for (i, &gi) in f.globals.iter().enumerate() {
                rhs[gi] += mtr[i];
                for (j, &gj) in f.globals.iter().enumerate() {
                    normal[(gi, gj)] += mtm[(i, j)];
                }
            }
        }
        solve_spd(&normal, &rhs).unwrap_or_else(|_| DVector::zeros(self.len))
    }
}

fn scalar_field(s: Slot) -> FieldMap {
    match s {
        Slot::Free(i) => FieldMap {
            globals: vec![i],
            matrix: DMatrix::identity(1, 1),
            offset: DVector::zeros(1),
        },
        Slot::Fixed(x) => FieldMap {
            globals: Vec::new(),
            matrix: DMatrix::zeros(1, 0),
            offset: DVector::from_element(1, x),
        },
    }
}

impl Solution {
    pub fn zeros(degree: usize, mesh: &GeometricMesh) -> Solution {
        let n = (degree + 1) * (degree + 1);
        Solution {
            degree,
            coeffs: mesh
                .elements
                .iter()
                .map(|e| DVector::zeros(if e.is_core() { 1 } else { n }))
                .collect(),
        }
    }

    /// Per-element L² projection of a physical function; core strips take
    /// its value at the apex.
    pub fn project(
        mesh: &GeometricMesh,
        degree: usize,
        f: impl Fn(P2) -> f64 + Sync,
    ) -> Result<Solution, SolverError> {
        let coeffs = mesh
            .elements
            .iter()
            .map(|el| match (&el.map, el.domain, el.vertex()) {
                (Some(map), Some(dom), _) => {
                    let failed = std::cell::RefCell::new(None);
                    let p = project_to_degree(
                        |s, t| match map.jet(s, t) {
                            Ok(j) => f(j.x),
                            Err(e) => {
                                failed.borrow_mut().get_or_insert(e);
                                0.0
                            }
                        },
                        degree,
                        dom,
                        degree + 3,
                    )
                    .expect("positive order");
                    failed.into_inner().map_or(Ok(DVector::from_column_slice(p.coeffs())), |e| Err(e.into()))
                }
                (_, _, Some(k)) => Ok(DVector::from_element(1, f(mesh.sectors[k].apex))),
                _ => unreachable!("elements are mapped or core strips"),
            })
            .collect::<Result<_, SolverError>>()?;
        Ok(Solution { degree, coeffs })
    }

    /// Element polynomial, `None` for core strips.
    pub fn polynomial(&self, mesh: &GeometricMesh, id: usize) -> Option<TensorPolynomial> {
        let dom: Rect = mesh.elements[id].domain?;
        TensorPolynomial::new(self.degree, dom, self.coeffs[id].as_slice().to_vec()).ok()
    }

    /// Core constant of a core strip.
    pub fn core_value(&self, mesh: &GeometricMesh, id: usize) -> Option<f64> {
        mesh.elements[id].is_core().then(|| self.coeffs[id][0])
    }
}

fn equilibrate(q: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        q.nrows(),
        q.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 }),
    )
}

fn min_eigenvalue(q: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(q.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

type Apply = Box<dyn Fn(&DVector<f64>) -> DVector<f64>>;

/// Jacobi-scaled Cholesky solve with two steps of refinement.
fn solve_spd(q: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
    let n = q.nrows();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let d = equilibrate(q);
    let scaled = DMatrix::from_fn(n, n, |i, j| d[i] * q[(i, j)] * d[j]);
    let solve: Apply = match Cholesky::new(scaled.clone()) {
        Some(ch) => Box::new(move |r: &DVector<f64>| ch.solve(r)),
        None => {
            let eig = SymmetricEigen::new(scaled);
            let max = eig.eigenvalues.amax();
            let min = eig.eigenvalues.min();
            if !(min > 1e-14 * max) {
                return Err(SolverError::Singular { min_eig: min_eigenvalue(q) });
            }
            Box::new(move |r: &DVector<f64>| {
                let y = eig.eigenvectors.transpose() * r;
                let y = y.component_div(&eig.eigenvalues);
                &eig.eigenvectors * y
            })
        }
    };
    let sb = b.component_mul(&d);
    let mut y = solve(&sb);
    for _ in 0..2 {
        let x = y.component_mul(&d);
        let r = (b - q * &x).component_mul(&d);
        y += solve(&r);
    }
    let x = y.component_mul(&d);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::Singular { min_eig: min_eigenvalue(q) });
    }
    Ok(x)
}

/// Minimizer of `uᵀQu - 2bᵀu + d`.
pub fn solve_least_squares(sys: &QuadraticSystem) -> Result<DVector<f64>, SolverError> {
    if sys.b.iter().all(|&v| v == 0.0) {
        return Ok(DVector::zeros(sys.len()));
    }
    solve_spd(&sys.q, &sys.b)
}

/// Relative residual `‖Qu - b‖ / ‖b‖`.
pub fn relative_residual(sys: &QuadraticSystem, u: &DVector<f64>) -> f64 {
    let nb = sys.b.norm();
    let r = (&sys.q * u - &sys.b).norm();
    if nb == 0.0 {
        r
    } else {
        r / nb
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchurInfo {
    pub dimension: usize,
    pub interior: usize,
    /// Smallest eigenvalue of the Schur complement.
    pub min_eig: f64,
}

/// Eliminates the interior unknowns and solves on the vertex block.
pub fn solve_schur(sys: &QuadraticSystem, layout: &DofLayout) -> Result<(DVector<f64>, SchurInfo), SolverError> {
    if layout.mode == LayoutMode::Nonconforming {
        return Err(SolverError::Mode(layout.mode));
    }
    let v = layout.vertex_range();
    let ni = v.start;
    let nv = v.len();
    let q = &sys.q;
    let qii = q.view((0, 0), (ni, ni)).into_owned();
    let qiv = q.view((0, ni), (ni, nv)).into_owned();
    let qvv = q.view((ni, ni), (nv, nv)).into_owned();
    let bi = sys.b.rows(0, ni).into_owned();
    let bv = sys.b.rows(ni, nv).into_owned();
    let d = equilibrate(&qii);
    let scaled = DMatrix::from_fn(ni, ni, |i, j| d[i] * qii[(i, j)] * d[j]);
    let ch: Cholesky<f64, Dyn> = Cholesky::new(scaled).ok_or(SolverError::InteriorSingular)?;
    // Q_ii⁻¹ m = D (D Q_ii D)⁻¹ D m
    let solve_i = |m: &DMatrix<f64>| -> DMatrix<f64> {
        let mut s = m.clone();
        for (i, mut row) in s.row_iter_mut().enumerate() {
            row *= d[i];
        }
        let mut x = ch.solve(&s);
        for (i, mut row) in x.row_iter_mut().enumerate() {
            row *= d[i];
        }
        x
    };
    let x = solve_i(&qiv);
    let bi_m = DMatrix::from_column_slice(ni, 1, bi.as_slice());
    let y = solve_i(&bi_m).column(0).into_owned();
    let s = &qvv - qiv.transpose() * &x;
    let s = 0.5 * (&s + s.transpose());
    let rhs = &bv - qiv.transpose() * &y;
    let min_eig = if nv > 0 { min_eigenvalue(&s) } else { f64::INFINITY };
    let uv = solve_spd(&s, &rhs)?;
    let ui = &y - &x * &uv;
    let mut u = DVector::zeros(ni + nv);
    u.rows_mut(0, ni).copy_from(&ui);
    u.rows_mut(ni, nv).copy_from(&uv);
    Ok((
        u,
        SchurInfo {
            dimension: nv,
            interior: ni,
            min_eig,
        },
    ))
}

/// One-sided values of a solution at a physical point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointValue {
    pub point: P2,
    /// `(element, value)` for every element whose closure holds the point.
    pub values: Vec<(usize, f64)>,
    /// Largest difference between one-sided values.
    pub spread: f64,
}

pub fn evaluate_solution(mesh: &GeometricMesh, sol: &Solution, points: &[P2]) -> Result<Vec<PointValue>, SolverError> {
    points
        .iter()
        .map(|&x| {
            let locs = mesh.locate(x);
            if locs.is_empty() {
                return Err(SolverError::Outside(x));
            }
            let values: Vec<(usize, f64)> = locs
                .iter()
                .map(|l| {
                    let v = match sol.core_value(mesh, l.element) {
                        Some(g) => g,
                        None => sol.polynomial(mesh, l.element).expect("mapped element").eval(l.s, l.t),
                    };
                    (l.element, v)
                })
                .collect();
            let lo = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
            let hi = values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
            Ok(PointValue {
                point: x,
                values,
                spread: hi - lo,
            })
        })
        .collect()
}

/// Largest `‖u‖²_0 / (|u|²_1 + |u|²_2)` over random corner-vanishing
/// polynomials on the unit square.
pub fn poincare_ratio(degree: usize, samples: usize, rng: &mut impl Rng) -> f64 {
    let t = modified_basis(degree);
    let interior = t.columns(4, t.ncols() - 4).into_owned();
    let l2 = sobolev_gram(degree, &Rect::UNIT, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let semi = sobolev_gram(degree, &Rect::UNIT, [0.0, 1.0, 1.0, 1.0, 2.0, 1.0]);
    let a = interior.transpose() * l2 * &interior;
    let b = interior.transpose() * semi * &interior;
    (0..samples)
        .map(|_| {
            let c = DVector::from_fn(interior.ncols(), |_, _| rng.gen_range(-1.0..1.0));
            (c.transpose() * &a * &c)[(0, 0)] / (c.transpose() * &b * &c)[(0, 0)]
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::fixtures::{lshape, mesh, square};
    use crate::functional::{Functional, FunctionalConfig};
    use crate::operator::CoefficientField;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn data(f: &str, g0: &[(usize, &str)], g1: &[(usize, &str)]) -> ProblemData {
        ProblemData {
            f: Expr::parse(f).unwrap(),
            g0: g0.iter().map(|(a, e)| (*a, Expr::parse(e).unwrap())).collect(),
            g1: g1.iter().map(|(a, e)| (*a, Expr::parse(e).unwrap())).collect(),
        }
    }

    fn system(m: &GeometricMesh, d: &ProblemData, w: usize, mode: LayoutMode) -> (QuadraticSystem, DofLayout) {
        let fun = Functional::build(m, Arc::new(CoefficientField::laplacian(0.0)), d, FunctionalConfig::new(w)).unwrap();
        let layout = DofLayout::build(m, w, mode, &dirichlet_vertex_values(m, d).unwrap()).unwrap();
        (fun.assemble(&layout).unwrap(), layout)
    }

    /// Independent count: blocks, plus distinct corner positions (layer-1
    /// core corners excluded), plus free `g_k`.
    fn vc_count(m: &GeometricMesh, w: usize, free_gk: usize) -> usize {
        let n = (w + 1) * (w + 1);
        let mut keys: Vec<(i64, i64)> = Vec::new();
        let mut blocks = 0;
        for (id, el) in m.elements.iter().enumerate() {
            if el.is_core() {
                continue;
            }
            blocks += 1;
            let inner = matches!(el.kind, ElementKind::Sector { layer: 1, .. });
            for (c, p) in m.corners(id).unwrap().iter().enumerate() {
                if inner && (c == 0 || c == 3) {
                    continue;
                }
                keys.push(((p[0] * 1e7).round() as i64, (p[1] * 1e7).round() as i64));
            }
        }
        keys.sort();
        keys.dedup();
        blocks * (n - 4) + keys.len() + free_gk
    }

    #[test]
    fn unknown_counts() {
        let one = GeometricMesh::single_element(square(&[0, 1, 2, 3], &[])).unwrap();
        assert_eq!(DofLayout::build(&one, 2, LayoutMode::Nonconforming, &[]).unwrap().len(), 9);
        let m = mesh(square(&[0, 1, 2, 3], &[]), 2);
        assert_eq!(m.sectors.len(), 4);
        let nc = DofLayout::free(&m, 2, LayoutMode::Nonconforming).unwrap();
        assert_eq!(nc.len(), 85);
        assert_eq!(nc.vertex_range(), 81..85);
        for w in [2, 3, 5] {
            for m in [mesh(square(&[0, 1, 2, 3], &[]), 3), mesh(lshape(&[2, 3, 4, 5], &[0, 1]), 2)] {
                let vc = DofLayout::free(&m, w, LayoutMode::VertexContinuous).unwrap();
                assert_eq!(vc.len(), vc_count(&m, w, m.sectors.len()));
                assert_eq!(vc.vertex_range().len(), vc.shared_vertices().len());
                let pi0 = DofLayout::free(&m, w, LayoutMode::Pi0).unwrap();
                assert_eq!(pi0.len(), pi0.vertex_range().start);
                assert_eq!(pi0.len(), vc.vertex_range().start);
            }
        }
        assert!(matches!(
            DofLayout::build(&m, 2, LayoutMode::Nonconforming, &[VertexValue::Free]),
            Err(SolverError::VertexCount(1, 4))
        ));
    }

    #[test]
    fn modified_basis_corner_values() {
        for w in 1..7 {
            let t = modified_basis(w);
            let corners = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
            for col in 0..t.ncols() {
                let p = TensorPolynomial::new(w, Rect::UNIT, t.column(col).iter().copied().collect()).unwrap();
                for (c, x) in corners.iter().enumerate() {
                    let want = if col == c { 1.0 } else { 0.0 };
                    assert!((p.eval(x[0], x[1]) - want).abs() < 1e-13, "w={w} col={col} c={c}");
                }
            }
            // a basis: full column rank
            assert_eq!(t.ncols(), (w + 1) * (w + 1));
            assert!(t.clone().svd(false, false).singular_values.min() > 1e-8);
        }
    }

    #[test]
    fn zero_load_gives_zero() {
        let m = mesh(square(&[0, 1, 2, 3], &[]), 2);
        let (sys, layout) = system(&m, &ProblemData::zero(&m), 2, LayoutMode::Nonconforming);
        let u = solve_least_squares(&sys).unwrap();
        assert_eq!(u.len(), layout.len());
        assert!(u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn minimizer_is_scale_invariant_and_accurate() {
        let m = mesh(square(&[0, 1, 2, 3], &[]), 2);
        let g = "sin(x)*exp(y)";
        let d = data("0", &[(0, g), (1, g), (2, g), (3, g)], &[]);
        let (sys, _) = system(&m, &d, 4, LayoutMode::Nonconforming);
        let u = solve_least_squares(&sys).unwrap();
        assert!(relative_residual(&sys, &u) < 1e-10);
        let scaled = QuadraticSystem {
            q: 10.0 * &sys.q,
            b: 10.0 * &sys.b,
            d: 10.0 * sys.d,
        };
        let v = solve_least_squares(&scaled).unwrap();
        assert!((&u - &v).amax() <= 1e-12 * u.amax().max(1.0));
    }

    #[test]
    fn singular_system_is_reported() {
        let sys = QuadraticSystem {
            q: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            b: DVector::from_vec(vec![1.0, 0.0]),
            d: 0.0,
        };
        assert!(matches!(solve_least_squares(&sys), Err(SolverError::Singular { .. })));
    }

    fn assert_close(a: &DVector<f64>, b: &DVector<f64>, rel: f64) {
        assert!((a - b).amax() <= rel * a.amax().max(b.amax()), "{}", (a - b).amax());
    }

    #[test]
    fn schur_matches_direct() {
        let m = mesh(square(&[0, 1, 2, 3], &[]), 2);
        let g = "x*y + exp(x)";
        let d = data("-exp(x)", &[(0, g), (1, g), (2, g), (3, g)], &[]);
        let (sys, layout) = system(&m, &d, 3, LayoutMode::VertexContinuous);
        let direct = solve_least_squares(&sys).unwrap();
        let (schur, info) = solve_schur(&sys, &layout).unwrap();
        assert_close(&direct, &schur, 1e-9);
        assert_eq!(info.dimension, layout.shared_vertices().len());
        let nc = DofLayout::free(&m, 3, LayoutMode::Nonconforming).unwrap();
        assert!(matches!(solve_schur(&sys, &nc), Err(SolverError::Mode(_))));
    }

    #[test]
    fn schur_on_mixed_square() {
        let m = mesh(square(&[0, 1], &[2, 3]), 2);
        let g = "x*y + exp(x)";
        // ∂u/∂n on x = 1 is y + e, on y = 1 it is x
        let d = data("-exp(x)", &[(0, g), (1, g)], &[(2, "y + exp(1)"), (3, "x")]);
        let (sys, layout) = system(&m, &d, 3, LayoutMode::VertexContinuous);
        let (schur, info) = solve_schur(&sys, &layout).unwrap();
        assert_close(&solve_least_squares(&sys).unwrap(), &schur, 1e-9);
        // the Neumann-Neumann vertex keeps its g_k in the vertex block
        let free_gk = dirichlet_vertex_values(&m, &d).unwrap().iter().filter(|v| **v == VertexValue::Free).count();
        assert_eq!(free_gk, 1);
        assert_eq!(info.dimension, vc_count(&m, 3, free_gk) - info.interior);
        assert!(info.min_eig > 0.0);
    }

    #[test]
    fn schur_recovers_a_polynomial() {
        let one = GeometricMesh::single_element(square(&[0, 1], &[2, 3])).unwrap();
        let g = "x^2 + y^2";
        let d = data("-4", &[(0, g), (1, g)], &[(2, "2"), (3, "2")]);
        let (sys, layout) = system(&one, &d, 3, LayoutMode::VertexContinuous);
        let (u, info) = solve_schur(&sys, &layout).unwrap();
        assert_eq!(info.dimension, 4);
        let exact = Solution::project(&one, 3, |x| x[0] * x[0] + x[1] * x[1]).unwrap();
        assert!((&layout.expand(&u).coeffs[0] - &exact.coeffs[0]).amax() < 1e-8);
    }

    #[test]
    fn point_values() {
        let m = mesh(lshape(&[2, 3, 4, 5], &[0, 1]), 2);
        let one = Solution::project(&m, 3, |_| 1.0).unwrap();
        let pts = [[0.3, 0.2], [-0.5, 0.5], [-0.9, -0.9], [0.01, 0.001]];
        for pv in evaluate_solution(&m, &one, &pts).unwrap() {
            assert!(pv.values.iter().all(|v| (v.1 - 1.0).abs() < 1e-12), "{pv:?}");
        }
        assert!(matches!(
            evaluate_solution(&m, &one, &[[5.0, 5.0]]),
            Err(SolverError::Outside(_))
        ));
        // layer 1 reports the core constant
        let layout = DofLayout::free(&m, 3, LayoutMode::VertexContinuous).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = DVector::from_fn(layout.len(), |_, _| rng.gen_range(-1.0..1.0));
        let sol = layout.expand(&u);
        let apex = m.sectors[0].apex;
        let near = [apex[0] + 1e-3 * m.sectors[0].rho, apex[1] + 1e-4];
        let core = m
            .elements
            .iter()
            .enumerate()
            .find(|(_, e)| matches!(e.kind, ElementKind::Core { vertex: 0, .. }))
            .map(|(id, _)| id)
            .unwrap();
        let pv = &evaluate_solution(&m, &sol, &[near]).unwrap()[0];
        assert!(pv.values.iter().all(|&(_, v)| v == sol.coeffs[core][0]));
        // corners agree in vertex-continuous mode
        let corners: Vec<P2> = (0..m.elements.len())
            .filter(|&id| !m.elements[id].is_core())
            .flat_map(|id| m.corners(id).unwrap())
            .collect();
        for pv in evaluate_solution(&m, &sol, &corners).unwrap() {
            assert!(pv.spread < 1e-12, "{pv:?}");
        }
    }

    #[test]
    fn poincare_ratio_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let ratios: Vec<f64> = (2..=8).map(|w| poincare_ratio(w, 200, &mut rng)).collect();
        assert!(ratios.iter().all(|&r| r > 0.0 && r <= 10.0), "{ratios:?}");
    }

    #[test]
    fn restrict_inverts_expand() {
        let m = mesh(square(&[0, 1], &[2, 3]), 2);
        let layout = DofLayout::free(&m, 3, LayoutMode::VertexContinuous).unwrap();
        let u = DVector::from_fn(layout.len(), |i, _| (i as f64 * 0.37).sin());
        assert_close(&layout.restrict(&layout.expand(&u)), &u, 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn layouts_expand_linearly(w in 2usize..5, mode in 0usize..3, seed in any::<u64>()) {
            let mode = [LayoutMode::Nonconforming, LayoutMode::VertexContinuous, LayoutMode::Pi0][mode];
            let m = mesh(square(&[0, 1], &[2, 3]), 2);
            let layout = DofLayout::free(&m, w, mode).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = DVector::from_fn(layout.len(), |_, _| rng.gen_range(-1.0..1.0));
            let v = DVector::from_fn(layout.len(), |_, _| rng.gen_range(-1.0..1.0));
            let a = layout.expand(&(&u + 2.0 * &v));
            let (eu, ev) = (layout.expand(&u), layout.expand(&v));
            for i in 0..a.coeffs.len() {
                prop_assert!((&a.coeffs[i] - &eu.coeffs[i] - 2.0 * &ev.coeffs[i]).amax() < 1e-12);
            }
            // π_0 fields vanish at every corner
            if mode == LayoutMode::Pi0 {
                for (id, el) in m.elements.iter().enumerate() {
                    if let Some(p) = eu.polynomial(&m, id) {
                        let d = el.domain.unwrap();
                        for (s, t) in [(d.s.a, d.t.a), (d.s.b, d.t.a), (d.s.b, d.t.b), (d.s.a, d.t.b)] {
                            prop_assert!(p.eval(s, t).abs() < 1e-12);
                        }
                    } else {
                        prop_assert_eq!(eu.coeffs[id][0], 0.0);
                    }
                }
            }
        }
    }
}
