//! The least-squares functional: PDE residuals, inter-element jumps in L²
//! and H^{1/2}, boundary residuals and the sector/outer coordinate bridge.
//!
//! Every term is stored as a sampled linear residual `r = Σ_e A_e x_e - g`
//! together with a PSD kernel `K`, so that its value is `rᵀ K r`. Assembly
//! and evaluation both reduce over the same list of terms.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::basis::{gauss_rule, gll_rule, legendre, legendre_derivs, Rect, Side, Table1d};
use crate::expr::{Expr, ExprError};
use crate::geometry::{
    BcKind, CurvilinearPolygon, EdgeKind, Element, ElementKind, ElementMap, GeometricMesh, GeometryError, SideRef, P2,
};
use crate::operator::{side_frame, CoefficientField, OperatorError, TraceKind, TraceOperator, TransformedOperator};
use crate::solver::{DofLayout, Solution};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FunctionalError {
    #[error("missing {kind} data for arc {arc}")]
    MissingData { arc: usize, kind: &'static str },
    #[error("layout does not match the mesh: {0}")]
    Layout(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Right-hand sides: `f` in the domain, `g0` on Dirichlet arcs and `g1` on
/// Neumann arcs (keys are 0-based arc indices).
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemData {
    pub f: Expr,
    pub g0: BTreeMap<usize, Expr>,
    pub g1: BTreeMap<usize, Expr>,
}

impl ProblemData {
    /// All data identically zero on every arc of `mesh`.
    pub fn zero(mesh: &GeometricMesh) -> ProblemData {
        let mut d = ProblemData {
            f: Expr::num(0.0),
            g0: BTreeMap::new(),
            g1: BTreeMap::new(),
        };
        for arc in 0..mesh.polygon.len() {
            match mesh.polygon.bc(arc) {
                BcKind::Dirichlet => d.g0.insert(arc, Expr::num(0.0)),
                BcKind::Neumann => d.g1.insert(arc, Expr::num(0.0)),
            };
        }
        d
    }

    pub fn check(&self, polygon: &CurvilinearPolygon) -> Result<(), FunctionalError> {
        for arc in 0..polygon.len() {
            let (map, kind) = match polygon.bc(arc) {
                BcKind::Dirichlet => (&self.g0, "Dirichlet"),
                BcKind::Neumann => (&self.g1, "Neumann"),
            };
            if !map.contains_key(&arc) {
                return Err(FunctionalError::MissingData { arc: arc + 1, kind });
            }
        }
        Ok(())
    }
}

/// Sobolev–Slobodeckij norm on `(0, 1)` for polynomials interpolated at
/// `q + 1` Gauss–Lobatto nodes.
///
/// The difference quotient `(w(x) - w(y)) / (x - y)` of a polynomial is a
/// polynomial in `(x, y)`, so the double integral is evaluated exactly by a
/// tensor Gauss rule, with the diagonal filled in by `w'(x)`.
#[derive(Debug, Clone)]
pub struct HalfNormEvaluator {
    nodes: Vec<f64>,
    mass: DMatrix<f64>,
    semi: DMatrix<f64>,
}

impl HalfNormEvaluator {
    pub fn new(q: usize) -> HalfNormEvaluator {
        let q = q.max(1);
        let gll = gll_rule(q).expect("q >= 1");
        let n = q + 1;
        let vander = DMatrix::from_fn(n, n, |i, k| legendre(q, gll.nodes[i])[k]);
        // ℓ_i(r) = Σ_k lag[(k, i)] P_k(r)
        let lag = vander.try_inverse().expect("GLL Vandermonde is invertible");
        let g = gauss_rule(n).expect("n >= 1");
        let pts: Vec<f64> = g.nodes.iter().map(|r| 0.5 * (r + 1.0)).collect();
        let w: Vec<f64> = g.weights.iter().map(|w| 0.5 * w).collect();
        let mut val = DMatrix::zeros(n, n);
        let mut der = DMatrix::zeros(n, n);
        for (a, &r) in g.nodes.iter().enumerate() {
            let [p, d, _] = legendre_derivs(q, r);
            for i in 0..n {
                val[(a, i)] = (0..n).map(|k| lag[(k, i)] * p[k]).sum::<f64>();
                der[(a, i)] = 2.0 * (0..n).map(|k| lag[(k, i)] * d[k]).sum::<f64>();
            }
        }
        let mut mass = DMatrix::zeros(n, n);
        for a in 0..n {
            let row = val.row(a);
            mass += w[a] * row.transpose() * row;
        }
        let mut semi = DMatrix::zeros(n, n);
        let mut quot = DVector::zeros(n);
        for a in 0..n {
            for b in 0..n {
                for i in 0..n {
                    quot[i] = if a == b {
                        der[(a, i)]
                    } else {
                        (val[(a, i)] - val[(b, i)]) / (pts[a] - pts[b])
                    };
                }
                semi += (w[a] * w[b]) * &quot * quot.transpose();
            }
        }
        HalfNormEvaluator {
            nodes: gll.nodes.iter().map(|r| 0.5 * (r + 1.0)).collect(),
            mass,
            semi,
        }
    }

    /// Sample points in `[0, 1]`.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Kernel of `h‖w‖²_0 + |w|²_{1/2}` (or only the L² part) for an edge of
    /// parameter length `h`.
    pub fn kernel(&self, h: f64, semi: bool) -> DMatrix<f64> {
        if semi {
            h * &self.mass + &self.semi
        } else {
            h * &self.mass
        }
    }

    /// `‖w‖²_{0,(0,1)} + |w|²_{1/2,(0,1)}` from values at [`Self::nodes`].
    pub fn half_norm_sq(&self, values: &[f64]) -> f64 {
        let v = DVector::from_column_slice(values);
        (v.transpose() * (&self.mass + &self.semi) * &v)[(0, 0)]
    }

    pub fn seminorm_sq(&self, values: &[f64]) -> f64 {
        let v = DVector::from_column_slice(values);
        (v.transpose() * &self.semi * &v)[(0, 0)]
    }
}

/// The ten families of terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    SectorPde,
    SectorJump,
    SectorDirichlet,
    SectorNeumann,
    InterfaceBridge,
    OuterPde,
    OuterJump,
    OuterDirichlet,
    OuterNeumann,
    VertexConstant,
}

impl Family {
    pub const ALL: [Family; 10] = [
        Family::SectorPde,
        Family::SectorJump,
        Family::SectorDirichlet,
        Family::SectorNeumann,
        Family::InterfaceBridge,
        Family::OuterPde,
        Family::OuterJump,
        Family::OuterDirichlet,
        Family::OuterNeumann,
        Family::VertexConstant,
    ];
}

/// What a term measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// `‖𝔏^a u - f‖²` over an element.
    Residual,
    /// L² norm of a value jump or residual.
    Value,
    /// H^{1/2} norm of the first local (or `x`) derivative jump.
    DerivS,
    /// H^{1/2} norm of the second local (or `y`) derivative jump.
    DerivT,
    /// H^{1/2} norm of the tangential derivative residual.
    Tangential,
    /// H^{1/2} norm of the conormal derivative residual.
    Conormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Element(usize),
    Edge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Item {
    pub family: Family,
    pub site: Site,
    pub component: Component,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionalBreakdown {
    pub items: Vec<Item>,
    pub total: f64,
}

impl FunctionalBreakdown {
    pub fn family_total(&self, f: Family) -> f64 {
        self.items.iter().filter(|i| i.family == f).map(|i| i.value).sum()
    }

    pub fn count(&self, f: Family) -> usize {
        self.items.iter().filter(|i| i.family == f).count()
    }

    pub fn by_family(&self) -> BTreeMap<Family, f64> {
        let mut m = BTreeMap::new();
        for i in &self.items {
            *m.entry(i.family).or_insert(0.0) += i.value;
        }
        m
    }
}

/// `uᵀQu - 2bᵀu + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSystem {
    pub q: DMatrix<f64>,
    pub b: DVector<f64>,
    pub d: f64,
}

impl QuadraticSystem {
    pub fn value(&self, u: &DVector<f64>) -> f64 {
        (u.transpose() * &self.q * u)[(0, 0)] - 2.0 * self.b.dot(u) + self.d
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }
}

#[derive(Debug, Clone)]
enum Kernel {
    Diag(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl Kernel {
    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Kernel::Diag(w) => {
                let mut out = m.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= w[i];
                }
                out
            }
            Kernel::Dense(k) => k * m,
        }
    }

    fn quad(&self, r: &DVector<f64>) -> f64 {
        match self {
            Kernel::Diag(w) => r.iter().zip(w.iter()).map(|(a, b)| a * a * b).sum(),
            Kernel::Dense(k) => (r.transpose() * k * r)[(0, 0)],
        }
    }
}

#[derive(Debug, Clone)]
struct Term {
    family: Family,
    site: Site,
    component: Component,
    /// `(element, rows)`; each block multiplies that element's coefficients.
    blocks: Vec<(usize, DMatrix<f64>)>,
    data: DVector<f64>,
    kernel: Kernel,
}

impl Term {
    fn residual(&self, sol: &Solution) -> DVector<f64> {
        let mut r = -&self.data;
        for (e, rows) in &self.blocks {
            r += rows * &sol.coeffs[*e];
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FunctionalConfig {
    pub degree: usize,
    /// Gauss points per direction for element terms; defaults to `2W + 2`.
    pub quad_order: Option<usize>,
    /// Use degree-`W` projected coefficients (the `(·)^a` operators).
    pub approximate: bool,
}

impl FunctionalConfig {
    pub fn new(degree: usize) -> Self {
        FunctionalConfig {
            degree,
            quad_order: None,
            approximate: true,
        }
    }

    fn element_points(&self) -> usize {
        self.quad_order.unwrap_or(2 * self.degree + 2).max(self.degree + 1)
    }

    fn edge_order(&self) -> usize {
        self.quad_order.unwrap_or(0).max(2 * self.degree + 2)
    }
}

/// All terms of the functional for one mesh, operator and data set.
#[derive(Debug, Clone)]
pub struct Functional {
    pub config: FunctionalConfig,
    terms: Vec<Term>,
    sizes: Vec<usize>,
}

struct Ctx<'a> {
    mesh: &'a GeometricMesh,
    field: Arc<CoefficientField>,
    data: &'a ProblemData,
    grads0: BTreeMap<usize, [Expr; 2]>,
    cfg: FunctionalConfig,
    half: HalfNormEvaluator,
}

fn eval_at(e: &Expr, x: P2) -> Result<f64, ExprError> {
    e.eval(x[0], x[1])
}

/// Rows of `c_v·w + c_s·w_s + c_t·w_t` along a side, one per parameter.
fn side_rows(rect: &Rect, degree: usize, side: Side, params: &[f64], weights: &[[f64; 3]]) -> DMatrix<f64> {
    let n = degree + 1;
    let pts: Vec<(f64, f64)> = params.iter().map(|&p| side.point(rect, p)).collect();
    let ss: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ts: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let ta = Table1d::new(degree, rect.s, &ss);
    let tb = Table1d::new(degree, rect.t, &ts);
    DMatrix::from_fn(params.len(), n * n, |i, m| {
        let (a, b) = (m / n, m % n);
        let [cv, cs, ct] = weights[i];
        cv * ta.p[i][a] * tb.p[i][b] + cs * ta.d1[i][a] * tb.p[i][b] + ct * ta.p[i][a] * tb.d1[i][b]
    })
}

impl Ctx<'_> {
    fn degree(&self) -> usize {
        self.cfg.degree
    }

    fn element(&self, id: usize) -> &Element {
        &self.mesh.elements[id]
    }

    fn rect(&self, r: SideRef) -> Rect {
        self.element(r.element).domain.expect("mapped element")
    }

    fn map(&self, r: SideRef) -> ElementMap {
        self.element(r.element).map.clone().expect("mapped element")
    }

    /// Side parameters for normalized positions.
    fn params(&self, r: SideRef, lams: &[f64]) -> Vec<f64> {
        let iv = r.side.param_interval(&self.rect(r));
        lams.iter().map(|l| iv.a + l * iv.len()).collect()
    }

    fn flipped(&self, reversed: bool) -> Vec<f64> {
        self.half
            .nodes()
            .iter()
            .map(|&l| if reversed { 1.0 - l } else { l })
            .collect()
    }

    fn plain_rows(&self, r: SideRef, lams: &[f64], w: [f64; 3]) -> DMatrix<f64> {
        let p = self.params(r, lams);
        side_rows(&self.rect(r), self.degree(), r.side, &p, &vec![w; p.len()])
    }

    fn trace_rows(&self, r: SideRef, lams: &[f64], kind: TraceKind) -> Result<DMatrix<f64>, FunctionalError> {
        let mut tr = TraceOperator::new(self.field.clone(), self.map(r), self.rect(r), r.side, kind);
        if self.cfg.approximate {
            tr = tr.approximate(self.degree())?;
        }
        let p = self.params(r, lams);
        let w = p
            .iter()
            .map(|&l| tr.weights(l).map(|c| [0.0, c[0], c[1]]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(side_rows(&self.rect(r), self.degree(), r.side, &p, &w))
    }

    fn core_rows(&self, n: usize, v: f64) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, v)
    }

    fn edge_term(
        &self,
        family: Family,
        edge: usize,
        component: Component,
        blocks: Vec<(usize, DMatrix<f64>)>,
        data: DVector<f64>,
        h: f64,
    ) -> Term {
        let semi = component != Component::Value;
        Term {
            family,
            site: Site::Edge(edge),
            component,
            blocks,
            data,
            kernel: Kernel::Dense(self.half.kernel(h, semi)),
        }
    }

    fn element_terms(&self, id: usize) -> Result<Vec<Term>, FunctionalError> {
        let el = self.element(id);
        let family = match el.kind {
            ElementKind::Core { .. } => return Ok(Vec::new()),
            ElementKind::Sector { .. } => Family::SectorPde,
            ElementKind::Outer { .. } => Family::OuterPde,
        };
        let mut op = TransformedOperator::for_element(self.field.clone(), el, id)?;
        if self.cfg.approximate {
            op = op.approximate(self.degree())?;
        }
        let rect = op.domain;
        let g = gauss_rule(self.cfg.element_points()).expect("positive order");
        let s: Vec<f64> = g.nodes.iter().map(|&r| rect.s.from_ref(r)).collect();
        let t: Vec<f64> = g.nodes.iter().map(|&r| rect.t.from_ref(r)).collect();
        let ta = Table1d::new(self.degree(), rect.s, &s);
        let tb = Table1d::new(self.degree(), rect.t, &t);
        let nq = s.len();
        let n = self.degree() + 1;
        let area = 0.25 * rect.s.len() * rect.t.len();
        let mut rows = DMatrix::zeros(nq * nq, n * n);
        let mut data = DVector::zeros(nq * nq);
        let mut weights = DVector::zeros(nq * nq);
        for i in 0..nq {
            for j in 0..nq {
                let k = i * nq + j;
                let lc = op.at(s[i], t[j])?;
                let r = lc.row();
                for a in 0..n {
                    let (p, d, dd) = (ta.p[i][a], ta.d1[i][a], ta.d2[i][a]);
                    for b in 0..n {
                        let (q, e, ee) = (tb.p[j][b], tb.d1[j][b], tb.d2[j][b]);
                        rows[(k, a * n + b)] =
                            r[0] * p * q + r[1] * d * q + r[2] * p * e + r[3] * dd * q + r[4] * d * e + r[5] * p * ee;
                    }
                }
                data[k] = lc.scale * lc.source * eval_at(&self.data.f, lc.x)?;
                weights[k] = g.weights[i] * g.weights[j] * area;
            }
        }
        Ok(vec![Term {
            family,
            site: Site::Element(id),
            component: Component::Residual,
            blocks: vec![(id, rows)],
            data,
            kernel: Kernel::Diag(weights),
        }])
    }

    fn edge_terms(&self, idx: usize) -> Result<Vec<Term>, FunctionalError> {
        let e = self.mesh.edges[idx];
        if !e.finite {
            return Ok(Vec::new());
        }
        let lams = self.half.nodes().to_vec();
        let nl = lams.len();
        let zero = || DVector::zeros(nl);
        let mut out = Vec::new();
        match e.kind {
            EdgeKind::Apex { .. } => {}
            EdgeKind::SectorInterior { .. } => {
                let b = e.b.expect("two-sided");
                let lb = self.flipped(e.reversed);
                let h = e.a.side.param_interval(&self.rect(e.a)).len();
                for (comp, w) in [
                    (Component::Value, [1.0, 0.0, 0.0]),
                    (Component::DerivS, [0.0, 1.0, 0.0]),
                    (Component::DerivT, [0.0, 0.0, 1.0]),
                ] {
                    let blocks = vec![
                        (e.a.element, self.plain_rows(e.a, &lams, w)),
                        (b.element, -self.plain_rows(b, &lb, w)),
                    ];
                    out.push(self.edge_term(Family::SectorJump, idx, comp, blocks, zero(), h));
                }
            }
            EdgeKind::CoreLayer { .. } => {
                let b = e.b.expect("two-sided");
                let lb = self.flipped(e.reversed);
                let h = b.side.param_interval(&self.rect(b)).len();
                for (comp, w, core) in [
                    (Component::Value, [1.0, 0.0, 0.0], 1.0),
                    (Component::DerivS, [0.0, 1.0, 0.0], 0.0),
                    (Component::DerivT, [0.0, 0.0, 1.0], 0.0),
                ] {
                    let blocks = vec![
                        (e.a.element, self.core_rows(nl, core)),
                        (b.element, -self.plain_rows(b, &lb, w)),
                    ];
                    out.push(self.edge_term(Family::VertexConstant, idx, comp, blocks, zero(), h));
                }
            }
            EdgeKind::OuterInterior => {
                let b = e.b.expect("two-sided");
                let lb = self.flipped(e.reversed);
                let h = e.a.side.param_interval(&self.rect(e.a)).len();
                let blocks = vec![
                    (e.a.element, self.plain_rows(e.a, &lams, [1.0, 0.0, 0.0])),
                    (b.element, -self.plain_rows(b, &lb, [1.0, 0.0, 0.0])),
                ];
                out.push(self.edge_term(Family::OuterJump, idx, Component::Value, blocks, zero(), h));
                for (comp, k) in [(Component::DerivS, 0), (Component::DerivT, 1)] {
                    let blocks = vec![
                        (e.a.element, self.trace_rows(e.a, &lams, TraceKind::Cartesian(k))?),
                        (b.element, -self.trace_rows(b, &lb, TraceKind::Cartesian(k))?),
                    ];
                    out.push(self.edge_term(Family::OuterJump, idx, comp, blocks, zero(), h));
                }
            }
            EdgeKind::Interface { vertex } => {
                let b = e.b.expect("two-sided");
                let lb = self.flipped(e.reversed);
                let angles = e.a.side.param_interval(&self.rect(e.a));
                let h = angles.len();
                let blocks = vec![
                    (e.a.element, self.plain_rows(e.a, &lams, [1.0, 0.0, 0.0])),
                    (b.element, -self.plain_rows(b, &lb, [1.0, 0.0, 0.0])),
                ];
                out.push(self.edge_term(Family::InterfaceBridge, idx, Component::Value, blocks, zero(), h));
                for (comp, c) in [(Component::DerivS, 0usize), (Component::DerivT, 1usize)] {
                    let mut w = [0.0; 3];
                    w[1 + c] = 1.0;
                    let kind = TraceKind::SectorFrame {
                        spec: self.mesh.sectors[vertex].clone(),
                        angles,
                        reversed: e.reversed,
                        component: c,
                    };
                    let blocks = vec![
                        (e.a.element, self.plain_rows(e.a, &lams, w)),
                        (b.element, -self.trace_rows(b, &lb, kind)?),
                    ];
                    out.push(self.edge_term(Family::InterfaceBridge, idx, comp, blocks, zero(), h));
                }
            }
            EdgeKind::Boundary { arc, bc } => {
                let sector = matches!(self.element(e.a.element).kind, ElementKind::Sector { .. });
                let rect = self.rect(e.a);
                let map = self.map(e.a);
                let params = self.params(e.a, &lams);
                let h = e.a.side.param_interval(&rect).len();
                let frames = params
                    .iter()
                    .map(|&p| side_frame(&map, &rect, e.a.side, p))
                    .collect::<Result<Vec<_>, _>>()?;
                match bc {
                    BcKind::Dirichlet => {
                        let g = self.data.g0.get(&arc).ok_or(FunctionalError::MissingData {
                            arc: arc + 1,
                            kind: "Dirichlet",
                        })?;
                        let grad = &self.grads0[&arc];
                        let vals = frames.iter().map(|f| eval_at(g, f.x)).collect::<Result<Vec<_>, _>>()?;
                        let dvals = frames
                            .iter()
                            .map(|f| -> Result<f64, ExprError> {
                                let gr = [eval_at(&grad[0], f.x)?, eval_at(&grad[1], f.x)?];
                                // sector sides differentiate along ν, outer sides along the unit tangent
                                let d = if sector { f.speed } else { 1.0 };
                                Ok(d * (gr[0] * f.tangent[0] + gr[1] * f.tangent[1]))
                            })
                            .collect::<Result<Vec<_>, _>>()?;
                        let family = if sector { Family::SectorDirichlet } else { Family::OuterDirichlet };
                        let value = vec![(e.a.element, self.plain_rows(e.a, &lams, [1.0, 0.0, 0.0]))];
                        out.push(self.edge_term(family, idx, Component::Value, value, DVector::from_vec(vals), h));
                        let tang = if sector {
                            let w = match e.a.side {
                                Side::Bottom | Side::Top => [0.0, 1.0, 0.0],
                                Side::Left | Side::Right => [0.0, 0.0, 1.0],
                            };
                            self.plain_rows(e.a, &lams, w)
                        } else {
                            self.trace_rows(e.a, &lams, TraceKind::PlainTangential)?
                        };
                        out.push(self.edge_term(
                            family,
                            idx,
                            Component::Tangential,
                            vec![(e.a.element, tang)],
                            DVector::from_vec(dvals),
                            h,
                        ));
                    }
                    BcKind::Neumann => {
                        let g = self.data.g1.get(&arc).ok_or(FunctionalError::MissingData {
                            arc: arc + 1,
                            kind: "Neumann",
                        })?;
                        let vals = frames
                            .iter()
                            .zip(&params)
                            .map(|(f, &p)| -> Result<f64, ExprError> {
                                let scale = if sector { e.a.side.point(&rect, p).0.exp() } else { 1.0 };
                                Ok(scale * eval_at(g, f.x)?)
                            })
                            .collect::<Result<Vec<_>, _>>()?;
                        let family = if sector { Family::SectorNeumann } else { Family::OuterNeumann };
                        let rows = self.trace_rows(e.a, &lams, TraceKind::Conormal)?;
                        out.push(self.edge_term(
                            family,
                            idx,
                            Component::Conormal,
                            vec![(e.a.element, rows)],
                            DVector::from_vec(vals),
                            h,
                        ));
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Functional {
    pub fn build(
        mesh: &GeometricMesh,
        field: Arc<CoefficientField>,
        data: &ProblemData,
        config: FunctionalConfig,
    ) -> Result<Functional, FunctionalError> {
        data.check(&mesh.polygon)?;
        let grads0 = data
            .g0
            .iter()
            .map(|(&arc, g)| (arc, [g.diff(0), g.diff(1)]))
            .collect();
        let ctx = Ctx {
            mesh,
            field,
            data,
            grads0,
            cfg: config,
            half: HalfNormEvaluator::new(config.edge_order()),
        };
        let ne = mesh.elements.len();
        let el: Vec<Vec<Term>> = (0..ne)
            .into_par_iter()
            .map(|id| ctx.element_terms(id))
            .collect::<Result<_, _>>()?;
        let ed: Vec<Vec<Term>> = (0..mesh.edges.len())
            .into_par_iter()
            .map(|id| ctx.edge_terms(id))
            .collect::<Result<_, _>>()?;
        let n = config.degree + 1;
        let sizes = mesh.elements.iter().map(|e| if e.is_core() { 1 } else { n * n }).collect();
        Ok(Functional {
            config,
            terms: el.into_iter().chain(ed).flatten().collect(),
            sizes,
        })
    }

    /// The homogeneous form (all data zero).
    pub fn homogeneous(
        mesh: &GeometricMesh,
        field: Arc<CoefficientField>,
        config: FunctionalConfig,
    ) -> Result<Functional, FunctionalError> {
        Self::build(mesh, field, &ProblemData::zero(mesh), config)
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Coefficient count per element (1 for core strips).
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn check_layout(&self, layout: &DofLayout) -> Result<(), FunctionalError> {
        if layout.fields().len() != self.sizes.len() {
            return Err(FunctionalError::Layout(format!(
                "{} fields for {} elements",
                layout.fields().len(),
                self.sizes.len()
            )));
        }
        for (i, (f, &n)) in layout.fields().iter().zip(&self.sizes).enumerate() {
            if f.matrix.nrows() != n {
                return Err(FunctionalError::Layout(format!("element {i}: {} rows, expected {n}", f.matrix.nrows())));
            }
        }
        Ok(())
    }

    /// Normal-equation form over the layout's unknowns.
    pub fn assemble(&self, layout: &DofLayout) -> Result<QuadraticSystem, FunctionalError> {
        self.check_layout(layout)?;
        let n = layout.len();
        let mut q = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        let mut d = 0.0;
        for term in &self.terms {
            let mut globals = Vec::new();
            let mut cols = Vec::new();
            let mut r0 = term.data.clone();
            for (e, rows) in &term.blocks {
                let fm = &layout.fields()[*e];
                r0 -= rows * &fm.offset;
                if !fm.globals.is_empty() {
                    cols.push(rows * &fm.matrix);
                    globals.extend_from_slice(&fm.globals);
                }
            }
            d += term.kernel.quad(&r0);
            if globals.is_empty() {
                continue;
            }
            let nr = term.data.len();
            let mut bm = DMatrix::zeros(nr, globals.len());
            let mut c0 = 0;
            for c in &cols {
                bm.columns_mut(c0, c.ncols()).copy_from(c);
                c0 += c.ncols();
            }
            let kb = term.kernel.apply(&bm);
            let local_q = bm.transpose() * &kb;
            let local_b = kb.transpose() * &r0;
            for (i, &gi) in globals.iter().enumerate() {
                b[gi] += local_b[i];
                for (j, &gj) in globals.iter().enumerate() {
                    q[(gi, gj)] += local_q[(i, j)];
                }
            }
        }
        // symmetrize roundoff
        let qt = q.transpose();
        q = 0.5 * (q + qt);
        Ok(QuadraticSystem { q, b, d })
    }

    /// Itemized value at element coefficients.
    pub fn evaluate(&self, sol: &Solution) -> Result<FunctionalBreakdown, FunctionalError> {
        if sol.coeffs.len() != self.sizes.len() || sol.coeffs.iter().zip(&self.sizes).any(|(c, &n)| c.len() != n) {
            return Err(FunctionalError::Layout("solution shape does not match the mesh".into()));
        }
        let items: Vec<Item> = self
            .terms
            .iter()
            .map(|t| Item {
                family: t.family,
                site: t.site,
                component: t.component,
                value: t.kernel.quad(&t.residual(sol)).max(0.0),
            })
            .collect();
        let total = items.iter().map(|i| i.value).sum();
        Ok(FunctionalBreakdown { items, total })
    }
}

/// Standalone `‖w‖²_{1/2,(0,1)}` of a function sampled on an order-`q` grid.
pub fn half_norm_sq(f: impl Fn(f64) -> f64, q: usize) -> f64 {
    let h = HalfNormEvaluator::new(q);
    let v: Vec<f64> = h.nodes().iter().map(|&x| f(x)).collect();
    h.half_norm_sq(&v)
}
