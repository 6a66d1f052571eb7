//! Second-order elliptic operators and their pullbacks to element
//! coordinates.
//!
//! The operator is `𝔏u = -Σ_rs ∂_r(a_rs ∂_s u) + Σ_r b_r ∂_r u + c u`,
//! handled in expanded form `-tr(A ∇²u) + β·∇u + c u` with
//! `β_s = b_s - Σ_r ∂_r a_rs`. In local coordinates the residual is
//! `scale · (A w_ss + 2B w_st + C w_tt + D w_s + E w_t + F w)`.

use std::sync::Arc;

use thiserror::Error;

use crate::basis::{project_1d, project_to_degree, Interval, Poly1d, Rect, Side, TensorPolynomial};
use crate::expr::{sub, Expr, ExprError};
use crate::geometry::{norm, ElementMap, GeometryError, MapJet, SectorSpec, P2};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OperatorError {
    #[error("not elliptic: smallest eigenvalue {min:.3e} at ({:.4}, {:.4})", .at[0], .at[1])]
    NotElliptic { min: f64, at: P2 },
    #[error("singular Jacobian at local point ({0:.4}, {1:.4})")]
    SingularJacobian(f64, f64),
    #[error("operation needs a mapped element")]
    CoreElement,
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Coefficients `a11, a12, a22, b1, b2, c` as expressions in `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    pub a11: Expr,
    pub a12: Expr,
    pub a22: Expr,
    pub b1: Expr,
    pub b2: Expr,
    pub c: Expr,
    beta: [Expr; 2],
}

/// The operator frozen at one point: `-tr(a ∇²u) + beta·∇u + c u`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointOperator {
    pub a: [[f64; 2]; 2],
    pub beta: [f64; 2],
    pub c: f64,
}

impl PointOperator {
    /// Applies to a function given by its value, gradient and Hessian.
    pub fn apply(&self, v: f64, grad: [f64; 2], hess: [[f64; 2]; 2]) -> f64 {
        let mut out = self.c * v;
        for r in 0..2 {
            out += self.beta[r] * grad[r];
            for s in 0..2 {
                out -= self.a[r][s] * hess[r][s];
            }
        }
        out
    }

    pub fn scaled(&self, f: f64) -> PointOperator {
        PointOperator {
            a: [[self.a[0][0] * f, self.a[0][1] * f], [self.a[1][0] * f, self.a[1][1] * f]],
            beta: [self.beta[0] * f, self.beta[1] * f],
            c: self.c * f,
        }
    }

    /// The same operator written in coordinates `s` with `x = y(s)`.
    pub fn pullback(&self, jet: &MapJet) -> Option<PointOperator> {
        let g = jet.inverse()?;
        let mut a = [[0.0; 2]; 2];
        for p in 0..2 {
            for q in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        a[p][q] += g[p][k] * self.a[k][l] * g[q][l];
                    }
                }
            }
        }
        let mut beta = [0.0; 2];
        for (p, bp) in beta.iter_mut().enumerate() {
            for m in 0..2 {
                let h = &jet.hess[m];
                let tr: f64 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| a[i][j] * h[i][j]).sum();
                *bp += g[p][m] * (self.beta[m] + tr);
            }
        }
        Some(PointOperator { a, beta, c: self.c })
    }

    /// Smallest eigenvalue of the principal part.
    pub fn min_eigenvalue(&self) -> f64 {
        let (p, q, r) = (self.a[0][0], 0.5 * (self.a[0][1] + self.a[1][0]), self.a[1][1]);
        0.5 * (p + r) - (0.25 * (p - r) * (p - r) + q * q).sqrt()
    }
}

impl CoefficientField {
    pub fn new(a11: Expr, a12: Expr, a22: Expr, b1: Expr, b2: Expr, c: Expr) -> Self {
        let beta = [
            sub(sub(b1.clone(), a11.diff(0)), a12.diff(1)),
            sub(sub(b2.clone(), a12.diff(0)), a22.diff(1)),
        ];
        CoefficientField {
            a11,
            a12,
            a22,
            b1,
            b2,
            c,
            beta,
        }
    }

    /// `-Δ + c`.
    pub fn laplacian(c: f64) -> Self {
        let n = Expr::Num;
        Self::new(n(1.0), n(0.0), n(1.0), n(0.0), n(0.0), n(c))
    }

    /// Parses six expressions in `x, y`.
    pub fn parse(a11: &str, a12: &str, a22: &str, b1: &str, b2: &str, c: &str) -> Result<Self, ExprError> {
        Ok(Self::new(
            Expr::parse(a11)?,
            Expr::parse(a12)?,
            Expr::parse(a22)?,
            Expr::parse(b1)?,
            Expr::parse(b2)?,
            Expr::parse(c)?,
        ))
    }

    pub fn at(&self, x: P2) -> Result<PointOperator, ExprError> {
        let e = |f: &Expr| f.eval(x[0], x[1]);
        let a12 = e(&self.a12)?;
        Ok(PointOperator {
            a: [[e(&self.a11)?, a12], [a12, e(&self.a22)?]],
            beta: [e(&self.beta[0])?, e(&self.beta[1])?],
            c: e(&self.c)?,
        })
    }

    /// Principal matrix only.
    pub fn principal(&self, x: P2) -> Result<[[f64; 2]; 2], ExprError> {
        let e = |f: &Expr| f.eval(x[0], x[1]);
        let a12 = e(&self.a12)?;
        Ok([[e(&self.a11)?, a12], [a12, e(&self.a22)?]])
    }

    /// Operator in the modified polar frame `(τ, θ)` about `apex`, scaled by
    /// `e^{2τ}`.
    pub fn polar(&self, spec: &SectorSpec, tau: f64, theta: f64) -> Result<PointOperator, OperatorError> {
        let pj = spec.polar_jet(tau, theta);
        let op = self.at(pj.x)?;
        let pulled = op.pullback(&pj).ok_or(OperatorError::SingularJacobian(tau, theta))?;
        Ok(pulled.scaled((2.0 * tau).exp()))
    }
}

/// Minimum over `points` of the smaller eigenvalue of `A(x)`.
pub fn ellipticity_constant(field: &CoefficientField, points: &[P2]) -> Result<f64, OperatorError> {
    let mut best = (f64::INFINITY, [0.0, 0.0]);
    for &x in points {
        let m = field.at(x)?.min_eigenvalue();
        if m < best.0 {
            best = (m, x);
        }
    }
    if !(best.0 > 0.0) {
        return Err(OperatorError::NotElliptic { min: best.0, at: best.1 });
    }
    Ok(best.0)
}

/// Local coefficients at one point of an element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalCoeffs {
    /// `[A, B, C, D, E, F]`
    pub coef: [f64; 6],
    /// `√J` factor multiplying the residual.
    pub scale: f64,
    /// Factor applied to the source term `f` (`e^{2ν}` in sectors).
    pub source: f64,
    pub x: P2,
}

impl LocalCoeffs {
    /// Residual weights against the jet `[w, w_s, w_t, w_ss, w_st, w_tt]`.
    pub fn row(&self) -> [f64; 6] {
        let [a, b, c, d, e, f] = self.coef;
        let s = self.scale;
        [s * f, s * d, s * e, s * a, 2.0 * s * b, s * c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Frame {
    Outer,
    Sector,
}

/// Element operator in local coordinates, exact or with degree-`W`
/// projected coefficients.
#[derive(Debug, Clone)]
pub struct TransformedOperator {
    pub element: usize,
    pub domain: Rect,
    field: Arc<CoefficientField>,
    map: ElementMap,
    frame: Frame,
    approx: Option<Box<[TensorPolynomial; 6]>>,
}

impl TransformedOperator {
    pub fn outer(field: Arc<CoefficientField>, map: ElementMap, element: usize, domain: Rect) -> Self {
        TransformedOperator {
            element,
            domain,
            field,
            map,
            frame: Frame::Outer,
            approx: None,
        }
    }

    pub fn sector(
        field: Arc<CoefficientField>,
        map: Option<&ElementMap>,
        element: usize,
        domain: Option<Rect>,
    ) -> Result<Self, OperatorError> {
        match (map, domain) {
            (Some(m @ ElementMap::Sector(_)), Some(domain)) => Ok(TransformedOperator {
                element,
                domain,
                field,
                map: m.clone(),
                frame: Frame::Sector,
                approx: None,
            }),
            _ => Err(OperatorError::CoreElement),
        }
    }

    /// Builds the operator appropriate for the element's kind.
    pub fn for_element(
        field: Arc<CoefficientField>,
        el: &crate::geometry::Element,
        id: usize,
    ) -> Result<Self, OperatorError> {
        match (&el.map, el.domain) {
            (Some(ElementMap::Outer(_)), Some(d)) => Ok(Self::outer(field, el.map.clone().expect("checked"), id, d)),
            (Some(ElementMap::Sector(_)), _) => Self::sector(field, el.map.as_ref(), id, el.domain),
            _ => Err(OperatorError::CoreElement),
        }
    }

    pub fn is_approximated(&self) -> bool {
        self.approx.is_some()
    }

    pub fn map(&self) -> &ElementMap {
        &self.map
    }

    fn exact(&self, s: f64, t: f64) -> Result<(PointOperator, f64, f64, P2), OperatorError> {
        match (&self.map, self.frame) {
            (ElementMap::Sector(spec), Frame::Sector) => {
                let bj = spec.blend_jet(s, t)?;
                let (tau, theta) = (bj.x[0], bj.x[1]);
                let op = self.field.polar(spec, tau, theta)?;
                let local = op.pullback(&bj).ok_or(OperatorError::SingularJacobian(s, t))?;
                let x = spec.polar_jet(tau, theta).x;
                Ok((local, bj.det().sqrt(), (2.0 * s).exp(), x))
            }
            (m, _) => {
                let j = m.jet(s, t)?;
                let op = self.field.at(j.x)?;
                let local = op.pullback(&j).ok_or(OperatorError::SingularJacobian(s, t))?;
                Ok((local, j.det().sqrt(), 1.0, j.x))
            }
        }
    }

    pub fn at(&self, s: f64, t: f64) -> Result<LocalCoeffs, OperatorError> {
        let (op, scale, source, x) = self.exact(s, t)?;
        let coef = match &self.approx {
            Some(p) => std::array::from_fn(|i| p[i].eval(s, t)),
            None => [-op.a[0][0], -op.a[0][1], -op.a[1][1], op.beta[0], op.beta[1], op.c],
        };
        Ok(LocalCoeffs { coef, scale, source, x })
    }

    /// Replaces the six coefficients by their degree-`W` projections
    /// (GLL rule of order `W + 3`).
    pub fn approximate(&self, degree: usize) -> Result<Self, OperatorError> {
        let exact = TransformedOperator {
            approx: None,
            ..self.clone()
        };
        let q = degree + 3;
        let rule = crate::basis::gll_rule(q).expect("positive order");
        // evaluate once on the tensor grid, then project each coefficient
        let nodes_s: Vec<f64> = rule.nodes.iter().map(|&r| self.domain.s.from_ref(r)).collect();
        let nodes_t: Vec<f64> = rule.nodes.iter().map(|&r| self.domain.t.from_ref(r)).collect();
        let mut grid = vec![[0.0; 6]; nodes_s.len() * nodes_t.len()];
        for (i, &s) in nodes_s.iter().enumerate() {
            for (j, &t) in nodes_t.iter().enumerate() {
                grid[i * nodes_t.len() + j] = exact.at(s, t)?.coef;
            }
        }
        let lookup = |c: usize, s: f64, t: f64| -> f64 {
            let i = nodes_s.iter().position(|&v| v == s).expect("grid node");
            let j = nodes_t.iter().position(|&v| v == t).expect("grid node");
            grid[i * nodes_t.len() + j][c]
        };
        let polys: Vec<TensorPolynomial> = (0..6)
            .map(|c| project_to_degree(|s, t| lookup(c, s, t), degree, self.domain, q).expect("valid order"))
            .collect();
        Ok(TransformedOperator {
            approx: Some(Box::new(polys.try_into().expect("six coefficients"))),
            ..exact
        })
    }

    /// `scale · (A w_ss + 2B w_st + C w_tt + D w_s + E w_t + F w)`.
    pub fn residual(&self, w: &TensorPolynomial, s: f64, t: f64) -> Result<f64, OperatorError> {
        let row = self.at(s, t)?.row();
        let j = w.jet(s, t).as_array();
        Ok(row.iter().zip(j).map(|(a, b)| a * b).sum())
    }
}

/// Which first-order trace to take on an element side.
#[derive(Debug, Clone)]
pub enum TraceKind {
    /// `Nᵀ A ∇u` with the outward unit normal.
    Conormal,
    /// `Tᵀ A ∇u` with the unit tangent in the direction of the side parameter.
    Tangential,
    /// `Tᵀ ∇u`.
    PlainTangential,
    /// `∂u/∂x_k`.
    Cartesian(usize),
    /// Derivative along `∂x/∂ν` (component 0) or `∂x/∂φ` (component 1) of a
    /// sector map at `ν = ln ρ`. The side parameter maps affinely onto
    /// `angles`, reversed if `reversed` is set.
    SectorFrame {
        spec: Arc<SectorSpec>,
        angles: Interval,
        reversed: bool,
        component: usize,
    },
}

/// Geometry of a side at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideFrame {
    pub x: P2,
    pub tangent: P2,
    pub normal: P2,
    /// `|dx/dλ|` for the side parameter `λ`.
    pub speed: f64,
    pub jet: MapJet,
}

pub fn side_frame(map: &ElementMap, domain: &Rect, side: Side, param: f64) -> Result<SideFrame, OperatorError> {
    let (s, t) = side.point(domain, param);
    let jet = map.jet(s, t)?;
    let dir = match side {
        Side::Bottom | Side::Top => 0,
        Side::Left | Side::Right => 1,
    };
    let d = [jet.jac[0][dir], jet.jac[1][dir]];
    let speed = norm(d);
    let tangent = [d[0] / speed, d[1] / speed];
    let sign = match side {
        Side::Bottom | Side::Right => 1.0,
        Side::Top | Side::Left => -1.0,
    };
    Ok(SideFrame {
        x: jet.x,
        tangent,
        normal: [sign * tangent[1], -sign * tangent[0]],
        speed,
        jet,
    })
}

/// Weights `(c_s, c_t)` with `v·∇_x u = c_s w_s + c_t w_t` at a mapped point.
pub fn directional_weights(jet: &MapJet, v: P2) -> Option<[f64; 2]> {
    let g = jet.inverse()?;
    Some([g[0][0] * v[0] + g[0][1] * v[1], g[1][0] * v[0] + g[1][1] * v[1]])
}

/// First-order trace operator on one element side, `c_s(λ) w_s + c_t(λ) w_t`.
#[derive(Debug, Clone)]
pub struct TraceOperator {
    pub side: Side,
    pub interval: Interval,
    field: Arc<CoefficientField>,
    map: ElementMap,
    domain: Rect,
    kind: TraceKind,
    /// Multiplies the result (`e^ν` for sector conormals).
    log_scaled: bool,
    approx: Option<[Poly1d; 2]>,
}

impl TraceOperator {
    pub fn new(
        field: Arc<CoefficientField>,
        map: ElementMap,
        domain: Rect,
        side: Side,
        kind: TraceKind,
    ) -> TraceOperator {
        let log_scaled = matches!(map, ElementMap::Sector(_)) && matches!(kind, TraceKind::Conormal);
        TraceOperator {
            side,
            interval: side.param_interval(&domain),
            field,
            map,
            domain,
            kind,
            log_scaled,
            approx: None,
        }
    }

    /// Exact weights at side parameter `λ`.
    pub fn exact_weights(&self, lam: f64) -> Result<[f64; 2], OperatorError> {
        let f = side_frame(&self.map, &self.domain, self.side, lam)?;
        let v = match &self.kind {
            TraceKind::PlainTangential => f.tangent,
            TraceKind::Tangential | TraceKind::Conormal => {
                let a = self.field.principal(f.x)?;
                let d = if matches!(self.kind, TraceKind::Conormal) { f.normal } else { f.tangent };
                [a[0][0] * d[0] + a[0][1] * d[1], a[1][0] * d[0] + a[1][1] * d[1]]
            }
            TraceKind::Cartesian(k) => {
                let mut e = [0.0; 2];
                e[*k] = 1.0;
                e
            }
            TraceKind::SectorFrame {
                spec,
                angles,
                reversed,
                component,
            } => {
                let mut u = (lam - self.interval.a) / self.interval.len();
                if *reversed {
                    u = 1.0 - u;
                }
                let j = spec.jet(spec.rho.ln(), angles.a + u * angles.len())?;
                [j.jac[0][*component], j.jac[1][*component]]
            }
        };
        let (s, t) = self.side.point(&self.domain, lam);
        let mut w = directional_weights(&f.jet, v).ok_or(OperatorError::SingularJacobian(s, t))?;
        if self.log_scaled {
            let e = s.exp();
            w = [w[0] * e, w[1] * e];
        }
        Ok(w)
    }

    /// Projects both weights onto degree `W` in the side parameter.
    pub fn approximate(mut self, degree: usize) -> Result<TraceOperator, OperatorError> {
        let q = degree + 3;
        let rule = crate::basis::gll_rule(q).expect("positive order");
        let pts: Vec<f64> = rule.nodes.iter().map(|&r| self.interval.from_ref(r)).collect();
        let vals = pts
            .iter()
            .map(|&l| self.exact_weights(l))
            .collect::<Result<Vec<_>, _>>()?;
        let pick = |c: usize, l: f64| vals[pts.iter().position(|&p| p == l).expect("grid node")][c];
        self.approx = Some([
            project_1d(|l| pick(0, l), degree, self.interval, q).expect("valid order"),
            project_1d(|l| pick(1, l), degree, self.interval, q).expect("valid order"),
        ]);
        Ok(self)
    }

    pub fn weights(&self, lam: f64) -> Result<[f64; 2], OperatorError> {
        match &self.approx {
            Some([a, b]) => Ok([a.eval(lam), b.eval(lam)]),
            None => self.exact_weights(lam),
        }
    }

    pub fn apply(&self, w: &TensorPolynomial, lam: f64) -> Result<f64, OperatorError> {
        let (s, t) = self.side.point(&self.domain, lam);
        let j = w.jet(s, t);
        let c = self.weights(lam)?;
        Ok(c[0] * j.s + c[1] * j.t)
    }
}
