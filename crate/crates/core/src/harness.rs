//! Problem specs, manufactured cases, broken-norm errors and convergence
//! runs. Arc and vertex numbers in specs and reports are 1-based: arc `i`
//! runs from vertex `i - 1` to vertex `i`, with vertex 0 meaning vertex `p`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::gauss_rule;
use crate::expr::{Expr, ExprError};
use crate::functional::{Family, Functional, FunctionalBreakdown, FunctionalConfig, FunctionalError, ProblemData};
use crate::geometry::{
    dist, norm, BcKind, Curve, CurvilinearPolygon, ElementKind, GeometricMesh, GeometryError, MeshConfig,
    Shape, P2,
};
use crate::operator::{ellipticity_constant, CoefficientField, OperatorError};
use crate::solver::{
    dirichlet_vertex_values, relative_residual, solve_least_squares, solve_schur, DofLayout, LayoutMode, SchurInfo,
    Solution, SolverError,
};
use crate::stability::{linear_fit, StabilityError};

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("malformed spec at line {line}, column {column}: {msg}")]
    Json { line: usize, column: usize, msg: String },
    #[error("unsupported spec version {0} (expected {SPEC_VERSION})")]
    Version(u32),
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("unknown case `{0}`")]
    UnknownCase(String),
    #[error("data inconsistent with the exact solution: {what} at ({x:.6}, {y:.6}), {got:e} vs {want:e}")]
    Consistency {
        what: String,
        x: f64,
        y: f64,
        got: f64,
        want: f64,
    },
    #[error("at (M, W) = ({m}, {w}): {source}")]
    Point {
        m: usize,
        w: usize,
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
}

impl HarnessError {
    /// Failures of the discrete problem itself rather than of its input.
    pub fn is_numerical(&self) -> bool {
        match self {
            HarnessError::Solver(e) => matches!(e, SolverError::Singular { .. } | SolverError::InteriorSingular),
            HarnessError::Stability(e) => matches!(e, StabilityError::Singular { .. } | StabilityError::Form),
            HarnessError::Point { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

// ---------------------------------------------------------------------------
// spec

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ArcSpec {
    Line,
    /// `center + radius (cos θ, sin θ)` for θ from `theta[0]` to `theta[1]`.
    Circle { center: P2, radius: f64, theta: [f64; 2] },
    /// Expressions in `t ∈ [-1, 1]`.
    Param { x: String, y: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    #[serde(default = "one")]
    pub a11: String,
    #[serde(default = "zero")]
    pub a12: String,
    #[serde(default = "one")]
    pub a22: String,
    #[serde(default = "zero")]
    pub b1: String,
    #[serde(default = "zero")]
    pub b2: String,
    #[serde(default = "zero")]
    pub c: String,
}

fn one() -> String {
    "1".into()
}

fn zero() -> String {
    "0".into()
}

impl Default for Coefficients {
    fn default() -> Self {
        Coefficients {
            a11: one(),
            a12: zero(),
            a22: one(),
            b1: zero(),
            b2: zero(),
            c: zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub f: String,
    #[serde(default)]
    pub g0: BTreeMap<usize, String>,
    #[serde(default)]
    pub g1: BTreeMap<usize, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerVertex<T> {
    All(T),
    Each(Vec<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretization {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<PerVertex<f64>>,
    /// Defaults to a quarter of the smallest vertex distance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(rename = "I", default, skip_serializing_if = "Option::is_none")]
    pub slices: Option<PerVertex<usize>>,
    /// Splits outer elements `r × r` and sector slices `r` ways (default 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub version: u32,
    pub vertices: Vec<P2>,
    /// One per vertex; straight lines when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arcs: Option<Vec<ArcSpec>>,
    pub dirichlet: Vec<usize>,
    #[serde(default)]
    pub neumann: Vec<usize>,
    #[serde(default)]
    pub coefficients: Coefficients,
    pub data: DataSpec,
    pub discretization: Discretization,
    #[serde(default = "default_mode")]
    pub mode: LayoutMode,
    /// Built-in case whose exact solution is used for error reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case: Option<String>,
}

fn default_mode() -> LayoutMode {
    LayoutMode::Nonconforming
}

/// A validated spec.
#[derive(Debug, Clone)]
pub struct Problem {
    pub polygon: CurvilinearPolygon,
    pub field: Arc<CoefficientField>,
    pub data: ProblemData,
    pub rho: f64,
    pub mu: Vec<f64>,
    pub slices: Vec<usize>,
    pub refine: usize,
    pub m: usize,
    pub w: usize,
    pub mode: LayoutMode,
}

fn arc_index(i: usize, p: usize, what: &str) -> Result<usize, HarnessError> {
    if i == 0 || i > p {
        return Err(HarnessError::Spec(format!("{what} arc {i} out of range 1..={p}")));
    }
    Ok(i - 1)
}

impl ProblemSpec {
    pub fn from_json(text: &str) -> Result<ProblemSpec, HarnessError> {
        let spec: ProblemSpec = serde_json::from_str(text).map_err(|e| HarnessError::Json {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        if spec.version != SPEC_VERSION {
            return Err(HarnessError::Version(spec.version));
        }
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn build(&self) -> Result<Problem, HarnessError> {
        let p = self.vertices.len();
        let vs = &self.vertices;
        let arcs = match &self.arcs {
            None => (0..p).map(|i| Curve::line(vs[(i + p - 1) % p], vs[i])).collect(),
            Some(a) if a.len() != p => {
                return Err(HarnessError::Spec(format!("{} arcs for {p} vertices", a.len())));
            }
            Some(a) => a
                .iter()
                .enumerate()
                .map(|(i, arc)| {
                    Ok(match arc {
                        ArcSpec::Line => Curve::line(vs[(i + p - 1) % p], vs[i]),
                        ArcSpec::Circle { center, radius, theta } => Curve::circle(*center, *radius, theta[0], theta[1]),
                        ArcSpec::Param { x, y } => {
                            Curve::new(Shape::param(Expr::parse_with(x, &["t"])?, Expr::parse_with(y, &["t"])?))
                        }
                    })
                })
                .collect::<Result<Vec<_>, HarnessError>>()?,
        };
        let idx = |list: &[usize], what| list.iter().map(|&i| arc_index(i, p, what)).collect::<Result<Vec<_>, _>>();
        let polygon = CurvilinearPolygon::new(
            vs.clone(),
            arcs,
            &idx(&self.dirichlet, "dirichlet")?,
            &idx(&self.neumann, "neumann")?,
        )?;
        let c = &self.coefficients;
        let field = CoefficientField::parse(&c.a11, &c.a12, &c.a22, &c.b1, &c.b2, &c.c)?;
        let parse_map = |m: &BTreeMap<usize, String>, what| -> Result<BTreeMap<usize, Expr>, HarnessError> {
            m.iter().map(|(&a, e)| Ok((arc_index(a, p, what)?, Expr::parse(e)?))).collect()
        };
        let data = ProblemData {
            f: Expr::parse(&self.data.f)?,
            g0: parse_map(&self.data.g0, "g0")?,
            g1: parse_map(&self.data.g1, "g1")?,
        };
        let d = &self.discretization;
        if d.m == 0 || d.w == 0 {
            return Err(HarnessError::Spec(format!("need M, W >= 1, got M={}, W={}", d.m, d.w)));
        }
        if d.refine == Some(0) {
            return Err(HarnessError::Spec("refine must be at least 1".into()));
        }
        let expand = |v: &PerVertex<f64>| match v {
            PerVertex::All(x) => vec![*x],
            PerVertex::Each(xs) => xs.clone(),
        };
        let mu = d.mu.as_ref().map(expand).unwrap_or_default();
        let slices = match &d.slices {
            None => Vec::new(),
            Some(PerVertex::All(i)) => vec![*i; p],
            Some(PerVertex::Each(is)) => is.clone(),
        };
        if (mu.len() > 1 && mu.len() != p) || (!slices.is_empty() && slices.len() != p) {
            return Err(HarnessError::Spec("per-vertex mu and I need one entry per vertex".into()));
        }
        let rho = d.rho.unwrap_or_else(|| {
            let mut m = f64::INFINITY;
            for a in 0..p {
                for b in a + 1..p {
                    m = m.min(dist(vs[a], vs[b]));
                }
            }
            0.25 * m
        });
        let problem = Problem {
            polygon,
            field: Arc::new(field),
            data,
            rho,
            mu,
            slices,
            refine: d.refine.unwrap_or(1),
            m: d.m,
            w: d.w,
            mode: self.mode,
        };
        problem.data.check(&problem.polygon)?;
        Ok(problem)
    }
}

impl Problem {
    pub fn mesh_config(&self, m: usize) -> MeshConfig {
        MeshConfig {
            mu: self.mu.clone(),
            slices: self.slices.clone(),
            refine: self.refine,
            ..MeshConfig::new(self.rho, m)
        }
    }

    /// `M = 1` means no refinement at all: the polygon is a single element,
    /// which needs four arcs.
    pub fn mesh_with(&self, m: usize) -> Result<GeometricMesh, HarnessError> {
        Ok(if m == 1 {
            GeometricMesh::single_element(self.polygon.clone())?
        } else {
            GeometricMesh::build(self.polygon.clone(), &self.mesh_config(m))?
        })
    }

    pub fn mesh(&self) -> Result<GeometricMesh, HarnessError> {
        self.mesh_with(self.m)
    }
}

// ---------------------------------------------------------------------------
// solve

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SolveOptions {
    pub quad_order: Option<usize>,
    /// Seed of the data consistency spot check.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub mesh: GeometricMesh,
    pub layout: DofLayout,
    pub unknowns: Vec<f64>,
    pub solution: Solution,
    pub breakdown: FunctionalBreakdown,
    pub residual: f64,
    pub schur: Option<SchurInfo>,
}

/// Smallest eigenvalue of the principal part over element corners and
/// arc samples.
fn check_ellipticity(mesh: &GeometricMesh, field: &CoefficientField) -> Result<f64, HarnessError> {
    let mut pts = Vec::new();
    for id in 0..mesh.elements.len() {
        if !mesh.elements[id].is_core() {
            pts.extend(mesh.corners(id)?);
        }
    }
    for i in 0..mesh.polygon.len() {
        pts.extend(mesh.polygon.arc(i).samples(8)?);
    }
    Ok(ellipticity_constant(field, &pts)?)
}

pub fn solve_at(problem: &Problem, m: usize, w: usize, opts: SolveOptions) -> Result<SolveOutcome, HarnessError> {
    let mesh = problem.mesh_with(m)?;
    check_ellipticity(&mesh, &problem.field)?;
    let cfg = FunctionalConfig {
        quad_order: opts.quad_order,
        ..FunctionalConfig::new(w)
    };
    let fun = Functional::build(&mesh, problem.field.clone(), &problem.data, cfg)?;
    let gk = dirichlet_vertex_values(&mesh, &problem.data)?;
    let layout = DofLayout::build(&mesh, w, problem.mode, &gk)?;
    let sys = fun.assemble(&layout)?;
    let (u, schur) = match problem.mode {
        LayoutMode::VertexContinuous => {
            let (u, info) = solve_schur(&sys, &layout)?;
            (u, Some(info))
        }
        _ => (solve_least_squares(&sys)?, None),
    };
    let solution = layout.expand(&u);
    let breakdown = fun.evaluate(&solution)?;
    Ok(SolveOutcome {
        residual: relative_residual(&sys, &u),
        mesh,
        layout,
        unknowns: u.as_slice().to_vec(),
        solution,
        breakdown,
        schur,
    })
}

pub fn solve(problem: &Problem, opts: SolveOptions) -> Result<SolveOutcome, HarnessError> {
    solve_at(problem, problem.m, problem.w, opts)
}

/// Solution file: layout descriptor plus coefficients.
pub fn solution_json(out: &SolveOutcome) -> serde_json::Value {
    let elements: Vec<_> = out
        .solution
        .coeffs
        .iter()
        .enumerate()
        .map(|(id, c)| serde_json::json!({"id": id, "coeffs": c.as_slice()}))
        .collect();
    serde_json::json!({
        "version": SPEC_VERSION,
        "layout": {
            "mode": out.layout.mode,
            "W": out.layout.degree,
            "unknowns": out.layout.len(),
            "vertex_unknowns": [out.layout.vertex_range().start, out.layout.vertex_range().end],
            "shared_vertices": out.layout.shared_vertices(),
        },
        "unknowns": out.unknowns,
        "elements": elements,
    })
}

pub fn family_totals(b: &FunctionalBreakdown) -> BTreeMap<String, f64> {
    Family::ALL
        .iter()
        .filter(|f| b.count(**f) > 0)
        .map(|f| (format!("{f:?}"), b.family_total(*f)))
        .collect()
}

// ---------------------------------------------------------------------------
// manufactured cases

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum Regularity {
    Analytic,
    /// `r^α`-type behaviour at a vertex.
    Singular { alpha: f64 },
}

/// Exact solutions with analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Exact {
    /// `sin(πx) sin(πy)`
    SinSin,
    /// `eˣ cos y`
    ExpCos,
    /// `r^α sin(αθ)` about `apex`, with θ in `(cut, cut + 2π]`.
    Corner { alpha: f64, apex: P2, cut: f64 },
}

impl Exact {
    fn polar(apex: P2, cut: f64, x: P2) -> (f64, f64) {
        let d = [x[0] - apex[0], x[1] - apex[1]];
        let th = cut + (d[1].atan2(d[0]) - cut).rem_euclid(2.0 * PI);
        (norm(d), th)
    }

    pub fn value(&self, x: P2) -> f64 {
        match *self {
            Exact::SinSin => (PI * x[0]).sin() * (PI * x[1]).sin(),
            Exact::ExpCos => x[0].exp() * x[1].cos(),
            Exact::Corner { alpha, apex, cut } => {
                let (r, th) = Self::polar(apex, cut, x);
                r.powf(alpha) * (alpha * th).sin()
            }
        }
    }

    pub fn grad(&self, x: P2) -> [f64; 2] {
        match *self {
            Exact::SinSin => {
                let (sx, cx) = (PI * x[0]).sin_cos();
                let (sy, cy) = (PI * x[1]).sin_cos();
                [PI * cx * sy, PI * sx * cy]
            }
            Exact::ExpCos => {
                let e = x[0].exp();
                [e * x[1].cos(), -e * x[1].sin()]
            }
            Exact::Corner { alpha, apex, cut } => {
                let (r, th) = Self::polar(apex, cut, x);
                let b = alpha - 1.0;
                let f = alpha * r.powf(b);
                [f * (b * th).sin(), f * (b * th).cos()]
            }
        }
    }

    pub fn hess(&self, x: P2) -> [[f64; 2]; 2] {
        match *self {
            Exact::SinSin => {
                let u = self.value(x);
                let m = PI * PI * (PI * x[0]).cos() * (PI * x[1]).cos();
                [[-PI * PI * u, m], [m, -PI * PI * u]]
            }
            Exact::ExpCos => {
                let u = self.value(x);
                let m = -x[0].exp() * x[1].sin();
                [[u, m], [m, -u]]
            }
            Exact::Corner { alpha, apex, cut } => {
                let (r, th) = Self::polar(apex, cut, x);
                let b = alpha - 1.0;
                let f = alpha * b * r.powf(b - 1.0);
                let (s, c) = ((b - 1.0) * th).sin_cos();
                [[f * s, f * c], [f * c, -f * s]]
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManufacturedCase {
    pub name: String,
    pub spec: ProblemSpec,
    pub exact: Exact,
    pub regularity: Regularity,
}

pub const CASES: [&str; 5] = ["square_smooth", "lshape_rz", "lshape_mixed", "square_varcoef", "wedge_alpha"];

/// Default exponent of `wedge_alpha`.
pub const WEDGE_ALPHA: f64 = 0.5;

fn num(v: f64) -> String {
    format!("({v:?})")
}

/// Strings for `r^α sin(αθ)` about the origin and its two partials.
fn corner_strings(alpha: f64, cut: f64) -> [String; 3] {
    let g = cut + PI;
    let (s, c) = g.sin_cos();
    let th = format!(
        "({} + atan2({}*x + {}*y, {}*x + {}*y))",
        num(g),
        num(-s),
        num(c),
        num(c),
        num(s)
    );
    let r2 = "(x^2 + y^2)";
    let a = num(alpha);
    let b = num(alpha - 1.0);
    [
        format!("{r2}^{}*sin({a}*{th})", num(alpha / 2.0)),
        format!("{a}*{r2}^{}*sin({b}*{th})", num((alpha - 1.0) / 2.0)),
        format!("{a}*{r2}^{}*cos({b}*{th})", num((alpha - 1.0) / 2.0)),
    ]
}

/// `Im (x + iy)^n`, which is `r^n sin(nθ)` without the branch.
fn harmonic_polynomial(n: u32) -> String {
    let mut terms = Vec::new();
    let mut binom = 1u64;
    for k in 0..=n {
        if k % 2 == 1 {
            let sign = if (k / 2) % 2 == 0 { "" } else { "-" };
            terms.push(format!("{sign}{binom}*x^{}*y^{k}", n - k));
        }
        binom = binom * u64::from(n - k) / u64::from(k + 1);
    }
    terms.join(" + ")
}

fn unit_square() -> Vec<P2> {
    vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
}

/// Re-entrant corner at the origin, vertex 1.
fn lshape() -> Vec<P2> {
    vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [0.0, -1.0]]
}

/// Outward normal of the straight arc `i` (1-based) of `vs`.
fn straight_normal(vs: &[P2], i: usize) -> P2 {
    let p = vs.len();
    let (a, b) = (vs[(i + p - 2) % p], vs[(i - 1) % p]);
    let t = [b[0] - a[0], b[1] - a[1]];
    let l = norm(t);
    [t[1] / l, -t[0] / l]
}

pub fn builtin_case(name: &str) -> Result<ManufacturedCase, HarnessError> {
    builtin_case_with(name, WEDGE_ALPHA)
}

/// `alpha` is only used by `wedge_alpha`.
pub fn builtin_case_with(name: &str, alpha: f64) -> Result<ManufacturedCase, HarnessError> {
    let disc = |m| Discretization {
        m,
        w: m,
        mu: Some(PerVertex::All(0.15)),
        rho: Some(0.25),
        slices: None,
        refine: Some(2),
    };
    let base = |vertices: Vec<P2>, dirichlet: Vec<usize>, neumann: Vec<usize>, f: String| ProblemSpec {
        version: SPEC_VERSION,
        vertices,
        arcs: None,
        dirichlet,
        neumann,
        coefficients: Coefficients::default(),
        data: DataSpec {
            f,
            g0: BTreeMap::new(),
            g1: BTreeMap::new(),
        },
        discretization: disc(4),
        mode: LayoutMode::Nonconforming,
        case: Some(name.to_string()),
    };
    let all = |p: usize| (1..=p).collect::<Vec<_>>();
    let (spec, exact, regularity) = match name {
        "square_smooth" => {
            let u = "sin(pi*x)*sin(pi*y)";
            let mut s = base(unit_square(), all(4), vec![], format!("2*pi^2*{u}"));
            s.data.g0 = (1..=4).map(|a| (a, u.to_string())).collect();
            // Smooth everywhere: milder grading and a smaller sector keep the
            // outermost layer from dominating at high W.
            s.discretization.mu = Some(PerVertex::All(0.3));
            s.discretization.rho = Some(0.15);
            (s, Exact::SinSin, Regularity::Analytic)
        }
        "lshape_rz" | "lshape_mixed" => {
            let cut = -PI / 4.0;
            let [u, ux, uy] = corner_strings(2.0 / 3.0, cut);
            let vs = lshape();
            let mixed = name == "lshape_mixed";
            let (d, n) = if mixed { ((3..=6).collect(), vec![1, 2]) } else { (all(6), vec![]) };
            let mut s = base(vs.clone(), d.clone(), n.clone(), "0".into());
            s.data.g0 = d.iter().map(|&a| (a, u.clone())).collect();
            s.data.g1 = n
                .iter()
                .map(|&a| {
                    let nn = straight_normal(&vs, a);
                    (a, format!("{}*{ux} + {}*{uy}", num(nn[0]), num(nn[1])))
                })
                .collect();
            let exact = Exact::Corner {
                alpha: 2.0 / 3.0,
                apex: [0.0, 0.0],
                cut,
            };
            (s, exact, Regularity::Singular { alpha: 2.0 / 3.0 })
        }
        "square_varcoef" => {
            let u = "exp(x)*cos(y)";
            let f = "exp(x)*((2 - 2*x - x^2 + y^2)*cos(y) + (2*y - x)*sin(y))";
            let mut s = base(unit_square(), all(4), vec![], f.into());
            s.coefficients = Coefficients {
                a11: "1 + x^2".into(),
                a12: "0".into(),
                a22: "1 + y^2".into(),
                b1: "1".into(),
                b2: "x".into(),
                c: "1".into(),
            };
            s.data.g0 = (1..=4).map(|a| (a, u.to_string())).collect();
            (s, Exact::ExpCos, Regularity::Analytic)
        }
        "wedge_alpha" => {
            if !(alpha > 0.0) {
                return Err(HarnessError::Spec(format!("wedge_alpha needs alpha > 0, got {alpha}")));
            }
            let cut = -3.0 * PI / 4.0;
            let u = if alpha.fract() == 0.0 {
                harmonic_polynomial(alpha as u32)
            } else {
                corner_strings(alpha, cut)[0].clone()
            };
            let mut s = base(unit_square(), all(4), vec![], "0".into());
            s.data.g0 = (1..=4).map(|a| (a, u.clone())).collect();
            let exact = Exact::Corner {
                alpha,
                apex: [0.0, 0.0],
                cut,
            };
            let reg = if alpha.fract() == 0.0 {
                Regularity::Analytic
            } else {
                Regularity::Singular { alpha }
            };
            (s, exact, reg)
        }
        _ => return Err(HarnessError::UnknownCase(name.to_string())),
    };
    Ok(ManufacturedCase {
        name: name.to_string(),
        spec,
        exact,
        regularity,
    })
}

/// Attaches the exact solution named by `spec.case`, if any.
pub fn case_for_spec(spec: &ProblemSpec) -> Result<Option<ManufacturedCase>, HarnessError> {
    spec.case.as_deref().map(builtin_case).transpose()
}

pub const SPOT_CHECKS: usize = 100;

/// Compares `f` with the operator applied to the exact solution at `n`
/// random interior points, and the boundary data with its traces at `n`
/// random boundary points.
pub fn consistency_check(
    problem: &Problem,
    exact: &Exact,
    n: usize,
    rng: &mut impl Rng,
) -> Result<f64, HarnessError> {
    let mesh = problem.mesh_with(problem.m.max(2))?;
    let mapped: Vec<usize> = (0..mesh.elements.len()).filter(|&i| !mesh.elements[i].is_core()).collect();
    let mut worst: f64 = 0.0;
    let mut compare = |what: &str, x: P2, got: f64, want: f64| -> Result<(), HarnessError> {
        let err = (got - want).abs() / want.abs().max(1.0);
        worst = worst.max(err);
        if err > 1e-10 {
            return Err(HarnessError::Consistency {
                what: what.to_string(),
                x: x[0],
                y: x[1],
                got,
                want,
            });
        }
        Ok(())
    };
    for _ in 0..n {
        let el = &mesh.elements[mapped[rng.gen_range(0..mapped.len())]];
        let dom = el.domain.expect("mapped element");
        let s = dom.s.from_ref(rng.gen_range(-0.95..0.95));
        let t = dom.t.from_ref(rng.gen_range(-0.95..0.95));
        let x = el.map.as_ref().expect("mapped element").jet(s, t)?.x;
        let lu = problem.field.at(x)?.apply(exact.value(x), exact.grad(x), exact.hess(x));
        compare("f", x, problem.data.f.eval(x[0], x[1])?, lu)?;
    }
    let poly = &problem.polygon;
    for _ in 0..n {
        let a = rng.gen_range(0..poly.len());
        let jet = poly.arc(a).jet(rng.gen_range(0.02..0.98))?;
        let x = jet.p;
        match poly.bc(a) {
            BcKind::Dirichlet => {
                let g = problem.data.g0[&a].eval(x[0], x[1])?;
                compare(&format!("g0 on arc {}", a + 1), x, g, exact.value(x))?;
            }
            BcKind::Neumann => {
                let l = norm(jet.d1);
                let nn = [jet.d1[1] / l, -jet.d1[0] / l];
                let a_x = problem.field.principal(x)?;
                let gr = exact.grad(x);
                let flux: f64 = (0..2).map(|r| (0..2).map(|s| nn[r] * a_x[r][s] * gr[s]).sum::<f64>()).sum();
                let g = problem.data.g1[&a].eval(x[0], x[1])?;
                compare(&format!("g1 on arc {}", a + 1), x, g, flux)?;
            }
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// errors

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElementError {
    pub element: usize,
    pub l2_sq: f64,
    pub h1_semi_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VertexError {
    /// 1-based.
    pub vertex: usize,
    pub g: f64,
    pub exact: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub elements: Vec<ElementError>,
    pub l2_sq: f64,
    pub h1_semi_sq: f64,
    /// Broken `H¹` error.
    pub h1: f64,
    pub l2: f64,
    pub vertices: Vec<VertexError>,
}

impl ErrorReport {
    fn from_parts(elements: Vec<ElementError>, vertices: Vec<VertexError>) -> ErrorReport {
        let l2_sq: f64 = elements.iter().map(|e| e.l2_sq).sum();
        let h1_semi_sq: f64 = elements.iter().map(|e| e.h1_semi_sq).sum();
        ErrorReport {
            elements,
            l2_sq,
            h1_semi_sq,
            h1: (l2_sq + h1_semi_sq).sqrt(),
            l2: l2_sq.sqrt(),
            vertices,
        }
    }

    pub fn max_vertex_error(&self) -> f64 {
        self.vertices.iter().map(|v| (v.g - v.exact).abs()).fold(0.0, f64::max)
    }
}

/// Elementwise `L²` and `H¹`-seminorm errors by physical quadrature with
/// `order` Gauss points per direction. Sector elements are integrated in
/// their own coordinates, which absorbs the `e^{2τ}` area factor; core
/// strips are integrated over their true area.
pub fn broken_error(mesh: &GeometricMesh, sol: &Solution, exact: &Exact, order: usize) -> Result<ErrorReport, HarnessError> {
    let g = gauss_rule(order).expect("positive order");
    let elements = (0..mesh.elements.len())
        .into_par_iter()
        .map(|id| -> Result<ElementError, HarnessError> {
            let el = &mesh.elements[id];
            let (mut l2, mut h1) = (0.0, 0.0);
            match (el.kind, &el.map, el.domain) {
                (ElementKind::Core { vertex, slice }, _, _) => {
                    let spec = &mesh.sectors[vertex];
                    let gk = sol.coeffs[id][0];
                    let r1 = spec.radii()[1];
                    let (p0, p1) = (spec.psi[slice], spec.psi[slice + 1]);
                    for (&si, &wi) in g.nodes.iter().zip(&g.weights) {
                        let sigma = 0.5 * (si + 1.0);
                        let nu = r1.ln() + sigma.ln();
                        for (&pj, &wj) in g.nodes.iter().zip(&g.weights) {
                            let phi = p0 + 0.5 * (pj + 1.0) * (p1 - p0);
                            let jet = spec.jet(nu, phi)?;
                            // dν = dσ / σ
                            let w = 0.25 * wi * wj * (p1 - p0) * jet.det().abs() / sigma;
                            let e = gk - exact.value(jet.x);
                            let gr = exact.grad(jet.x);
                            l2 += w * e * e;
                            h1 += w * (gr[0] * gr[0] + gr[1] * gr[1]);
                        }
                    }
                }
                (_, Some(map), Some(dom)) => {
                    let poly = sol.polynomial(mesh, id).expect("mapped element");
                    let area = 0.25 * dom.s.len() * dom.t.len();
                    for (&si, &wi) in g.nodes.iter().zip(&g.weights) {
                        let s = dom.s.from_ref(si);
                        for (&tj, &wj) in g.nodes.iter().zip(&g.weights) {
                            let t = dom.t.from_ref(tj);
                            let jet = map.jet(s, t)?;
                            let gi = jet.inverse().ok_or(OperatorError::SingularJacobian(s, t))?;
                            let u = poly.jet(s, t);
                            let grad = [
                                gi[0][0] * u.s + gi[1][0] * u.t,
                                gi[0][1] * u.s + gi[1][1] * u.t,
                            ];
                            let w = wi * wj * area * jet.det().abs();
                            let e = u.v - exact.value(jet.x);
                            let gr = exact.grad(jet.x);
                            let (dx, dy) = (grad[0] - gr[0], grad[1] - gr[1]);
                            l2 += w * e * e;
                            h1 += w * (dx * dx + dy * dy);
                        }
                    }
                }
                _ => unreachable!("elements are mapped or core strips"),
            }
            Ok(ElementError {
                element: id,
                l2_sq: l2,
                h1_semi_sq: h1,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut vertices = Vec::new();
    for (id, el) in mesh.elements.iter().enumerate() {
        if let ElementKind::Core { vertex, slice: 0 } = el.kind {
            vertices.push(VertexError {
                vertex: vertex + 1,
                g: sol.coeffs[id][0],
                exact: exact.value(mesh.sectors[vertex].apex),
            });
        }
    }
    Ok(ErrorReport::from_parts(elements, vertices))
}

/// Gauss points used for error integrals at degree `w`.
pub fn error_order(w: usize) -> usize {
    2 * w + 6
}

// ---------------------------------------------------------------------------
// schedules and convergence

/// `(M, W)` pairs: `M = W` for analytic data, otherwise
/// `M = max(2, ⌈c·m·ln W⌉)` for regularity index `m` (`M = 1` is the
/// single-element mesh, not a graded one).
pub fn choose_discretization(regularity: Option<usize>, ws: &[usize], c: f64) -> Vec<(usize, usize)> {
    ws.iter()
        .map(|&w| match regularity {
            None => (w, w),
            Some(m) => (((c * m as f64 * (w as f64).ln()).ceil() as usize).max(2), w),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub case: String,
    pub mode: LayoutMode,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub unknowns: usize,
    pub l2_error: f64,
    pub h1_error: f64,
    pub functional: f64,
    pub gk_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceSummary {
    pub rows: Vec<ConvergenceRow>,
    /// `"M"` (exponential fit of `ln e` against `M`) or `"lnW"` (algebraic).
    pub against: &'static str,
    pub fit: Option<Fit>,
    /// `-slope`: the exponential rate `b` or the algebraic order.
    pub rate: Option<f64>,
    pub strictly_decreasing: bool,
    pub seconds: f64,
}

pub fn convergence_run(
    case: &ManufacturedCase,
    schedule: &[(usize, usize)],
    mode: LayoutMode,
    algebraic: bool,
    opts: SolveOptions,
) -> Result<ConvergenceSummary, HarnessError> {
    if schedule.is_empty() {
        return Err(HarnessError::Spec("empty schedule".into()));
    }
    let start = Instant::now();
    let mut problem = case.spec.build()?;
    problem.mode = mode;
    consistency_check(&problem, &case.exact, SPOT_CHECKS, &mut rng(opts.seed))?;
    let rows = schedule
        .par_iter()
        .map(|&(m, w)| {
            let row = || -> Result<ConvergenceRow, HarnessError> {
                let out = solve_at(&problem, m, w, opts)?;
                let err = broken_error(&out.mesh, &out.solution, &case.exact, error_order(w))?;
                Ok(ConvergenceRow {
                    case: case.name.clone(),
                    mode,
                    m,
                    w,
                    unknowns: out.layout.len(),
                    l2_error: err.l2,
                    h1_error: err.h1,
                    functional: out.breakdown.total,
                    gk_error: err.max_vertex_error(),
                })
            };
            row().map_err(|e| HarnessError::Point {
                m,
                w,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let fit = (rows.len() >= 3).then(|| {
        let x: Vec<f64> = rows
            .iter()
            .map(|r| if algebraic { (r.w as f64).ln() } else { r.m as f64 })
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| r.h1_error.ln()).collect();
        let (slope, intercept, r2) = linear_fit(&x, &y);
        Fit { slope, intercept, r2 }
    });
    Ok(ConvergenceSummary {
        strictly_decreasing: rows.windows(2).all(|p| p[1].h1_error < p[0].h1_error),
        rate: fit.as_ref().map(|f| -f.slope),
        against: if algebraic { "lnW" } else { "M" },
        fit,
        rows,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn write_convergence_csv<W: std::io::Write>(rows: &[ConvergenceRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Seeded RNG used by all randomized checks.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(name: &str, sched: &[(usize, usize)]) -> ConvergenceSummary {
        let c = builtin_case(name).unwrap();
        convergence_run(&c, sched, LayoutMode::Nonconforming, false, SolveOptions::default()).unwrap()
    }

    #[test]
    fn cases_are_consistent() {
        for name in CASES {
            let c = builtin_case(name).unwrap();
            let p = c.spec.build().unwrap();
            let worst = consistency_check(&p, &c.exact, SPOT_CHECKS, &mut rng(1)).unwrap();
            assert!(worst < 1e-10, "{name}: {worst}");
        }
        let sq = builtin_case("square_smooth").unwrap();
        let x = [0.3, 0.7];
        let f = Expr::parse(&sq.spec.data.f).unwrap().eval(x[0], x[1]).unwrap();
        assert!((f - 2.0 * PI * PI * sq.exact.value(x)).abs() < 1e-13);
        assert_eq!(builtin_case("lshape_rz").unwrap().spec.data.f, "0");
        assert_eq!(builtin_case("lshape_mixed").unwrap().spec.neumann, vec![1, 2]);
        assert!(matches!(builtin_case("disk"), Err(HarnessError::UnknownCase(_))));
    }

    #[test]
    fn inconsistent_data_is_caught() {
        let mut c = builtin_case("square_varcoef").unwrap();
        c.spec.coefficients.b2 = "0".into();
        let p = c.spec.build().unwrap();
        assert!(matches!(
            consistency_check(&p, &c.exact, SPOT_CHECKS, &mut rng(1)),
            Err(HarnessError::Consistency { .. })
        ));
        assert!(convergence_run(&c, &[(2, 2)], LayoutMode::Nonconforming, false, SolveOptions::default()).is_err());
    }

    #[test]
    fn exact_derivatives_match_differences() {
        let h = 1e-5;
        let cases = [
            Exact::SinSin,
            Exact::ExpCos,
            Exact::Corner {
                alpha: 2.0 / 3.0,
                apex: [0.0, 0.0],
                cut: -PI / 4.0,
            },
        ];
        for e in cases {
            for x in [[0.3, 0.4], [-0.6, 0.2], [-0.5, -0.7]] {
                let g = e.grad(x);
                let hs = e.hess(x);
                for k in 0..2 {
                    let mut p = x;
                    let mut m = x;
                    p[k] += h;
                    m[k] -= h;
                    let fd = (e.value(p) - e.value(m)) / (2.0 * h);
                    assert!((fd - g[k]).abs() < 1e-8, "{e:?} {x:?}");
                    let (gp, gm) = (e.grad(p), e.grad(m));
                    for r in 0..2 {
                        assert!(((gp[r] - gm[r]) / (2.0 * h) - hs[r][k]).abs() < 1e-7, "{e:?} {x:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn spec_round_trip_and_errors() {
        for name in CASES {
            let spec = builtin_case(name).unwrap().spec;
            assert_eq!(ProblemSpec::from_json(&spec.to_json()).unwrap(), spec);
        }
        match ProblemSpec::from_json("{\n  \"version\": 1,\n  \"vertices\": [[0, 0] [1, 0]]\n}") {
            Err(HarnessError::Json { line, column, .. }) => assert_eq!((line, column), (3, 23)),
            other => panic!("{other:?}"),
        }
        let mut spec = builtin_case("square_smooth").unwrap().spec;
        spec.version = 2;
        assert!(matches!(ProblemSpec::from_json(&spec.to_json()), Err(HarnessError::Version(2))));
        spec.version = 1;
        spec.dirichlet = vec![1, 2, 3, 5];
        assert!(matches!(spec.build(), Err(HarnessError::Spec(_))));
        spec.dirichlet = vec![1, 2, 3];
        assert!(spec.build().is_err());
        let text = r#"{"version": 1, "vertices": [[0,0],[1,0],[1,1],[0,1]],
            "arcs": [{"type": "line"}, {"type": "line"},
                     {"type": "param", "x": "1 + 0.1*(1 - t^2)", "y": "(t + 1)/2"}, {"type": "line"}],
            "dirichlet": [1, 2, 3, 4], "data": {"f": "0", "g0": {"1": "0", "2": "0", "3": "0", "4": "0"}},
            "discretization": {"M": 2, "W": 2, "mu": [0.2, 0.15, 0.15, 0.15], "I": 1}}"#;
        let p = ProblemSpec::from_json(text).unwrap().build().unwrap();
        assert_eq!(p.mu.len(), 4);
        assert_eq!(p.slices, vec![1; 4]);
        assert_eq!(p.rho, 0.25);
        assert_eq!(p.mode, LayoutMode::Nonconforming);
    }

    #[test]
    fn schedules() {
        assert_eq!(
            choose_discretization(None, &[2, 3, 4, 5, 6], 1.0),
            vec![(2, 2), (3, 3), (4, 4), (5, 5), (6, 6)]
        );
        assert_eq!(choose_discretization(Some(3), &[8], 1.0), vec![(7, 8)]);
        assert_eq!(choose_discretization(Some(2), &[2], 1.0), vec![(2, 2)]);
        assert_eq!(choose_discretization(Some(1), &[2], 1.0), vec![(2, 2)]);
    }

    #[test]
    fn error_of_exact_and_shifted_solutions() {
        // 2xy on a single element is reproduced exactly
        let c = builtin_case_with("wedge_alpha", 2.0).unwrap();
        assert_eq!(c.regularity, Regularity::Analytic);
        let p = c.spec.build().unwrap();
        let mesh = p.mesh_with(1).unwrap();
        let mut sol = Solution::project(&mesh, 2, |x| c.exact.value(x)).unwrap();
        let e = broken_error(&mesh, &sol, &c.exact, 8).unwrap();
        assert!(e.l2 < 1e-10 && e.h1 < 1e-10);
        sol.coeffs[0][0] += 1.0;
        let e = broken_error(&mesh, &sol, &c.exact, 8).unwrap();
        assert!((e.l2_sq - 1.0).abs() < 1e-13 && e.h1_semi_sq < 1e-20);

        // with sectors: a unit shift adds |Ω| + 2∫e to the squared L² error
        let c = builtin_case("lshape_rz").unwrap();
        let p = c.spec.build().unwrap();
        let mesh = p.mesh_with(3).unwrap();
        let w = 10;
        let mut sol = Solution::project(&mesh, w, |x| c.exact.value(x)).unwrap();
        let a = broken_error(&mesh, &sol, &c.exact, error_order(w)).unwrap();
        for v in sol.coeffs.iter_mut() {
            v[0] += 1.0;
        }
        let b = broken_error(&mesh, &sol, &c.exact, error_order(w)).unwrap();
        assert!((b.h1_semi_sq - a.h1_semi_sq).abs() < 1e-14);
        assert!((b.l2_sq - a.l2_sq - 3.0).abs() < 4.0 * a.l2, "{} {}", b.l2_sq, a.l2);
        let sum: f64 = b.elements.iter().map(|e| e.l2_sq).sum();
        assert_eq!(sum, b.l2_sq);
        assert_eq!(b.vertices.len(), 6);
        assert!((b.vertices[0].g - 1.0).abs() < 1e-14 && b.vertices[0].exact == 0.0);
    }

    #[test]
    fn harmonic_polynomial_is_recovered() {
        let c = builtin_case_with("wedge_alpha", 2.0).unwrap();
        let p = c.spec.build().unwrap();
        for w in 2..5 {
            let out = solve_at(&p, 1, w, SolveOptions::default()).unwrap();
            let exact = Solution::project(&out.mesh, w, |x| c.exact.value(x)).unwrap();
            assert!((&out.solution.coeffs[0] - &exact.coeffs[0]).amax() < 1e-8);
            let e = broken_error(&out.mesh, &out.solution, &c.exact, error_order(w)).unwrap();
            assert!(e.h1 < 1e-8, "{}", e.h1);
        }
    }

    #[test]
    fn singular_case_decays() {
        let r = run("lshape_rz", &[(3, 3), (4, 4)]);
        assert!(r.rows[1].h1_error < r.rows[0].h1_error);
        assert!(r.fit.is_none());
        assert!(r.rows.iter().all(|row| row.h1_error.is_finite() && row.h1_error > 0.0));
        let one = run("square_smooth", &[(2, 2)]);
        assert_eq!(one.rows.len(), 1);
        assert!(one.fit.is_none() && one.rate.is_none());
    }

    #[test]
    fn csv_is_deterministic() {
        let rows = || {
            let mut buf = Vec::new();
            write_convergence_csv(&run("square_varcoef", &[(2, 2), (3, 3)]).rows, &mut buf).unwrap();
            buf
        };
        let a = rows();
        assert_eq!(a, rows());
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("case,mode,M,W,unknowns,l2_error,h1_error,functional,gk_error\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
