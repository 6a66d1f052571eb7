//! Legendre tensor-product polynomials and Gauss-type quadrature.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BasisError {
    #[error("quadrature order must be at least 1, got {0}")]
    Order(usize),
    #[error("coefficient array has length {got}, expected {expected}")]
    Length { got: usize, expected: usize },
    #[error("degenerate interval [{0}, {1}]")]
    Interval(f64, f64),
}

/// Closed interval `[a, b]`, `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub a: f64,
    pub b: f64,
}

impl Interval {
    pub const UNIT: Interval = Interval { a: 0.0, b: 1.0 };

    pub fn new(a: f64, b: f64) -> Result<Self, BasisError> {
        if a < b && a.is_finite() && b.is_finite() {
            Ok(Interval { a, b })
        } else {
            Err(BasisError::Interval(a, b))
        }
    }

    pub fn len(&self) -> f64 {
        self.b - self.a
    }

    /// Maps `x` in this interval to `[-1, 1]`.
    pub fn to_ref(&self, x: f64) -> f64 {
        (2.0 * x - self.a - self.b) / (self.b - self.a)
    }

    pub fn from_ref(&self, r: f64) -> f64 {
        0.5 * (self.a + self.b) + 0.5 * (self.b - self.a) * r
    }

    /// d(ref)/dx.
    pub fn scale(&self) -> f64 {
        2.0 / (self.b - self.a)
    }
}

/// Reference rectangle `s ∈ [s.a, s.b]`, `t ∈ [t.a, t.b]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub s: Interval,
    pub t: Interval,
}

impl Rect {
    pub const UNIT: Rect = Rect {
        s: Interval::UNIT,
        t: Interval::UNIT,
    };

    pub fn new(s0: f64, s1: f64, t0: f64, t1: f64) -> Result<Self, BasisError> {
        Ok(Rect {
            s: Interval::new(s0, s1)?,
            t: Interval::new(t0, t1)?,
        })
    }

    pub fn area(&self) -> f64 {
        self.s.len() * self.t.len()
    }
}

/// Quadrature nodes and weights on some interval.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Affinely maps a rule given on `[-1, 1]` onto `iv`.
    pub fn mapped(&self, iv: Interval) -> QuadratureRule {
        let h = 0.5 * iv.len();
        QuadratureRule {
            nodes: self.nodes.iter().map(|&r| iv.from_ref(r)).collect(),
            weights: self.weights.iter().map(|w| w * h).collect(),
        }
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Values of `P_0..=P_n` at `x`.
pub fn legendre(n: usize, x: f64) -> Vec<f64> {
    let mut p = vec![0.0; n + 1];
    p[0] = 1.0;
    if n >= 1 {
        p[1] = x;
    }
    for k in 1..n {
        let kf = k as f64;
        p[k + 1] = ((2.0 * kf + 1.0) * x * p[k] - kf * p[k - 1]) / (kf + 1.0);
    }
    p
}

/// Values, first and second derivatives of `P_0..=P_n` at `x ∈ [-1, 1]`.
pub fn legendre_derivs(n: usize, x: f64) -> [Vec<f64>; 3] {
    let p = legendre(n + 1, x);
    let mut d1 = vec![0.0; n + 2];
    let mut d2 = vec![0.0; n + 2];
    // P'_{k+1} = P'_{k-1} + (2k+1) P_k, and likewise one order up.
    for k in 0..=n {
        let c = (2 * k + 1) as f64;
        let prev1 = if k >= 1 { d1[k - 1] } else { 0.0 };
        let prev2 = if k >= 1 { d2[k - 1] } else { 0.0 };
        d1[k + 1] = prev1 + c * p[k];
        d2[k + 1] = prev2 + c * d1[k];
    }
    let mut p = p;
    p.truncate(n + 1);
    d1.truncate(n + 1);
    d2.truncate(n + 1);
    [p, d1, d2]
}

/// Gauss–Legendre–Lobatto rule with `q + 1` nodes on `[-1, 1]`; exact for
/// polynomials of degree `2q - 1`.
pub fn gll_rule(q: usize) -> Result<QuadratureRule, BasisError> {
    if q == 0 {
        return Err(BasisError::Order(q));
    }
    let n = q;
    let mut nodes = vec![0.0; n + 1];
    let mut weights = vec![0.0; n + 1];
    let nf = n as f64;
    for i in 0..=n {
        // Chebyshev–Gauss–Lobatto guess, Newton on (1-x^2) P_n'.
        let mut x = -(std::f64::consts::PI * i as f64 / nf).cos();
        if i > 0 && i < n {
            for _ in 0..100 {
                let p = legendre(n, x);
                let dx = (x * p[n] - p[n - 1]) / ((nf + 1.0) * p[n]);
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
        }
        let pn = legendre(n, x)[n];
        nodes[i] = x;
        weights[i] = 2.0 / (nf * (nf + 1.0) * pn * pn);
    }
    // Symmetrize to remove roundoff asymmetry.
    for i in 0..=n / 2 {
        let j = n - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -x;
        nodes[j] = x;
        weights[i] = w;
        weights[j] = w;
    }
    if n.is_multiple_of(2) {
        nodes[n / 2] = 0.0;
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Gauss–Legendre rule with `n` interior nodes on `[-1, 1]`; exact to degree `2n - 1`.
pub fn gauss_rule(n: usize) -> Result<QuadratureRule, BasisError> {
    if n == 0 {
        return Err(BasisError::Order(n));
    }
    let nf = n as f64;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = -(std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let [p, d, _] = legendre_derivs(n, x);
            dp = d[n];
            let dx = p[n] / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let [_, d, _] = legendre_derivs(n, x);
        dp = if d[n] != 0.0 { d[n] } else { dp };
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Value and derivatives up to second order of a scalar field in local
/// coordinates `(s, t)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Jet2 {
    pub v: f64,
    pub s: f64,
    pub t: f64,
    pub ss: f64,
    pub st: f64,
    pub tt: f64,
}

impl Jet2 {
    pub fn as_array(&self) -> [f64; 6] {
        [self.v, self.s, self.t, self.ss, self.st, self.tt]
    }
}

/// 1D Legendre tables at a set of points of an interval, scaled to
/// derivatives in that interval's coordinate.
#[derive(Debug, Clone)]
pub struct Table1d {
    /// `[point][degree]`
    pub p: Vec<Vec<f64>>,
    pub d1: Vec<Vec<f64>>,
    pub d2: Vec<Vec<f64>>,
}

impl Table1d {
    pub fn new(degree: usize, iv: Interval, points: &[f64]) -> Table1d {
        let sc = iv.scale();
        let mut t = Table1d {
            p: Vec::with_capacity(points.len()),
            d1: Vec::with_capacity(points.len()),
            d2: Vec::with_capacity(points.len()),
        };
        for &x in points {
            let [p, d1, d2] = legendre_derivs(degree, iv.to_ref(x));
            t.p.push(p);
            t.d1.push(d1.iter().map(|v| v * sc).collect());
            t.d2.push(d2.iter().map(|v| v * sc * sc).collect());
        }
        t
    }

    /// Derivative of order `k` of basis `n` at point `i`.
    pub fn get(&self, k: usize, i: usize, n: usize) -> f64 {
        match k {
            0 => self.p[i][n],
            1 => self.d1[i][n],
            _ => self.d2[i][n],
        }
    }
}

/// Degree-`W` polynomial on an interval in the Legendre basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly1d {
    pub interval: Interval,
    pub coeffs: Vec<f64>,
}

impl Poly1d {
    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let p = legendre(self.degree(), self.interval.to_ref(x));
        p.iter().zip(&self.coeffs).map(|(a, b)| a * b).sum()
    }

    pub fn derivative(&self) -> Poly1d {
        Poly1d {
            interval: self.interval,
            coeffs: diff_coeffs(&self.coeffs, self.interval.scale()),
        }
    }
}

/// Legendre coefficients of the derivative, same length.
fn diff_coeffs(c: &[f64], scale: f64) -> Vec<f64> {
    let n = c.len();
    let mut d = vec![0.0; n];
    // d_k = (2k+1) Σ_{j>k, j-k odd} c_j, via backward running sums.
    let mut odd = 0.0;
    let mut even = 0.0;
    for k in (0..n).rev() {
        // sums over j > k with parity opposite to k
        let s = if k % 2 == 0 { odd } else { even };
        d[k] = (2 * k + 1) as f64 * s * scale;
        if k % 2 == 0 {
            even += c[k];
        } else {
            odd += c[k];
        }
    }
    d
}

/// Which side of a reference rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Side {
    /// `t = t.a`, parameter `s`
    Bottom,
    /// `s = s.b`, parameter `t`
    Right,
    /// `t = t.b`, parameter `s`
    Top,
    /// `s = s.a`, parameter `t`
    Left,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Bottom, Side::Right, Side::Top, Side::Left];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Interval of the side parameter.
    pub fn param_interval(self, r: &Rect) -> Interval {
        match self {
            Side::Bottom | Side::Top => r.s,
            Side::Left | Side::Right => r.t,
        }
    }

    /// Local point on the side for a parameter value.
    pub fn point(self, r: &Rect, u: f64) -> (f64, f64) {
        match self {
            Side::Bottom => (u, r.t.a),
            Side::Top => (u, r.t.b),
            Side::Left => (r.s.a, u),
            Side::Right => (r.s.b, u),
        }
    }

    /// Point for a normalized parameter `λ ∈ [0, 1]`.
    pub fn point_unit(self, r: &Rect, lam: f64) -> (f64, f64) {
        let iv = self.param_interval(r);
        self.point(r, iv.a + lam * iv.len())
    }
}

/// Degree-`W` tensor Legendre polynomial on a rectangle. Coefficients are
/// row-major: `c[a * (W+1) + b]` multiplies `P_a(s) P_b(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorPolynomial {
    degree: usize,
    domain: Rect,
    coeffs: Vec<f64>,
}

impl TensorPolynomial {
    pub fn new(degree: usize, domain: Rect, coeffs: Vec<f64>) -> Result<Self, BasisError> {
        let expected = (degree + 1) * (degree + 1);
        if coeffs.len() != expected {
            return Err(BasisError::Length {
                got: coeffs.len(),
                expected,
            });
        }
        Ok(TensorPolynomial {
            degree,
            domain,
            coeffs,
        })
    }

    pub fn zeros(degree: usize, domain: Rect) -> Self {
        TensorPolynomial {
            degree,
            domain,
            coeffs: vec![0.0; (degree + 1) * (degree + 1)],
        }
    }

    pub fn constant(degree: usize, domain: Rect, c: f64) -> Self {
        let mut p = Self::zeros(degree, domain);
        p.coeffs[0] = c;
        p
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn domain(&self) -> &Rect {
        &self.domain
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        let n = self.degree;
        let ps = legendre(n, self.domain.s.to_ref(s));
        let pt = legendre(n, self.domain.t.to_ref(t));
        let mut acc = 0.0;
        for a in 0..=n {
            let row = &self.coeffs[a * (n + 1)..(a + 1) * (n + 1)];
            let inner: f64 = row.iter().zip(&pt).map(|(c, p)| c * p).sum();
            acc += ps[a] * inner;
        }
        acc
    }

    pub fn eval_many(&self, points: &[(f64, f64)]) -> Vec<f64> {
        points.iter().map(|&(s, t)| self.eval(s, t)).collect()
    }

    /// Value and all derivatives up to order two.
    pub fn jet(&self, s: f64, t: f64) -> Jet2 {
        let n = self.degree;
        let [ps, ds, dds] = legendre_derivs(n, self.domain.s.to_ref(s));
        let [pt, dt, ddt] = legendre_derivs(n, self.domain.t.to_ref(t));
        let (hs, ht) = (self.domain.s.scale(), self.domain.t.scale());
        let mut j = Jet2::default();
        for a in 0..=n {
            for b in 0..=n {
                let c = self.coeffs[a * (n + 1) + b];
                if c == 0.0 {
                    continue;
                }
                j.v += c * ps[a] * pt[b];
                j.s += c * ds[a] * pt[b];
                j.t += c * ps[a] * dt[b];
                j.ss += c * dds[a] * pt[b];
                j.st += c * ds[a] * dt[b];
                j.tt += c * ps[a] * ddt[b];
            }
        }
        j.s *= hs;
        j.t *= ht;
        j.ss *= hs * hs;
        j.st *= hs * ht;
        j.tt *= ht * ht;
        j
    }

    /// Exact derivative in direction 1 (`s`) or 2 (`t`); array size kept.
    pub fn diff(&self, direction: usize) -> TensorPolynomial {
        let n = self.degree + 1;
        let mut out = vec![0.0; n * n];
        if direction == 1 {
            let sc = self.domain.s.scale();
            for b in 0..n {
                let col: Vec<f64> = (0..n).map(|a| self.coeffs[a * n + b]).collect();
                let d = diff_coeffs(&col, sc);
                for a in 0..n {
                    out[a * n + b] = d[a];
                }
            }
        } else {
            let sc = self.domain.t.scale();
            for a in 0..n {
                let d = diff_coeffs(&self.coeffs[a * n..(a + 1) * n], sc);
                out[a * n..(a + 1) * n].copy_from_slice(&d);
            }
        }
        TensorPolynomial {
            degree: self.degree,
            domain: self.domain,
            coeffs: out,
        }
    }

    /// Restriction to a side, as a polynomial in the side parameter.
    pub fn edge_trace(&self, side: Side) -> Poly1d {
        let n = self.degree + 1;
        let d = &self.domain;
        let coeffs = match side {
            Side::Bottom | Side::Top => {
                let t = if side == Side::Bottom { d.t.a } else { d.t.b };
                let pt = legendre(self.degree, d.t.to_ref(t));
                (0..n)
                    .map(|a| (0..n).map(|b| self.coeffs[a * n + b] * pt[b]).sum())
                    .collect()
            }
            Side::Left | Side::Right => {
                let s = if side == Side::Left { d.s.a } else { d.s.b };
                let ps = legendre(self.degree, d.s.to_ref(s));
                (0..n)
                    .map(|b| (0..n).map(|a| self.coeffs[a * n + b] * ps[a]).sum())
                    .collect()
            }
        };
        Poly1d {
            interval: side.param_interval(d),
            coeffs,
        }
    }
}

/// Discrete L² projection of `f` onto degree-`W` tensor polynomials on
/// `domain`, using the GLL rule of order `q` in each direction.
///
/// With `q ≥ W + 1` the discrete Legendre Gram matrix is exactly diagonal,
/// so projection reproduces degree-`W` polynomials.
pub fn project_to_degree(
    f: impl Fn(f64, f64) -> f64,
    degree: usize,
    domain: Rect,
    q: usize,
) -> Result<TensorPolynomial, BasisError> {
    let rule = gll_rule(q.max(degree + 1))?;
    let n = degree + 1;
    let tab: Vec<Vec<f64>> = rule.nodes.iter().map(|&r| legendre(degree, r)).collect();
    let vals: Vec<Vec<f64>> = rule
        .nodes
        .iter()
        .map(|&rs| {
            rule.nodes
                .iter()
                .map(|&rt| f(domain.s.from_ref(rs), domain.t.from_ref(rt)))
                .collect()
        })
        .collect();
    let mut coeffs = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let mut acc = 0.0;
            for (i, wi) in rule.weights.iter().enumerate() {
                for (j, wj) in rule.weights.iter().enumerate() {
                    acc += wi * wj * vals[i][j] * tab[i][a] * tab[j][b];
                }
            }
            // ∫ P_a² = 2/(2a+1) on [-1, 1]
            coeffs[a * n + b] = acc * (2 * a + 1) as f64 * (2 * b + 1) as f64 / 4.0;
        }
    }
    TensorPolynomial::new(degree, domain, coeffs)
}

/// 1D analogue of [`project_to_degree`].
pub fn project_1d(f: impl Fn(f64) -> f64, degree: usize, iv: Interval, q: usize) -> Result<Poly1d, BasisError> {
    let rule = gll_rule(q.max(degree + 1))?;
    let mut coeffs = vec![0.0; degree + 1];
    for (&r, &w) in rule.nodes.iter().zip(&rule.weights) {
        let p = legendre(degree, r);
        let fv = f(iv.from_ref(r));
        for (c, pa) in coeffs.iter_mut().zip(&p) {
            *c += w * fv * pa;
        }
    }
    for (a, c) in coeffs.iter_mut().enumerate() {
        *c *= (2 * a + 1) as f64 / 2.0;
    }
    Ok(Poly1d { interval: iv, coeffs })
}
