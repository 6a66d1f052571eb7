//! Corner sectors in modified polar coordinates.
//!
//! About a vertex `A`, `x = A + e^τ (cos θ, sin θ)`. The reference angle
//! `φ ∈ [ψ_l, ψ_u]` is blended onto the true angle between the two incident
//! arcs, `θ = [(φ - ψ_l) F_u(ν) - (φ - ψ_u) F_l(ν)] / (ψ_u - ψ_l)` with
//! `τ = ν` and `F(ν) = f(e^ν)`.

use crate::basis::Rect;
use crate::expr::Expr;

use super::curve::{cross, dot, norm, sub, wrap_near, Curve, P2};
use super::GeometryError;

/// Layer radii `[0, ρμ^{M-1}, …, ρμ, ρ]`.
pub fn sector_layer_radii(rho: f64, mu: f64, layers: usize) -> Result<Vec<f64>, GeometryError> {
    if !(rho > 0.0 && rho.is_finite()) || !(mu > 0.0 && mu < 1.0) || layers < 1 {
        return Err(GeometryError::Param(format!(
            "need rho > 0, 0 < mu < 1, M >= 1; got rho={rho}, mu={mu}, M={layers}"
        )));
    }
    let mut r = vec![0.0];
    r.extend((1..=layers).map(|j| rho * mu.powi((layers - j) as i32)));
    Ok(r)
}

/// Value and first two derivatives of a scalar function of one variable.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet1 {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Polar angle of a side curve as a function of the distance from the apex.
#[derive(Debug, Clone)]
pub enum SideAngle {
    Const(f64),
    /// Curve oriented away from the apex; `umax` bounds the bisection range
    /// on which the distance is increasing; `psi` is the tangent angle at the
    /// apex used to unwrap `atan2`.
    Curve { curve: Curve, apex: P2, psi: f64, umax: f64 },
    /// Explicit `f(r)` in variable 0 with symbolic derivatives.
    Expr([Expr; 3]),
}

impl SideAngle {
    pub fn expr(f: Expr) -> SideAngle {
        let d1 = f.diff(0);
        let d2 = d1.diff(0);
        SideAngle::Expr([f, d1, d2])
    }

    /// Builds the angle function of a curve that starts at `apex`, checking
    /// that the distance grows monotonically on `[0, umax]` and reaches `rmax`.
    pub fn from_curve(curve: Curve, apex: P2, umax: f64, rmax: f64) -> Result<SideAngle, GeometryError> {
        let t = curve.jet(0.0)?.d1;
        let psi = t[1].atan2(t[0]);
        if curve.is_straight() {
            return Ok(SideAngle::Const(psi));
        }
        let n = 400;
        let mut last = 0.0;
        for i in 1..=n {
            let u = umax * i as f64 / n as f64;
            let d = norm(sub(curve.point(u)?, apex));
            if d <= last {
                return Err(GeometryError::Param(format!(
                    "arc is not radially monotone near its vertex (u = {u:.3})"
                )));
            }
            last = d;
        }
        if last <= rmax {
            return Err(GeometryError::Param(format!(
                "sector radius {rmax} exceeds the usable arc span {last}"
            )));
        }
        Ok(SideAngle::Curve { curve, apex, psi, umax })
    }

    /// `f(r)`, `f'(r)`, `f''(r)`.
    pub fn jet(&self, r: f64) -> Result<Jet1, GeometryError> {
        match self {
            SideAngle::Const(c) => Ok(Jet1 { v: *c, d1: 0.0, d2: 0.0 }),
            SideAngle::Expr(f) => Ok(Jet1 {
                v: f[0].eval(r, 0.0)?,
                d1: f[1].eval(r, 0.0)?,
                d2: f[2].eval(r, 0.0)?,
            }),
            SideAngle::Curve { curve, apex, psi, umax } => {
                let dist = |u: f64| -> Result<f64, GeometryError> { Ok(norm(sub(curve.point(u)?, *apex))) };
                if r <= 0.0 {
                    return Ok(Jet1 { v: *psi, d1: 0.0, d2: 0.0 });
                }
                let (mut lo, mut hi) = (0.0, *umax);
                if dist(hi)? < r {
                    return Err(GeometryError::OutsideSector(format!("radius {r} beyond the side arc")));
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if dist(mid)? < r {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-15 {
                        break;
                    }
                }
                let u = 0.5 * (lo + hi);
                let j = curve.jet(u)?;
                let d = sub(j.p, *apex);
                let dd = norm(d);
                let d1 = dot(d, j.d1) / dd;
                let d2 = (dot(j.d1, j.d1) + dot(d, j.d2) - d1 * d1) / dd;
                let th = wrap_near(d[1].atan2(d[0]), *psi);
                let c1 = cross(d, j.d1);
                let th1 = c1 / (dd * dd);
                let th2 = cross(d, j.d2) / (dd * dd) - 2.0 * c1 * d1 / (dd * dd * dd);
                Ok(Jet1 {
                    v: th,
                    d1: th1 / d1,
                    d2: (th2 * d1 - th1 * d2) / (d1 * d1 * d1),
                })
            }
        }
    }

    /// Jet of `F(ν) = f(e^ν)`.
    fn log_jet(&self, nu: f64) -> Result<Jet1, GeometryError> {
        let r = nu.exp();
        let f = self.jet(r)?;
        Ok(Jet1 {
            v: f.v,
            d1: f.d1 * r,
            d2: f.d2 * r * r + f.d1 * r,
        })
    }
}

/// Point, Jacobian and Hessians of a map `(s, t) ↦ x`.
/// `jac[k][a] = ∂x_k/∂s_a`, `hess[k][a][b] = ∂²x_k/∂s_a∂s_b`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MapJet {
    pub x: P2,
    pub jac: [[f64; 2]; 2],
    pub hess: [[[f64; 2]; 2]; 2],
}

impl MapJet {
    pub fn det(&self) -> f64 {
        self.jac[0][0] * self.jac[1][1] - self.jac[0][1] * self.jac[1][0]
    }

    /// `G = J⁻¹`, i.e. `G[a][k] = ∂s_a/∂x_k`.
    pub fn inverse(&self) -> Option<[[f64; 2]; 2]> {
        let d = self.det();
        if d.abs() < 1e-300 || !d.is_finite() {
            return None;
        }
        let j = &self.jac;
        Some([[j[1][1] / d, -j[0][1] / d], [-j[1][0] / d, j[0][0] / d]])
    }

    /// Jet of `outer ∘ inner`, where `outer` is evaluated at `inner.x`.
    pub fn compose(outer: &MapJet, inner: &MapJet) -> MapJet {
        let mut out = MapJet {
            x: outer.x,
            ..MapJet::default()
        };
        for k in 0..2 {
            for a in 0..2 {
                out.jac[k][a] = (0..2).map(|m| outer.jac[k][m] * inner.jac[m][a]).sum();
                for b in 0..2 {
                    let mut h = 0.0;
                    for m in 0..2 {
                        h += outer.jac[k][m] * inner.hess[m][a][b];
                        for n in 0..2 {
                            h += outer.hess[k][m][n] * inner.jac[m][a] * inner.jac[n][b];
                        }
                    }
                    out.hess[k][a][b] = h;
                }
            }
        }
        out
    }
}

/// Geometric description of the sector around one vertex.
#[derive(Debug, Clone)]
pub struct SectorSpec {
    pub vertex: usize,
    pub apex: P2,
    pub rho: f64,
    pub mu: f64,
    pub layers: usize,
    /// `I + 1` increasing breakpoints from `ψ_l` to `ψ_u`.
    pub psi: Vec<f64>,
    pub lower: SideAngle,
    pub upper: SideAngle,
}

impl SectorSpec {
    pub fn slices(&self) -> usize {
        self.psi.len() - 1
    }

    pub fn psi_l(&self) -> f64 {
        self.psi[0]
    }

    pub fn psi_u(&self) -> f64 {
        self.psi[self.psi.len() - 1]
    }

    pub fn radii(&self) -> Vec<f64> {
        sector_layer_radii(self.rho, self.mu, self.layers).expect("validated at construction")
    }

    /// Reference rectangle in `(ν, φ)` of slice `i` and layer `j ≥ 1`
    /// (0-based; layer 0 is the core strip).
    pub fn element_rect(&self, i: usize, j: usize) -> Rect {
        let r = self.radii();
        Rect::new(r[j].ln(), r[j + 1].ln(), self.psi[i], self.psi[i + 1]).expect("increasing radii and angles")
    }

    /// `(τ, θ)` with the Jacobian of `(ν, φ) ↦ (τ, θ)` and the Hessian of θ.
    pub fn blend_jet(&self, nu: f64, phi: f64) -> Result<MapJet, GeometryError> {
        let (pl, pu) = (self.psi_l(), self.psi_u());
        let tol = 1e-9 * (1.0 + pu.abs());
        if nu > self.rho.ln() + 1e-9 || phi < pl - tol || phi > pu + tol {
            return Err(GeometryError::OutsideSector(format!("(ν, φ) = ({nu}, {phi})")));
        }
        let dpsi = pu - pl;
        let fl = self.lower.log_jet(nu)?;
        let fu = self.upper.log_jet(nu)?;
        let (a, b) = ((phi - pl) / dpsi, (phi - pu) / dpsi);
        let mut j = MapJet {
            x: [nu, a * fu.v - b * fl.v],
            ..MapJet::default()
        };
        j.jac = [[1.0, 0.0], [a * fu.d1 - b * fl.d1, (fu.v - fl.v) / dpsi]];
        let th_nn = a * fu.d2 - b * fl.d2;
        let th_np = (fu.d1 - fl.d1) / dpsi;
        j.hess[1] = [[th_nn, th_np], [th_np, 0.0]];
        Ok(j)
    }

    /// Jet of `(τ, θ) ↦ x = A + e^τ (cos θ, sin θ)`.
    pub fn polar_jet(&self, tau: f64, theta: f64) -> MapJet {
        let e = tau.exp();
        let (s, c) = theta.sin_cos();
        MapJet {
            x: [self.apex[0] + e * c, self.apex[1] + e * s],
            jac: [[e * c, -e * s], [e * s, e * c]],
            hess: [[[e * c, -e * s], [-e * s, -e * c]], [[e * s, e * c], [e * c, -e * s]]],
        }
    }

    /// Jet of the composite map `(ν, φ) ↦ x`.
    pub fn jet(&self, nu: f64, phi: f64) -> Result<MapJet, GeometryError> {
        let b = self.blend_jet(nu, phi)?;
        let p = self.polar_jet(b.x[0], b.x[1]);
        Ok(MapJet::compose(&p, &b))
    }

    pub fn point(&self, nu: f64, phi: f64) -> Result<P2, GeometryError> {
        Ok(self.jet(nu, phi)?.x)
    }

    /// Physical point for `r`, `φ` including the apex (`r = 0`).
    pub fn point_at_radius(&self, r: f64, phi: f64) -> Result<P2, GeometryError> {
        if r <= 0.0 {
            return Ok(self.apex);
        }
        self.point(r.ln(), phi)
    }

    /// Inverse of the blend for a given `(τ, θ)`: the reference angle `φ`.
    pub fn phi_of(&self, tau: f64, theta: f64) -> Result<f64, GeometryError> {
        let fl = self.lower.log_jet(tau)?.v;
        let fu = self.upper.log_jet(tau)?.v;
        Ok(self.psi_l() + (self.psi_u() - self.psi_l()) * (theta - fl) / (fu - fl))
    }

    /// Modified polar coordinates `(τ, θ)` of `x`. The branch cut of θ is
    /// placed in the middle of the angle outside the sector.
    pub fn polar_of(&self, x: P2) -> Option<(f64, f64)> {
        let d = sub(x, self.apex);
        let r = norm(d);
        if r == 0.0 {
            return None;
        }
        let pl = self.psi_l();
        let base = pl - 0.5 * (2.0 * std::f64::consts::PI - (self.psi_u() - pl));
        let th = base + (d[1].atan2(d[0]) - base).rem_euclid(2.0 * std::f64::consts::PI);
        Some((r.ln(), th))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn straight(pl: f64, pu: f64) -> SectorSpec {
        SectorSpec {
            vertex: 0,
            apex: [0.0, 0.0],
            rho: 0.5,
            mu: 0.15,
            layers: 3,
            psi: vec![pl, 0.5 * (pl + pu), pu],
            lower: SideAngle::Const(pl),
            upper: SideAngle::Const(pu),
        }
    }

    #[test]
    fn radii_examples() {
        assert_eq!(sector_layer_radii(0.5, 0.5, 3).unwrap(), vec![0.0, 0.125, 0.25, 0.5]);
        assert_eq!(sector_layer_radii(1.0, 0.3, 1).unwrap(), vec![0.0, 1.0]);
        let r = sector_layer_radii(1.0, 0.15, 4).unwrap();
        for (a, b) in r.iter().zip([0.0, 0.003375, 0.0225, 0.15, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(sector_layer_radii(1.0, 1.0, 2).is_err());
        assert!(sector_layer_radii(-1.0, 0.5, 2).is_err());
        assert!(sector_layer_radii(1.0, 0.5, 0).is_err());
    }

    #[test]
    fn straight_sector_blend_is_identity() {
        let s = straight(0.3, 2.0);
        for (nu, phi) in [(-3.0, 0.3), (-1.0, 1.1), ((0.5f64).ln(), 2.0)] {
            let j = s.blend_jet(nu, phi).unwrap();
            assert!((j.x[0] - nu).abs() < 1e-15 && (j.x[1] - phi).abs() < 1e-15);
            assert_eq!(j.jac, [[1.0, 0.0], [0.0, 1.0]]);
            assert!((j.det() - 1.0).abs() < 1e-15);
        }
        assert!(s.blend_jet(0.0, 1.0).is_err());
        assert!(s.blend_jet(-1.0, 2.5).is_err());
    }

    #[test]
    fn curved_blend_matches_direct_substitution() {
        let f0 = Expr::parse_with("0.1*r^2", &["r"]).unwrap();
        let s = SectorSpec {
            vertex: 0,
            apex: [0.0, 0.0],
            rho: 1.0,
            mu: 0.15,
            layers: 2,
            psi: vec![0.0, PI / 2.0],
            lower: SideAngle::expr(f0),
            upper: SideAngle::Const(PI / 2.0),
        };
        let nu = 0.5f64.ln();
        let j = s.blend_jet(nu, PI / 4.0).unwrap();
        // [(π/4)(π/2) - (π/4 - π/2)(0.1 · 0.25)] / (π/2)
        let direct = ((PI / 4.0) * (PI / 2.0) - (PI / 4.0 - PI / 2.0) * 0.025) / (PI / 2.0);
        assert!((j.x[1] - direct).abs() < 1e-15);
        assert!((j.x[1] - 0.797_898_163_397_448_3).abs() < 1e-15);
        // endpoint of the blend follows f_0
        let e = s.blend_jet(nu, 0.0).unwrap();
        assert!((e.x[1] - 0.025).abs() < 1e-15);
        // finite-difference check of the blend derivatives
        let h = 1e-6;
        let fd = |dn: f64, dp: f64| s.blend_jet(nu + dn, PI / 4.0 + dp).unwrap();
        let th_nu = (fd(h, 0.0).x[1] - fd(-h, 0.0).x[1]) / (2.0 * h);
        let th_phi = (fd(0.0, h).x[1] - fd(0.0, -h).x[1]) / (2.0 * h);
        let th_nunu = (fd(h, 0.0).jac[1][0] - fd(-h, 0.0).jac[1][0]) / (2.0 * h);
        let th_nuphi = (fd(0.0, h).jac[1][0] - fd(0.0, -h).jac[1][0]) / (2.0 * h);
        assert!((th_nu - j.jac[1][0]).abs() < 1e-9);
        assert!((th_phi - j.jac[1][1]).abs() < 1e-9);
        assert!((th_nunu - j.hess[1][0][0]).abs() < 1e-8);
        assert!((th_nuphi - j.hess[1][0][1]).abs() < 1e-8);
    }

    #[test]
    fn curve_side_angle_of_a_circle() {
        // circle of radius 1 centred at (0, 1), starting at the origin heading +x
        let c = Curve::circle([0.0, 1.0], 1.0, -PI / 2.0, 0.0);
        let side = SideAngle::from_curve(c, [0.0, 0.0], 0.5, 0.3).unwrap();
        // chord to a point at distance r makes angle asin(r/2) with the tangent
        for r in [0.01, 0.1, 0.3] {
            let j = side.jet(r).unwrap();
            let x: f64 = r / 2.0;
            assert!((j.v - x.asin()).abs() < 1e-12, "r={r}");
            assert!((j.d1 - 0.5 / (1.0 - x * x).sqrt()).abs() < 1e-9);
            assert!((j.d2 - 0.25 * x / (1.0 - x * x).powf(1.5)).abs() < 1e-7);
        }
        assert!(SideAngle::from_curve(Curve::circle([0.0, 1.0], 1.0, -PI / 2.0, 0.0), [0.0, 0.0], 0.5, 5.0).is_err());
    }

    #[test]
    fn composite_jet_matches_finite_differences() {
        let f1 = Expr::parse_with("2 + 0.2*r - 0.3*r^2", &["r"]).unwrap();
        let s = SectorSpec {
            vertex: 0,
            apex: [0.4, -0.2],
            rho: 0.8,
            mu: 0.15,
            layers: 2,
            psi: vec![0.1, 2.0],
            lower: SideAngle::Const(0.1),
            upper: SideAngle::expr(f1),
        };
        let (nu, phi) = (-0.7, 1.2);
        let j = s.jet(nu, phi).unwrap();
        let h = 1e-5;
        let p = |dn: f64, dp: f64| s.jet(nu + dn, phi + dp).unwrap();
        for k in 0..2 {
            let xn = (p(h, 0.0).x[k] - p(-h, 0.0).x[k]) / (2.0 * h);
            let xp = (p(0.0, h).x[k] - p(0.0, -h).x[k]) / (2.0 * h);
            assert!((xn - j.jac[k][0]).abs() < 1e-8);
            assert!((xp - j.jac[k][1]).abs() < 1e-8);
            let xnn = (p(h, 0.0).jac[k][0] - p(-h, 0.0).jac[k][0]) / (2.0 * h);
            let xnp = (p(0.0, h).jac[k][0] - p(0.0, -h).jac[k][0]) / (2.0 * h);
            let xpp = (p(0.0, h).jac[k][1] - p(0.0, -h).jac[k][1]) / (2.0 * h);
            assert!((xnn - j.hess[k][0][0]).abs() < 1e-8);
            assert!((xnp - j.hess[k][0][1]).abs() < 1e-8);
            assert!((xnp - j.hess[k][1][0]).abs() < 1e-8);
            assert!((xpp - j.hess[k][1][1]).abs() < 1e-8);
        }
        // inverse
        let (tau, th) = s.polar_of(j.x).unwrap();
        assert!((tau - nu).abs() < 1e-13);
        assert!((s.phi_of(tau, th).unwrap() - phi).abs() < 1e-12);
    }

    #[test]
    fn polar_unwrapping_for_reentrant_sector() {
        let s = straight(0.0, 1.5 * PI);
        let (_, th) = s.polar_of([0.0, -0.3]).unwrap();
        assert!((th - 1.5 * PI).abs() < 1e-14);
        let (_, th) = s.polar_of([0.3, 0.0]).unwrap();
        assert!(th.abs() < 1e-14);
    }
}
