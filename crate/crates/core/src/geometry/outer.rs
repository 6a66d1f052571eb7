//! Transfinite (Gordon–Hall) maps from the unit square onto curvilinear
//! quadrilaterals.

use crate::basis::Side;

use super::curve::{dist, norm, sub, Curve, P2};
use super::sector::MapJet;
use super::GeometryError;

/// Quadrilateral bounded by four curves, indexed like [`Side`]:
/// bottom `P0 → P1`, right `P1 → P2`, top `P3 → P2`, left `P0 → P3`.
#[derive(Debug, Clone)]
pub struct OuterMap {
    sides: [Curve; 4],
    corners: [P2; 4],
}

impl OuterMap {
    pub fn new(sides: [Curve; 4]) -> Result<OuterMap, GeometryError> {
        let [b, r, t, l] = &sides;
        let p0 = b.point(0.0)?;
        let p1 = b.point(1.0)?;
        let p2 = t.point(1.0)?;
        let p3 = t.point(0.0)?;
        let scale = [p0, p1, p2, p3].iter().map(|p| norm(*p)).fold(1.0, f64::max);
        let tol = 1e-12 * scale;
        let pairs = [
            (l.point(0.0)?, p0),
            (r.point(0.0)?, p1),
            (r.point(1.0)?, p2),
            (l.point(1.0)?, p3),
        ];
        if pairs.iter().any(|(a, c)| dist(*a, *c) > tol) {
            return Err(GeometryError::CornerMismatch);
        }
        Ok(OuterMap {
            sides,
            corners: [p0, p1, p2, p3],
        })
    }

    /// Quadrilateral with straight sides through four CCW corners.
    pub fn bilinear(c: [P2; 4]) -> Result<OuterMap, GeometryError> {
        Self::new([
            Curve::line(c[0], c[1]),
            Curve::line(c[1], c[2]),
            Curve::line(c[3], c[2]),
            Curve::line(c[0], c[3]),
        ])
    }

    pub fn corners(&self) -> [P2; 4] {
        self.corners
    }

    pub fn side(&self, s: Side) -> &Curve {
        &self.sides[s.index()]
    }

    pub fn jet(&self, xi: f64, eta: f64) -> Result<MapJet, GeometryError> {
        let [b, r, t, l] = &self.sides;
        let bj = b.jet(xi)?;
        let tj = t.jet(xi)?;
        let lj = l.jet(eta)?;
        let rj = r.jet(eta)?;
        let [p0, p1, p2, p3] = self.corners;
        let mut j = MapJet::default();
        for k in 0..2 {
            let bil = (1.0 - xi) * (1.0 - eta) * p0[k] + xi * (1.0 - eta) * p1[k] + xi * eta * p2[k] + (1.0 - xi) * eta * p3[k];
            j.x[k] = (1.0 - eta) * bj.p[k] + eta * tj.p[k] + (1.0 - xi) * lj.p[k] + xi * rj.p[k] - bil;
            let bil_xi = -(1.0 - eta) * p0[k] + (1.0 - eta) * p1[k] + eta * p2[k] - eta * p3[k];
            let bil_eta = -(1.0 - xi) * p0[k] - xi * p1[k] + xi * p2[k] + (1.0 - xi) * p3[k];
            j.jac[k][0] = (1.0 - eta) * bj.d1[k] + eta * tj.d1[k] - lj.p[k] + rj.p[k] - bil_xi;
            j.jac[k][1] = -bj.p[k] + tj.p[k] + (1.0 - xi) * lj.d1[k] + xi * rj.d1[k] - bil_eta;
            let mixed = -bj.d1[k] + tj.d1[k] - lj.d1[k] + rj.d1[k] - (p0[k] - p1[k] + p2[k] - p3[k]);
            j.hess[k] = [
                [(1.0 - eta) * bj.d2[k] + eta * tj.d2[k], mixed],
                [mixed, (1.0 - xi) * lj.d2[k] + xi * rj.d2[k]],
            ];
        }
        Ok(j)
    }

    pub fn point(&self, xi: f64, eta: f64) -> Result<P2, GeometryError> {
        Ok(self.jet(xi, eta)?.x)
    }

    /// Minimum and maximum Jacobian determinant on an `n × n` grid of cell
    /// centres and the boundary nodes.
    pub fn jacobian_range(&self, n: usize) -> Result<(f64, f64), GeometryError> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for a in 0..=n {
            for b in 0..=n {
                let d = self.jet(a as f64 / n as f64, b as f64 / n as f64)?.det();
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
        Ok((lo, hi))
    }

    /// Damped Newton inversion; `None` if the point is not inside.
    pub fn invert(&self, x: P2) -> Option<(f64, f64)> {
        let seeds = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let (mut best, mut best_d) = ((0.5, 0.5), f64::INFINITY);
        for (s, c) in seeds.iter().zip(self.corners) {
            let d = dist(c, x);
            if d < best_d {
                best_d = d;
                best = *s;
            }
        }
        let diam = dist(self.corners[0], self.corners[2]).max(dist(self.corners[1], self.corners[3]));
        for start in [best, (0.5, 0.5)] {
            if let Some(r) = self.newton(x, start, diam) {
                return Some(r);
            }
        }
        None
    }

    fn newton(&self, x: P2, start: (f64, f64), diam: f64) -> Option<(f64, f64)> {
        let (mut s, mut t) = start;
        let tol = 1e-12 * diam.max(1e-300);
        let edge = 1e-9;
        for _ in 0..100 {
            let j = self.jet(s, t).ok()?;
            let res = sub(j.x, x);
            if norm(res) < tol {
                let inside = (-edge..=1.0 + edge).contains(&s) && (-edge..=1.0 + edge).contains(&t);
                return inside.then_some((s.clamp(0.0, 1.0), t.clamp(0.0, 1.0)));
            }
            let g = j.inverse()?;
            let ds = g[0][0] * res[0] + g[0][1] * res[1];
            let dt = g[1][0] * res[0] + g[1][1] * res[1];
            let mut lam = 1.0;
            let r0 = norm(res);
            loop {
                let (s1, t1) = ((s - lam * ds).clamp(-0.5, 1.5), (t - lam * dt).clamp(-0.5, 1.5));
                let r1 = self.point(s1, t1).ok().map(|p| norm(sub(p, x)));
                if r1.is_some_and(|r1| r1 < r0) || lam < 1e-4 {
                    s = s1;
                    t = t1;
                    break;
                }
                lam *= 0.5;
            }
        }
        None
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "type": "transfinite",
            "sides": self.sides.iter().map(Curve::describe).collect::<Vec<_>>(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn unit_square_is_identity() {
        let m = OuterMap::bilinear([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        for (xi, eta) in [(0.0, 0.0), (0.3, 0.8), (1.0, 0.5)] {
            let j = m.jet(xi, eta).unwrap();
            assert!((j.x[0] - xi).abs() < 1e-15 && (j.x[1] - eta).abs() < 1e-15);
            assert!((j.det() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn affine_rectangle() {
        let m = OuterMap::bilinear([[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [0.0, 1.0]]).unwrap();
        let j = m.jet(0.25, 0.6).unwrap();
        assert!((j.x[0] - 0.5).abs() < 1e-15 && (j.x[1] - 0.6).abs() < 1e-15);
        assert!((j.det() - 2.0).abs() < 1e-15);
        assert_eq!(m.jacobian_range(20).unwrap(), (2.0, 2.0));
        let (s, t) = m.invert([1.5, 0.25]).unwrap();
        assert!((s - 0.75).abs() < 1e-12 && (t - 0.25).abs() < 1e-12);
        assert!(m.invert([2.5, 0.25]).is_none());
    }

    #[test]
    fn quarter_annulus_matches_direct_blend() {
        // r ∈ [1, 2], θ ∈ [0, π/2]; bottom on θ = 0, top on θ = π/2.
        let sides = [
            Curve::line([1.0, 0.0], [2.0, 0.0]),
            Curve::circle([0.0, 0.0], 2.0, 0.0, PI / 2.0),
            Curve::line([0.0, 1.0], [0.0, 2.0]),
            Curve::circle([0.0, 0.0], 1.0, 0.0, PI / 2.0),
        ];
        let m = OuterMap::new(sides).unwrap();
        let x = m.point(0.5, 0.5).unwrap();
        // direct: ½B(½) + ½T(½) + ½L(½) + ½R(½) − ¼ΣP
        let c = (PI / 4.0).cos();
        let direct_x = 0.5 * 1.5 + 0.5 * 0.0 + 0.5 * c + 0.5 * 2.0 * c - 0.25 * (1.0 + 2.0 + 0.0 + 0.0);
        let direct_y = 0.5 * 0.0 + 0.5 * 1.5 + 0.5 * c + 0.5 * 2.0 * c - 0.25 * (0.0 + 0.0 + 2.0 + 1.0);
        assert!((x[0] - direct_x).abs() < 1e-15 && (x[1] - direct_y).abs() < 1e-15);
        assert!((x[0] - 1.060_660_171_779_821_2).abs() < 1e-15);
        // interpolates its sides
        for u in [0.0, 0.2, 0.9] {
            let p = m.point(1.0, u).unwrap();
            assert!((p[0].hypot(p[1]) - 2.0).abs() < 1e-15);
        }
        let (lo, hi) = m.jacobian_range(20).unwrap();
        assert!(lo > 0.0 && hi < 10.0);
        let h = 1e-6;
        let j = m.jet(0.3, 0.7).unwrap();
        for k in 0..2 {
            let fd_xe = (m.jet(0.3, 0.7 + h).unwrap().jac[k][0] - m.jet(0.3, 0.7 - h).unwrap().jac[k][0]) / (2.0 * h);
            let fd_ee = (m.jet(0.3, 0.7 + h).unwrap().jac[k][1] - m.jet(0.3, 0.7 - h).unwrap().jac[k][1]) / (2.0 * h);
            let fd_xx = (m.jet(0.3 + h, 0.7).unwrap().jac[k][0] - m.jet(0.3 - h, 0.7).unwrap().jac[k][0]) / (2.0 * h);
            assert!((fd_xe - j.hess[k][0][1]).abs() < 1e-8);
            assert!((fd_ee - j.hess[k][1][1]).abs() < 1e-8);
            assert!((fd_xx - j.hess[k][0][0]).abs() < 1e-8);
        }
        let (s, t) = m.invert([0.0, 1.5]).unwrap();
        assert!((s - 0.5).abs() < 1e-10 && (t - 1.0).abs() < 1e-10);
    }

    #[test]
    fn mismatched_corners_rejected() {
        let sides = [
            Curve::line([0.0, 0.0], [1.0, 0.0]),
            Curve::line([1.0, 0.0], [1.0, 1.0]),
            Curve::line([0.0, 1.0], [1.0, 1.0]),
            Curve::line([0.0, 0.0], [0.0, 1.1]),
        ];
        assert!(matches!(OuterMap::new(sides), Err(GeometryError::CornerMismatch)));
    }
}
