//! Curvilinear polygons: vertices, boundary arcs and their boundary tags.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::curve::{cross, dist, norm, sub, Curve, P2};
use super::GeometryError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcKind {
    Dirichlet,
    Neumann,
}

/// Closed domain bounded by `p` arcs. Arc `i` (0-based) runs from vertex
/// `i - 1` to vertex `i` (indices mod `p`); vertices are counter-clockwise.
#[derive(Debug, Clone)]
pub struct CurvilinearPolygon {
    vertices: Vec<P2>,
    arcs: Vec<Curve>,
    bc: Vec<BcKind>,
    angles: Vec<f64>,
    out_dirs: Vec<f64>,
}

const SEGMENTS_PER_ARC: usize = 64;

impl CurvilinearPolygon {
    /// `dirichlet` and `neumann` hold 0-based arc indices and must partition
    /// `0..p`.
    pub fn new(
        vertices: Vec<P2>,
        arcs: Vec<Curve>,
        dirichlet: &[usize],
        neumann: &[usize],
    ) -> Result<Self, GeometryError> {
        let p = vertices.len();
        if p < 2 || arcs.len() != p {
            return Err(GeometryError::Param(format!(
                "need at least 2 vertices and one arc per vertex, got {} vertices and {} arcs",
                p,
                arcs.len()
            )));
        }
        let scale = vertices.iter().map(|v| norm(*v)).fold(1.0, f64::max);
        let tol = 1e-12 * scale;
        for (i, arc) in arcs.iter().enumerate() {
            let a = arc.point(0.0)?;
            let b = arc.point(1.0)?;
            if dist(a, vertices[(i + p - 1) % p]) > tol || dist(b, vertices[i]) > tol {
                return Err(GeometryError::ArcEndpointMismatch { arc: i + 1 });
            }
            for n in 0..=256 {
                let d = arc.jet(n as f64 / 256.0)?.d1;
                if norm(d) < 1e-6 * scale {
                    return Err(GeometryError::DegenerateArc { arc: i + 1 });
                }
            }
        }
        let mut bc = vec![None; p];
        for (set, kind) in [(dirichlet, BcKind::Dirichlet), (neumann, BcKind::Neumann)] {
            for &i in set {
                match bc.get_mut(i) {
                    Some(slot @ None) => *slot = Some(kind),
                    Some(Some(_)) => {
                        return Err(GeometryError::BoundaryTags(format!("arc {} is tagged twice", i + 1)))
                    }
                    None => return Err(GeometryError::BoundaryTags(format!("no arc {}", i + 1))),
                }
            }
        }
        let bc = bc
            .into_iter()
            .enumerate()
            .map(|(i, b)| b.ok_or_else(|| GeometryError::BoundaryTags(format!("arc {} has no tag", i + 1))))
            .collect::<Result<Vec<_>, _>>()?;

        let samples = arcs
            .iter()
            .map(|a| a.samples(SEGMENTS_PER_ARC))
            .collect::<Result<Vec<_>, _>>()?;
        let signed_area: f64 = samples
            .iter()
            .flat_map(|s| s.windows(2).map(|w| cross(w[0], w[1])))
            .sum::<f64>()
            / 2.0;
        if signed_area <= 0.0 {
            return Err(GeometryError::Orientation);
        }
        check_simple(&samples)?;

        let mut angles = Vec::with_capacity(p);
        let mut out_dirs = Vec::with_capacity(p);
        for k in 0..p {
            let t_out = arcs[(k + 1) % p].jet(0.0)?.d1;
            let t_in = arcs[k].jet(1.0)?.d1;
            let back = [-t_in[0], -t_in[1]];
            let a_out = t_out[1].atan2(t_out[0]);
            let mut omega = back[1].atan2(back[0]) - a_out;
            omega = omega.rem_euclid(2.0 * PI);
            if !(1e-9..=2.0 * PI - 1e-9).contains(&omega) {
                return Err(GeometryError::Angle { vertex: k + 1 });
            }
            angles.push(omega);
            out_dirs.push(a_out);
        }
        Ok(CurvilinearPolygon {
            vertices,
            arcs,
            bc,
            angles,
            out_dirs,
        })
    }

    /// Polygon with straight sides.
    pub fn straight(vertices: Vec<P2>, dirichlet: &[usize], neumann: &[usize]) -> Result<Self, GeometryError> {
        let p = vertices.len();
        let arcs = (0..p)
            .map(|i| Curve::line(vertices[(i + p - 1) % p], vertices[i]))
            .collect();
        Self::new(vertices, arcs, dirichlet, neumann)
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertex(&self, k: usize) -> P2 {
        self.vertices[k]
    }

    pub fn vertices(&self) -> &[P2] {
        &self.vertices
    }

    pub fn arc(&self, i: usize) -> &Curve {
        &self.arcs[i]
    }

    pub fn bc(&self, i: usize) -> BcKind {
        self.bc[i]
    }

    /// Arc ending at vertex `k`.
    pub fn incoming(&self, k: usize) -> usize {
        k
    }

    /// Arc starting at vertex `k`.
    pub fn outgoing(&self, k: usize) -> usize {
        (k + 1) % self.len()
    }

    /// Interior angle ω at vertex `k`.
    pub fn interior_angle(&self, k: usize) -> f64 {
        self.angles[k]
    }

    /// Direction angle of the outgoing arc's tangent at vertex `k`.
    pub fn outgoing_direction(&self, k: usize) -> f64 {
        self.out_dirs[k]
    }

    /// A vertex is Dirichlet-adjacent if either incident arc is Dirichlet.
    pub fn touches_dirichlet(&self, k: usize) -> bool {
        self.bc[self.incoming(k)] == BcKind::Dirichlet || self.bc[self.outgoing(k)] == BcKind::Dirichlet
    }

    /// Area by the boundary integral of `x dy`.
    pub fn area(&self) -> Result<f64, GeometryError> {
        let rule = crate::basis::gauss_rule(24).expect("positive order");
        let mut acc = 0.0;
        for arc in &self.arcs {
            for (&r, &w) in rule.nodes.iter().zip(&rule.weights) {
                let j = arc.jet(0.5 * (r + 1.0))?;
                acc += 0.5 * w * j.p[0] * j.d1[1];
            }
        }
        Ok(acc)
    }
}

fn segments_cross(a: P2, b: P2, c: P2, d: P2) -> bool {
    let d1 = cross(sub(b, a), sub(c, a));
    let d2 = cross(sub(b, a), sub(d, a));
    let d3 = cross(sub(d, c), sub(a, c));
    let d4 = cross(sub(d, c), sub(b, c));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn check_simple(samples: &[Vec<P2>]) -> Result<(), GeometryError> {
    let segs: Vec<(usize, P2, P2)> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.windows(2).map(move |w| (i, w[0], w[1])))
        .collect();
    let n = segs.len();
    for a in 0..n {
        for b in a + 2..n {
            if a == 0 && b == n - 1 {
                continue;
            }
            let (ia, p0, p1) = segs[a];
            let (ib, q0, q1) = segs[b];
            if segments_cross(p0, p1, q0, q1) {
                return Err(GeometryError::NotSimple { arcs: (ia + 1, ib + 1) });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lshape() -> CurvilinearPolygon {
        CurvilinearPolygon::straight(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [0.0, -1.0]],
            &[0, 1, 2, 3, 4, 5],
            &[],
        )
        .unwrap()
    }

    #[test]
    fn lshape_angles() {
        let l = lshape();
        assert!((l.interior_angle(0) - 1.5 * PI).abs() < 1e-14);
        for k in 1..6 {
            assert!((l.interior_angle(k) - 0.5 * PI).abs() < 1e-14);
        }
        assert!((l.area().unwrap() - 3.0).abs() < 1e-13);
        assert!((l.outgoing_direction(0) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn endpoint_mismatch() {
        let v = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let mut arcs: Vec<Curve> = (0..4).map(|i| Curve::line(v[(i + 3) % 4], v[i])).collect();
        arcs[2] = Curve::line([1.0, 0.0], [1.0, 1.0 + 1e-6]);
        let e = CurvilinearPolygon::new(v, arcs, &[0, 1, 2, 3], &[]).unwrap_err();
        assert!(e.to_string().contains("arc endpoint mismatch"), "{e}");
    }

    #[test]
    fn clockwise_and_tags_rejected() {
        let v = vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]];
        assert!(matches!(
            CurvilinearPolygon::straight(v, &[0, 1, 2, 3], &[]),
            Err(GeometryError::Orientation)
        ));
        let sq = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(CurvilinearPolygon::straight(sq.clone(), &[0, 1], &[2]).is_err());
        assert!(CurvilinearPolygon::straight(sq.clone(), &[0, 1, 2], &[2, 3]).is_err());
        let ok = CurvilinearPolygon::straight(sq, &[0], &[1, 2, 3]).unwrap();
        assert!(ok.touches_dirichlet(0) && ok.touches_dirichlet(3) && !ok.touches_dirichlet(1));
    }

    #[test]
    fn self_intersection_rejected() {
        // bow-tie-like pentagon
        let v = vec![[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [1.0, -1.0], [0.0, 2.0]];
        assert!(CurvilinearPolygon::straight(v, &[0, 1, 2, 3, 4], &[]).is_err());
    }

    #[test]
    fn curved_quarter_disc() {
        let v = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let arcs = vec![
            Curve::line(v[2], v[0]),
            Curve::line(v[0], v[1]),
            Curve::circle([0.0, 0.0], 1.0, 0.0, PI / 2.0),
        ];
        let q = CurvilinearPolygon::new(v, arcs, &[0, 1, 2], &[]).unwrap();
        assert!((q.area().unwrap() - PI / 4.0).abs() < 1e-13);
        assert!((q.interior_angle(0) - PI / 2.0).abs() < 1e-14);
        assert!((q.interior_angle(1) - PI / 2.0).abs() < 1e-14);
    }
}
