//! Geometric mesh: graded sector layers around every vertex plus curvilinear
//! quadrilaterals covering the rest of the domain.
//!
//! Outer template: around vertex `k` the annular piece between the circle
//! `r = ρ` and a polyline through the midpoints of the two incident arcs is
//! cut along the sector's angular breakpoints into `I_k` quadrilaterals. The
//! polygon left in the middle is split into convex quadrilaterals by
//! clipping four-vertex ears, with a backtracking search over ear choices.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use serde_json::json;

use crate::basis::{Rect, Side};

use super::curve::{cross, dist, norm, sub, Curve, P2};
use super::outer::OuterMap;
use super::polygon::{BcKind, CurvilinearPolygon};
use super::sector::{sector_layer_radii, MapJet, SectorSpec, SideAngle};
use super::GeometryError;

pub const DEFAULT_MU: f64 = 0.15;
pub const DEFAULT_LAMBDA: f64 = 2.0;

/// Mesh parameters. Empty per-vertex lists fall back to the defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshConfig {
    pub rho: f64,
    /// `M`, including the core layer.
    pub layers: usize,
    pub mu: Vec<f64>,
    pub slices: Vec<usize>,
    pub lambda: f64,
    /// Each outer element is split `r × r` and each sector slice `r` ways.
    pub refine: usize,
}

impl MeshConfig {
    pub fn new(rho: f64, layers: usize) -> Self {
        MeshConfig {
            rho,
            layers,
            mu: Vec::new(),
            slices: Vec::new(),
            lambda: DEFAULT_LAMBDA,
            refine: 1,
        }
    }

    pub fn with_refine(mut self, r: usize) -> Self {
        self.refine = r;
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = vec![mu];
        self
    }

    fn mu_at(&self, k: usize) -> f64 {
        match self.mu.len() {
            0 => DEFAULT_MU,
            1 => self.mu[0],
            _ => self.mu.get(k).copied().unwrap_or(DEFAULT_MU),
        }
    }

    fn slices_at(&self, k: usize, omega: f64) -> usize {
        self.slices
            .get(k)
            .copied()
            .unwrap_or_else(|| ((omega / FRAC_PI_2 - 1e-9).ceil() as usize).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKind {
    /// Innermost strip `j = 0` of a sector; carries the constant `g_k`.
    Core { vertex: usize, slice: usize },
    Sector { vertex: usize, slice: usize, layer: usize },
    Outer { index: usize },
}

#[derive(Debug, Clone)]
pub enum ElementMap {
    Sector(Arc<SectorSpec>),
    Outer(OuterMap),
}

impl ElementMap {
    pub fn jet(&self, s: f64, t: f64) -> Result<MapJet, GeometryError> {
        match self {
            ElementMap::Sector(spec) => spec.jet(s, t),
            ElementMap::Outer(m) => m.jet(s, t),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Element {
    pub kind: ElementKind,
    /// Reference rectangle; `None` for core strips.
    pub domain: Option<Rect>,
    pub map: Option<ElementMap>,
}

impl Element {
    pub fn is_core(&self) -> bool {
        matches!(self.kind, ElementKind::Core { .. })
    }

    pub fn vertex(&self) -> Option<usize> {
        match self.kind {
            ElementKind::Core { vertex, .. } | ElementKind::Sector { vertex, .. } => Some(vertex),
            ElementKind::Outer { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SideRef {
    pub element: usize,
    pub side: Side,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    /// Between two sector elements (or core strips) of the same vertex.
    SectorInterior { vertex: usize },
    /// Between the core strip and the first mapped layer.
    CoreLayer { vertex: usize },
    OuterInterior,
    /// On the circle `r = ρ`; side `a` is the sector element.
    Interface { vertex: usize },
    Boundary { arc: usize, bc: BcKind },
    /// The degenerate `ν = -∞` side of a core strip.
    Apex { vertex: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub kind: EdgeKind,
    pub a: SideRef,
    pub b: Option<SideRef>,
    /// Side parameters of `a` and `b` run in opposite directions.
    pub reversed: bool,
    /// False for edges of semi-infinite strips in `(ν, φ)`.
    pub finite: bool,
}

/// Element containing a point and the local coordinates there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub element: usize,
    pub s: f64,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct GeometricMesh {
    pub polygon: CurvilinearPolygon,
    /// One per vertex, or empty for a mesh without sectors.
    pub sectors: Vec<Arc<SectorSpec>>,
    pub elements: Vec<Element>,
    pub edges: Vec<Edge>,
    sector_base: Vec<usize>,
}

struct OuterSide {
    curve: Curve,
    boundary: Option<usize>,
    interface: Option<(usize, usize)>,
}

impl GeometricMesh {
    /// A single transfinite element bounded by the four arcs of `polygon`.
    pub fn single_element(polygon: CurvilinearPolygon) -> Result<GeometricMesh, GeometryError> {
        if polygon.len() != 4 {
            return Err(GeometryError::Template(format!(
                "single-element mesh needs 4 arcs, got {}",
                polygon.len()
            )));
        }
        let map = OuterMap::new([
            polygon.arc(1).clone(),
            polygon.arc(2).clone(),
            polygon.arc(3).reversed(),
            polygon.arc(0).reversed(),
        ])?;
        check_outer_jacobian(&map, 0)?;
        let elements = vec![Element {
            kind: ElementKind::Outer { index: 0 },
            domain: Some(Rect::UNIT),
            map: Some(ElementMap::Outer(map)),
        }];
        let edges = [(Side::Bottom, 1), (Side::Right, 2), (Side::Top, 3), (Side::Left, 0)]
            .into_iter()
            .map(|(side, arc)| Edge {
                kind: EdgeKind::Boundary {
                    arc,
                    bc: polygon.bc(arc),
                },
                a: SideRef { element: 0, side },
                b: None,
                reversed: false,
                finite: true,
            })
            .collect();
        Ok(GeometricMesh {
            polygon,
            sectors: Vec::new(),
            elements,
            edges,
            sector_base: Vec::new(),
        })
    }

    pub fn build(polygon: CurvilinearPolygon, cfg: &MeshConfig) -> Result<GeometricMesh, GeometryError> {
        let p = polygon.len();
        if cfg.layers < 2 {
            return Err(GeometryError::Param(format!("need M >= 2 layers, got {}", cfg.layers)));
        }
        if cfg.refine == 0 {
            return Err(GeometryError::Param("refinement factor must be positive".into()));
        }
        let refine = cfg.refine;
        if !(cfg.lambda > 1.0) {
            return Err(GeometryError::Param(format!("lambda must exceed 1, got {}", cfg.lambda)));
        }
        let rho = cfg.rho;
        sector_layer_radii(rho, cfg.mu_at(0), cfg.layers)?;
        check_disjoint(&polygon, rho)?;

        // Corner pieces end on each arc at parameter `split[i].0` (from its
        // first vertex) and `split[i].1` (from its second). An odd slice total
        // would leave an odd central polygon, so then the longest arc
        // contributes a boundary side of its own to the central polygon.
        let slice_counts: Vec<usize> = (0..p)
            .map(|k| cfg.slices_at(k, polygon.interior_angle(k)))
            .collect();
        let mut split = vec![(0.5, 0.5); p];
        if slice_counts.iter().sum::<usize>() % 2 == 1 {
            let lengths = (0..p).map(|i| polygon.arc(i).length()).collect::<Result<Vec<_>, _>>()?;
            let longest = (0..p).max_by(|&a, &b| lengths[a].total_cmp(&lengths[b])).expect("p >= 2");
            split[longest] = (0.4, 0.6);
        }

        // sectors
        let mut sectors = Vec::with_capacity(p);
        let mut dpsi = Vec::new();
        for k in 0..p {
            let apex = polygon.vertex(k);
            let omega = polygon.interior_angle(k);
            let slices = slice_counts[k];
            if slices == 0 {
                return Err(GeometryError::Param(format!("vertex {} has zero slices", k + 1)));
            }
            let mu = cfg.mu_at(k);
            sector_layer_radii(rho, mu, cfg.layers)?;
            let out = polygon.arc(polygon.outgoing(k)).clone();
            let inc = polygon.arc(polygon.incoming(k)).reversed();
            let u_out = split[polygon.outgoing(k)].0;
            let u_in = 1.0 - split[polygon.incoming(k)].1;
            for (c, u) in [(&out, u_out), (&inc, u_in)] {
                if dist(c.point(u)?, apex) <= rho {
                    return Err(GeometryError::Overlap(format!(
                        "sector radius {rho} reaches the outer template at vertex {}",
                        k + 1
                    )));
                }
            }
            let lower = SideAngle::from_curve(out, apex, u_out, rho)?;
            let mut upper = SideAngle::from_curve(inc, apex, u_in, rho)?;
            let psi_l = polygon.outgoing_direction(k);
            let psi_u = psi_l + omega;
            match &mut upper {
                SideAngle::Const(c) => *c = psi_u,
                SideAngle::Curve { psi, .. } => *psi = psi_u,
                SideAngle::Expr(_) => {}
            }
            let fine = slices * refine;
            let psi: Vec<f64> = (0..=fine).map(|i| psi_l + omega * i as f64 / fine as f64).collect();
            dpsi.push(omega / slices as f64);
            sectors.push(Arc::new(SectorSpec {
                vertex: k,
                apex,
                rho,
                mu,
                layers: cfg.layers,
                psi,
                lower,
                upper,
            }));
        }
        let (lo, hi) = dpsi
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        if hi >= cfg.lambda * lo {
            return Err(GeometryError::QuasiUniformity {
                ratio: hi / lo,
                lambda: cfg.lambda,
            });
        }

        // sector elements, ordered by (k, j, i)
        let mut elements = Vec::new();
        let mut sector_base = Vec::with_capacity(p);
        for spec in &sectors {
            sector_base.push(elements.len());
            let k = spec.vertex;
            for j in 0..spec.layers {
                for i in 0..spec.slices() {
                    if j == 0 {
                        elements.push(Element {
                            kind: ElementKind::Core { vertex: k, slice: i },
                            domain: None,
                            map: None,
                        });
                    } else {
                        let id = elements.len();
                        let rect = spec.element_rect(i, j);
                        check_sector_jacobian(spec, &rect, id)?;
                        elements.push(Element {
                            kind: ElementKind::Sector {
                                vertex: k,
                                slice: i,
                                layer: j,
                            },
                            domain: Some(rect),
                            map: Some(ElementMap::Sector(spec.clone())),
                        });
                    }
                }
            }
        }

        // corner pieces around each vertex
        let ln_rho = rho.ln();
        let mut outer: Vec<([Curve; 4], [Option<OuterSide>; 4])> = Vec::new();
        let mut polyline: Vec<Vec<P2>> = Vec::with_capacity(p);
        for spec in &sectors {
            let k = spec.vertex;
            let apex = spec.apex;
            let n = spec.slices() / refine;
            let end_out = split[polygon.outgoing(k)].0;
            let end_in = 1.0 - split[polygon.incoming(k)].1;
            let out_arc = polygon.arc(polygon.outgoing(k)).clone();
            let in_arc = polygon.arc(polygon.incoming(k)).reversed();
            let m_out = out_arc.point(end_out)?;
            let m_in = polygon.arc(polygon.incoming(k)).point(split[polygon.incoming(k)].1)?;
            let radius = 0.5 * (dist(m_out, apex) + dist(m_in, apex));
            let theta: Vec<f64> = spec
                .psi
                .iter()
                .step_by(refine)
                .map(|&ph| Ok(spec.blend_jet(ln_rho, ph)?.x[1]))
                .collect::<Result<_, GeometryError>>()?;
            let b: Vec<P2> = theta
                .iter()
                .map(|th| [apex[0] + rho * th.cos(), apex[1] + rho * th.sin()])
                .collect();
            let mut q: Vec<P2> = theta
                .iter()
                .map(|th| [apex[0] + radius * th.cos(), apex[1] + radius * th.sin()])
                .collect();
            q[0] = m_out;
            q[n] = m_in;
            let u_out = param_at_distance(&out_arc, apex, rho, end_out)?;
            let u_in = param_at_distance(&in_arc, apex, rho, end_in)?;
            for i in 0..n {
                let bottom = Curve::circle(apex, rho, theta[i + 1], theta[i]);
                let right = if i == 0 {
                    out_arc.sub(u_out, end_out)
                } else {
                    Curve::line(b[i], q[i])
                };
                let top = Curve::line(q[i + 1], q[i]);
                let left = if i + 1 == n {
                    in_arc.sub(u_in, end_in)
                } else {
                    Curve::line(b[i + 1], q[i + 1])
                };
                let tags = [
                    Some(OuterSide {
                        curve: bottom.clone(),
                        boundary: None,
                        interface: Some((k, i)),
                    }),
                    Some(OuterSide {
                        curve: right.clone(),
                        boundary: (i == 0).then_some(polygon.outgoing(k)),
                        interface: None,
                    }),
                    None,
                    Some(OuterSide {
                        curve: left.clone(),
                        boundary: (i + 1 == n).then_some(polygon.incoming(k)),
                        interface: None,
                    }),
                ];
                // sub-slice `a` of the bottom runs against the angle
                let interface = |a: usize| (k, i * refine + refine - 1 - a);
                outer.extend(subdivide([bottom, right, top, left], tags, refine, interface)?);
            }
            polyline.push(q);
        }

        // central polygon, counter-clockwise; edge `m` runs from vertex `m`
        // to `m + 1` and may follow a boundary arc
        let mut central: Vec<(P2, Option<(Curve, usize)>)> = Vec::new();
        for (k, q) in polyline.iter().enumerate() {
            central.extend(q[1..].iter().rev().map(|&v| (v, None)));
            let arc = polygon.outgoing(k);
            let (a, b) = split[arc];
            if a != b {
                central.push((q[0], Some((polygon.arc(arc).sub(a, b), arc))));
            }
        }
        for (quad, along) in decompose(central)? {
            let edge = |m: usize, reverse: bool| match &along[m] {
                Some((c, _)) if reverse => c.reversed(),
                Some((c, _)) => c.clone(),
                None if reverse => Curve::line(quad[(m + 1) % 4], quad[m]),
                None => Curve::line(quad[m], quad[(m + 1) % 4]),
            };
            let sides = [edge(0, false), edge(1, false), edge(2, true), edge(3, true)];
            let tags = std::array::from_fn(|m| {
                along[m].as_ref().map(|(_, arc)| OuterSide {
                    curve: sides[m].clone(),
                    boundary: Some(*arc),
                    interface: None,
                })
            });
            outer.extend(subdivide(sides, tags, refine, |_| unreachable!("no interface"))?);
        }

        let outer_base = elements.len();
        let mut outer_sides = Vec::new();
        for (l, (sides, tags)) in outer.into_iter().enumerate() {
            let id = outer_base + l;
            let map = OuterMap::new(sides.clone())?;
            check_outer_jacobian(&map, id)?;
            for (side, (curve, tag)) in Side::ALL.into_iter().zip(sides.into_iter().zip(tags)) {
                let tag = tag.unwrap_or(OuterSide {
                    curve,
                    boundary: None,
                    interface: None,
                });
                outer_sides.push((SideRef { element: id, side }, tag));
            }
            elements.push(Element {
                kind: ElementKind::Outer { index: l },
                domain: Some(Rect::UNIT),
                map: Some(ElementMap::Outer(map)),
            });
        }

        let mut mesh = GeometricMesh {
            polygon,
            sectors,
            elements,
            edges: Vec::new(),
            sector_base,
        };
        mesh.edges = mesh.connect(&outer_sides)?;
        Ok(mesh)
    }

    /// Element index of slice `i`, layer `j` at vertex `k`.
    pub fn sector_element(&self, k: usize, i: usize, j: usize) -> usize {
        self.sector_base[k] + j * self.sectors[k].slices() + i
    }

    pub fn num_outer(&self) -> usize {
        self.elements
            .iter()
            .filter(|e| matches!(e.kind, ElementKind::Outer { .. }))
            .count()
    }

    fn connect(&self, outer_sides: &[(SideRef, OuterSide)]) -> Result<Vec<Edge>, GeometryError> {
        let poly = &self.polygon;
        let mut edges = Vec::new();
        let mut interface_owner = std::collections::HashMap::new();
        for (r, s) in outer_sides {
            if let Some(key) = s.interface {
                interface_owner.insert(key, *r);
            }
        }
        for spec in &self.sectors {
            let k = spec.vertex;
            let n = spec.slices();
            let m = spec.layers;
            let at = |i: usize, j: usize, side: Side| SideRef {
                element: self.sector_element(k, i, j),
                side,
            };
            for j in 0..m {
                for i in 0..n.saturating_sub(1) {
                    edges.push(Edge {
                        kind: EdgeKind::SectorInterior { vertex: k },
                        a: at(i, j, Side::Top),
                        b: Some(at(i + 1, j, Side::Bottom)),
                        reversed: false,
                        finite: j > 0,
                    });
                }
            }
            for j in 0..m - 1 {
                for i in 0..n {
                    edges.push(Edge {
                        kind: if j == 0 {
                            EdgeKind::CoreLayer { vertex: k }
                        } else {
                            EdgeKind::SectorInterior { vertex: k }
                        },
                        a: at(i, j, Side::Right),
                        b: Some(at(i, j + 1, Side::Left)),
                        reversed: false,
                        finite: true,
                    });
                }
            }
            for i in 0..n {
                edges.push(Edge {
                    kind: EdgeKind::Apex { vertex: k },
                    a: at(i, 0, Side::Left),
                    b: None,
                    reversed: false,
                    finite: false,
                });
            }
            for j in 0..m {
                for (i, side, arc) in [(0, Side::Bottom, poly.outgoing(k)), (n - 1, Side::Top, poly.incoming(k))] {
                    edges.push(Edge {
                        kind: EdgeKind::Boundary { arc, bc: poly.bc(arc) },
                        a: at(i, j, side),
                        b: None,
                        reversed: false,
                        finite: j > 0,
                    });
                }
            }
            for i in 0..n {
                let b = interface_owner
                    .get(&(k, i))
                    .copied()
                    .ok_or_else(|| GeometryError::Orphan(format!("interface at vertex {} slice {}", k + 1, i + 1)))?;
                edges.push(Edge {
                    kind: EdgeKind::Interface { vertex: k },
                    a: at(i, m - 1, Side::Right),
                    b: Some(b),
                    reversed: true,
                    finite: true,
                });
            }
        }

        let ends: Vec<(P2, P2)> = outer_sides
            .iter()
            .map(|(_, s)| Ok((s.curve.point(0.0)?, s.curve.point(1.0)?)))
            .collect::<Result<_, GeometryError>>()?;
        let scale = poly.vertices().iter().map(|v| norm(*v)).fold(1.0, f64::max);
        let tol = 1e-10 * scale;
        let mut used = vec![false; outer_sides.len()];
        for (a, (ra, sa)) in outer_sides.iter().enumerate() {
            if let Some(arc) = sa.boundary {
                edges.push(Edge {
                    kind: EdgeKind::Boundary { arc, bc: poly.bc(arc) },
                    a: *ra,
                    b: None,
                    reversed: false,
                    finite: true,
                });
                continue;
            }
            if sa.interface.is_some() || used[a] {
                continue;
            }
            let (a0, a1) = ends[a];
            let partner = (a + 1..outer_sides.len()).find(|&b| {
                let (b0, b1) = ends[b];
                !used[b]
                    && outer_sides[b].1.boundary.is_none()
                    && outer_sides[b].1.interface.is_none()
                    && ((dist(a0, b0) < tol && dist(a1, b1) < tol) || (dist(a0, b1) < tol && dist(a1, b0) < tol))
            });
            let b = partner.ok_or_else(|| {
                GeometryError::Orphan(format!("element {} side {:?} has no neighbour", ra.element, ra.side))
            })?;
            used[a] = true;
            used[b] = true;
            edges.push(Edge {
                kind: EdgeKind::OuterInterior,
                a: *ra,
                b: Some(outer_sides[b].0),
                reversed: dist(a0, ends[b].0) >= tol,
                finite: true,
            });
        }
        Ok(edges)
    }

    /// All elements whose closure contains `x`, with local coordinates. Core
    /// strips report `s = ln r` (`-∞` at the apex).
    pub fn locate(&self, x: P2) -> Vec<Location> {
        let mut out = Vec::new();
        let tol = 1e-10;
        for spec in &self.sectors {
            let k = spec.vertex;
            let r = dist(x, spec.apex);
            if r > spec.rho * (1.0 + tol) {
                continue;
            }
            let radii = spec.radii();
            if r == 0.0 {
                for i in 0..spec.slices() {
                    out.push(Location {
                        element: self.sector_element(k, i, 0),
                        s: f64::NEG_INFINITY,
                        t: spec.psi[i],
                    });
                }
                continue;
            }
            let Some((tau, theta)) = spec.polar_of(x) else { continue };
            let Ok(phi) = spec.phi_of(tau.min(spec.rho.ln()), theta) else { continue };
            let atol = tol * (1.0 + spec.psi_u().abs());
            if phi < spec.psi_l() - atol || phi > spec.psi_u() + atol {
                continue;
            }
            let phi = phi.clamp(spec.psi_l(), spec.psi_u());
            for j in 0..spec.layers {
                if r < radii[j] * (1.0 - tol) || r > radii[j + 1] * (1.0 + tol) {
                    continue;
                }
                for i in 0..spec.slices() {
                    if phi < spec.psi[i] - atol || phi > spec.psi[i + 1] + atol {
                        continue;
                    }
                    let s = if j == 0 {
                        tau
                    } else {
                        tau.clamp(radii[j].ln(), radii[j + 1].ln())
                    };
                    out.push(Location {
                        element: self.sector_element(k, i, j),
                        s,
                        t: phi.clamp(spec.psi[i], spec.psi[i + 1]),
                    });
                }
            }
        }
        for (id, e) in self.elements.iter().enumerate() {
            if let Some(ElementMap::Outer(m)) = &e.map {
                let c = m.corners();
                let lo = [c.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min), c.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min)];
                let hi = [c.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max), c.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max)];
                let pad = 0.5 * dist(lo, hi);
                if x[0] < lo[0] - pad || x[0] > hi[0] + pad || x[1] < lo[1] - pad || x[1] > hi[1] + pad {
                    continue;
                }
                if let Some((s, t)) = m.invert(x) {
                    out.push(Location { element: id, s, t });
                }
            }
        }
        out
    }

    /// Corner points of an element in the order `(s.a,t.a), (s.b,t.a),
    /// (s.b,t.b), (s.a,t.b)`.
    pub fn corners(&self, id: usize) -> Result<[P2; 4], GeometryError> {
        let e = &self.elements[id];
        match (&e.kind, &e.map) {
            (ElementKind::Core { vertex, slice }, _) => {
                let spec = &self.sectors[*vertex];
                let r1 = spec.radii()[1];
                Ok([
                    spec.apex,
                    spec.point_at_radius(r1, spec.psi[*slice])?,
                    spec.point_at_radius(r1, spec.psi[slice + 1])?,
                    spec.apex,
                ])
            }
            (_, Some(map)) => {
                let r = e.domain.expect("mapped elements have a domain");
                let mut c = [[0.0; 2]; 4];
                for (slot, (s, t)) in c.iter_mut().zip([(r.s.a, r.t.a), (r.s.b, r.t.a), (r.s.b, r.t.b), (r.s.a, r.t.b)]) {
                    *slot = map.jet(s, t)?.x;
                }
                Ok(c)
            }
            _ => unreachable!("non-core elements carry a map"),
        }
    }

    /// Handshake count: `(4 · elements, 2 · two-sided edges + one-sided edges)`.
    pub fn handshake(&self) -> (usize, usize) {
        let two = self.edges.iter().filter(|e| e.b.is_some()).count();
        let one = self.edges.len() - two;
        (4 * self.elements.len(), 2 * two + one)
    }

    /// JSON description of elements and edges.
    pub fn dump(&self) -> Result<serde_json::Value, GeometryError> {
        let mut elems = Vec::with_capacity(self.elements.len());
        for (id, e) in self.elements.iter().enumerate() {
            let corners = self.corners(id)?;
            let (kind, vertex, slice, layer, index) = match e.kind {
                ElementKind::Core { vertex, slice } => ("core", Some(vertex + 1), Some(slice + 1), Some(1), None),
                ElementKind::Sector { vertex, slice, layer } => {
                    ("sector", Some(vertex + 1), Some(slice + 1), Some(layer + 1), None)
                }
                ElementKind::Outer { index } => ("outer", None, None, None, Some(index + 1)),
            };
            let map = match &e.map {
                None => json!({"type": "constant"}),
                Some(ElementMap::Sector(s)) => {
                    let r = e.domain.expect("sector domain");
                    json!({"type": "sector", "apex": s.apex, "nu": [r.s.a, r.s.b], "phi": [r.t.a, r.t.b]})
                }
                Some(ElementMap::Outer(m)) => m.describe(),
            };
            elems.push(json!({
                "id": id, "kind": kind, "vertex": vertex, "slice": slice, "layer": layer,
                "index": index, "corners": corners, "map": map,
            }));
        }
        let edges: Vec<_> = self
            .edges
            .iter()
            .map(|e| {
                let (kind, arc, bc, vertex) = match e.kind {
                    EdgeKind::SectorInterior { vertex } => ("sector", None, None, Some(vertex + 1)),
                    EdgeKind::CoreLayer { vertex } => ("core", None, None, Some(vertex + 1)),
                    EdgeKind::OuterInterior => ("outer", None, None, None),
                    EdgeKind::Interface { vertex } => ("interface", None, None, Some(vertex + 1)),
                    EdgeKind::Boundary { arc, bc } => ("boundary", Some(arc + 1), Some(bc), None),
                    EdgeKind::Apex { vertex } => ("apex", None, None, Some(vertex + 1)),
                };
                let side = |r: &SideRef| json!({"element": r.element, "side": r.side});
                json!({
                    "kind": kind, "arc": arc, "bc": bc, "vertex": vertex,
                    "a": side(&e.a), "b": e.b.as_ref().map(side),
                    "reversed": e.reversed, "finite": e.finite,
                })
            })
            .collect();
        Ok(json!({"elements": elems, "edges": edges}))
    }
}

type OuterPiece = ([Curve; 4], [Option<OuterSide>; 4]);

/// Splits one outer quadrilateral into `r × r` pieces. Interior cuts are
/// straight between points of the parent map; boundary and interface sides
/// keep their sub-curves.
fn subdivide(
    sides: [Curve; 4],
    tags: [Option<OuterSide>; 4],
    r: usize,
    interface: impl Fn(usize) -> (usize, usize),
) -> Result<Vec<OuterPiece>, GeometryError> {
    if r == 1 {
        return Ok(vec![(sides, tags)]);
    }
    let parent = OuterMap::new(sides.clone())?;
    let f = |a: usize| a as f64 / r as f64;
    let mut nodes = vec![vec![[0.0; 2]; r + 1]; r + 1];
    for (a, row) in nodes.iter_mut().enumerate() {
        for (b, p) in row.iter_mut().enumerate() {
            *p = parent.point(f(a), f(b))?;
        }
    }
    let [bottom, right, top, left] = &sides;
    let mut out = Vec::with_capacity(r * r);
    for b in 0..r {
        for a in 0..r {
            let sub_side = |m: usize, on_parent: bool, curve: &Curve, u: usize, line: Curve| -> (Curve, Option<OuterSide>) {
                if !on_parent {
                    return (line, None);
                }
                let c = curve.sub(f(u), f(u + 1));
                let tag = tags[m].as_ref().map(|t| OuterSide {
                    curve: c.clone(),
                    boundary: t.boundary,
                    interface: t.interface.map(|_| interface(u)),
                });
                (c, tag)
            };
            let (c0, t0) = sub_side(0, b == 0, bottom, a, Curve::line(nodes[a][b], nodes[a + 1][b]));
            let (c1, t1) = sub_side(1, a + 1 == r, right, b, Curve::line(nodes[a + 1][b], nodes[a + 1][b + 1]));
            let (c2, t2) = sub_side(2, b + 1 == r, top, a, Curve::line(nodes[a][b + 1], nodes[a + 1][b + 1]));
            let (c3, t3) = sub_side(3, a == 0, left, b, Curve::line(nodes[a][b], nodes[a][b + 1]));
            out.push(([c0, c1, c2, c3], [t0, t1, t2, t3]));
        }
    }
    Ok(out)
}

fn check_outer_jacobian(map: &OuterMap, id: usize) -> Result<(), GeometryError> {
    let (lo, _) = map.jacobian_range(20)?;
    if lo <= 0.0 {
        return Err(GeometryError::Jacobian { element: id, min: lo });
    }
    Ok(())
}

fn check_sector_jacobian(spec: &SectorSpec, r: &Rect, id: usize) -> Result<(), GeometryError> {
    let n = 20;
    let mut lo = f64::INFINITY;
    for a in 0..=n {
        for b in 0..=n {
            let nu = r.s.a + r.s.len() * a as f64 / n as f64;
            let phi = r.t.a + r.t.len() * b as f64 / n as f64;
            lo = lo.min(spec.blend_jet(nu, phi)?.det());
        }
    }
    if lo <= 0.0 {
        return Err(GeometryError::Jacobian { element: id, min: lo });
    }
    Ok(())
}

/// Curve parameter at which the distance from `apex` (at `u = 0`) is `r`.
fn param_at_distance(c: &Curve, apex: P2, r: f64, umax: f64) -> Result<f64, GeometryError> {
    let (mut lo, mut hi) = (0.0, umax);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dist(c.point(mid)?, apex) < r {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn check_disjoint(poly: &CurvilinearPolygon, rho: f64) -> Result<(), GeometryError> {
    let p = poly.len();
    for k in 0..p {
        for l in k + 1..p {
            if dist(poly.vertex(k), poly.vertex(l)) <= 2.0 * rho {
                return Err(GeometryError::Overlap(format!(
                    "vertices {} and {} are closer than 2ρ = {}",
                    k + 1,
                    l + 1,
                    2.0 * rho
                )));
            }
        }
        for i in 0..p {
            if i == poly.incoming(k) || i == poly.outgoing(k) {
                continue;
            }
            for x in poly.arc(i).samples(256)? {
                if dist(x, poly.vertex(k)) <= rho {
                    return Err(GeometryError::Overlap(format!(
                        "sector at vertex {} meets arc {}",
                        k + 1,
                        i + 1
                    )));
                }
            }
        }
    }
    Ok(())
}

fn turn(a: P2, b: P2, c: P2) -> f64 {
    cross(sub(b, a), sub(c, b))
}

fn interior_angle(prev: P2, at: P2, next: P2) -> f64 {
    let u = sub(prev, at);
    let v = sub(next, at);
    let c = (u[0] * v[0] + u[1] * v[1]) / (norm(u) * norm(v));
    c.clamp(-1.0, 1.0).acos()
}

fn quad_score(q: &[P2; 4], scale: f64) -> Option<f64> {
    let eps = 1e-9 * scale * scale;
    let mut score = f64::INFINITY;
    for i in 0..4 {
        if turn(q[i], q[(i + 1) % 4], q[(i + 2) % 4]) <= eps {
            return None;
        }
        let a = interior_angle(q[(i + 3) % 4], q[i], q[(i + 1) % 4]);
        score = score.min(a).min(std::f64::consts::PI - a);
    }
    Some(score)
}

fn inside_convex(q: &[P2; 4], x: P2, scale: f64) -> bool {
    let eps = 1e-9 * scale;
    (0..4).all(|i| {
        let e = sub(q[(i + 1) % 4], q[i]);
        cross(e, sub(x, q[i])) / norm(e) > -eps
    })
}

type Ring = Vec<(P2, Option<(Curve, usize)>)>;
type Quad = ([P2; 4], [Option<(Curve, usize)>; 4]);

/// Splits a counter-clockwise polygon into convex quads. Edges that follow
/// a boundary arc are judged by their chords and kept on the quads.
fn decompose(poly: Ring) -> Result<Vec<Quad>, GeometryError> {
    let n = poly.len();
    if n < 4 || n % 2 == 1 {
        return Err(GeometryError::Template(format!("central polygon has {n} vertices")));
    }
    let scale = poly.iter().map(|v| norm(v.0)).fold(1.0, f64::max);
    let mut out = Vec::new();
    if clip(poly, scale, &mut out) {
        Ok(out)
    } else {
        Err(GeometryError::Template("no convex quadrilateral split found".into()))
    }
}

fn clip(poly: Ring, scale: f64, out: &mut Vec<Quad>) -> bool {
    let n = poly.len();
    let quad_at = |i: usize| -> [P2; 4] { std::array::from_fn(|m| poly[(i + m) % n].0) };
    if n == 4 {
        let q = quad_at(0);
        if quad_score(&q, scale).is_some() {
            out.push((q, std::array::from_fn(|m| poly[m].1.clone())));
            return true;
        }
        return false;
    }
    let mut candidates: Vec<(f64, usize)> = (0..n)
        .filter_map(|i| {
            let q = quad_at(i);
            let score = quad_score(&q, scale)?;
            let blocked = (4..n).any(|d| {
                let v = poly[(i + d) % n].0;
                inside_convex(&q, v, scale) && q.iter().all(|c| dist(*c, v) > 1e-9 * scale)
            });
            (!blocked).then_some((score, i))
        })
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in candidates {
        let q = quad_at(i);
        let edges = [
            poly[i].1.clone(),
            poly[(i + 1) % n].1.clone(),
            poly[(i + 2) % n].1.clone(),
            None,
        ];
        let rest: Ring = (0..n)
            .filter(|&m| m != (i + 1) % n && m != (i + 2) % n)
            .map(|m| if m == i { (poly[m].0, None) } else { poly[m].clone() })
            .collect();
        let mark = out.len();
        out.push((q, edges));
        if clip(rest, scale, out) {
            return true;
        }
        out.truncate(mark);
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn square(d: &[usize], n: &[usize]) -> CurvilinearPolygon {
        CurvilinearPolygon::straight(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], d, n).unwrap()
    }

    fn lshape() -> CurvilinearPolygon {
        CurvilinearPolygon::straight(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [0.0, -1.0]],
            &[0, 1, 2, 3, 4, 5],
            &[],
        )
        .unwrap()
    }

    /// Every element side appears in exactly one edge.
    fn sides_covered_once(mesh: &GeometricMesh) {
        let mut seen = HashSet::new();
        for e in &mesh.edges {
            for r in std::iter::once(e.a).chain(e.b) {
                assert!(seen.insert((r.element, r.side)), "{r:?} used twice");
            }
        }
        assert_eq!(seen.len(), 4 * mesh.elements.len());
    }

    /// Shared edges are geometrically identical from both sides.
    fn shared_edges_coincide(mesh: &GeometricMesh) {
        for e in &mesh.edges {
            let Some(b) = e.b else { continue };
            if !e.finite || mesh.elements[e.a.element].is_core() {
                continue;
            }
            for lam in [0.0, 0.3, 1.0] {
                let pa = side_point(mesh, e.a, lam);
                let pb = side_point(mesh, b, if e.reversed { 1.0 - lam } else { lam });
                assert!(dist(pa, pb) < 1e-12, "{e:?} at {lam}: {pa:?} vs {pb:?}");
            }
        }
    }

    fn side_point(mesh: &GeometricMesh, r: SideRef, lam: f64) -> P2 {
        let e = &mesh.elements[r.element];
        let (s, t) = r.side.point_unit(&e.domain.unwrap(), lam);
        e.map.as_ref().unwrap().jet(s, t).unwrap().x
    }

    #[test]
    fn unit_square_template() {
        let mesh = GeometricMesh::build(square(&[0, 1, 2, 3], &[]), &MeshConfig::new(0.25, 2)).unwrap();
        // enumeration: 4 vertices × 1 slice × 2 layers, 4 corner pieces + 1 centre quad
        assert_eq!(mesh.elements.len(), 8 + 5);
        assert_eq!(mesh.num_outer(), 5);
        let (a, b) = mesh.handshake();
        assert_eq!(a, b);
        sides_covered_once(&mesh);
        shared_edges_coincide(&mesh);
        let count = |f: &dyn Fn(&EdgeKind) -> bool| mesh.edges.iter().filter(|e| f(&e.kind)).count();
        assert_eq!(count(&|k| matches!(k, EdgeKind::Interface { .. })), 4);
        assert_eq!(count(&|k| matches!(k, EdgeKind::CoreLayer { .. })), 4);
        assert_eq!(count(&|k| matches!(k, EdgeKind::Apex { .. })), 4);
        assert_eq!(count(&|k| matches!(k, EdgeKind::OuterInterior)), 4);
        // boundary: per vertex 2 sides × 2 layers in sectors, plus 2 per corner piece
        let dir = count(&|k| matches!(k, EdgeKind::Boundary { bc: BcKind::Dirichlet, .. }));
        assert_eq!(dir, 4 * 4 + 8);
        assert_eq!(count(&|k| matches!(k, EdgeKind::Boundary { bc: BcKind::Neumann, .. })), 0);
        let centre = mesh.corners(mesh.elements.len() - 1).unwrap();
        let mut c: Vec<(i64, i64)> = centre.iter().map(|p| ((p[0] * 4.0).round() as i64, (p[1] * 4.0).round() as i64)).collect();
        c.sort();
        assert_eq!(c, vec![(0, 2), (2, 0), (2, 4), (4, 2)]);
    }

    #[test]
    fn neumann_tags_follow_their_arcs() {
        let mesh = GeometricMesh::build(square(&[0], &[1, 2, 3]), &MeshConfig::new(0.25, 3)).unwrap();
        let mut per_arc = [0usize; 4];
        for e in &mesh.edges {
            if let EdgeKind::Boundary { arc, bc } = e.kind {
                assert_eq!(bc == BcKind::Dirichlet, arc == 0);
                per_arc[arc] += 1;
            }
        }
        // each arc: 3 layers at each end + two corner-piece halves
        assert_eq!(per_arc, [8, 8, 8, 8]);
        let neu = mesh
            .edges
            .iter()
            .filter(|e| matches!(e.kind, EdgeKind::Boundary { bc: BcKind::Neumann, .. }))
            .count();
        assert_eq!(neu, 24);
    }

    #[test]
    fn lshape_template() {
        let mesh = GeometricMesh::build(lshape(), &MeshConfig::new(0.25, 3)).unwrap();
        let spec = &mesh.sectors[0];
        assert_eq!(spec.slices(), 3);
        assert!((spec.psi_u() - spec.psi_l() - 1.5 * std::f64::consts::PI).abs() < 1e-14);
        // 3 + 5 slices, 3 layers each; 3 + 5 corner pieces + 3 central quads
        assert_eq!(mesh.elements.len(), 8 * 3 + 11);
        assert_eq!(mesh.num_outer(), 11);
        let (a, b) = mesh.handshake();
        assert_eq!(a, b);
        sides_covered_once(&mesh);
        shared_edges_coincide(&mesh);
        // area check: mapped elements plus core discs cover the domain
        let rule = crate::basis::gauss_rule(8).unwrap();
        let mut area = 0.0;
        for e in &mesh.elements {
            match (&e.map, e.domain) {
                (Some(m), Some(r)) => {
                    let (qs, qt) = (rule.mapped(r.s), rule.mapped(r.t));
                    for (&s, &ws) in qs.nodes.iter().zip(&qs.weights) {
                        for (&t, &wt) in qt.nodes.iter().zip(&qt.weights) {
                            area += ws * wt * m.jet(s, t).unwrap().det();
                        }
                    }
                }
                _ => {
                    let ElementKind::Core { vertex, slice } = e.kind else { unreachable!() };
                    let s = &mesh.sectors[vertex];
                    let r1 = s.radii()[1];
                    area += 0.5 * r1 * r1 * (s.psi[slice + 1] - s.psi[slice]);
                }
            }
        }
        assert!((area - 3.0).abs() < 1e-12, "{area}");
    }

    #[test]
    fn locate_points() {
        let mesh = GeometricMesh::build(lshape(), &MeshConfig::new(0.25, 3)).unwrap();
        let hits = mesh.locate([0.0, 0.0]);
        assert_eq!(hits.len(), 3);
        assert!(hits.iter().all(|h| mesh.elements[h.element].is_core()));
        let hits = mesh.locate([-0.4, 0.3]);
        assert_eq!(hits.len(), 1);
        let e = &mesh.elements[hits[0].element];
        let x = e.map.as_ref().unwrap().jet(hits[0].s, hits[0].t).unwrap().x;
        assert!(dist(x, [-0.4, 0.3]) < 1e-12);
        // a point strictly inside a sector layer
        let r = 0.1f64;
        let hits = mesh.locate([r * 0.6, r * 0.8]);
        assert_eq!(hits.len(), 1);
        assert!(matches!(mesh.elements[hits[0].element].kind, ElementKind::Sector { vertex: 0, slice: 0, layer: 2 }));
        assert!(mesh.locate([0.5, -0.5]).is_empty());
    }

    #[test]
    fn curved_domain_meshes() {
        // quarter disc with a circular arc
        let v = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let arcs = vec![
            Curve::line(v[2], v[0]),
            Curve::line(v[0], v[1]),
            Curve::circle([0.0, 0.0], 1.0, 0.0, std::f64::consts::FRAC_PI_2),
        ];
        let poly = CurvilinearPolygon::new(v, arcs, &[0, 1, 2], &[]).unwrap();
        let mesh = GeometricMesh::build(poly, &MeshConfig::new(0.2, 3)).unwrap();
        let (a, b) = mesh.handshake();
        assert_eq!(a, b);
        sides_covered_once(&mesh);
        shared_edges_coincide(&mesh);
    }

    #[test]
    fn refined_template() {
        let mesh = GeometricMesh::build(square(&[0, 1, 2, 3], &[]), &MeshConfig::new(0.25, 2).with_refine(2)).unwrap();
        // slices double, each of the 5 outer pieces splits into 4
        assert_eq!(mesh.sectors[0].slices(), 2);
        assert_eq!(mesh.elements.len(), 4 * 2 * 2 + 20);
        assert_eq!(mesh.num_outer(), 20);
        let (a, b) = mesh.handshake();
        assert_eq!(a, b);
        sides_covered_once(&mesh);
        shared_edges_coincide(&mesh);
        let interfaces = mesh.edges.iter().filter(|e| matches!(e.kind, EdgeKind::Interface { .. })).count();
        assert_eq!(interfaces, 8);
        let dir = mesh
            .edges
            .iter()
            .filter(|e| matches!(e.kind, EdgeKind::Boundary { bc: BcKind::Dirichlet, .. }))
            .count();
        assert_eq!(dir, 4 * 4 + 16);

        for (poly, rho) in [(lshape(), 0.25), (square(&[0], &[1, 2, 3]), 0.3)] {
            let mesh = GeometricMesh::build(poly, &MeshConfig::new(rho, 3).with_refine(3)).unwrap();
            let (a, b) = mesh.handshake();
            assert_eq!(a, b);
            sides_covered_once(&mesh);
            shared_edges_coincide(&mesh);
        }
    }

    #[test]
    fn configuration_errors() {
        assert!(matches!(
            GeometricMesh::build(square(&[0, 1, 2, 3], &[]), &MeshConfig::new(0.6, 2)),
            Err(GeometryError::Overlap(_))
        ));
        let mut cfg = MeshConfig::new(0.2, 2);
        cfg.slices = vec![1, 3, 1, 1];
        assert!(matches!(
            GeometricMesh::build(square(&[0, 1, 2, 3], &[]), &cfg),
            Err(GeometryError::QuasiUniformity { .. })
        ));
        assert!(GeometricMesh::build(square(&[0, 1, 2, 3], &[]), &MeshConfig::new(0.2, 1)).is_err());
        assert!(GeometricMesh::build(square(&[0, 1, 2, 3], &[]), &MeshConfig::new(0.2, 2).with_refine(0)).is_err());
    }

    #[test]
    fn single_element_mesh() {
        let mesh = GeometricMesh::single_element(square(&[0, 1, 2, 3], &[])).unwrap();
        assert_eq!(mesh.elements.len(), 1);
        assert_eq!(mesh.edges.len(), 4);
        let j = mesh.elements[0].map.as_ref().unwrap().jet(0.3, 0.6).unwrap();
        assert!((j.x[0] - 0.3).abs() < 1e-15 && (j.x[1] - 0.6).abs() < 1e-15);
        sides_covered_once(&mesh);
    }

    #[test]
    fn dump_lists_everything() {
        let mesh = GeometricMesh::build(square(&[0, 1], &[2, 3]), &MeshConfig::new(0.25, 2)).unwrap();
        let d = mesh.dump().unwrap();
        assert_eq!(d["elements"].as_array().unwrap().len(), mesh.elements.len());
        assert_eq!(d["edges"].as_array().unwrap().len(), mesh.edges.len());
        assert_eq!(d["elements"][0]["kind"], "core");
    }
}
