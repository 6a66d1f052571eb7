//! Curvilinear polygons, corner sectors and the graded element mesh.

mod curve;
mod mesh;
mod outer;
mod polygon;
mod sector;

use thiserror::Error;

use crate::expr::ExprError;

pub use curve::{cross, dist, dot, norm, sub, wrap_near, Curve, CurveJet, Shape, P2};
pub use mesh::{
    Edge, EdgeKind, Element, ElementKind, ElementMap, GeometricMesh, Location, MeshConfig, SideRef, DEFAULT_LAMBDA,
    DEFAULT_MU,
};
pub use outer::OuterMap;
pub use polygon::{BcKind, CurvilinearPolygon};
pub use sector::{sector_layer_radii, Jet1, MapJet, SectorSpec, SideAngle};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("parameter out of range: {0}")]
    Param(String),
    #[error("arc endpoint mismatch on arc {arc}")]
    ArcEndpointMismatch { arc: usize },
    #[error("arc {arc} has a degenerate parameterization")]
    DegenerateArc { arc: usize },
    #[error("invalid boundary tags: {0}")]
    BoundaryTags(String),
    #[error("vertices must be listed counter-clockwise")]
    Orientation,
    #[error("boundary is not simple: arcs {} and {} intersect", .arcs.0, .arcs.1)]
    NotSimple { arcs: (usize, usize) },
    #[error("interior angle at vertex {vertex} is not in (0, 2π)")]
    Angle { vertex: usize },
    #[error("overlapping sectors: {0}")]
    Overlap(String),
    #[error("angular subdivision violates quasi-uniformity: max/min = {ratio:.3} >= {lambda}")]
    QuasiUniformity { ratio: f64, lambda: f64 },
    #[error("outer region not decomposable by the configured template: {0}")]
    Template(String),
    #[error("element {element} has a non-positive Jacobian (min {min:.3e})")]
    Jacobian { element: usize, min: f64 },
    #[error("quadrilateral sides do not close at the corners")]
    CornerMismatch,
    #[error("point outside the sector: {0}")]
    OutsideSector(String),
    #[error("orphan edge: {0}")]
    Orphan(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}
