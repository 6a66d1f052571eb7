//! h-p least-squares spectral element method for second-order elliptic
//! problems on curvilinear polygons with corner singularities.
//!
//! Pipeline: [`geometry`] builds a geometrically graded mesh, [`operator`]
//! pulls the PDE back to each element, [`functional`] assembles the
//! least-squares normal system, [`solver`] solves it, [`stability`] probes
//! the discrete stability constant and [`harness`] drives manufactured
//! solution studies.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod expr;
pub mod geometry;
pub mod harness;
pub mod functional;
pub mod operator;
pub mod solver;
pub mod stability;

#[cfg(test)]
pub(crate) mod fixtures {
    use crate::geometry::{CurvilinearPolygon, GeometricMesh, MeshConfig};

    pub fn square(dirichlet: &[usize], neumann: &[usize]) -> CurvilinearPolygon {
        CurvilinearPolygon::straight(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], dirichlet, neumann).unwrap()
    }

    /// Re-entrant corner at the origin (vertex 0, between arcs 0 and 1).
    pub fn lshape(dirichlet: &[usize], neumann: &[usize]) -> CurvilinearPolygon {
        CurvilinearPolygon::straight(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [0.0, -1.0]],
            dirichlet,
            neumann,
        )
        .unwrap()
    }

    pub fn mesh(poly: CurvilinearPolygon, layers: usize) -> GeometricMesh {
        GeometricMesh::build(poly, &MeshConfig::new(0.25, layers).with_mu(0.15)).unwrap()
    }
}
