//! Planar geometry: exact predicates, Delaunay triangulation and
//! triangle-to-triangle affine maps.

mod affine;
mod delaunay;

pub use affine::{affine_from_triangle, signed_area, Affine2, MIN_TRIANGLE_AREA};
pub use delaunay::{delaunay, Triangulation, DUPLICATE_EPS};

use crate::grid::PixelPoint;

#[inline]
fn coord(p: PixelPoint) -> robust::Coord<f64> {
    robust::Coord { x: p.x, y: p.y }
}

/// Exact orientation: positive if `c` lies left of the directed line `a → b`.
#[inline]
pub fn orient2d(a: PixelPoint, b: PixelPoint, c: PixelPoint) -> f64 {
    robust::orient2d(coord(a), coord(b), coord(c))
}

/// Exact in-circle test: positive if `d` lies strictly inside the circle
/// through the counter-clockwise triangle `a, b, c`.
#[inline]
pub fn incircle(a: PixelPoint, b: PixelPoint, c: PixelPoint, d: PixelPoint) -> f64 {
    robust::incircle(coord(a), coord(b), coord(c), coord(d))
}

/// Closed containment test for a counter-clockwise triangle.
#[inline]
pub fn triangle_contains(a: PixelPoint, b: PixelPoint, c: PixelPoint, p: PixelPoint) -> bool {
    orient2d(a, b, p) >= 0.0 && orient2d(b, c, p) >= 0.0 && orient2d(c, a, p) >= 0.0
}
