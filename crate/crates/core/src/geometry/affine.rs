use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PixelPoint;

/// Source triangles with smaller absolute area are treated as singular.
pub const MIN_TRIANGLE_AREA: f64 = 1e-8;

/// Signed area, positive for counter-clockwise vertex order.
pub fn signed_area(tri: &[PixelPoint; 3]) -> f64 {
    let [a, b, c] = tri;
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
}

/// Row-major 2×3 affine map `p ↦ M·[x, y, 1]ᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    #[inline]
    pub fn apply(&self, p: PixelPoint) -> PixelPoint {
        let [r0, r1] = &self.m;
        PixelPoint::new(
            r0[0] * p.x + r0[1] * p.y + r0[2],
            r1[0] * p.x + r1[1] * p.y + r1[2],
        )
    }
}

/// The unique affine map sending each source vertex onto its target vertex.
pub fn affine_from_triangle(src: &[PixelPoint; 3], tgt: &[PixelPoint; 3]) -> Result<Affine2> {
    let area = signed_area(src);
    if !(area.abs() >= MIN_TRIANGLE_AREA) {
        return Err(Error::SingularTriangle { area });
    }
    // Work relative to the first vertex: M = T · S⁻¹ with S, T the edge matrices.
    let (s1x, s1y) = (src[1].x - src[0].x, src[1].y - src[0].y);
    let (s2x, s2y) = (src[2].x - src[0].x, src[2].y - src[0].y);
    let (t1x, t1y) = (tgt[1].x - tgt[0].x, tgt[1].y - tgt[0].y);
    let (t2x, t2y) = (tgt[2].x - tgt[0].x, tgt[2].y - tgt[0].y);
    let det = s1x * s2y - s2x * s1y;
    let (i00, i01, i10, i11) = (s2y / det, -s2x / det, -s1y / det, s1x / det);
    let a = t1x * i00 + t2x * i10;
    let b = t1x * i01 + t2x * i11;
    let c = t1y * i00 + t2y * i10;
    let d = t1y * i01 + t2y * i11;
    let tx = tgt[0].x - (a * src[0].x + b * src[0].y);
    let ty = tgt[0].y - (c * src[0].x + d * src[0].y);
    Ok(Affine2 {
        m: [[a, b, tx], [c, d, ty]],
    })
}
