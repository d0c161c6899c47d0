//! Sparse-to-dense flow: a piecewise-affine warp over the Delaunay
//! triangulation of the seed source points, sampled at every source cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{affine_from_triangle, delaunay, triangle_contains, Affine2, Triangulation};
use crate::grid::{Lattice, PixelPoint};
use crate::matching::CorrespondenceSet;

/// Per-cell displacement (pixels) with validity flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    pub lattice: Lattice,
    pub displacement: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl DisplacementField {
    pub fn invalid(lattice: Lattice) -> Self {
        Self {
            lattice,
            displacement: vec![[0.0; 2]; lattice.len()],
            valid: vec![false; lattice.len()],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i)
    }

    /// Warped position `u + D(u)` of a valid cell.
    pub fn warped(&self, cell: usize) -> Option<PixelPoint> {
        if !self.valid[cell] {
            return None;
        }
        let c = self.lattice.center(cell);
        let [dx, dy] = self.displacement[cell];
        Some(PixelPoint::new(c.x + dx, c.y + dy))
    }
}

/// The piecewise-affine warp built from a seed set.
#[derive(Debug, Clone)]
pub struct PiecewiseAffine {
    pub triangulation: Triangulation,
    /// Matched target point of every triangulation vertex.
    pub vertex_targets: Vec<PixelPoint>,
    /// Per-triangle affine; `None` for skipped (singular) source triangles.
    pub affines: Vec<Option<Affine2>>,
}

impl PiecewiseAffine {
    pub fn from_seeds(seed: &CorrespondenceSet) -> Result<Self> {
        let triangulation = delaunay(&seed.sources())?;
        let vertex_targets: Vec<PixelPoint> = triangulation
            .vertex_to_input
            .iter()
            .map(|&i| seed.pairs()[i].tgt)
            .collect();
        let affines = (0..triangulation.triangles.len())
            .map(|t| {
                let src = triangulation.triangle_points(t);
                let tgt = triangulation.triangles[t].map(|v| vertex_targets[v]);
                match affine_from_triangle(&src, &tgt) {
                    Ok(a) => Some(a),
                    Err(Error::SingularTriangle { .. }) => None,
                    Err(e) => unreachable!("affine_from_triangle only fails on singular input: {e}"),
                }
            })
            .collect();
        Ok(Self {
            triangulation,
            vertex_targets,
            affines,
        })
    }

    /// Lowest-index triangle containing `p` (boundary inclusive).
    pub fn locate(&self, p: PixelPoint) -> Option<usize> {
        (0..self.triangulation.triangles.len()).find(|&t| {
            let [a, b, c] = self.triangulation.triangle_points(t);
            triangle_contains(a, b, c, p)
        })
    }

    /// Evaluates the warp at `p`; `None` outside the hull or in a skipped triangle.
    pub fn apply(&self, p: PixelPoint) -> Option<PixelPoint> {
        let t = self.locate(p)?;
        self.affines[t].map(|a| a.apply(p))
    }

    /// Samples the warp at every cell center of `lattice`. Cells outside the
    /// hull, inside skipped triangles, or landing outside `target_extent`
    /// `(width_px, height_px)` are invalid.
    pub fn sample(&self, lattice: Lattice, target_extent: (f64, f64)) -> DisplacementField {
        let mut field = DisplacementField::invalid(lattice);
        let mut assigned = vec![false; lattice.len()];
        let s = lattice.stride_px;
        for (t, affine) in self.affines.iter().enumerate() {
            let [a, b, c] = self.triangulation.triangle_points(t);
            let min_x = a.x.min(b.x).min(c.x);
            let max_x = a.x.max(b.x).max(c.x);
            let min_y = a.y.min(b.y).min(c.y);
            let max_y = a.y.max(b.y).max(c.y);
            // cells whose center (k + 0.5)·s falls in [min, max]
            let lo = |v: f64| ((v / s - 0.5).ceil().max(0.0)) as usize;
            let hi = |v: f64, n: usize| -> Option<usize> {
                let k = (v / s - 0.5).floor();
                if k < 0.0 {
                    None
                } else {
                    Some((k as usize).min(n - 1))
                }
            };
            let (Some(c1), Some(r1)) = (hi(max_x, lattice.width), hi(max_y, lattice.height)) else {
                continue;
            };
            let (c0, r0) = (lo(min_x), lo(min_y));
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let u = row * lattice.width + col;
                    if assigned[u] {
                        continue;
                    }
                    let center = lattice.center(u);
                    if !triangle_contains(a, b, c, center) {
                        continue;
                    }
                    assigned[u] = true;
                    let Some(affine) = affine else { continue };
                    let w = affine.apply(center);
                    let (tw, th) = target_extent;
                    if w.x.is_finite() && w.y.is_finite() && w.x >= 0.0 && w.x <= tw && w.y >= 0.0 && w.y <= th {
                        field.valid[u] = true;
                        field.displacement[u] = [w.x - center.x, w.y - center.y];
                    }
                }
            }
        }
        field
    }
}

/// Report from [`densify`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyReport {
    pub vertices: usize,
    pub triangles: usize,
    pub skipped_triangles: usize,
    pub collinear: bool,
}

/// Dense displacement field on `src_lattice` from a seed set. Fewer than
/// three distinct or all-collinear seeds give an all-invalid field.
pub fn densify(
    seed: &CorrespondenceSet,
    src_lattice: Lattice,
    target_extent: (f64, f64),
) -> (DisplacementField, DensifyReport) {
    if seed.len() < 3 {
        return (
            DisplacementField::invalid(src_lattice),
            DensifyReport {
                vertices: seed.len(),
                collinear: true,
                ..Default::default()
            },
        );
    }
    let warp = PiecewiseAffine::from_seeds(seed).expect("seed points are finite and at least 3");
    let report = DensifyReport {
        vertices: warp.triangulation.vertices.len(),
        triangles: warp.triangulation.triangles.len(),
        skipped_triangles: warp.affines.iter().filter(|a| a.is_none()).count(),
        collinear: warp.triangulation.collinear,
    };
    (warp.sample(src_lattice, target_extent), report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{Correspondence, Provenance};

    fn seeds(pairs: &[((f64, f64), (f64, f64))]) -> CorrespondenceSet {
        CorrespondenceSet::from_pairs(pairs.iter().map(|&((sx, sy), (tx, ty))| {
            Correspondence::new(PixelPoint::new(sx, sy), PixelPoint::new(tx, ty), Provenance::Mnn)
        }))
        .unwrap()
    }

    #[test]
    fn identity_seeds_give_zero_flow() {
        let s = seeds(&[
            ((1.0, 1.0), (1.0, 1.0)),
            ((19.0, 2.0), (19.0, 2.0)),
            ((3.0, 18.0), (3.0, 18.0)),
            ((17.0, 17.0), (17.0, 17.0)),
        ]);
        let lat = Lattice::new(10, 10, 2.0).unwrap();
        let (f, rep) = densify(&s, lat, (20.0, 20.0));
        assert!(!rep.collinear);
        assert!(f.valid_count() > 50);
        for u in f.valid_cells() {
            assert_eq!(f.displacement[u], [0.0, 0.0]);
        }
    }

    #[test]
    fn outside_hull_is_invalid() {
        let s = seeds(&[((5.0, 5.0), (5.0, 5.0)), ((9.0, 5.0), (9.0, 5.0)), ((5.0, 9.0), (5.0, 9.0))]);
        let lat = Lattice::new(10, 10, 2.0).unwrap();
        let (f, _) = densify(&s, lat, (20.0, 20.0));
        // cell (0, 0) centered at (1, 1)
        assert!(!f.valid[0]);
        // cell (2, 2) centered at (5, 5) is a vertex
        assert!(f.valid[2 * 10 + 2]);
    }

    #[test]
    fn out_of_image_targets_invalidate() {
        let s = seeds(&[
            ((1.0, 1.0), (101.0, 1.0)),
            ((19.0, 1.0), (119.0, 1.0)),
            ((1.0, 19.0), (101.0, 19.0)),
        ]);
        let lat = Lattice::new(10, 10, 2.0).unwrap();
        let (f, _) = densify(&s, lat, (20.0, 20.0));
        assert_eq!(f.valid_count(), 0);
    }

    #[test]
    fn collinear_seeds_all_invalid() {
        let s = seeds(&[((1.0, 1.0), (1.0, 1.0)), ((3.0, 3.0), (3.0, 3.0)), ((5.0, 5.0), (5.0, 5.0))]);
        let lat = Lattice::new(4, 4, 2.0).unwrap();
        let (f, rep) = densify(&s, lat, (8.0, 8.0));
        assert!(rep.collinear);
        assert_eq!(f.valid_count(), 0);
    }
}
