//! Synthetic object instances with known dense correspondence.
//!
//! A canonical descriptor field lives on a canonical frame. Every instance is
//! the canonical field pushed through its own piecewise-affine mesh warp,
//! plus per-cell noise, with random clutter outside the elliptical object.
//! Keypoints are placed in mirror pairs about the vertical axis of the
//! object, so a mirror-symmetric field makes left and right parts hard to
//! tell apart.

use std::f64::consts::PI;
use std::path::Path;

use flowanchor_core::densify::DisplacementField;
use flowanchor_core::geometry::{affine_from_triangle, orient2d, triangle_contains};
use flowanchor_core::io::{
    read_feature_file, write_atomic, write_feature_file, BoxPair, CorrespondenceFile, ImagePair, PairRecord, Splits,
};
use flowanchor_core::{
    BBox, CellMask, CorrespondenceSet, Error, FeatureGrid, Lattice, PixelPoint, PixelRegion, Provenance, Result,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub stride_px: f64,
    pub dim: usize,
    pub n_instances: usize,
    /// Squares per side of the warp control mesh.
    pub mesh_cells: usize,
    /// Uniform per-node jitter bound (px).
    pub warp_jitter_px: f64,
    /// Rotation bound (radians) of the global affine part.
    pub max_rotation: f64,
    /// Relative scale bound of the global affine part.
    pub max_scale: f64,
    pub max_translation_px: f64,
    /// Per-component descriptor noise, relative to the unit-variance field.
    pub noise_sigma: f64,
    pub symmetric: bool,
    /// Share of field variance that is mirror-symmetric when `symmetric` is on.
    pub symmetry_strength: f64,
    /// Wavelength range of the canonical field, in cells.
    pub wavelength_cells: [f64; 2],
    pub modes_per_dim: usize,
    /// Object ellipse semi-axes as fractions of the frame size.
    pub object_radius: [f64; 2],
    pub n_seen_kp: usize,
    pub n_unseen_kp: usize,
    /// Minimum spacing between keypoints, in cells.
    pub kp_spacing_cells: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 24,
            width: 24,
            stride_px: 4.0,
            dim: 16,
            n_instances: 6,
            mesh_cells: 4,
            warp_jitter_px: 2.5,
            max_rotation: 0.15,
            max_scale: 0.08,
            max_translation_px: 5.0,
            noise_sigma: 0.3,
            symmetric: true,
            symmetry_strength: 0.9,
            wavelength_cells: [6.0, 18.0],
            modes_per_dim: 8,
            object_radius: [0.36, 0.36],
            n_seen_kp: 6,
            n_unseen_kp: 6,
            kp_spacing_cells: 2.5,
        }
    }
}

impl SceneSpec {
    pub fn lattice(&self) -> Result<Lattice> {
        Lattice::new(self.height, self.width, self.stride_px)
    }

    /// Canonical frame `(width_px, height_px)`.
    pub fn frame(&self) -> (f64, f64) {
        (self.width as f64 * self.stride_px, self.height as f64 * self.stride_px)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("scene spec: {m}")));
        self.lattice()?;
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.n_instances < 2 {
            return bad("need at least 2 instances");
        }
        if self.n_seen_kp < 3 {
            return bad("need at least 3 seen keypoints to triangulate");
        }
        if self.mesh_cells == 0 || self.modes_per_dim == 0 {
            return bad("mesh_cells and modes_per_dim must be positive");
        }
        let nonneg = [
            self.warp_jitter_px,
            self.max_rotation,
            self.max_scale,
            self.max_translation_px,
            self.noise_sigma,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("warp and noise magnitudes must be finite and >= 0");
        }
        if self.max_scale >= 1.0 {
            return bad("max_scale must be < 1");
        }
        if !(0.0..=1.0).contains(&self.symmetry_strength) {
            return bad("symmetry_strength must lie in [0, 1]");
        }
        let [lo, hi] = self.wavelength_cells;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("wavelength range must satisfy 0 < lo <= hi");
        }
        if self.object_radius.iter().any(|r| !(*r > 0.0 && *r < 0.5)) {
            return bad("object radius fractions must lie in (0, 0.5)");
        }
        if !(self.kp_spacing_cells >= 0.0) {
            return bad("keypoint spacing must be >= 0");
        }
        Ok(())
    }
}

/// One cosine mode `cos(2π k·q + φ)` with `k` in cycles per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub kx: f64,
    pub ky: f64,
    pub phase: f64,
}

impl Mode {
    fn eval(&self, q: PixelPoint) -> f64 {
        (2.0 * PI * (self.kx * q.x + self.ky * q.y) + self.phase).cos()
    }
}

/// Sum of random cosine modes per descriptor dimension, optionally blended
/// with its own mirror image about `axis_x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalField {
    pub dim: usize,
    pub axis_x: f64,
    /// Weight of the mirror-symmetric component.
    pub symmetry: f64,
    /// `dim` groups of symmetric-part modes, then `dim` groups of free modes.
    pub sym_modes: Vec<Vec<Mode>>,
    pub free_modes: Vec<Vec<Mode>>,
}

impl CanonicalField {
    fn random(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Self {
        let [lo, hi] = spec.wavelength_cells;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<Mode>> {
            (0..spec.dim)
                .map(|_| {
                    (0..spec.modes_per_dim)
                        .map(|_| {
                            let lambda = rng.random_range(lo..=hi) * spec.stride_px;
                            let theta = rng.random_range(0.0..PI);
                            Mode {
                                kx: theta.cos() / lambda,
                                ky: theta.sin() / lambda,
                                phase: rng.random_range(0.0..2.0 * PI),
                            }
                        })
                        .collect()
                })
                .collect()
        };
        let sym_modes = draw(rng);
        let free_modes = draw(rng);
        Self {
            dim: spec.dim,
            axis_x: spec.frame().0 / 2.0,
            symmetry: if spec.symmetric { spec.symmetry_strength } else { 0.0 },
            sym_modes,
            free_modes,
        }
    }

    pub fn mirror(&self, q: PixelPoint) -> PixelPoint {
        PixelPoint::new(2.0 * self.axis_x - q.x, q.y)
    }

    /// Unit-variance descriptor at a canonical location.
    pub fn eval(&self, q: PixelPoint) -> Vec<f64> {
        let m = self.mirror(q);
        let s = self.symmetry;
        (0..self.dim)
            .map(|d| {
                let norm = (self.sym_modes[d].len() as f64 / 2.0).sqrt();
                let sym: f64 = self.sym_modes[d].iter().map(|md| md.eval(q) + md.eval(m)).sum::<f64>()
                    / (2f64.sqrt() * norm);
                let free: f64 = self.free_modes[d].iter().map(|md| md.eval(q)).sum::<f64>() / norm;
                s.sqrt() * sym + (1.0 - s).sqrt() * free
            })
            .collect()
    }
}

/// Piecewise-affine warp defined by displaced nodes of a regular mesh over
/// the canonical frame. Each mesh square is split along its main diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshWarp {
    pub frame: (f64, f64),
    pub cells: usize,
    /// Warped node positions, `(cells + 1)²`, row-major.
    pub nodes: Vec<PixelPoint>,
}

impl MeshWarp {
    pub fn identity(frame: (f64, f64), cells: usize) -> Self {
        let mut w = Self {
            frame,
            cells,
            nodes: Vec::new(),
        };
        w.nodes = (0..=cells)
            .flat_map(|j| (0..=cells).map(move |i| (i, j)))
            .map(|(i, j)| w.canonical_node(i, j))
            .collect();
        w
    }

    pub fn translation(frame: (f64, f64), cells: usize, dx: f64, dy: f64) -> Self {
        let mut w = Self::identity(frame, cells);
        w.nodes.iter_mut().for_each(|p| *p = PixelPoint::new(p.x + dx, p.y + dy));
        w
    }

    fn canonical_node(&self, i: usize, j: usize) -> PixelPoint {
        PixelPoint::new(
            i as f64 * self.frame.0 / self.cells as f64,
            j as f64 * self.frame.1 / self.cells as f64,
        )
    }

    fn node(&self, i: usize, j: usize) -> PixelPoint {
        self.nodes[j * (self.cells + 1) + i]
    }

    /// All mesh triangles as (canonical, warped) vertex triples.
    fn triangles(&self) -> impl Iterator<Item = ([PixelPoint; 3], [PixelPoint; 3])> + '_ {
        (0..self.cells).flat_map(move |j| {
            (0..self.cells).flat_map(move |i| {
                let idx = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
                let c = idx.map(|(a, b)| self.canonical_node(a, b));
                let w = idx.map(|(a, b)| self.node(a, b));
                [([c[0], c[1], c[2]], [w[0], w[1], w[2]]), ([c[0], c[2], c[3]], [w[0], w[2], w[3]])]
            })
        })
    }

    /// Every warped triangle keeps its orientation.
    pub fn is_fold_free(&self) -> bool {
        self.triangles().all(|(_, [a, b, c])| orient2d(a, b, c) > 0.0)
    }

    /// Canonical → instance. Outside the frame the border triangles extend affinely.
    pub fn forward(&self, q: PixelPoint) -> PixelPoint {
        let m = self.cells as f64;
        let fx = q.x / self.frame.0 * m;
        let fy = q.y / self.frame.1 * m;
        let i = (fx.floor().max(0.0) as usize).min(self.cells - 1);
        let j = (fy.floor().max(0.0) as usize).min(self.cells - 1);
        let (u, v) = (fx - i as f64, fy - j as f64);
        let n00 = self.node(i, j);
        let n10 = self.node(i + 1, j);
        let n11 = self.node(i + 1, j + 1);
        let n01 = self.node(i, j + 1);
        let (ex, ey) = if u >= v {
            ((n10.x - n00.x, n10.y - n00.y), (n11.x - n10.x, n11.y - n10.y))
        } else {
            ((n11.x - n01.x, n11.y - n01.y), (n01.x - n00.x, n01.y - n00.y))
        };
        PixelPoint::new(n00.x + u * ex.0 + v * ey.0, n00.y + u * ex.1 + v * ey.1)
    }

    /// Instance → canonical, for points covered by the warped mesh.
    pub fn inverse(&self, x: PixelPoint) -> Option<PixelPoint> {
        self.triangles().find_map(|(c, w)| {
            if triangle_contains(w[0], w[1], w[2], x) {
                affine_from_triangle(&w, &c).ok().map(|a| a.apply(x))
            } else {
                None
            }
        })
    }

    fn random(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Self {
        let frame = spec.frame();
        let center = PixelPoint::new(frame.0 / 2.0, frame.1 / 2.0);
        let sym = |rng: &mut ChaCha8Rng, b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
        let theta = sym(rng, spec.max_rotation);
        let sx = 1.0 + sym(rng, spec.max_scale);
        let sy = 1.0 + sym(rng, spec.max_scale);
        let tx = sym(rng, spec.max_translation_px);
        let ty = sym(rng, spec.max_translation_px);
        let (s, c) = theta.sin_cos();
        let mut w = Self::identity(frame, spec.mesh_cells);
        for p in w.nodes.iter_mut() {
            let (dx, dy) = ((p.x - center.x) * sx, (p.y - center.y) * sy);
            let jx = sym(rng, spec.warp_jitter_px);
            let jy = sym(rng, spec.warp_jitter_px);
            *p = PixelPoint::new(
                center.x + c * dx - s * dy + tx + jx,
                center.y + s * dx + c * dy + ty + jy,
            );
        }
        w
    }
}

/// Displacement `W_b(W_a⁻¹(x)) − x` at every cell center of `lattice`.
/// Cells outside the warped mesh of `a`, or mapping outside the frame of
/// `b`, are invalid.
pub fn flow_between(warp_a: &MeshWarp, warp_b: &MeshWarp, lattice: Lattice) -> DisplacementField {
    let mut field = DisplacementField::invalid(lattice);
    let (w, h) = lattice.extent_px();
    for u in 0..lattice.len() {
        let x = lattice.center(u);
        let Some(q) = warp_a.inverse(x) else { continue };
        let y = warp_b.forward(q);
        if (0.0..=w).contains(&y.x) && (0.0..=h).contains(&y.y) {
            field.valid[u] = true;
            field.displacement[u] = [y.x - x.x, y.y - x.y];
        }
    }
    field
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub field: CanonicalField,
    pub warps: Vec<MeshWarp>,
    /// Object mask of every instance.
    pub masks: Vec<CellMask>,
    pub canonical_keypoints: Vec<PixelPoint>,
    /// `keypoints[instance][id]`.
    pub keypoints: Vec<Vec<PixelPoint>>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    /// Rendered, L2-normalised descriptors of every instance.
    #[serde(skip)]
    pub features: Vec<FeatureGrid<f32>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn in_ellipse(q: PixelPoint, center: PixelPoint, radii: (f64, f64)) -> bool {
    let dx = (q.x - center.x) / radii.0;
    let dy = (q.y - center.y) / radii.1;
    dx * dx + dy * dy <= 1.0
}

fn place_keypoints(spec: &SceneSpec, field: &CanonicalField, rng: &mut ChaCha8Rng) -> Result<Vec<PixelPoint>> {
    let (fw, fh) = spec.frame();
    let center = PixelPoint::new(fw / 2.0, fh / 2.0);
    // keep keypoints well inside the object so warped copies stay inside it
    let radii = (0.8 * spec.object_radius[0] * fw, 0.8 * spec.object_radius[1] * fh);
    let spacing = spec.kp_spacing_cells * spec.stride_px;
    let total = spec.n_seen_kp + spec.n_unseen_kp;
    let mut pts: Vec<PixelPoint> = Vec::with_capacity(total);
    let far = |pts: &[PixelPoint], p: PixelPoint| pts.iter().all(|q| q.dist(&p) >= spacing);
    // seen ids first, then unseen; mirror partners stay in the same split
    for split_len in [spec.n_seen_kp, spec.n_unseen_kp] {
        let mut placed = 0;
        let mut attempts = 0;
        while placed < split_len {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::InvalidInput(
                    "scene spec: cannot place keypoints at the requested spacing".into(),
                ));
            }
            let p = PixelPoint::new(
                rng.random_range(center.x - radii.0..=center.x + radii.0),
                rng.random_range(center.y - radii.1..=center.y + radii.1),
            );
            if !in_ellipse(p, center, radii) || !far(&pts, p) {
                continue;
            }
            let m = field.mirror(p);
            if split_len - placed >= 2 {
                if p.dist(&m) < spacing || !far(&pts, m) {
                    continue;
                }
                pts.push(p);
                pts.push(m);
                placed += 2;
            } else {
                pts.push(p);
                placed += 1;
            }
        }
    }
    Ok(pts)
}

/// Builds a scene deterministically from `(spec, seed)`.
pub fn synth_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let lattice = spec.lattice()?;
    let mut root = ChaCha8Rng::seed_from_u64(seed);
    let mut field_rng = ChaCha8Rng::seed_from_u64(root.random());
    let mut warp_rng = ChaCha8Rng::seed_from_u64(root.random());
    let mut kp_rng = ChaCha8Rng::seed_from_u64(root.random());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(root.random());

    let field = CanonicalField::random(spec, &mut field_rng);
    let warps: Vec<MeshWarp> = (0..spec.n_instances)
        .map(|_| MeshWarp::random(spec, &mut warp_rng))
        .collect();
    if let Some(i) = warps.iter().position(|w| !w.is_fold_free()) {
        return Err(Error::InvalidInput(format!(
            "scene spec: warp of instance {i} folds; reduce warp_jitter_px"
        )));
    }
    let canonical_keypoints = place_keypoints(spec, &field, &mut kp_rng)?;
    let (fw, fh) = spec.frame();
    let center = PixelPoint::new(fw / 2.0, fh / 2.0);
    let radii = (spec.object_radius[0] * fw, spec.object_radius[1] * fh);

    let mut masks = Vec::with_capacity(warps.len());
    let mut features = Vec::with_capacity(warps.len());
    let mut keypoints = Vec::with_capacity(warps.len());
    for (i, warp) in warps.iter().enumerate() {
        let mut mask = vec![0u8; lattice.len()];
        let mut data = Vec::with_capacity(lattice.len() * spec.dim);
        for (u, m) in mask.iter_mut().enumerate() {
            let q = warp.inverse(lattice.center(u)).filter(|&q| in_ellipse(q, center, radii));
            let desc: Vec<f64> = match q {
                Some(q) => {
                    *m = 1;
                    field
                        .eval(q)
                        .into_iter()
                        .map(|v| v + spec.noise_sigma * normal(&mut noise_rng))
                        .collect()
                }
                None => (0..spec.dim).map(|_| normal(&mut noise_rng)).collect(),
            };
            data.extend(desc.into_iter().map(|v| v as f32));
        }
        let grid = FeatureGrid::new(spec.height, spec.width, spec.dim, spec.stride_px, data)?.normalize_descriptors();
        let kps: Vec<PixelPoint> = canonical_keypoints.iter().map(|&q| warp.forward(q)).collect();
        let mask = CellMask::new(spec.height, spec.width, mask)?;
        for (k, p) in kps.iter().enumerate() {
            let inside = lattice.contains_px(*p) && lattice.pixel_to_cell(*p).is_ok_and(|c| mask.get(lattice.linear(c)));
            if !inside {
                return Err(Error::InvalidInput(format!(
                    "scene spec: keypoint {k} leaves the object of instance {i}"
                )));
            }
        }
        masks.push(mask);
        features.push(grid.cast::<f32>());
        keypoints.push(kps);
    }
    let seen = (0..spec.n_seen_kp).collect();
    let unseen = (spec.n_seen_kp..spec.n_seen_kp + spec.n_unseen_kp).collect();
    Ok(SyntheticScene {
        spec: spec.clone(),
        seed,
        field,
        warps,
        masks,
        canonical_keypoints,
        keypoints,
        seen,
        unseen,
        features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
}

impl SyntheticScene {
    pub fn lattice(&self) -> Lattice {
        self.features[0].lattice()
    }

    pub fn n_instances(&self) -> usize {
        self.warps.len()
    }

    pub fn split_ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Seen => &self.seen,
            Split::Unseen => &self.unseen,
        }
    }

    /// All ordered pairs of distinct instances.
    pub fn ordered_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n_instances();
        (0..n)
            .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
            .collect()
    }

    /// Keypoint locations `(in a, in b)` for one split.
    pub fn keypoint_pairs(&self, a: usize, b: usize, split: Split) -> Vec<(PixelPoint, PixelPoint)> {
        self.split_ids(split)
            .iter()
            .map(|&k| (self.keypoints[a][k], self.keypoints[b][k]))
            .collect()
    }

    /// Seen keypoints of the pair as annotated correspondences.
    pub fn annotated(&self, a: usize, b: usize) -> Result<CorrespondenceSet> {
        CorrespondenceSet::annotated(&self.keypoint_pairs(a, b, Split::Seen))
    }

    pub fn mask_region(&self, i: usize) -> PixelRegion {
        PixelRegion::Mask(self.masks[i].clone())
    }

    /// Pixel bounding box of the object mask of instance `i`.
    pub fn object_bbox(&self, i: usize) -> BBox {
        let lat = self.lattice();
        let s = lat.stride_px;
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for u in (0..lat.len()).filter(|&u| self.masks[i].get(u)) {
            let c = lat.center(u);
            x0 = x0.min(c.x - s / 2.0);
            y0 = y0.min(c.y - s / 2.0);
            x1 = x1.max(c.x + s / 2.0);
            y1 = y1.max(c.y + s / 2.0);
        }
        BBox::new(x0, y0, x1, y1).expect("object masks are never empty")
    }

    /// Ground-truth flow from instance `a` to `b` at every covered cell.
    pub fn gt_flow(&self, a: usize, b: usize) -> DisplacementField {
        flow_between(&self.warps[a], &self.warps[b], self.lattice())
    }

    /// Which side of the mirror axis a point of instance `i` comes from:
    /// `Some(-1)` left, `Some(1)` right, `None` within `margin_px` of the
    /// axis or outside the warped frame.
    pub fn side(&self, i: usize, p: PixelPoint, margin_px: f64) -> Option<i8> {
        let q = self.warps[i].inverse(p)?;
        let d = q.x - self.field.axis_x;
        if d.abs() <= margin_px {
            None
        } else if d < 0.0 {
            Some(-1)
        } else {
            Some(1)
        }
    }

    /// True target of source point `p` of instance `a` in instance `b`, and
    /// the target of its mirror image. `None` when `p` lies outside the
    /// warped frame or within `margin_px` of the mirror axis.
    pub fn true_and_mirrored_target(&self, a: usize, b: usize, p: PixelPoint, margin_px: f64) -> Option<(PixelPoint, PixelPoint)> {
        let q = self.warps[a].inverse(p)?;
        if (q.x - self.field.axis_x).abs() < margin_px {
            return None;
        }
        Some((self.warps[b].forward(q), self.warps[b].forward(self.field.mirror(q))))
    }

    /// Keypoints of the pair `a → b` as an annotation file: ids are keypoint
    /// ids, boxes are the object boxes.
    pub fn annotation_file(&self, a: usize, b: usize) -> CorrespondenceFile {
        let (fw, fh) = self.spec.frame();
        let ids: Vec<usize> = self.seen.iter().chain(&self.unseen).copied().collect();
        let pairs = ids
            .iter()
            .map(|&k| PairRecord {
                id: Some(k as u32),
                sx: self.keypoints[a][k].x,
                sy: self.keypoints[a][k].y,
                tx: self.keypoints[b][k].x,
                ty: self.keypoints[b][k].y,
                provenance: Provenance::Annotated,
            })
            .collect();
        CorrespondenceFile {
            image_pair: ImagePair {
                src: format!("instance_{a}"),
                tgt: format!("instance_{b}"),
                src_hw: [fh, fw],
                tgt_hw: [fh, fw],
            },
            bbox: Some(BoxPair {
                src: self.object_bbox(a),
                tgt: self.object_bbox(b),
            }),
            pairs,
            splits: Splits {
                seen: self.seen.iter().map(|&k| k as u32).collect(),
                unseen: self.unseen.iter().map(|&k| k as u32).collect(),
            },
            diagnostics: None,
        }
    }

    /// Writes `scene.json` and one `instance_<i>.mrcf` per instance.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        for (i, g) in self.features.iter().enumerate() {
            write_feature_file(&dir.join(format!("instance_{i}.mrcf")), g, Some(&self.masks[i]))?;
        }
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        write_atomic(&dir.join("scene.json"), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("scene.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
        let mut scene: SyntheticScene = serde_json::from_str(&text)?;
        scene.spec.validate()?;
        let n = scene.warps.len();
        if scene.masks.len() != n || scene.keypoints.len() != n {
            return Err(Error::Annotation("scene.json: per-instance lists differ in length".into()));
        }
        for i in 0..n {
            let file = read_feature_file(&dir.join(format!("instance_{i}.mrcf")))?;
            if file.mask.as_ref() != Some(&scene.masks[i]) {
                return Err(Error::Annotation(format!("instance_{i}.mrcf: mask disagrees with scene.json")));
            }
            if file.grid.lattice() != scene.spec.lattice()? || file.grid.dim() != scene.spec.dim {
                return Err(Error::Annotation(format!("instance_{i}.mrcf: shape disagrees with scene.json")));
            }
            scene.features.push(file.grid);
        }
        Ok(scene)
    }
}
