//! Sparse seed correspondences: directional nearest neighbours, mutual
//! nearest neighbours, keypoint boxes and the annotated ∪ MNN seed set.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BBox, FeatureGrid, Lattice, PixelPoint, PixelRegion, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Annotated,
    Mnn,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub src: PixelPoint,
    pub tgt: PixelPoint,
    pub provenance: Provenance,
}

impl Correspondence {
    pub fn new(src: PixelPoint, tgt: PixelPoint, provenance: Provenance) -> Self {
        Self { src, tgt, provenance }
    }
}

/// Ordered list of point pairs without duplicate `(src, tgt)` entries.
#[derive(Debug, Clone, Default)]
pub struct CorrespondenceSet {
    pairs: Vec<Correspondence>,
    index: HashSet<[u64; 4]>,
}

impl PartialEq for CorrespondenceSet {
    fn eq(&self, other: &Self) -> bool {
        self.pairs == other.pairs
    }
}

fn key(c: &Correspondence) -> [u64; 4] {
    // +0.0 so that -0.0 and 0.0 collapse
    [c.src.x, c.src.y, c.tgt.x, c.tgt.y].map(|v| (v + 0.0).to_bits())
}

impl CorrespondenceSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a set, keeping the first occurrence of any repeated `(src, tgt)`.
    pub fn from_pairs(pairs: impl IntoIterator<Item = Correspondence>) -> Result<Self> {
        let mut set = Self::new();
        for c in pairs {
            set.insert(c)?;
        }
        Ok(set)
    }

    /// Annotated pairs from raw point tuples.
    pub fn annotated(points: &[(PixelPoint, PixelPoint)]) -> Result<Self> {
        Self::from_pairs(
            points
                .iter()
                .map(|&(s, t)| Correspondence::new(s, t, Provenance::Annotated)),
        )
    }

    /// Inserts a pair; returns `false` if an identical pair was already present.
    pub fn insert(&mut self, c: Correspondence) -> Result<bool> {
        if !c.src.is_finite() || !c.tgt.is_finite() {
            return Err(Error::invalid("correspondence with non-finite coordinates"));
        }
        if !self.index.insert(key(&c)) {
            return Ok(false);
        }
        self.pairs.push(c);
        Ok(true)
    }

    /// Appends without the duplicate scan; the caller guarantees uniqueness.
    pub(crate) fn push_unique(&mut self, c: Correspondence) {
        debug_assert!(c.src.is_finite() && c.tgt.is_finite());
        let fresh = self.index.insert(key(&c));
        debug_assert!(fresh);
        self.pairs.push(c);
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Correspondence] {
        &self.pairs
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Correspondence> {
        self.pairs.iter()
    }

    pub fn sources(&self) -> Vec<PixelPoint> {
        self.pairs.iter().map(|c| c.src).collect()
    }

    pub fn into_pairs(self) -> Vec<Correspondence> {
        self.pairs
    }
}

impl<'a> IntoIterator for &'a CorrespondenceSet {
    type Item = &'a Correspondence;
    type IntoIter = std::slice::Iter<'a, Correspondence>;
    fn into_iter(self) -> Self::IntoIter {
        self.pairs.iter()
    }
}

fn check_compatible<S: Real, T: Real>(src: &FeatureGrid<S>, tgt: &FeatureGrid<T>) -> Result<()> {
    if src.dim() != tgt.dim() {
        return Err(Error::invalid(format!(
            "descriptor dims differ: {} vs {}",
            src.dim(),
            tgt.dim()
        )));
    }
    Ok(())
}

fn region_cells(region: &PixelRegion, lattice: &Lattice) -> Result<Vec<usize>> {
    region.validate(lattice)?;
    let cells = region.member_cells(lattice);
    if cells.is_empty() {
        return Err(Error::invalid("matching region contains no cells"));
    }
    Ok(cells)
}

fn argmax_over<S: Real, T: Real>(
    src: &FeatureGrid<S>,
    u: usize,
    tgt: &FeatureGrid<T>,
    candidates: &[usize],
) -> (usize, f64) {
    let mut best = candidates[0];
    let mut best_score = src.dot_cells(u, tgt, best);
    for &v in &candidates[1..] {
        let s = src.dot_cells(u, tgt, v);
        // strict comparison over ascending candidates keeps the lowest index on ties
        if s > best_score {
            best = v;
            best_score = s;
        }
    }
    (best, best_score)
}

/// For every source cell, the target cell inside `region_tgt` with the
/// highest inner product. Ties go to the lowest row-major index.
pub fn nn_match<S: Real, T: Real>(
    src: &FeatureGrid<S>,
    tgt: &FeatureGrid<T>,
    region_tgt: &PixelRegion,
) -> Result<Vec<usize>> {
    Ok(nn_match_scored(src, tgt, region_tgt)?
        .into_iter()
        .map(|(v, _)| v)
        .collect())
}

fn nn_match_scored<S: Real, T: Real>(
    src: &FeatureGrid<S>,
    tgt: &FeatureGrid<T>,
    region_tgt: &PixelRegion,
) -> Result<Vec<(usize, f64)>> {
    check_compatible(src, tgt)?;
    let candidates = region_cells(region_tgt, &tgt.lattice())?;
    Ok((0..src.cells())
        .into_par_iter()
        .map(|u| argmax_over(src, u, tgt, &candidates))
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MnnOptions {
    /// Drop mutual pairs whose similarity is below this floor. Disabled by default.
    pub min_similarity: Option<f64>,
}

/// Mutual nearest neighbours between two grids, each direction restricted to
/// the other side's region. Pairs are returned as cell centers, ordered by
/// source cell index.
pub fn mutual_nn<S: Real, T: Real>(
    src: &FeatureGrid<S>,
    tgt: &FeatureGrid<T>,
    region_src: &PixelRegion,
    region_tgt: &PixelRegion,
    opts: MnnOptions,
) -> Result<CorrespondenceSet> {
    let (forward, backward) = rayon::join(
        || nn_match_scored(src, tgt, region_tgt),
        || nn_match_scored(tgt, src, region_src),
    );
    let forward = forward?;
    let backward = backward?;
    let mut out = CorrespondenceSet::new();
    for (u, &(v, score)) in forward.iter().enumerate() {
        if backward[v].0 != u {
            continue;
        }
        if let Some(floor) = opts.min_similarity {
            if score < floor {
                continue;
            }
        }
        // mutuality makes the output injective in both coordinates
        out.push_unique(Correspondence::new(
            src.cell_center(u),
            tgt.cell_center(v),
            Provenance::Mnn,
        ));
    }
    Ok(out)
}

fn keypoint_box(points: impl Iterator<Item = PixelPoint>, margin_frac: f64, extent: (f64, f64)) -> Result<BBox> {
    let mut min_x = f64::INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for p in points {
        min_x = min_x.min(p.x);
        min_y = min_y.min(p.y);
        max_x = max_x.max(p.x);
        max_y = max_y.max(p.y);
    }
    if max_x <= min_x || max_y <= min_y {
        return Err(Error::DegenerateRegion(format!(
            "keypoints span zero extent ({min_x}..{max_x}, {min_y}..{max_y})"
        )));
    }
    let pad = margin_frac * (max_x - min_x).hypot(max_y - min_y);
    BBox::new(
        (min_x - pad).max(0.0),
        (min_y - pad).max(0.0),
        (max_x + pad).min(extent.0),
        (max_y + pad).min(extent.1),
    )
}

/// Tight per-image boxes around the annotated keypoints, padded by
/// `margin_frac` of the box diagonal and clipped to each image extent
/// `(width_px, height_px)`.
pub fn bbox_from_keypoints(
    annotated: &CorrespondenceSet,
    margin_frac: f64,
    src_extent: (f64, f64),
    tgt_extent: (f64, f64),
) -> Result<(PixelRegion, PixelRegion)> {
    if annotated.len() < 2 {
        return Err(Error::DegenerateRegion(format!(
            "need at least 2 keypoints for a bounding box, got {}",
            annotated.len()
        )));
    }
    if !(margin_frac >= 0.0 && margin_frac.is_finite()) {
        return Err(Error::invalid(format!("margin must be >= 0, got {margin_frac}")));
    }
    let src = keypoint_box(annotated.iter().map(|c| c.src), margin_frac, src_extent)?;
    let tgt = keypoint_box(annotated.iter().map(|c| c.tgt), margin_frac, tgt_extent)?;
    Ok((PixelRegion::BBox(src), PixelRegion::BBox(tgt)))
}

/// `annotated ∪ mnn`. Annotated pairs are kept verbatim (and marked
/// annotated); an MNN pair whose source lies within `0.5·stride_px` of an
/// annotated source is dropped.
pub fn build_seed_set(
    annotated: &CorrespondenceSet,
    mnn: &CorrespondenceSet,
    stride_px: f64,
) -> CorrespondenceSet {
    let radius2 = (0.5 * stride_px).powi(2);
    let mut seed = CorrespondenceSet::new();
    for c in annotated {
        seed.insert(Correspondence::new(c.src, c.tgt, Provenance::Annotated))
            .expect("annotated pairs are finite");
    }
    for c in mnn {
        let shadowed = annotated.iter().any(|a| a.src.dist2(&c.src) <= radius2);
        if !shadowed {
            seed.insert(*c).expect("mnn pairs are finite");
        }
    }
    seed
}
