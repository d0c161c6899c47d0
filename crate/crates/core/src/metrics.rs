//! PCK evaluation and pseudo-label quality.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::densify::DisplacementField;
use crate::error::{Error, Result};
use crate::grid::PixelPoint;
use crate::matching::{Correspondence, CorrespondenceSet};

/// True iff `‖pred − gt‖ ≤ α·max(h, w)`. The boundary counts as correct.
pub fn pck_point(pred: PixelPoint, gt: PixelPoint, bbox_h: f64, bbox_w: f64, alpha: f64) -> bool {
    let thr = alpha * bbox_h.max(bbox_w);
    pred.dist2(&gt) <= thr * thr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointPrediction {
    pub id: usize,
    pub pred: PixelPoint,
    pub gt: PixelPoint,
}

/// All keypoint predictions of one image (or image pair).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckRecord {
    pub image: String,
    pub bbox_h: f64,
    pub bbox_w: f64,
    pub keypoints: Vec<KeypointPrediction>,
}

impl PckRecord {
    pub fn correct(&self, alpha: f64) -> Vec<bool> {
        self.keypoints
            .iter()
            .map(|k| pck_point(k.pred, k.gt, self.bbox_h, self.bbox_w, alpha))
            .collect()
    }

    /// Fraction of correct keypoints in this image.
    pub fn pck(&self, alpha: f64) -> f64 {
        let c = self.correct(alpha);
        c.iter().filter(|&&b| b).count() as f64 / c.len() as f64
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must be > 0, got {alpha}")))
    }
}

/// Per-image PCK averaged over images, in percent, one value per α.
pub fn pck_aggregate(records: &[PckRecord], alphas: &[f64]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::invalid("no PCK records to aggregate"));
    }
    for r in records {
        if r.keypoints.is_empty() {
            return Err(Error::invalid(format!("image {:?} has no keypoints", r.image)));
        }
        if !(r.bbox_h > 0.0 && r.bbox_w > 0.0) {
            return Err(Error::invalid(format!("image {:?} has an empty bbox", r.image)));
        }
    }
    alphas
        .iter()
        .map(|&a| {
            check_alpha(a)?;
            let sum: f64 = records.iter().map(|r| r.pck(a)).sum();
            Ok(100.0 * sum / records.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoQuality {
    /// Fraction of scored pairs within the tolerance of the true target.
    pub precision: f64,
    /// Pair count over the number of valid cells of the reference flow.
    pub coverage: f64,
    pub scored: usize,
    /// Pairs whose source cell has no reference flow.
    pub unscored: usize,
}

/// Scores pseudo-labels against a reference flow. Each pair is compared at
/// the cell nearest its source point.
pub fn pseudo_quality(pseudo: &CorrespondenceSet, gt_flow: &DisplacementField, tol_px: f64) -> Result<PseudoQuality> {
    if !(tol_px >= 0.0) {
        return Err(Error::invalid(format!("tolerance must be >= 0, got {tol_px}")));
    }
    let lattice = gt_flow.lattice;
    let (mut hits, mut scored, mut unscored) = (0usize, 0usize, 0usize);
    for c in pseudo {
        let cell = lattice.pixel_to_cell(c.src).ok().map(|ci| lattice.linear(ci));
        let Some(u) = cell.filter(|&u| gt_flow.valid[u]) else {
            unscored += 1;
            continue;
        };
        let [dx, dy] = gt_flow.displacement[u];
        let truth = PixelPoint::new(c.src.x + dx, c.src.y + dy);
        scored += 1;
        if truth.dist2(&c.tgt) <= tol_px * tol_px {
            hits += 1;
        }
    }
    let valid = gt_flow.valid_count();
    Ok(PseudoQuality {
        precision: if scored == 0 { 0.0 } else { hits as f64 / scored as f64 },
        coverage: if valid == 0 { 0.0 } else { pseudo.len() as f64 / valid as f64 },
        scored,
        unscored,
    })
}

/// Adds iid `N(0, σ²)` offsets to the target coordinates (x then y, pair by
/// pair). `σ = 0` returns the input unchanged.
pub fn perturb_pseudo_labels(pseudo: &CorrespondenceSet, noise_sigma_px: f64, seed: u64) -> Result<CorrespondenceSet> {
    if !(noise_sigma_px >= 0.0 && noise_sigma_px.is_finite()) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {noise_sigma_px}")));
    }
    if noise_sigma_px == 0.0 {
        return Ok(pseudo.clone());
    }
    let normal = Normal::new(0.0, noise_sigma_px).expect("sigma checked above");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CorrespondenceSet::from_pairs(pseudo.iter().map(|c| {
        let dx = normal.sample(&mut rng);
        let dy = normal.sample(&mut rng);
        Correspondence::new(c.src, PixelPoint::new(c.tgt.x + dx, c.tgt.y + dy), c.provenance)
    }))
}
