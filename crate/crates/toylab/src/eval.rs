use flowanchor_core::metrics::{pck_aggregate, KeypointPrediction, PckRecord};
use flowanchor_core::objectives::windowed_soft_argmax;
use flowanchor_core::{FeatureGrid, Real, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scene::{Split, SyntheticScene};

/// PCK (percent) per α on both keypoint splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckTable {
    pub alphas: Vec<f64>,
    pub seen: Vec<f64>,
    pub unseen: Vec<f64>,
}

impl PckTable {
    pub fn get(&self, split: Split, alpha: f64) -> Option<f64> {
        let i = self.alphas.iter().position(|&a| a == alpha)?;
        Some(match split {
            Split::Seen => self.seen[i],
            Split::Unseen => self.unseen[i],
        })
    }
}

/// One record per ordered instance pair: predictions for every keypoint of
/// `split`, scored against the target object box.
pub fn pck_records<T: Real>(
    grids: &[FeatureGrid<T>],
    scene: &SyntheticScene,
    split: Split,
    window: usize,
    temperature: f64,
) -> Result<Vec<PckRecord>> {
    scene
        .ordered_pairs()
        .into_par_iter()
        .map(|(a, b)| {
            let bbox = scene.object_bbox(b);
            let keypoints = scene
                .split_ids(split)
                .iter()
                .map(|&k| {
                    let (ps, pt) = (scene.keypoints[a][k], scene.keypoints[b][k]);
                    let sim = grids[b].similarity_from(&grids[a], ps)?;
                    Ok(KeypointPrediction {
                        id: k,
                        pred: windowed_soft_argmax(&sim, window, temperature)?,
                        gt: pt,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PckRecord {
                image: format!("{a}->{b}"),
                bbox_h: bbox.height(),
                bbox_w: bbox.width(),
                keypoints,
            })
        })
        .collect()
}

/// PCK of descriptor grids over every ordered instance pair.
pub fn eval_unseen<T: Real>(
    grids: &[FeatureGrid<T>],
    scene: &SyntheticScene,
    alphas: &[f64],
    window: usize,
    temperature: f64,
) -> Result<PckTable> {
    let seen = pck_aggregate(&pck_records(grids, scene, Split::Seen, window, temperature)?, alphas)?;
    let unseen = if scene.unseen.is_empty() {
        vec![f64::NAN; alphas.len()]
    } else {
        pck_aggregate(&pck_records(grids, scene, Split::Unseen, window, temperature)?, alphas)?
    };
    Ok(PckTable {
        alphas: alphas.to_vec(),
        seen,
        unseen,
    })
}
