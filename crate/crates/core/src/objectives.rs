//! Training objectives with analytic gradients.
//!
//! Scores are raw inner products `S(u) = <f, F_t[u]>`, where `f` is the
//! source descriptor bilinearly interpolated at the source point. Every
//! loss here is differentiated by hand down to the feature entries: the
//! score gradient `g(u)` gives `∂F_t[u] = g(u)·f` and `∂f = Σ g(u)·F_t[u]`,
//! and `∂f` is spread over the four bilinear taps of the source point.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, Lattice, PixelPoint, Real, SimilarityMap};
use crate::matching::CorrespondenceSet;

pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_WINDOW: usize = 15;
pub const DEFAULT_EMA_BETA: f64 = 0.999;

/// Cosine-annealed Gaussian bandwidth, in cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub total_steps: usize,
}

impl SigmaSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, total_steps: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min <= sigma_max && sigma_max.is_finite()) {
            return Err(Error::invalid(format!(
                "schedule needs 0 < sigma_min <= sigma_max, got {sigma_min} and {sigma_max}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::invalid("schedule needs total_steps >= 1"));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
            total_steps,
        })
    }

    /// Constant bandwidth.
    pub fn fixed(sigma: f64, total_steps: usize) -> Result<Self> {
        Self::new(sigma, sigma, total_steps)
    }

    /// The default 3 → 1 cell annealing over `total_steps`.
    pub fn coarse_to_fine(total_steps: usize) -> Result<Self> {
        Self::new(1.0, 3.0, total_steps)
    }
}

/// `σ(t) = σ_min + ½(σ_max − σ_min)(1 + cos(πt/T))`.
pub fn sigma_at(schedule: &SigmaSchedule, t: usize) -> Result<f64> {
    if t > schedule.total_steps {
        return Err(Error::invalid(format!(
            "step {t} outside schedule of {} steps",
            schedule.total_steps
        )));
    }
    let SigmaSchedule {
        sigma_min: lo,
        sigma_max: hi,
        total_steps,
    } = *schedule;
    let phase = std::f64::consts::PI * t as f64 / total_steps as f64;
    Ok(lo + 0.5 * (hi - lo) * (1.0 + phase.cos()))
}

/// Normalised Gaussian over the cells of a target lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetHeatmap {
    pub lattice: Lattice,
    pub probs: Vec<f64>,
    pub center: PixelPoint,
    pub sigma_cells: f64,
}

/// `exp(−d²/2σ²)` at every cell center, `d` in cells, normalised to sum 1.
pub fn gaussian_target(center: PixelPoint, sigma_cells: f64, lattice: Lattice) -> Result<TargetHeatmap> {
    if !(sigma_cells > 0.0 && sigma_cells.is_finite()) {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma_cells}")));
    }
    if !center.is_finite() || !lattice.contains_px(center) {
        return Err(Error::invalid(format!(
            "target center ({}, {}) outside the image",
            center.x, center.y
        )));
    }
    let s = lattice.stride_px;
    let d2: Vec<f64> = (0..lattice.len())
        .map(|u| lattice.center(u).dist2(&center) / (s * s))
        .collect();
    // shift by the minimum so the nearest cell never underflows
    let min = d2.iter().copied().fold(f64::INFINITY, f64::min);
    let inv = 1.0 / (2.0 * sigma_cells * sigma_cells);
    let mut probs: Vec<f64> = d2.iter().map(|d| (-(d - min) * inv).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    Ok(TargetHeatmap {
        lattice,
        probs,
        center,
        sigma_cells,
    })
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be > 0, got {temperature}")))
    }
}

/// `softmax(scores / temperature)`, max-shifted.
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Loss value with its gradient on the similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLoss {
    pub value: f64,
    pub grad_scores: Vec<f64>,
}

/// `−Σ G(u) log softmax(S/T)(u)` with gradient `(softmax(S/T) − G)/T`.
pub fn ce_loss(sim: &SimilarityMap, target: &TargetHeatmap, temperature: f64) -> Result<ScoreLoss> {
    check_temperature(temperature)?;
    if sim.lattice != target.lattice {
        return Err(Error::invalid("similarity map and target heatmap lattices differ"));
    }
    if sim.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite similarity score"));
    }
    Ok(ce_from_scores(&sim.scores, &target.probs, temperature))
}

fn ce_from_scores(scores: &[f64], g: &[f64], temperature: f64) -> ScoreLoss {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| ((s - max) / temperature).exp()).sum();
    let log_z = z.ln();
    let mut value = 0.0;
    let mut grad_scores = Vec::with_capacity(scores.len());
    for (&s, &gu) in scores.iter().zip(g) {
        let log_p = (s - max) / temperature - log_z;
        if gu > 0.0 {
            value -= gu * log_p;
        }
        grad_scores.push((log_p.exp() - gu) / temperature);
    }
    ScoreLoss { value, grad_scores }
}

/// Expected cell center under `softmax(S/T)`.
pub fn soft_argmax(sim: &SimilarityMap, temperature: f64) -> Result<PixelPoint> {
    check_temperature(temperature)?;
    let p = softmax(&sim.scores, temperature);
    Ok(expected_center(&sim.lattice, p.iter().copied().enumerate()))
}

fn expected_center(lattice: &Lattice, weights: impl Iterator<Item = (usize, f64)>) -> PixelPoint {
    let (mut x, mut y) = (0.0, 0.0);
    for (u, w) in weights {
        let c = lattice.center(u);
        x += w * c.x;
        y += w * c.y;
    }
    PixelPoint::new(x, y)
}

/// Linear indices of the `window × window` box centered on the argmax,
/// clipped to the lattice.
pub fn window_cells(lattice: &Lattice, center: usize, window: usize) -> Vec<usize> {
    let half = window / 2;
    let c = lattice.cell_of(center);
    let r0 = c.row.saturating_sub(half);
    let r1 = (c.row + half).min(lattice.height - 1);
    let c0 = c.col.saturating_sub(half);
    let c1 = (c.col + half).min(lattice.width - 1);
    (r0..=r1)
        .flat_map(|r| (c0..=c1).map(move |col| r * lattice.width + col))
        .collect()
}

/// Soft-argmax restricted to a box around the global argmax.
pub fn windowed_soft_argmax(sim: &SimilarityMap, window: usize, temperature: f64) -> Result<PixelPoint> {
    check_temperature(temperature)?;
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!("window must be odd and >= 1, got {window}")));
    }
    let cells = window_cells(&sim.lattice, sim.argmax(), window);
    let scores: Vec<f64> = cells.iter().map(|&u| sim.scores[u]).collect();
    let p = softmax(&scores, temperature);
    Ok(expected_center(&sim.lattice, cells.iter().copied().zip(p)))
}

/// Sparse per-cell gradient: cell index → `dim`-length vector.
pub type GradientMap = BTreeMap<usize, Vec<f64>>;

/// Loss value with gradients on the source and target feature grids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossOutput {
    pub value: f64,
    pub grad_src: GradientMap,
    pub grad_tgt: GradientMap,
    /// Number of averaged terms; zero flags an empty input.
    pub terms: usize,
}

fn check_pair_grids<S: Real, T: Real>(src: &FeatureGrid<S>, tgt: &FeatureGrid<T>) -> Result<()> {
    if src.dim() != tgt.dim() {
        return Err(Error::invalid(format!(
            "descriptor dims differ: {} vs {}",
            src.dim(),
            tgt.dim()
        )));
    }
    Ok(())
}

fn check_grad_len<T: Real>(grid: &FeatureGrid<T>, grad: &[f64], name: &str) -> Result<()> {
    if grad.len() != grid.data().len() {
        return Err(Error::invalid(format!(
            "{name} gradient buffer has {} entries, grid has {}",
            grad.len(),
            grid.data().len()
        )));
    }
    Ok(())
}

/// Pushes a score-level gradient `g` (already scaled) back to both grids.
fn chain_scores<T: Real>(
    tgt: &FeatureGrid<T>,
    taps: &[(usize, f64); 4],
    desc: &[f64],
    g: &[f64],
    grad_src: &mut [f64],
    grad_tgt: &mut [f64],
) {
    let dim = desc.len();
    let mut d_desc = vec![0.0; dim];
    for (u, &gu) in g.iter().enumerate() {
        if gu == 0.0 {
            continue;
        }
        let cell = tgt.cell(u);
        let out = &mut grad_tgt[u * dim..(u + 1) * dim];
        for k in 0..dim {
            out[k] += gu * desc[k];
            d_desc[k] += gu * cell[k].to_f64();
        }
    }
    for &(idx, w) in taps {
        if w == 0.0 {
            continue;
        }
        let out = &mut grad_src[idx * dim..(idx + 1) * dim];
        for k in 0..dim {
            out[k] += w * d_desc[k];
        }
    }
}

/// Scores of the interpolated source descriptor at `p` against every target cell.
fn scores_at<S: Real, T: Real>(
    src: &FeatureGrid<S>,
    tgt: &FeatureGrid<T>,
    p: PixelPoint,
) -> Result<([(usize, f64); 4], Vec<f64>, Vec<f64>)> {
    let taps = src.lattice().bilinear_taps(p)?;
    let desc = src.descriptor_at(p)?;
    let scores: Vec<f64> = (0..tgt.cells()).map(|u| tgt.dot_cell(u, &desc)).collect();
    Ok((taps, desc, scores))
}

/// Supervised cross-entropy averaged over keypoint pairs, accumulating
/// `scale × gradient` into dense buffers laid out like the grids' data.
/// Returns the (unscaled) mean loss.
#[allow(clippy::too_many_arguments)]
pub fn supervised_loss_into<S: Real, T: Real>(
    src: &FeatureGrid<S>,
    tgt: &FeatureGrid<T>,
    keypoints: &[(PixelPoint, PixelPoint)],
    sigma_cells: f64,
    temperature: f64,
    scale: f64,
    grad_src: &mut [f64],
    grad_tgt: &mut [f64],
) -> Result<f64> {
    check_temperature(temperature)?;
    check_pair_grids(src, tgt)?;
    check_grad_len(src, grad_src, "source")?;
    check_grad_len(tgt, grad_tgt, "target")?;
    if keypoints.is_empty() {
        return Ok(0.0);
    }
    let k = keypoints.len() as f64;
    let mut total = 0.0;
    for &(ps, pt) in keypoints {
        let target = gaussian_target(pt, sigma_cells, tgt.lattice())?;
        let (taps, desc, scores) = scores_at(src, tgt, ps)?;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("non-finite similarity score"));
        }
        let mut ce = ce_from_scores(&scores, &target.probs, temperature);
        total += ce.value;
        ce.grad_scores.iter_mut().for_each(|g| *g *= scale / k);
        chain_scores(tgt, &taps, &desc, &ce.grad_scores, grad_src, grad_tgt);
    }
    Ok(total / k)
}

/// L2 regression of the soft-argmax prediction onto each pseudo-label target,
/// averaged over pairs; accumulates `scale × gradient` into dense buffers.
/// Returns the (unscaled) mean loss in px².
#[allow(clippy::too_many_arguments)]
pub fn l2_self_loss_into<S: Real, T: Real>(
    pairs: &CorrespondenceSet,
    src: &FeatureGrid<S>,
    tgt: &FeatureGrid<T>,
    temperature: f64,
    scale: f64,
    grad_src: &mut [f64],
    grad_tgt: &mut [f64],
) -> Result<f64> {
    check_temperature(temperature)?;
    check_pair_grids(src, tgt)?;
    check_grad_len(src, grad_src, "source")?;
    check_grad_len(tgt, grad_tgt, "target")?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let lattice = tgt.lattice();
    let centers: Vec<PixelPoint> = (0..lattice.len()).map(|u| lattice.center(u)).collect();
    let n = pairs.len() as f64;
    let mut total = 0.0;
    let mut g = vec![0.0; lattice.len()];
    for pair in pairs {
        let (taps, desc, scores) = scores_at(src, tgt, pair.src)?;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("non-finite similarity score"));
        }
        let p = softmax(&scores, temperature);
        let m = expected_center(&lattice, p.iter().copied().enumerate());
        let (ex, ey) = (m.x - pair.tgt.x, m.y - pair.tgt.y);
        total += ex * ex + ey * ey;
        // ∂‖m − v‖²/∂S(u) = 2(m − v)·(c(u) − m)·p(u)/T
        let coef = 2.0 * scale / (n * temperature);
        for ((gu, &pu), c) in g.iter_mut().zip(&p).zip(&centers) {
            *gu = coef * pu * (ex * (c.x - m.x) + ey * (c.y - m.y));
        }
        chain_scores(tgt, &taps, &desc, &g, grad_src, grad_tgt);
    }
    Ok(total / n)
}

fn sparse_output<S: Real, T: Real>(
    value: f64,
    terms: usize,
    sources: impl Iterator<Item = PixelPoint>,
    src: &FeatureGrid<S>,
    tgt: &FeatureGrid<T>,
    dense_src: &[f64],
    dense_tgt: &[f64],
) -> Result<LossOutput> {
    let dim = src.dim();
    let mut out = LossOutput {
        value,
        terms,
        ..Default::default()
    };
    if terms == 0 {
        return Ok(out);
    }
    for p in sources {
        for (idx, w) in src.lattice().bilinear_taps(p)? {
            if w != 0.0 {
                out.grad_src
                    .entry(idx)
                    .or_insert_with(|| dense_src[idx * dim..(idx + 1) * dim].to_vec());
            }
        }
    }
    for u in 0..tgt.cells() {
        out.grad_tgt.insert(u, dense_tgt[u * dim..(u + 1) * dim].to_vec());
    }
    Ok(out)
}

/// [`supervised_loss_into`] with sparse gradient maps.
pub fn supervised_loss<S: Real, T: Real>(
    src: &FeatureGrid<S>,
    tgt: &FeatureGrid<T>,
    keypoints: &[(PixelPoint, PixelPoint)],
    sigma_cells: f64,
    temperature: f64,
) -> Result<LossOutput> {
    let mut gs = vec![0.0; src.data().len()];
    let mut gt = vec![0.0; tgt.data().len()];
    let value = supervised_loss_into(src, tgt, keypoints, sigma_cells, temperature, 1.0, &mut gs, &mut gt)?;
    sparse_output(value, keypoints.len(), keypoints.iter().map(|k| k.0), src, tgt, &gs, &gt)
}

/// [`l2_self_loss_into`] with sparse gradient maps. An empty pair set gives
/// a zero loss with `terms == 0`.
pub fn l2_self_loss<S: Real, T: Real>(
    pairs: &CorrespondenceSet,
    src: &FeatureGrid<S>,
    tgt: &FeatureGrid<T>,
    temperature: f64,
) -> Result<LossOutput> {
    let mut gs = vec![0.0; src.data().len()];
    let mut gt = vec![0.0; tgt.data().len()];
    let value = l2_self_loss_into(pairs, src, tgt, temperature, 1.0, &mut gs, &mut gt)?;
    sparse_output(value, pairs.len(), pairs.iter().map(|c| c.src), src, tgt, &gs, &gt)
}

/// `θ_T ← β·θ_T + (1 − β)·θ_S`, elementwise.
pub fn ema_update<T: Real>(teacher: &mut FeatureGrid<T>, student: &FeatureGrid<T>, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    if teacher.lattice() != student.lattice() || teacher.dim() != student.dim() {
        return Err(Error::invalid("teacher and student grids differ in shape"));
    }
    for (t, s) in teacher.data_mut().iter_mut().zip(student.data()) {
        *t = T::from_f64(beta * t.to_f64() + (1.0 - beta) * s.to_f64());
    }
    Ok(())
}
