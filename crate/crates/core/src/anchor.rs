//! Flow anchoring: cluster the dense displacement field, merge clusters by
//! BIC, and keep only clusters whose source and target regions contain an
//! annotated keypoint pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::densify::{densify, DensifyReport, DisplacementField};
use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, PixelPoint, PixelRegion, Real};
use crate::matching::{build_seed_set, mutual_nn, Correspondence, CorrespondenceSet, MnnOptions, Provenance};

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL_PX: f64 = 1e-6;
/// Per-cluster variance floor in px².
pub const VARIANCE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub mean: [f64; 2],
    /// Isotropic maximum-likelihood variance (px²), per axis, unfloored.
    pub variance: f64,
    pub count: usize,
}

impl ClusterStats {
    fn sum_sq(&self) -> f64 {
        2.0 * self.count as f64 * self.variance
    }

    fn merged(&self, other: &ClusterStats) -> ClusterStats {
        let (ca, cb) = (self.count as f64, other.count as f64);
        let c = ca + cb;
        let mean = [
            (ca * self.mean[0] + cb * other.mean[0]) / c,
            (ca * self.mean[1] + cb * other.mean[1]) / c,
        ];
        let dx = self.mean[0] - other.mean[0];
        let dy = self.mean[1] - other.mean[1];
        let ss = self.sum_sq() + other.sum_sq() + ca * cb / c * (dx * dx + dy * dy);
        ClusterStats {
            mean,
            variance: ss / (2.0 * c),
            count: self.count + other.count,
        }
    }
}

/// Cluster assignment of the valid cells of a displacement field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowClustering {
    /// Valid cells, ascending.
    pub cells: Vec<usize>,
    /// Displacement (px) of each entry of `cells`.
    pub points: Vec<[f64; 2]>,
    /// Cluster id of each entry of `cells`.
    pub assignment: Vec<usize>,
    pub clusters: Vec<ClusterStats>,
    /// Set when there were fewer valid cells than requested clusters.
    pub k_lowered: bool,
}

impl FlowClustering {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

fn sq(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn nearest(centers: &[[f64; 2]], x: [f64; 2]) -> usize {
    let mut best = 0;
    let mut best_d = sq(centers[0], x);
    for (k, &c) in centers.iter().enumerate().skip(1) {
        let d = sq(c, x);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

fn kmeans_pp(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|&p| sq(p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        centers.push(c);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(sq(p, c));
        }
    }
    centers
}

fn stats_from_assignment(points: &[[f64; 2]], assignment: &[usize], k: usize) -> Vec<ClusterStats> {
    let mut count = vec![0usize; k];
    let mut sum = vec![[0.0f64; 2]; k];
    for (&a, p) in assignment.iter().zip(points) {
        count[a] += 1;
        sum[a][0] += p[0];
        sum[a][1] += p[1];
    }
    let means: Vec<[f64; 2]> = (0..k)
        .map(|c| {
            if count[c] == 0 {
                [0.0; 2]
            } else {
                [sum[c][0] / count[c] as f64, sum[c][1] / count[c] as f64]
            }
        })
        .collect();
    let mut ss = vec![0.0f64; k];
    for (&a, &p) in assignment.iter().zip(points) {
        ss[a] += sq(p, means[a]);
    }
    (0..k)
        .map(|c| ClusterStats {
            mean: means[c],
            variance: if count[c] == 0 { 0.0 } else { ss[c] / (2.0 * count[c] as f64) },
            count: count[c],
        })
        .collect()
}

/// k-means over the displacement vectors of the valid cells: seeded
/// k-means++ initialisation, Lloyd iterations until no center moves more
/// than 1e-6 px (at most 100), empty clusters dropped.
pub fn kmeans_flow(field: &DisplacementField, k_init: usize, seed: u64) -> Result<FlowClustering> {
    if k_init == 0 {
        return Err(Error::invalid("k_init must be >= 1"));
    }
    let cells: Vec<usize> = field.valid_cells().collect();
    let points: Vec<[f64; 2]> = cells.iter().map(|&u| field.displacement[u]).collect();
    if points.is_empty() {
        return Ok(FlowClustering {
            cells,
            points,
            assignment: Vec::new(),
            clusters: Vec::new(),
            k_lowered: true,
        });
    }
    let k = k_init.min(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp(&points, k, &mut rng);
    let mut assignment = vec![0usize; points.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        for (a, &p) in assignment.iter_mut().zip(&points) {
            *a = nearest(&centers, p);
        }
        let stats = stats_from_assignment(&points, &assignment, k);
        let mut moved = 0.0f64;
        for (c, s) in centers.iter_mut().zip(&stats) {
            if s.count > 0 {
                moved = moved.max(sq(*c, s.mean).sqrt());
                *c = s.mean;
            }
        }
        if moved < KMEANS_TOL_PX {
            break;
        }
    }
    for (a, &p) in assignment.iter_mut().zip(&points) {
        *a = nearest(&centers, p);
    }
    // drop empty clusters, keeping the relative order of the rest
    let stats = stats_from_assignment(&points, &assignment, k);
    let mut remap = vec![usize::MAX; k];
    let mut clusters = Vec::new();
    for (c, s) in stats.into_iter().enumerate() {
        if s.count > 0 {
            remap[c] = clusters.len();
            clusters.push(s);
        }
    }
    for a in assignment.iter_mut() {
        *a = remap[*a];
    }
    Ok(FlowClustering {
        cells,
        points,
        assignment,
        clusters,
        k_lowered: k < k_init,
    })
}

/// `ln(π_k) + ln N(x | μ_k, σ_k² I)` for one component.
fn log_component(c: &ClusterStats, n: f64, x: [f64; 2]) -> f64 {
    let var = c.variance.max(VARIANCE_FLOOR);
    (c.count as f64 / n).ln() - (2.0 * std::f64::consts::PI * var).ln() - sq(x, c.mean) / (2.0 * var)
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn mixture_log_likelihood(clusters: &[ClusterStats], points: &[[f64; 2]]) -> f64 {
    let n = points.len() as f64;
    points
        .iter()
        .map(|&x| log_sum_exp(clusters.iter().map(|c| log_component(c, n, x))))
        .sum()
}

fn bic_from(log_l: f64, k: usize, n: usize) -> f64 {
    -2.0 * log_l + (4 * k - 1) as f64 * (n as f64).ln()
}

/// BIC of the clustering read as a mixture of isotropic 2-D Gaussians
/// (weights, means and variances from the clusters) with `4k − 1` free
/// parameters, evaluated on the clustered displacements. Lower is better.
pub fn bic(clustering: &FlowClustering) -> f64 {
    if clustering.points.is_empty() {
        return 0.0;
    }
    let log_l = mixture_log_likelihood(&clustering.clusters, &clustering.points);
    bic_from(log_l, clustering.clusters.len(), clustering.points.len())
}

/// Greedily merges the pair of clusters whose merge lowers the BIC the most,
/// until no merge lowers it. Ties go to the lexicographically first pair.
pub fn bic_merge(clustering: &FlowClustering) -> FlowClustering {
    let mut out = clustering.clone();
    let n = out.points.len();
    if n == 0 {
        return out;
    }
    let nf = n as f64;
    while out.clusters.len() > 1 {
        let k = out.clusters.len();
        // per-point component terms, shifted by the row maximum
        let logs: Vec<Vec<f64>> = out
            .points
            .iter()
            .map(|&x| out.clusters.iter().map(|c| log_component(c, nf, x)).collect())
            .collect();
        let row_max: Vec<f64> = logs.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let expd: Vec<Vec<f64>> = logs
            .iter()
            .zip(&row_max)
            .map(|(r, m)| r.iter().map(|v| (v - m).exp()).collect())
            .collect();
        let sums: Vec<f64> = expd.iter().map(|r| r.iter().sum()).collect();
        let current = bic_from(
            row_max.iter().zip(&sums).map(|(m, s)| m + s.ln()).sum(),
            k,
            n,
        );
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..k {
            for j in i + 1..k {
                let merged = out.clusters[i].merged(&out.clusters[j]);
                let mut log_l = 0.0;
                for (p, &x) in out.points.iter().enumerate() {
                    let mut rest = sums[p] - expd[p][i] - expd[p][j];
                    if rest < 1e-9 * sums[p] {
                        // the removed pair dominated this point: recompute without cancellation
                        rest = (0..k).filter(|&c| c != i && c != j).map(|c| expd[p][c]).sum();
                    }
                    let lm = log_component(&merged, nf, x) - row_max[p];
                    let hi = lm.max(rest.ln());
                    log_l += row_max[p] + hi + ((lm - hi).exp() + (rest.ln() - hi).exp()).ln();
                }
                let score = bic_from(log_l, k - 1, n);
                if best.is_none_or(|(b, _, _)| score < b) {
                    best = Some((score, i, j));
                }
            }
        }
        let (score, i, j) = best.expect("k > 1 gives at least one candidate");
        if score >= current {
            break;
        }
        let merged = out.clusters[i].merged(&out.clusters[j]);
        out.clusters[i] = merged;
        out.clusters.remove(j);
        for a in out.assignment.iter_mut() {
            if *a == j {
                *a = i;
            } else if *a > j {
                *a -= 1;
            }
        }
    }
    out
}

/// Source cells and warped target points of every cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRegions {
    pub cells: Vec<Vec<usize>>,
    pub source: Vec<Vec<PixelPoint>>,
    pub target: Vec<Vec<PixelPoint>>,
}

pub fn cluster_regions(clustering: &FlowClustering, field: &DisplacementField) -> ClusterRegions {
    let k = clustering.clusters.len();
    let mut regions = ClusterRegions {
        cells: vec![Vec::new(); k],
        source: vec![Vec::new(); k],
        target: vec![Vec::new(); k],
    };
    for (&u, &a) in clustering.cells.iter().zip(&clustering.assignment) {
        let center = field.lattice.center(u);
        let [dx, dy] = field.displacement[u];
        regions.cells[a].push(u);
        regions.source[a].push(center);
        regions.target[a].push(PixelPoint::new(center.x + dx, center.y + dy));
    }
    regions
}

fn near_any(points: &[PixelPoint], p: PixelPoint, r2: f64) -> bool {
    points.iter().any(|q| q.dist2(&p) <= r2)
}

/// Whether cluster `n` holds an annotated pair: its source region has a
/// member within `r` of `p_s` and its target region one within `r` of `p_t`.
pub fn is_anchored(regions: &ClusterRegions, n: usize, annotated: &CorrespondenceSet, r_anchor_px: f64) -> bool {
    let r2 = r_anchor_px * r_anchor_px;
    annotated
        .iter()
        .any(|e| near_any(&regions.source[n], e.src, r2) && near_any(&regions.target[n], e.tgt, r2))
}

/// Pseudo-labels from every anchored cluster, plus the anchored cluster ids.
pub fn anchor_filter(
    regions: &ClusterRegions,
    annotated: &CorrespondenceSet,
    r_anchor_px: f64,
) -> Result<(CorrespondenceSet, Vec<usize>)> {
    if !(r_anchor_px > 0.0 && r_anchor_px.is_finite()) {
        return Err(Error::invalid(format!("anchor radius must be > 0, got {r_anchor_px}")));
    }
    let anchored: Vec<usize> = (0..regions.cells.len())
        .filter(|&n| is_anchored(regions, n, annotated, r_anchor_px))
        .collect();
    let mut out = CorrespondenceSet::new();
    for &n in &anchored {
        for (&s, &t) in regions.source[n].iter().zip(&regions.target[n]) {
            // source cells are unique across clusters
            out.push_unique(Correspondence::new(s, t, Provenance::Pseudo));
        }
    }
    Ok((out, anchored))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub k_init: usize,
    /// Anchoring radius in cells of the source grid.
    pub r_anchor_cells: f64,
    pub seed: u64,
    pub mnn: MnnOptions,
    /// L2-normalise teacher descriptors before matching (cosine similarity).
    pub normalize: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            k_init: 15,
            r_anchor_cells: 1.5,
            seed: 0,
            mnn: MnnOptions::default(),
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningStats {
    pub mnn_pairs: usize,
    pub seed_pairs: usize,
    pub triangles: usize,
    pub skipped_triangles: usize,
    pub valid_cells: usize,
    pub clusters_initial: usize,
    pub clusters_merged: usize,
    pub anchored_clusters: usize,
    pub anchored_pairs: usize,
    pub collinear: bool,
    pub k_lowered: bool,
    pub no_anchor: bool,
}

/// Everything produced along the way, for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct MiningOutcome {
    pub pseudo: CorrespondenceSet,
    pub stats: MiningStats,
    pub seed: CorrespondenceSet,
    pub field: DisplacementField,
    pub clustering: FlowClustering,
    pub regions: ClusterRegions,
    pub anchored: Vec<usize>,
    pub densify: DensifyReport,
}

/// End-to-end pseudo-label mining on a pair of teacher grids:
/// MNN → seed set → densify → k-means → BIC merge → anchoring.
pub fn mine_pseudo_labels<S: Real, T: Real>(
    teacher_src: &FeatureGrid<S>,
    teacher_tgt: &FeatureGrid<T>,
    annotated: &CorrespondenceSet,
    region_src: &PixelRegion,
    region_tgt: &PixelRegion,
    config: &MiningConfig,
) -> Result<MiningOutcome> {
    let mnn = if config.normalize {
        let s = if teacher_src.is_normalized() { teacher_src.clone() } else { teacher_src.normalize_descriptors() };
        let t = if teacher_tgt.is_normalized() { teacher_tgt.clone() } else { teacher_tgt.normalize_descriptors() };
        mutual_nn(&s, &t, region_src, region_tgt, config.mnn)?
    } else {
        mutual_nn(teacher_src, teacher_tgt, region_src, region_tgt, config.mnn)?
    };
    let stride = teacher_src.stride_px();
    let seed = build_seed_set(annotated, &mnn, stride);
    let (field, densify_report) = densify(&seed, teacher_src.lattice(), teacher_tgt.lattice().extent_px());
    let clustering = kmeans_flow(&field, config.k_init, config.seed)?;
    let merged = bic_merge(&clustering);
    let regions = cluster_regions(&merged, &field);
    let (pseudo, anchored) = anchor_filter(&regions, annotated, config.r_anchor_cells * stride)?;
    let stats = MiningStats {
        mnn_pairs: mnn.len(),
        seed_pairs: seed.len(),
        triangles: densify_report.triangles,
        skipped_triangles: densify_report.skipped_triangles,
        valid_cells: field.valid_count(),
        clusters_initial: clustering.clusters.len(),
        clusters_merged: merged.clusters.len(),
        anchored_clusters: anchored.len(),
        anchored_pairs: pseudo.len(),
        collinear: densify_report.collinear,
        k_lowered: clustering.k_lowered && field.valid_count() > 0,
        no_anchor: anchored.is_empty(),
    };
    Ok(MiningOutcome {
        pseudo,
        stats,
        seed,
        field,
        clustering: merged,
        regions,
        anchored,
        densify: densify_report,
    })
}
