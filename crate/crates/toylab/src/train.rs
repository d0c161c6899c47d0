//! Student/teacher training on per-instance descriptor grids.

use flowanchor_core::anchor::{mine_pseudo_labels, MiningConfig};
use flowanchor_core::metrics::perturb_pseudo_labels;
use flowanchor_core::objectives::{
    ema_update, l2_self_loss_into, sigma_at, supervised_loss_into, SigmaSchedule, DEFAULT_EMA_BETA, DEFAULT_TEMPERATURE, DEFAULT_WINDOW,
};
use flowanchor_core::{CorrespondenceSet, Error, FeatureGrid, Result};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{eval_unseen, PckTable};
use crate::scene::{Split, SyntheticScene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub use_dense_loss: bool,
    /// Bandwidth (cells) at the first step; equal to `sigma_min` for a fixed σ.
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub lambda_self: f64,
    pub lr: f64,
    pub steps: usize,
    pub beta: f64,
    pub seed: u64,
    pub temperature: f64,
    pub window: usize,
    /// Std-dev (px) of Gaussian noise injected into pseudo-label targets.
    pub pseudo_noise_px: f64,
    /// Pseudo-pairs drawn per step; 0 uses all of them.
    pub pseudo_batch: usize,
    /// Rescale every student cell to unit norm after each update.
    pub renormalize: bool,
    /// Evaluate every this many steps (and always at the start and end); 0 = start and end only.
    pub eval_every: usize,
    pub alphas: Vec<f64>,
    pub k_init: usize,
    pub r_anchor_cells: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            use_dense_loss: true,
            sigma_max: 3.0,
            sigma_min: 1.0,
            lambda_self: 1.0,
            lr: 0.1,
            steps: 300,
            beta: DEFAULT_EMA_BETA,
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            window: DEFAULT_WINDOW,
            pseudo_noise_px: 0.0,
            pseudo_batch: 64,
            renormalize: true,
            eval_every: 0,
            alphas: vec![0.01, 0.05, 0.1],
            k_init: 15,
            r_anchor_cells: 1.5,
        }
    }
}

impl TrainConfig {
    /// Cosine schedule ending at `sigma_min` on the last step.
    pub fn schedule(&self) -> Result<SigmaSchedule> {
        SigmaSchedule::new(self.sigma_min, self.sigma_max, self.steps.saturating_sub(1).max(1))
    }

    fn validate(&self, scene: &SyntheticScene) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("train config: {m}")));
        self.schedule()?;
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} outside [0, 1]", self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.lambda_self >= 0.0 && self.lambda_self.is_finite()) {
            return bad(format!("lambda_self must be >= 0, got {}", self.lambda_self));
        }
        if scene.n_instances() < 2 {
            return bad("scene needs at least two instances".into());
        }
        Ok(())
    }
}

/// Learnable grids and loop position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub students: Vec<FeatureGrid<f64>>,
    pub teachers: Vec<FeatureGrid<f64>>,
    pub step: usize,
    pub schedule: SigmaSchedule,
    pub lr: f64,
    pub seed: u64,
}

impl TrainState {
    /// Student and teacher both start from the rendered scene descriptors.
    pub fn init(scene: &SyntheticScene, config: &TrainConfig) -> Result<Self> {
        let students: Vec<FeatureGrid<f64>> = scene.features.iter().map(|g| g.cast()).collect();
        Ok(Self {
            teachers: students.clone(),
            students,
            step: 0,
            schedule: config.schedule()?,
            lr: config.lr,
            seed: config.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub src: usize,
    pub tgt: usize,
    pub sigma: f64,
    pub sup_loss: f64,
    /// In squared cells.
    pub self_loss: f64,
    pub pseudo_pairs: usize,
    pub anchored_clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of completed updates.
    pub step: usize,
    pub pck: PckTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub config: TrainConfig,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainTrace {
    pub fn initial(&self) -> &PckTable {
        &self.evals[0].pck
    }

    pub fn last(&self) -> &PckTable {
        &self.evals.last().expect("the initial evaluation is always recorded").pck
    }
}

fn renormalize(grid: &mut FeatureGrid<f64>) {
    let dim = grid.dim();
    for cell in grid.data_mut().chunks_exact_mut(dim) {
        let norm = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            cell.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

fn descend(grid: &mut FeatureGrid<f64>, grad: &[f64], lr: f64, renorm: bool) {
    for (p, g) in grid.data_mut().iter_mut().zip(grad) {
        *p -= lr * g;
    }
    if renorm {
        renormalize(grid);
    }
}

/// Runs `config.steps` updates from the scene's rendered descriptors.
pub fn train_toy(scene: &SyntheticScene, config: &TrainConfig) -> Result<(TrainState, TrainTrace)> {
    config.validate(scene)?;
    let mut state = TrainState::init(scene, config)?;
    let n = scene.n_instances();
    let stride = scene.spec.stride_px;
    let evaluate = |grids: &[FeatureGrid<f64>]| eval_unseen(grids, scene, &config.alphas, config.window, config.temperature);
    let mut trace = TrainTrace {
        config: config.clone(),
        steps: Vec::with_capacity(config.steps),
        evals: vec![EvalRecord {
            step: 0,
            pck: evaluate(&state.students)?,
        }],
    };
    let mining = MiningConfig {
        k_init: config.k_init,
        r_anchor_cells: config.r_anchor_cells,
        ..Default::default()
    };
    let len = state.students[0].data().len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for t in 0..config.steps {
        // every arm draws the same pair sequence for a given seed
        let a = rng.random_range(0..n);
        let b = (a + 1 + rng.random_range(0..n - 1)) % n;
        let mut step_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let sigma = sigma_at(&state.schedule, t.min(state.schedule.total_steps))?;

        let mut ga = vec![0.0; len];
        let mut gb = vec![0.0; len];
        let seen = scene.keypoint_pairs(a, b, Split::Seen);
        let sup_loss = supervised_loss_into(
            &state.students[a],
            &state.students[b],
            &seen,
            sigma,
            config.temperature,
            1.0,
            &mut ga,
            &mut gb,
        )?;

        let (mut self_loss, mut pseudo_pairs, mut anchored_clusters) = (0.0, 0, 0);
        if config.use_dense_loss && config.lambda_self > 0.0 {
            let outcome = mine_pseudo_labels(
                &state.teachers[a],
                &state.teachers[b],
                &scene.annotated(a, b)?,
                &scene.mask_region(a),
                &scene.mask_region(b),
                &MiningConfig {
                    seed: step_rng.random(),
                    ..mining
                },
            )?;
            anchored_clusters = outcome.stats.anchored_clusters;
            let pseudo = perturb_pseudo_labels(&outcome.pseudo, config.pseudo_noise_px, step_rng.random())?;
            pseudo_pairs = pseudo.len();
            let batch = if config.pseudo_batch > 0 && pseudo.len() > config.pseudo_batch {
                let mut idx = sample(&mut step_rng, pseudo.len(), config.pseudo_batch).into_vec();
                idx.sort_unstable();
                CorrespondenceSet::from_pairs(idx.into_iter().map(|i| pseudo.pairs()[i]))?
            } else {
                pseudo
            };
            // squared cells, so the weight does not depend on the stride
            let scale = config.lambda_self / (stride * stride);
            self_loss = l2_self_loss_into(
                &batch,
                &state.students[a],
                &state.students[b],
                config.temperature,
                scale,
                &mut ga,
                &mut gb,
            )? / (stride * stride);
        }
        let finite = sup_loss.is_finite()
            && self_loss.is_finite()
            && ga.iter().chain(&gb).all(|g| g.is_finite());
        if !finite {
            return Err(Error::NonFinite { step: t });
        }
        descend(&mut state.students[a], &ga, config.lr, config.renormalize);
        descend(&mut state.students[b], &gb, config.lr, config.renormalize);
        if ![a, b].iter().all(|&i| state.students[i].data().iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite { step: t });
        }
        for (teacher, student) in state.teachers.iter_mut().zip(&state.students) {
            ema_update(teacher, student, config.beta)?;
        }
        state.step = t + 1;
        trace.steps.push(StepRecord {
            step: t,
            src: a,
            tgt: b,
            sigma,
            sup_loss,
            self_loss,
            pseudo_pairs,
            anchored_clusters,
        });
        let due = config.eval_every > 0 && state.step % config.eval_every == 0;
        if due || state.step == config.steps {
            trace.evals.push(EvalRecord {
                step: state.step,
                pck: evaluate(&state.students)?,
            });
        }
    }
    Ok((state, trace))
}
