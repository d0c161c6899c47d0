//! Desk-scale training lab: synthetic object instances with known dense
//! correspondence, per-instance descriptor grids as the learnable model, and
//! a student/teacher loop that mixes keypoint supervision with mined dense
//! pseudo-labels.

pub mod eval;
pub mod scene;
pub mod train;

pub use eval::{eval_unseen, pck_records, PckTable};
pub use scene::{flow_between, synth_scene, MeshWarp, SceneSpec, Split, SyntheticScene};
pub use train::{train_toy, EvalRecord, StepRecord, TrainConfig, TrainState, TrainTrace};
