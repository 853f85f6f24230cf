//! Cross-cutting verification: finite-difference gradient checks and the
//! toy-scale training harness.

pub mod gradcheck;
pub mod train;

pub use gradcheck::{gradcheck, run_named, tiny_block_spec, GradCheckReport, GroupReport};
pub use train::{
    ablation_csv, ablation_sweep, generate_dataset, shrunk_v3_spec, sweep_spec, train_toy,
    AblationRow, AdamW, CurvePoint, ToyTask, TrainConfig, TrainRun,
};
