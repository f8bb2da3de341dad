//! Experiment harness: ablation variants, desk-scale runs, the workspace
//! pipeline, run manifests and slice rendering.

pub mod ablation;
pub mod manifest;
pub mod pipeline;
pub mod render;

pub use ablation::{baseline_experiment, variant_config, AblationVariant, DeskScale};
pub use manifest::RunManifest;
pub use pipeline::{
    ablate, evaluate, infer_dataset, infer_fold, load_folds, load_prepared, postprocess_tune, prepare, render_report,
    train_cell, write_report, AblationPlan, AblationRecord, AblationReport, Evaluation, Workspace,
};
