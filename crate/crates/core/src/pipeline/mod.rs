//! Single-stage and sequential distillation, evaluation and ablation grids.

mod classify;
mod grid;
mod plan;
mod train;

pub use classify::{
    accuracy, cross_entropy, evaluate, infer, layer_id, layer_lr_scales, train_classifier, ClassifierTrainConfig,
    EvalConfig, EvalMode, EvalReport,
};
pub use grid::{
    cell_dir, run_grid, set_path, GridAxis, GridData, GridReport, GridRow, GridSpec, GRID_FILE, RESULTS_CSV,
    RESULTS_TABLE,
};
pub use plan::{
    canonical_hash, parse_json, read_json, select_target_block, DistillPlan, InputMode, StageChain,
    REFERENCE_BATCH, REFERENCE_PEAK_LR,
};
pub use train::{
    initial_student, run_sequential, run_stage, schedule_for, stage_dir, steps_per_epoch, train_stage,
    train_student, StageOutcome, StageSummary, HEADS_CHECKPOINT, INIT_CHECKPOINT, METRICS_FILE, PLAN_FILE,
    STUDENT_CHECKPOINT, SUMMARY_FILE,
};
