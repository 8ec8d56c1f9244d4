//! Config-driven runs on the toy tasks.

pub mod checkpoint;
pub mod config;
pub mod plot;
pub mod run;
pub mod selftest;
pub mod task;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{
    ConditioningKind, EvalSection, ModelSection, Preset, RlSection, RunConfig, RunSection,
    SftSection, Variant,
};
pub use plot::{line_chart, plot_csv, CsvTable, Series};
pub use run::{
    eval_checkpoint, initial_model, run_ablation, run_rl, run_sft, write_manifest, AblationReport,
    EvalRecord, Evaluator, RlReport, RunOptions, SelfChecks, SftReport, CHECKPOINT_FILE,
    CSV_SCHEMA_VERSION,
};
pub use selftest::selftest;
pub use task::{Prompt, TaskKind, ToyTask, ToyTaskSpec};
