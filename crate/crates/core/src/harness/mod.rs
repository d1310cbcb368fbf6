//! Experiment harness: configuration, dataset loading, persistence, the
//! end-to-end pipeline and report rendering.

pub mod config;
pub mod container;
pub mod datasets;
pub mod pipeline;
pub mod report;

pub use config::{AttackSection, DatasetSpec, DefenseSection, EpsilonScale, ExperimentConfig, ModelSection, TrainSection};
pub use container::{
    load_adversarial_set, load_checkpoint, load_tensor, save_adversarial_set, save_checkpoint, save_tensor,
    TensorContainer,
};
pub use datasets::{load_dataset, parse_cifar, parse_idx_images, parse_idx_labels};
pub use pipeline::{collect_reports, run_pipeline, with_workers, Artifacts, OutputLock, PipelineOutput, Run};
pub use report::{emit_report, ReportFormat, RunReport};
