//! Experiment orchestration: configuration, the round loop and its outputs.

mod config;
mod report;
mod run;

pub use config::{
    AssignOption, DatasetConfig, ExperimentConfig, LrSchedule, ModelConfig, PartitionConfig,
    PartitionKind, RuleConfig, StrategyConfig, TimingConfig, TrainingConfig,
};
pub use report::{
    cost_report, metrics_csv, summarize, write_outputs, CostReport, CostRow, Summary, TargetTime,
    METRICS_HEADER,
};
pub use run::{
    load_data, mix_seed, run_experiment, run_experiment_on, sample_devices, tier_balance,
    tier_counts, time_to_accuracy, ExperimentOutput, RoundRecord,
};
