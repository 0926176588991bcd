//! Training stages, optimizer and parameter accounting.

pub mod config;
pub mod optim;
pub mod train;

pub use config::{CatalogSamplingPolicy, Stage, TrainConfig};
pub use optim::{clip_global_norm, Adam};
pub use train::{
    build_catalog, check_frozen_core, count_params, full_loss_graph, prediction_outputs,
    pretrain_base, train_adapter, LogRecord, ParamCounts, TrainOutcome,
};
