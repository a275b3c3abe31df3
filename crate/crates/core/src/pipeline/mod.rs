//! Training orchestration, checkpoints, configuration and inference.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod infer;
pub mod optim;
pub mod train;

pub use checkpoint::{
    export_inference, load_checkpoint, load_params, loss_csv, read_info, save_checkpoint,
    CheckpointInfo, LossRecord, StageState,
};
pub use config::{parse_override, parse_pairs, PenConfig, Stage, TrainConfig, TrainSettings};
pub use data::ImageLoader;
pub use infer::{benchmark_iterations, erase_any_size, run_inference, BenchRow};
pub use optim::Adam;
pub use train::{
    begin_stage, init_state, run_stage, step_rng, train_stage1, train_stage2_selfsup,
    train_stage2_with, train_stage3_finetune, train_stroke_init,
};
