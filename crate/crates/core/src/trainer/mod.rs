//! Training orchestration, checkpoints and slice-wise volumetric staining.

mod config;
mod run;
mod stain;
mod state;
mod step;

pub use config::{FusionConfig, TrainConfig};
pub use run::{
    checkpoint_path, continue_training, epoch_order, init_from_backbone, load_backbone,
    planned_state, pretrain_backbone, read_loss_log, save_backbone, split_indices,
    steps_per_epoch, train, train_with_backbone, EpochHook, TrainData, TrainRun, CHECKPOINT_DIR,
    LOSS_LOG, PRETRAIN_LOG,
};
pub use stain::{stain_volume, StainConfig, Stainer};
pub use state::{CheckpointBundle, TrainState};
pub use step::train_step;
