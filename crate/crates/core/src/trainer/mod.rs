//! Model assembly, objective, optimiser and the training loop.

mod adam;
mod checkpoint;
mod config;
mod model;
mod train;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, Counts};
pub use config::{Ablations, Preset, TrainConfig};
pub use model::{
    bpr_loss, bpr_loss_on, forward, init_params, lgc_layer, lgc_layer_on, lgc_readout,
    lgc_readout_on, sample_negative, total_loss_on, xavier, Forward, LossTerms, ModelGraphs,
    ParamIds, StepSamples, TrainTriple, ENTITIES, RELATIONS, USERS,
};
pub use train::{
    checkpoint_embeddings, evaluate, log_csv, train, EpochLog, TrainOutcome, Trainer,
};
