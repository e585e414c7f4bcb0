//! The four-term training objective and the training loop.

pub mod losses;
pub mod objective;
pub mod trainer;

pub use losses::{
    class_loss, class_loss_grad, concept_feature, concept_loss, concept_loss_grad, csa_loss, lcc_loss,
    lcc_loss_grad, pool_weighted, TripletGrad,
};
pub use objective::{evaluate_objective, BatchItem, LossBreakdown, LossWeights, TripletRef};
pub use trainer::{
    read_log, train, Checkpoint, StepRecord, TrainConfig, TrainOptions, TrainOutcome, TrainState, CHECKPOINT_FILE,
    LOG_FILE,
};
