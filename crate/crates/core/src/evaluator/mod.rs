//! Path evaluator: a small transformer that scores how well a relation path
//! answers a question, plus its training machinery.

pub mod checkpoint;
pub mod linalg;
pub mod mining;
pub mod model;
pub mod params;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use mining::{mine_paths, mine_triplets, MinedPaths, MiningConfig};
pub use model::{backward, forward, score, score_batch, score_padded, ForwardCache, PathEncoding, SeqBatch};
pub use params::{ScorerDims, ScorerParams, Tensor};
pub use train::{
    adam_step, bpr_loss, finetune_step, loss_and_grads, pretrain, ranking_accuracy, AdamState, TrainConfig,
    TrainTriplet, FINETUNE_LR, PRETRAIN_LR,
};
