//! Masks, expected sparsity, the Lagrangian objective, mask training and
//! binarization.

mod binarize;
mod config;
mod masks;
mod objective;
mod sparsity;
mod train;

pub use binarize::binarize;
pub use config::PruneConfig;
pub use masks::{keep_list, HeadMasks, LayerMasks, MaskLevel, MaskSet, MaskTree, SiteMasks};
pub use objective::{pruning_loss, pruning_loss_var, LagrangeState, LAMBDA1_BOUND, LAMBDA2_MAX};
pub use sparsity::{expected_retained, Block, LayerWiring, LevelStats, MaskRef, Residual, SparsityReport, Topology};
pub use train::{finetune, random_baseline, train_masks, MaskTraining, StepLog};
