//! Toy transformer stacks and their forward passes.

mod config;
mod forward;
mod params;
mod task;
mod train;

pub use config::{Arch, ModelConfig};
pub use forward::{
    build_graph, evaluate, forward, forward_masked, forward_projected, forward_traced, leaves_on, BatchInput, EvalPlan,
    ForwardTrace, HeadTrace, LayerTrace, Plan, NORM_EPS,
};
pub use params::{HeadParams, LayerParams, ModelParams, TransformerModel};
pub use task::{Dataset, Example, MajorityTask};
pub use train::{accuracy, argmax_columns, batches, predict, split, train_toy, Adam, TrainReport, TrainSettings};
