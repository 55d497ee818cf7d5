//! RWKV-v4 with multiple temporal perspectives.

pub mod aggregation;
pub mod baseline;
mod config;
pub mod graph;
pub mod init;
pub mod perspectives;

pub use aggregation::{Aggregator, SelectorParams, TransformerHeadParams};
pub use baseline::{LayerCoeffs, LayerState, RwkvModel, SharedWeights};
pub use config::{Aggregation, ModelConfig};
pub use graph::{graph_finite_diff, sequence_forward, sequence_loss, SequenceNodes};
pub use init::{expand_store, gradcheck_context, gradcheck_store, init_base, init_model};
pub use perspectives::{
    init_perspectives, PerspectiveModel, PerspectiveParams, PerspectiveState, StepOutput,
};

#[cfg(test)]
mod tests;
