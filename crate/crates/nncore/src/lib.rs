//! Minimal dense-tensor math with reverse-mode differentiation.
//!
//! The [`Graph`] records forward operations and replays them in reverse to
//! accumulate exact analytic gradients. Values are `f64` end to end; the
//! on-disk checkpoint format stores `f32`, see [`checkpoint`].

pub mod adam;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod fdcheck;
pub mod graph;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use blocks::{feed_forward, multi_head_attention, AttnWeights};
pub use error::NnError;
pub use graph::{Graph, NodeId};
pub use tensor::{ArrD, Gradients, ParamStore, SharedArrD, Tensor};
