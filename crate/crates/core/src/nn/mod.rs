//! Minimal reverse-mode tensor engine and the bi-channel transformer.

pub mod checkpoint;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, NodeId};
pub use model::{
    AdapterPosition, BiChannelModel, Eye, EyeAdapter, EyeOutput, ForwardMode, HeadSharing, LoraLinear, LoraTarget,
    ModelConfig, ParamReport,
};
pub use optim::Adam;
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
