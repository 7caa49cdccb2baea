//! Transformer cost aggregation for dense semantic correspondence.

pub mod backbone;
pub mod cats;
pub mod catspp;
pub mod checkpoint;
pub mod config;
pub mod correlation;
pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
mod text;
pub mod train;

pub use cats::{Cats, CatsConfig, SwapMode};
pub use catspp::{Catspp, CatsppConfig, EfficientBlock, LayerSpec};
pub use checkpoint::Checkpoint;
pub use config::{ModelKind, RunConfig};
pub use correlation::{CorrelationStack, FeatureMap, Hypercorrelation, TokenAxis};
pub use data::{PairRecord, SyntheticPair};
pub use error::{Error, Result};
pub use eval::Report;
pub use flow::{FlowField, KeypointSet, PckBasis};
pub use graph::{Gradients, Graph, Mode, Var};
pub use model::Model;
pub use params::{Param, ParamStore};
pub use tensor::{AnyTensor, DType, Scalar, Tensor};
pub use train::Trainer;
