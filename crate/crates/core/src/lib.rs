//! Open-vocabulary segmentation of aerial imagery with dual image encoders,
//! query-guided cost-volume fusion, and a tap-preserving upsampling decoder,
//! on a small self-contained tensor engine.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod param;
pub mod patch;
pub mod qgff;
pub mod ripd;
pub mod tensor;
pub mod text;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use config::{EncoderConfig, FreezePolicy, ModelConfig, PatchConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::GsNet;
pub use param::{ParamStore, Parameter};
pub use tensor::{Element, Tensor};
pub use text::{QuerySet, PromptTemplate};
