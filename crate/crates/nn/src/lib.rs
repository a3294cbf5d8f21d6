//! Minimal reverse-mode automatic differentiation in double precision, with
//! the layers needed by the motion prior, sparse encoder, and sequence model.

pub mod checkpoint;
mod error;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, KinematicTree, Var};
pub use layers::{
    positional_encoding, FeedForward, LayerNorm, Linear, LstmOutput, LstmStack, MultiHeadAttention,
    TransformerConfig, TransformerDecoderStack, TransformerEncoderStack,
};
pub use params::{init, AdamConfig, Param, ParamStore};
pub use tensor::Tensor;
