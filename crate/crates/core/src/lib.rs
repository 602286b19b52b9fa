//! Duplex masked auto-encoder for retrieval.
//!
//! The encoder is pre-trained with two light decoders: a one-layer
//! two-stream transformer that reconstructs the input from the `[CLS]`
//! embedding, and a linear projection into vocabulary space whose
//! max-pooled output is trained with a bag-of-words loss. Documents are
//! then represented by a projected `[CLS]` vector concatenated with a
//! top-k sparsified vocabulary vector, fine-tuned contrastively and
//! searched with an exact hybrid index.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod model;
pub mod pipeline;
pub mod pretrain;
pub mod representation;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::{Graph, Params, Scalar, Tensor, Var};
