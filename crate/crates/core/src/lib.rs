//! Desk-scale multimodal chat assistant: a ViT image encoder, an
//! attention-pooling projector and a decoder language model trained with a
//! masked autoregressive objective, plus the data curation, serving and
//! benchmark tooling around them.

pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelBundle, StackConfig};
pub use tensor::{Graph, Scalar, Tensor, Var};
