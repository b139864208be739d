//! The three-part stack: ViT encoder, attention-pooling projector and decoder
//! LM, plus image preprocessing, sequence assembly and checkpoints.

mod assemble;
mod bundle;
pub mod checkpoint;
mod config;
mod encoder;
mod forward;
mod image;
mod layers;
mod lm;
mod projector;
mod weights;

pub use assemble::{assemble_multimodal, Assembled};
pub use bundle::ModelBundle;
pub use config::{parse_key_values, StackConfig};
pub use encoder::{encode_image, patchify};
pub use forward::{encoder_features, forward_sample, image_tokens, sample_loss, ImageInput};
pub use image::{pad_to_square, preprocess_image};
pub use layers::AttnMask;
pub use lm::{embed_tokens, lm_forward, KvCache};
pub use projector::pool_and_project;
pub use weights::{expected_shapes, init_encoder, init_lm, init_projector, Params, Partition, Weights};
