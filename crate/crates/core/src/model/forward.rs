//! Whole-stack forward pass over one tokenized sample.

use super::assemble::{assemble_multimodal, Assembled};
use super::bundle::ModelBundle;
use super::config::StackConfig;
use super::encoder::encode_image;
use super::lm::lm_forward;
use super::projector::pool_and_project;
use super::weights::{Params, Partition};
use crate::error::Result;
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::text::TokenizedSample;

/// An image either as preprocessed pixels or as already-computed encoder
/// output (valid only while the encoder stays frozen).
#[derive(Clone, Debug)]
pub enum ImageInput<F: Scalar = f32> {
    Pixels(Tensor<F>),
    Features(Tensor<F>),
}

/// Image → `[K, lm_dim]` projected tokens.
pub fn image_tokens<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params,
    cfg: &StackConfig,
    image: &ImageInput<F>,
) -> Result<Var> {
    let patches = match image {
        ImageInput::Pixels(px) => encode_image(g, p, cfg, px)?,
        ImageInput::Features(f) => g.constant(f.clone()),
    };
    pool_and_project(g, p, cfg, patches)
}

/// Runs the encoder alone, outside any training graph.
pub fn encoder_features<F: Scalar>(bundle: &ModelBundle<F>, pixels: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let enc: crate::model::Weights<F> = bundle
        .weights
        .iter()
        .filter(|(n, _)| Partition::of(n) == Some(Partition::Encoder))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    let p = Params::bind(&mut g, &enc, &[]);
    let out = encode_image(&mut g, &p, &bundle.config, pixels)?;
    Ok(g.value(out).clone())
}

/// Logits `[L, vocab]` for the assembled sequence of `sample`.
pub fn forward_sample<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params,
    cfg: &StackConfig,
    sample: &TokenizedSample,
    images: &[ImageInput<F>],
) -> Result<(Var, Assembled)> {
    let tokens = images
        .iter()
        .map(|img| image_tokens(g, p, cfg, img))
        .collect::<Result<Vec<_>>>()?;
    let assembled = assemble_multimodal(g, p, sample, &tokens)?;
    let logits = lm_forward(g, p, cfg, assembled.embeddings, None)?;
    Ok((logits, assembled))
}

/// Masked next-token loss of one sample: mean negative log-likelihood of its
/// answer tokens given everything before them.
pub fn sample_loss<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params,
    cfg: &StackConfig,
    sample: &TokenizedSample,
    images: &[ImageInput<F>],
) -> Result<Var> {
    let (logits, assembled) = forward_sample(g, p, cfg, sample, images)?;
    let (targets, mask) = assembled.shifted_targets();
    g.masked_cross_entropy(logits, &targets, &mask)
}
