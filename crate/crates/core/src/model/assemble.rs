use super::lm::embed_tokens;
use super::weights::Params;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};
use crate::text::{Special, TokenId, TokenizedSample};

/// Multimodal input sequence with masks aligned to its positions.
#[derive(Debug)]
pub struct Assembled {
    pub embeddings: Var,
    /// Token id per position; `None` where an image token sits.
    pub tokens: Vec<Option<TokenId>>,
    /// Answer mask per position (image positions are never masked in).
    pub loss_mask: Vec<bool>,
}

impl Assembled {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Next-token targets: row `t` predicts position `t + 1`, and counts in
    /// the loss iff position `t + 1` is an answer token.
    pub fn shifted_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let pad = Special::Pad.id() as usize;
        let n = self.tokens.len();
        let mut targets = vec![pad; n];
        let mut mask = vec![false; n];
        for t in 0..n.saturating_sub(1) {
            if let Some(id) = self.tokens[t + 1] {
                targets[t] = id as usize;
                mask[t] = self.loss_mask[t + 1];
            }
        }
        (targets, mask)
    }
}

/// Embeds the text tokens and splices each image's `[K, lm_dim]` tokens in
/// place of its IMAGE placeholder.
pub fn assemble_multimodal<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params,
    sample: &TokenizedSample,
    images: &[Var],
) -> Result<Assembled> {
    if images.len() != sample.image_slots.len() {
        return Err(Error::Pairing {
            images: images.len(),
            slots: sample.image_slots.len(),
        });
    }
    let text = embed_tokens(g, p, &sample.ids)?;
    if images.is_empty() {
        return Ok(Assembled {
            embeddings: text,
            tokens: sample.ids.iter().map(|&i| Some(i)).collect(),
            loss_mask: sample.loss_mask.clone(),
        });
    }
    let width = g.shape(text)[1];
    let mut parts = Vec::with_capacity(2 * images.len() + 1);
    let mut tokens = Vec::new();
    let mut loss_mask = Vec::new();
    let mut cursor = 0;
    for (&slot, &img) in sample.image_slots.iter().zip(images) {
        let k = g.shape(img)[0];
        if g.shape(img)[1] != width {
            return Err(Error::Shape(format!(
                "image tokens {:?} do not match embedding width {width}",
                g.shape(img)
            )));
        }
        if slot > cursor {
            parts.push(g.slice(text, &[cursor..slot, 0..width])?);
        }
        parts.push(img);
        for t in cursor..slot {
            tokens.push(Some(sample.ids[t]));
            loss_mask.push(sample.loss_mask[t]);
        }
        tokens.extend(std::iter::repeat_n(None, k));
        loss_mask.extend(std::iter::repeat_n(false, k));
        cursor = slot + 1;
    }
    let n = sample.ids.len();
    if cursor < n {
        parts.push(g.slice(text, &[cursor..n, 0..width])?);
        for t in cursor..n {
            tokens.push(Some(sample.ids[t]));
            loss_mask.push(sample.loss_mask[t]);
        }
    }
    let embeddings = g.concat(&parts, 0)?;
    Ok(Assembled {
        embeddings,
        tokens,
        loss_mask,
    })
}
