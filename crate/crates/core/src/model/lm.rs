//! Decoder-only language model with rotary positions.

use super::config::StackConfig;
use super::layers::{block, linear, norm, AttnMask, BlockSpec, LayerCache};
use super::weights::Params;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Per-layer rotated keys and values of the positions decoded so far.
#[derive(Clone, Debug)]
pub struct KvCache<F: Scalar = f32> {
    layers: Vec<LayerCache<F>>,
}

impl<F: Scalar> KvCache<F> {
    pub fn new(cfg: &StackConfig) -> Self {
        let empty = Tensor::zeros(&[0, cfg.lm_dim]);
        Self {
            layers: (0..cfg.lm_layers)
                .map(|_| LayerCache {
                    k: empty.clone(),
                    v: empty.clone(),
                })
                .collect(),
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.k.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Token embedding lookup.
pub fn embed_tokens<F: Scalar>(g: &mut Graph<F>, p: &Params, ids: &[u32]) -> Result<Var> {
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    g.embed(p.get("lm.embed")?, &ids)
}

/// `[T, lm_dim]` input embeddings → `[T, vocab]` next-token logits.
///
/// With a cache, the rows continue after the cached positions and the cache
/// is extended; without one this is the plain causal forward pass.
pub fn lm_forward<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params,
    cfg: &StackConfig,
    embeddings: Var,
    mut cache: Option<&mut KvCache<F>>,
) -> Result<Var> {
    let shape = g.shape(embeddings).to_vec();
    if shape.len() != 2 || shape[1] != cfg.lm_dim {
        return Err(Error::Shape(format!(
            "input embeddings {shape:?}, expected [T, {}]",
            cfg.lm_dim
        )));
    }
    let past = cache.as_ref().map_or(0, |c| c.len());
    let total = past + shape[0];
    if total > cfg.ctx_limit {
        return Err(Error::ContextLength {
            len: total,
            limit: cfg.ctx_limit,
        });
    }
    let spec = BlockSpec {
        heads: cfg.lm_heads,
        eps: cfg.norm_eps,
        rope_base: Some(cfg.rope_base),
        mask: AttnMask::Causal { offset: past },
    };
    let mut x = embeddings;
    for i in 0..cfg.lm_layers {
        let layer_cache = cache.as_deref_mut().map(|c| &mut c.layers[i]);
        x = block(g, p, &format!("lm.blocks.{i}"), x, &spec, layer_cache)?;
    }
    let x = norm(g, p, "lm.ln_f", x, cfg.norm_eps)?;
    if cfg.tie_embeddings {
        let table = p.get("lm.embed")?;
        let head = g.transpose(table)?;
        linear(g, x, head, None)
    } else {
        linear(g, x, p.get("lm.head")?, None)
    }
}
