use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{assemble_multimodal, embed_tokens, image_tokens, lm_forward, ImageInput, KvCache, ModelBundle, Params};
use crate::tensor::{Graph, Scalar, Var};
use crate::text::{Special, TokenId, TokenizedSample};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Temperature sampling from a seeded generator.
    Sample { temperature: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Generated ids, without the closing EOS.
    pub tokens: Vec<TokenId>,
    /// Assembled prompt length (image tokens counted).
    pub prompt_len: usize,
    /// Stopped because the context filled up rather than at EOS or `max_new`.
    pub truncated: bool,
    pub hit_eos: bool,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn last_row<F: Scalar>(g: &Graph<F>, logits: Var) -> Vec<F> {
    let t = g.value(logits);
    let v = t.shape()[1];
    let n = t.shape()[0];
    t.data()[(n - 1) * v..n * v].to_vec()
}

struct Picker {
    mode: DecodeMode,
    rng: ChaCha8Rng,
}

impl Picker {
    fn new(mode: DecodeMode) -> Result<Self> {
        let seed = match mode {
            DecodeMode::Greedy => 0,
            DecodeMode::Sample { temperature, seed } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::Input(format!("temperature must be positive, got {temperature}")));
                }
                seed
            }
        };
        Ok(Self {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn pick<F: Scalar>(&mut self, row: &[F]) -> Result<TokenId> {
        match self.mode {
            DecodeMode::Greedy => Ok(argmax(row) as TokenId),
            DecodeMode::Sample { temperature, .. } => {
                let top = row[argmax(row)].as_f64();
                let weights: Vec<f64> = row.iter().map(|v| ((v.as_f64() - top) / temperature).exp()).collect();
                let dist = WeightedIndex::new(&weights).map_err(|e| Error::Input(format!("sampling: {e}")))?;
                Ok(dist.sample(&mut self.rng) as TokenId)
            }
        }
    }
}

/// Generates a continuation of `prompt` (which should end with the
/// ASSISTANT marker) until EOS, `max_new` tokens, or the context limit.
///
/// With `use_cache` each step feeds only the newest token through the LM;
/// without it the whole sequence is recomputed. Both give the same tokens.
pub fn decode<F: Scalar>(
    bundle: &ModelBundle<F>,
    prompt: &TokenizedSample,
    images: &[ImageInput<F>],
    max_new: usize,
    mode: DecodeMode,
    use_cache: bool,
) -> Result<Decoded> {
    let cfg = &bundle.config;
    let mut g = Graph::new();
    let p = Params::bind(&mut g, &bundle.weights, &[]);
    let tokens = images
        .iter()
        .map(|img| image_tokens(&mut g, &p, cfg, img))
        .collect::<Result<Vec<_>>>()?;
    let assembled = assemble_multimodal(&mut g, &p, prompt, &tokens)?;
    let prompt_len = assembled.len();
    if prompt_len > cfg.ctx_limit {
        return Err(Error::ContextLength {
            len: prompt_len,
            limit: cfg.ctx_limit,
        });
    }
    let mut picker = Picker::new(mode)?;
    let mut cache = use_cache.then(|| KvCache::new(cfg));
    let mut sequence = assembled.embeddings;
    let mut logits = lm_forward(&mut g, &p, cfg, sequence, cache.as_mut())?;
    let mut out = Decoded {
        tokens: Vec::new(),
        prompt_len,
        truncated: false,
        hit_eos: false,
    };
    for step in 0..max_new {
        let next = picker.pick(&last_row(&g, logits))?;
        if next == Special::Eos.id() {
            out.hit_eos = true;
            break;
        }
        out.tokens.push(next);
        if step + 1 == max_new {
            break;
        }
        if prompt_len + out.tokens.len() >= cfg.ctx_limit {
            out.truncated = true;
            break;
        }
        let emb = embed_tokens(&mut g, &p, &[next])?;
        logits = match cache.as_mut() {
            Some(c) => lm_forward(&mut g, &p, cfg, emb, Some(c))?,
            None => {
                sequence = g.concat(&[sequence, emb], 0)?;
                lm_forward(&mut g, &p, cfg, sequence, None)?
            }
        };
    }
    Ok(out)
}

/// Greedy decoding with the KV cache.
pub fn greedy_decode<F: Scalar>(
    bundle: &ModelBundle<F>,
    prompt: &TokenizedSample,
    images: &[ImageInput<F>],
    max_new: usize,
) -> Result<Decoded> {
    decode(bundle, prompt, images, max_new, DecodeMode::Greedy, true)
}
