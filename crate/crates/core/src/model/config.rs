use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Geometry of the encoder, projector and language model.
#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub enc_dim: usize,
    pub enc_ffn: usize,
    /// Number of learned latent queries, i.e. image tokens per image.
    pub pool_latents: usize,
    pub pool_dim: usize,
    pub pool_heads: usize,
    /// Stacked cross-attention layers in the pooler.
    pub pool_layers: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_dim: usize,
    pub lm_ffn: usize,
    pub vocab_size: usize,
    pub ctx_limit: usize,
    pub tie_embeddings: bool,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl StackConfig {
    /// ViT-L/16 at 448 px, 128 latents of width 768, 13B-class decoder.
    pub fn full() -> Self {
        Self {
            image_size: 448,
            patch_size: 16,
            enc_layers: 24,
            enc_heads: 16,
            enc_dim: 1024,
            enc_ffn: 4096,
            pool_latents: 128,
            pool_dim: 768,
            pool_heads: 12,
            pool_layers: 1,
            lm_layers: 40,
            lm_heads: 40,
            lm_dim: 5120,
            lm_ffn: 13824,
            vocab_size: 32000,
            ctx_limit: 4096,
            tie_embeddings: false,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    /// Desk-scale preset used for tests and CPU training.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            enc_layers: 4,
            enc_heads: 4,
            enc_dim: 64,
            enc_ffn: 256,
            pool_latents: 8,
            pool_dim: 64,
            pool_heads: 4,
            pool_layers: 1,
            lm_layers: 4,
            lm_heads: 4,
            lm_dim: 128,
            lm_ffn: 512,
            vocab_size: crate::text::Vocab::bytes_only().len(),
            ctx_limit: 512,
            tie_embeddings: false,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens produced per image.
    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_features(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("enc_heads", self.enc_heads),
            ("enc_dim", self.enc_dim),
            ("enc_ffn", self.enc_ffn),
            ("pool_latents", self.pool_latents),
            ("pool_dim", self.pool_dim),
            ("pool_heads", self.pool_heads),
            ("pool_layers", self.pool_layers),
            ("lm_heads", self.lm_heads),
            ("lm_dim", self.lm_dim),
            ("lm_ffn", self.lm_ffn),
            ("vocab_size", self.vocab_size),
            ("ctx_limit", self.ctx_limit),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let divisible = [
            ("image_size", self.image_size, "patch_size", self.patch_size),
            ("enc_dim", self.enc_dim, "enc_heads", self.enc_heads),
            ("pool_dim", self.pool_dim, "pool_heads", self.pool_heads),
            ("lm_dim", self.lm_dim, "lm_heads", self.lm_heads),
        ];
        for (a, x, b, y) in divisible {
            if x % y != 0 {
                return Err(Error::Config(format!("{a} ({x}) must be divisible by {b} ({y})")));
            }
        }
        if (self.lm_dim / self.lm_heads) % 2 != 0 {
            return Err(Error::Config(
                "lm head dimension must be even for rotary encoding".into(),
            ));
        }
        Ok(())
    }

    /// `key=value` lines, stable order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("enc_heads", self.enc_heads.to_string()),
            ("enc_dim", self.enc_dim.to_string()),
            ("enc_ffn", self.enc_ffn.to_string()),
            ("pool_latents", self.pool_latents.to_string()),
            ("pool_dim", self.pool_dim.to_string()),
            ("pool_heads", self.pool_heads.to_string()),
            ("pool_layers", self.pool_layers.to_string()),
            ("lm_layers", self.lm_layers.to_string()),
            ("lm_heads", self.lm_heads.to_string()),
            ("lm_dim", self.lm_dim.to_string()),
            ("lm_ffn", self.lm_ffn.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("ctx_limit", self.ctx_limit.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("rope_base", self.rope_base.to_string()),
            ("norm_eps", self.norm_eps.to_string()),
        ]
    }

    /// Parses `key=value` lines. A `preset=` key selects the base values;
    /// unknown keys are ignored so the same file can carry other sections.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text);
        let mut cfg = match kv.get("preset") {
            Some(p) => Self::preset(p)?,
            None => Self::toy(),
        };
        cfg.apply(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {k}")))
        }
        for (k, v) in kv {
            let v = v.as_str();
            match k.as_str() {
                "image_size" => self.image_size = num(k, v)?,
                "patch_size" => self.patch_size = num(k, v)?,
                "enc_layers" => self.enc_layers = num(k, v)?,
                "enc_heads" => self.enc_heads = num(k, v)?,
                "enc_dim" => self.enc_dim = num(k, v)?,
                "enc_ffn" => self.enc_ffn = num(k, v)?,
                "pool_latents" => self.pool_latents = num(k, v)?,
                "pool_dim" => self.pool_dim = num(k, v)?,
                "pool_heads" => self.pool_heads = num(k, v)?,
                "pool_layers" => self.pool_layers = num(k, v)?,
                "lm_layers" => self.lm_layers = num(k, v)?,
                "lm_heads" => self.lm_heads = num(k, v)?,
                "lm_dim" => self.lm_dim = num(k, v)?,
                "lm_ffn" => self.lm_ffn = num(k, v)?,
                "vocab_size" => self.vocab_size = num(k, v)?,
                "ctx_limit" => self.ctx_limit = num(k, v)?,
                "tie_embeddings" => self.tie_embeddings = num(k, v)?,
                "rope_base" => self.rope_base = num(k, v)?,
                "norm_eps" => self.norm_eps = num(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }
}

/// `key=value` lines; `#` comments and `[section]` headers are skipped.
pub fn parse_key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#') && !l.starts_with('['))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
