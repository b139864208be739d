use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::checkpoint::{read_container, write_container};
use super::config::{parse_key_values, StackConfig};
use super::weights::{expected_shapes, init_encoder, init_lm, init_projector, Partition, Weights};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::text::Vocab;

const VOCAB_MARKER: &str = "[vocab]";

/// Configuration, tokenizer and every named weight of the stack.
#[derive(Clone, Debug)]
pub struct ModelBundle<F: Scalar = f32> {
    pub config: StackConfig,
    pub vocab: Vocab,
    pub weights: Weights<F>,
}

impl<F: Scalar> ModelBundle<F> {
    /// Seeded random initialization. `config.vocab_size` must equal the
    /// vocabulary size.
    pub fn init(config: StackConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "config vocab_size {} but tokenizer has {} ids",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut weights = BTreeMap::new();
        init_encoder(&config, seed, &mut weights);
        init_projector(&config, seed, &mut weights);
        init_lm(&config, seed, &mut weights);
        let bundle = Self {
            config,
            vocab,
            weights,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Every weight has the config-determined shape and a partition, and no
    /// weight is missing.
    pub fn validate(&self) -> Result<()> {
        let expected = expected_shapes(&self.config);
        for (name, shape) in &expected {
            match self.weights.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "weight {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing weight {name}"))),
            }
        }
        if let Some(extra) = self.weights.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected weight {extra}")));
        }
        Ok(())
    }

    pub fn partition_names(&self, part: Partition) -> impl Iterator<Item = &str> {
        self.weights
            .keys()
            .map(String::as_str)
            .filter(move |n| Partition::of(n) == Some(part))
    }

    pub fn num_params(&self, part: Option<Partition>) -> usize {
        self.weights
            .iter()
            .filter(|(n, _)| part.is_none() || Partition::of(n) == part)
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and raw bits of one partition's weights.
    pub fn partition_hash(&self, part: Partition) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.weights.iter().filter(|(n, _)| Partition::of(n) == Some(part)) {
            h.update(name.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn cast<G: Scalar>(&self) -> ModelBundle<G> {
        ModelBundle {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            weights: self
                .weights
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
        }
    }

    fn meta(&self) -> String {
        format!("{}{VOCAB_MARKER}\n{}", self.config.to_text(), self.vocab.to_text())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(&str, &Tensor<F>)> =
            self.weights.iter().map(|(k, t)| (k.as_str(), t)).collect();
        write_container(path, &tensors, &self.meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = read_container::<F>(path)?;
        let (cfg_text, vocab_text) = meta
            .split_once(&format!("{VOCAB_MARKER}\n"))
            .ok_or_else(|| Error::Checkpoint("checkpoint meta lacks a vocabulary block".into()))?;
        let mut config = StackConfig::toy();
        config.apply(&parse_key_values(cfg_text))?;
        config.validate()?;
        let bundle = Self {
            config,
            vocab: Vocab::from_text(vocab_text)?,
            weights: tensors.into_iter().collect(),
        };
        bundle.validate()?;
        Ok(bundle)
    }
}
