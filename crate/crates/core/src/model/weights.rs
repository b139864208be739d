use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::StackConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Named weights, ordered by name.
pub type Weights<F> = BTreeMap<String, Tensor<F>>;

/// Which component a weight belongs to; drives freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Encoder,
    Projector,
    Lm,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Encoder, Partition::Projector, Partition::Lm];

    pub fn prefix(self) -> &'static str {
        match self {
            Partition::Encoder => "encoder.",
            Partition::Projector => "projector.",
            Partition::Lm => "lm.",
        }
    }

    pub fn of(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| name.starts_with(p.prefix()))
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Partition::Encoder),
            "projector" => Ok(Partition::Projector),
            "lm" => Ok(Partition::Lm),
            other => Err(Error::Config(format!("unknown partition {other:?}"))),
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix().trim_end_matches('.'))
    }
}

const INIT_STD: f64 = 0.02;

struct Init<'a, F: Scalar> {
    rng: ChaCha8Rng,
    out: &'a mut Weights<F>,
}

impl<F: Scalar> Init<'_, F> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        self.out.insert(name, Tensor::randn(shape, std, &mut self.rng));
    }
    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.out.insert(name, Tensor::zeros(shape));
    }
    fn ones(&mut self, name: String, shape: &[usize]) {
        self.out.insert(name, Tensor::ones(shape));
    }
    fn norm(&mut self, prefix: &str, dim: usize) {
        self.ones(format!("{prefix}.g"), &[dim]);
        self.zeros(format!("{prefix}.b"), &[dim]);
    }
    fn block(&mut self, prefix: &str, dim: usize, ffn: usize, layers: usize) {
        let resid_std = INIT_STD / (2.0 * layers.max(1) as f64).sqrt();
        self.norm(&format!("{prefix}.ln1"), dim);
        for w in ["wq", "wk", "wv"] {
            self.normal(format!("{prefix}.attn.{w}"), &[dim, dim], INIT_STD);
        }
        self.normal(format!("{prefix}.attn.wo"), &[dim, dim], resid_std);
        self.norm(&format!("{prefix}.ln2"), dim);
        self.normal(format!("{prefix}.mlp.w1"), &[dim, ffn], INIT_STD);
        self.zeros(format!("{prefix}.mlp.b1"), &[ffn]);
        self.normal(format!("{prefix}.mlp.w2"), &[ffn, dim], resid_std);
        self.zeros(format!("{prefix}.mlp.b2"), &[dim]);
    }
}

// Each partition draws from its own stream so re-initializing one leaves
// the others unchanged.
fn stream(seed: u64, part: Partition) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(part as u64 + 1);
    rng
}

pub fn init_encoder<F: Scalar>(cfg: &StackConfig, seed: u64, out: &mut Weights<F>) {
    let mut init = Init {
        rng: stream(seed, Partition::Encoder),
        out,
    };
    let d = cfg.enc_dim;
    init.normal("encoder.patch.w".into(), &[cfg.patch_features(), d], INIT_STD);
    init.zeros("encoder.patch.b".into(), &[d]);
    init.normal("encoder.pos".into(), &[cfg.num_patches(), d], INIT_STD);
    for i in 0..cfg.enc_layers {
        init.block(&format!("encoder.blocks.{i}"), d, cfg.enc_ffn, cfg.enc_layers);
    }
    init.norm("encoder.ln_f", d);
}

pub fn init_projector<F: Scalar>(cfg: &StackConfig, seed: u64, out: &mut Weights<F>) {
    let mut init = Init {
        rng: stream(seed, Partition::Projector),
        out,
    };
    let (p, e) = (cfg.pool_dim, cfg.enc_dim);
    init.normal("projector.latents".into(), &[cfg.pool_latents, p], 0.1);
    for i in 0..cfg.pool_layers {
        let pre = format!("projector.layers.{i}");
        init.norm(&format!("{pre}.ln_q"), p);
        init.norm(&format!("{pre}.ln_kv"), e);
        // Fan-in scaling: with the small default std the attention is uniform
        // and its output vanishes next to the unit-scale latents, so every
        // image pools to nearly the same tokens.
        let (sp, se) = (1.0 / (p as f64).sqrt(), 1.0 / (e as f64).sqrt());
        init.normal(format!("{pre}.wq"), &[p, p], sp);
        init.normal(format!("{pre}.wk"), &[e, p], se);
        init.normal(format!("{pre}.wv"), &[e, p], se);
        init.normal(format!("{pre}.wo"), &[p, p], sp);
    }
    init.norm("projector.ln_out", p);
    init.normal("projector.mlp.w1".into(), &[p, cfg.lm_dim], INIT_STD);
    init.zeros("projector.mlp.b1".into(), &[cfg.lm_dim]);
    init.normal("projector.mlp.w2".into(), &[cfg.lm_dim, cfg.lm_dim], INIT_STD);
    init.zeros("projector.mlp.b2".into(), &[cfg.lm_dim]);
}

pub fn init_lm<F: Scalar>(cfg: &StackConfig, seed: u64, out: &mut Weights<F>) {
    let mut init = Init {
        rng: stream(seed, Partition::Lm),
        out,
    };
    let d = cfg.lm_dim;
    init.normal("lm.embed".into(), &[cfg.vocab_size, d], INIT_STD);
    for i in 0..cfg.lm_layers {
        init.block(&format!("lm.blocks.{i}"), d, cfg.lm_ffn, cfg.lm_layers);
    }
    init.norm("lm.ln_f", d);
    if !cfg.tie_embeddings {
        init.normal("lm.head".into(), &[d, cfg.vocab_size], INIT_STD);
    }
}

/// Expected shape of every weight for `cfg`.
pub fn expected_shapes(cfg: &StackConfig) -> BTreeMap<String, Vec<usize>> {
    let mut shapes = BTreeMap::new();
    let mut add = |name: String, shape: Vec<usize>| {
        shapes.insert(name, shape);
    };
    let block = |add: &mut dyn FnMut(String, Vec<usize>), pre: &str, d: usize, ffn: usize| {
        for n in ["ln1", "ln2"] {
            add(format!("{pre}.{n}.g"), vec![d]);
            add(format!("{pre}.{n}.b"), vec![d]);
        }
        for w in ["wq", "wk", "wv", "wo"] {
            add(format!("{pre}.attn.{w}"), vec![d, d]);
        }
        add(format!("{pre}.mlp.w1"), vec![d, ffn]);
        add(format!("{pre}.mlp.b1"), vec![ffn]);
        add(format!("{pre}.mlp.w2"), vec![ffn, d]);
        add(format!("{pre}.mlp.b2"), vec![d]);
    };
    let (e, p, d) = (cfg.enc_dim, cfg.pool_dim, cfg.lm_dim);
    add("encoder.patch.w".into(), vec![cfg.patch_features(), e]);
    add("encoder.patch.b".into(), vec![e]);
    add("encoder.pos".into(), vec![cfg.num_patches(), e]);
    for i in 0..cfg.enc_layers {
        block(&mut add, &format!("encoder.blocks.{i}"), e, cfg.enc_ffn);
    }
    add("encoder.ln_f.g".into(), vec![e]);
    add("encoder.ln_f.b".into(), vec![e]);
    add("projector.latents".into(), vec![cfg.pool_latents, p]);
    for i in 0..cfg.pool_layers {
        let pre = format!("projector.layers.{i}");
        add(format!("{pre}.ln_q.g"), vec![p]);
        add(format!("{pre}.ln_q.b"), vec![p]);
        add(format!("{pre}.ln_kv.g"), vec![e]);
        add(format!("{pre}.ln_kv.b"), vec![e]);
        add(format!("{pre}.wq"), vec![p, p]);
        add(format!("{pre}.wk"), vec![e, p]);
        add(format!("{pre}.wv"), vec![e, p]);
        add(format!("{pre}.wo"), vec![p, p]);
    }
    add("projector.ln_out.g".into(), vec![p]);
    add("projector.ln_out.b".into(), vec![p]);
    add("projector.mlp.w1".into(), vec![p, d]);
    add("projector.mlp.b1".into(), vec![d]);
    add("projector.mlp.w2".into(), vec![d, d]);
    add("projector.mlp.b2".into(), vec![d]);
    add("lm.embed".into(), vec![cfg.vocab_size, d]);
    for i in 0..cfg.lm_layers {
        block(&mut add, &format!("lm.blocks.{i}"), d, cfg.lm_ffn);
    }
    add("lm.ln_f.g".into(), vec![d]);
    add("lm.ln_f.b".into(), vec![d]);
    if !cfg.tie_embeddings {
        add("lm.head".into(), vec![d, cfg.vocab_size]);
    }
    shapes
}

/// Weights bound onto a graph as leaves.
pub struct Params {
    vars: HashMap<String, Var>,
}

impl Params {
    /// Binds every weight; those in `trainable` receive gradients.
    pub fn bind<F: Scalar>(g: &mut Graph<F>, weights: &Weights<F>, trainable: &[Partition]) -> Self {
        let vars = weights
            .iter()
            .map(|(name, t)| {
                let train = Partition::of(name).is_some_and(|p| trainable.contains(&p));
                let v = if train {
                    g.param(t)
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing weight {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
