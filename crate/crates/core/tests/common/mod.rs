#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlchat::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar objective `Σ out ⊙ weights`, with a fixed random weighting so every
/// output element contributes a distinct amount.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let w = random(&shape, &mut rng(seed ^ 0x5eed));
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

/// Central finite differences against the analytic gradient for every input.
/// Returns the largest per-input relative error `‖analytic − numeric‖ / ‖numeric‖`.
pub fn grad_check<B>(inputs: &[Tensor<f64>], build: B) -> f64
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let h = 1e-5;
    let eval = |vals: &[Tensor<f64>], backward: bool| {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t)).collect();
        let out = build(&mut g, &vars);
        let loss = if g.value(out).numel() == 1 && g.shape(out).is_empty() {
            out
        } else {
            project(&mut g, out, 17)
        };
        let value = g.value(loss).item();
        let grads = if backward {
            g.backward(loss).unwrap();
            vars.iter()
                .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
                .collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric[j] = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
        }
        let diff: f64 = analytic[i]
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let rel = if norm < 1e-12 { diff } else { diff / norm };
        worst = worst.max(rel);
    }
    worst
}

pub fn toy_bundle<F: vlchat::Scalar>(seed: u64) -> vlchat::ModelBundle<F> {
    vlchat::ModelBundle::init(vlchat::StackConfig::toy(), vlchat::text::Vocab::bytes_only(), seed).unwrap()
}

/// Random pixels in `[0, 1)` at the configured geometry.
pub fn random_image<F: vlchat::Scalar>(cfg: &vlchat::StackConfig, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let s = cfg.image_size;
    let data: Vec<F> = (0..3 * s * s).map(|_| F::of(rng.gen_range(0.0..1.0))).collect();
    Tensor::new(vec![3, s, s], data).unwrap()
}
