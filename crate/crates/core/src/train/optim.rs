use std::collections::BTreeMap;

use super::plan::TrainPlan;
use crate::error::{Error, Result};
use crate::model::Weights;

/// Gradients by weight name.
pub type Grads = BTreeMap<String, Vec<f32>>;

/// Global L2 norm over every gradient buffer.
pub fn grad_norm(grads: &Grads) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// AdamW moments per trainable weight.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    /// Updates applied so far.
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    /// One bias-corrected Adam update with decoupled weight decay, touching
    /// only the weights named in `grads`.
    pub fn update(&mut self, weights: &mut Weights<f32>, grads: &Grads, plan: &TrainPlan, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (plan.beta1, plan.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, g) in grads {
            let w = weights
                .get_mut(name)
                .ok_or_else(|| Error::Training(format!("gradient for unknown weight {name}")))?;
            let data = w.data_mut();
            if data.len() != g.len() {
                return Err(Error::Training(format!("gradient size mismatch for {name}")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let gi = g[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let p = data[i] as f64;
                let step = (mi / c1) / ((vi / c2).sqrt() + plan.eps) + plan.weight_decay * p;
                data[i] = (p - lr * step) as f32;
            }
        }
        Ok(())
    }
}
