//! Multimodal projector: learned latent queries cross-attend over the patch
//! tokens, then a one-hidden-layer GeLU MLP maps them to the LM width.

use super::config::StackConfig;
use super::layers::{linear, multi_head_attention, norm, AttnMask};
use super::weights::Params;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// `[N, enc_dim]` patch tokens → `[K, lm_dim]` image tokens for any `N >= 1`.
pub fn pool_and_project<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params,
    cfg: &StackConfig,
    patches: Var,
) -> Result<Var> {
    let shape = g.shape(patches).to_vec();
    if shape.len() != 2 || shape[1] != cfg.enc_dim {
        return Err(Error::Shape(format!(
            "patch tokens {shape:?}, expected [N, {}]",
            cfg.enc_dim
        )));
    }
    if shape[0] == 0 {
        return Err(Error::Input("attention pooling needs at least one patch token".into()));
    }
    let mut latents = p.get("projector.latents")?;
    for i in 0..cfg.pool_layers {
        let pre = format!("projector.layers.{i}");
        let q_in = norm(g, p, &format!("{pre}.ln_q"), latents, cfg.norm_eps)?;
        let kv_in = norm(g, p, &format!("{pre}.ln_kv"), patches, cfg.norm_eps)?;
        let q = linear(g, q_in, p.get(&format!("{pre}.wq"))?, None)?;
        let k = linear(g, kv_in, p.get(&format!("{pre}.wk"))?, None)?;
        let v = linear(g, kv_in, p.get(&format!("{pre}.wv"))?, None)?;
        let a = multi_head_attention(g, q, k, v, cfg.pool_heads, AttnMask::Full)?;
        let a = linear(g, a, p.get(&format!("{pre}.wo"))?, None)?;
        latents = g.add(latents, a)?;
    }
    let x = norm(g, p, "projector.ln_out", latents, cfg.norm_eps)?;
    let h = linear(
        g,
        x,
        p.get("projector.mlp.w1")?,
        Some(p.get("projector.mlp.b1")?),
    )?;
    let h = g.gelu(h);
    linear(
        g,
        h,
        p.get("projector.mlp.w2")?,
        Some(p.get("projector.mlp.b2")?),
    )
}
