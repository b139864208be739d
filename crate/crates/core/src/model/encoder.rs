//! ViT image encoder: patch embedding, learned absolute positions and a
//! stack of pre-norm self-attention blocks.

use super::config::StackConfig;
use super::layers::{block, linear, norm, AttnMask, BlockSpec};
use super::weights::Params;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Splits `[3, S, S]` into `[N, 3·p·p]` rows, patches in row-major order and
/// each row laid out channel, then y, then x.
pub fn patchify<F: Scalar>(cfg: &StackConfig, img: &Tensor<F>) -> Result<Tensor<F>> {
    let s = cfg.image_size;
    if img.shape() != [3, s, s] {
        return Err(Error::Shape(format!(
            "image of shape {:?} does not match configured geometry [3, {s}, {s}]",
            img.shape()
        )));
    }
    let p = cfg.patch_size;
    let side = cfg.patches_per_side();
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..side {
        for px in 0..side {
            for c in 0..3 {
                for y in 0..p {
                    let row = (c * s + py * p + y) * s + px * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![side * side, cfg.patch_features()], out)
}

/// Encodes one preprocessed image into `[N, enc_dim]` patch tokens.
pub fn encode_image<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params,
    cfg: &StackConfig,
    img: &Tensor<F>,
) -> Result<Var> {
    let patches = g.constant(patchify(cfg, img)?);
    let x = linear(
        g,
        patches,
        p.get("encoder.patch.w")?,
        Some(p.get("encoder.patch.b")?),
    )?;
    let mut x = g.add(x, p.get("encoder.pos")?)?;
    let spec = BlockSpec {
        heads: cfg.enc_heads,
        eps: cfg.norm_eps,
        rope_base: None,
        mask: AttnMask::Full,
    };
    for i in 0..cfg.enc_layers {
        x = block(g, p, &format!("encoder.blocks.{i}"), x, &spec, None)?;
    }
    norm(g, p, "encoder.ln_f", x, cfg.norm_eps)
}
