use super::weights::Params;
use crate::error::Result;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub enum AttnMask {
    Full,
    /// Query row `i` sees keys `j <= i + offset`.
    Causal { offset: usize },
}

pub fn linear<F: Scalar>(g: &mut Graph<F>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

pub fn norm<F: Scalar>(g: &mut Graph<F>, p: &Params, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = p.get(&format!("{prefix}.g"))?;
    let bias = p.get(&format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias, eps)
}

/// Scaled dot-product attention over `heads` column groups of `q[Tq, d]`,
/// `k[Tk, d]`, `v[Tk, d]`.
pub fn multi_head_attention<F: Scalar>(
    g: &mut Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: AttnMask,
) -> Result<Var> {
    let d = g.shape(q)[1];
    let tk = g.shape(k)[0];
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let kt = g.transpose(k)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = g.columns(q, cols.clone())?;
        let kth = g.slice(kt, &[cols.clone(), 0..tk])?;
        let vh = g.columns(v, cols)?;
        let scores = g.matmul(qh, kth)?;
        let scores = g.scale(scores, scale);
        let probs = match mask {
            AttnMask::Full => g.softmax(scores, 1)?,
            AttnMask::Causal { offset } => g.causal_softmax(scores, offset)?,
        };
        outs.push(g.matmul(probs, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 1)
    }
}

/// Cached keys and values of one attention layer, already rotated.
#[derive(Clone, Debug)]
pub struct LayerCache<F: Scalar> {
    pub k: Tensor<F>,
    pub v: Tensor<F>,
}

pub struct BlockSpec {
    pub heads: usize,
    pub eps: f64,
    /// Rotary base when positions are encoded by rotation.
    pub rope_base: Option<f64>,
    pub mask: AttnMask,
}

/// Pre-norm transformer block: `x + attn(ln1 x)`, then `x + mlp(ln2 x)`.
///
/// With a cache, keys/values of earlier positions are prepended and the cache
/// is extended with this call's keys/values.
pub fn block<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params,
    prefix: &str,
    x: Var,
    spec: &BlockSpec,
    cache: Option<&mut LayerCache<F>>,
) -> Result<Var> {
    let past = cache.as_ref().map_or(0, |c| c.k.shape()[0]);
    let h = norm(g, p, &format!("{prefix}.ln1"), x, spec.eps)?;
    let mut q = linear(g, h, p.get(&format!("{prefix}.attn.wq"))?, None)?;
    let mut k = linear(g, h, p.get(&format!("{prefix}.attn.wk"))?, None)?;
    let mut v = linear(g, h, p.get(&format!("{prefix}.attn.wv"))?, None)?;
    if let Some(base) = spec.rope_base {
        q = g.rope(q, spec.heads, past, base)?;
        k = g.rope(k, spec.heads, past, base)?;
    }
    if let Some(c) = cache {
        if past > 0 {
            let kp = g.constant(c.k.clone());
            let vp = g.constant(c.v.clone());
            k = g.concat(&[kp, k], 0)?;
            v = g.concat(&[vp, v], 0)?;
        }
        c.k = g.value(k).clone();
        c.v = g.value(v).clone();
    }
    let a = multi_head_attention(g, q, k, v, spec.heads, spec.mask)?;
    let a = linear(g, a, p.get(&format!("{prefix}.attn.wo"))?, None)?;
    let x = g.add(x, a)?;
    let h = norm(g, p, &format!("{prefix}.ln2"), x, spec.eps)?;
    let m = linear(
        g,
        h,
        p.get(&format!("{prefix}.mlp.w1"))?,
        Some(p.get(&format!("{prefix}.mlp.b1"))?),
    )?;
    let m = g.gelu(m);
    let m = linear(
        g,
        m,
        p.get(&format!("{prefix}.mlp.w2"))?,
        Some(p.get(&format!("{prefix}.mlp.b2"))?),
    )?;
    g.add(x, m)
}
