use std::ops::Range;

use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CausalSoftmax {
        x: Var,
        offset: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Slice {
        x: Var,
        ranges: Vec<Range<usize>>,
    },
    Rope {
        x: Var,
        heads: usize,
        offset: usize,
        base: f64,
    },
    Sum(Var),
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<F>,
        count: usize,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Softmax { .. } => "softmax",
            Op::CausalSoftmax { .. } => "causal_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Embed { .. } => "embed",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Rope { .. } => "rope",
            Op::Sum(..) => "sum",
            Op::MaskedCrossEntropy { .. } => "masked_cross_entropy",
        }
    }
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

/// Operation trace in creation order, which is a topological order.
///
/// A graph belongs to one worker; build one per sample and drop it after
/// [`Graph::backward`].
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximate GeLU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// `C = A·B + beta·C` where `A` is logically `m×k` and `B` is `k×n`.
/// `trans_a` means `A` is stored as the row-major `k×m` matrix, likewise `trans_b`.
#[allow(clippy::too_many_arguments)]
fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
    beta: F,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked against the logical extents above.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn rope_angles(pos: usize, pair: usize, head_dim: usize, base: f64) -> (f64, f64) {
    let freq = base.powf(-2.0 * pair as f64 / head_dim as f64);
    let theta = pos as f64 * freq;
    (theta.cos(), theta.sin())
}

/// Row-major element offsets visited by a rectangular slice, one contiguous
/// run of `last` elements per entry.
fn slice_runs(shape: &[usize], ranges: &[Range<usize>]) -> (Vec<usize>, usize) {
    let rank = shape.len();
    if rank == 0 {
        return (vec![0], 1);
    }
    let last = ranges[rank - 1].len();
    let mut strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let lead: Vec<Range<usize>> = ranges[..rank - 1].to_vec();
    if lead.iter().any(|r| r.is_empty()) || last == 0 {
        return (Vec::new(), last);
    }
    let mut runs = Vec::new();
    let mut idx: Vec<usize> = lead.iter().map(|r| r.start).collect();
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>()
            + ranges[rank - 1].start;
        runs.push(base);
        let mut d = lead.len();
        loop {
            if d == 0 {
                return (runs, last);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < lead[d].end {
                break;
            }
            idx[d] = lead[d].start;
        }
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The earliest node holding a NaN or infinity, with its op name.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.all_finite())
            .map(|i| (Var(i), self.nodes[i].op.name()))
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Adds a tensor as a leaf; it receives a gradient iff it requires one.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        let tracked = t.requires_grad();
        let value = Tensor::from_shared(t.shape().to_vec(), t.shared_data());
        self.push(value, Op::Leaf, tracked)
    }

    /// Adds a leaf that always receives a gradient.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        let value = Tensor::from_shared(t.shape().to_vec(), t.shared_data());
        self.push(value, Op::Leaf, true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let value = Tensor::from_shared(t.shape().to_vec(), t.shared_data());
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul of {sa:?} and {sb:?}: inner extents must agree"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, F::zero());
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<F> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), tracked))
    }

    /// Broadcast add of a `[n]` row over the last axis of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sx.is_empty() || sr.len() != 1 || sx[sx.len() - 1] != sr[0] {
            return Err(Error::Shape(format!("add_row of {sx:?} and {sr:?}")));
        }
        let n = sr[0];
        let r = self.data(row);
        let out: Vec<F> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r[i % n])
            .collect();
        let shape = sx.to_vec();
        let tracked = self.tracked(&[x, row]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x, row), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<F> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::of(c);
        let out: Vec<F> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Scale(x, c),
            tracked,
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::OutOfBounds(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut max = F::neg_infinity();
                for a in 0..len {
                    max = max.max(src[at(a)]);
                }
                let mut sum = F::zero();
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    sum = sum + e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / sum;
                }
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            tracked,
        ))
    }

    /// Row softmax of a `[tq, tk]` score matrix where row `i` only sees
    /// columns `j <= i + offset`; the rest are exactly zero.
    pub fn causal_softmax(&mut self, x: Var, offset: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "causal_softmax needs rank 2, got {shape:?}"
            )));
        }
        let (tq, tk) = (shape[0], shape[1]);
        let src = self.data(x);
        let mut out = vec![F::zero(); tq * tk];
        for i in 0..tq {
            let visible = (i + offset + 1).min(tk);
            let row = &src[i * tk..i * tk + visible];
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let dst = &mut out[i * tk..i * tk + visible];
            let mut sum = F::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                sum = sum + *d;
            }
            dst.iter_mut().for_each(|d| *d = *d / sum);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::CausalSoftmax { x, offset },
            tracked,
        ))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::Shape("layer_norm of a scalar".into()))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "layer_norm of {shape:?} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = if n == 0 { 0 } else { numel(&shape) / n };
        let (src, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let eps = F::of(eps);
        let nf = F::of(n as f64);
        let mut xhat = vec![F::zero(); src.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().fold(F::zero(), |s, &v| s + v) / nf;
            let var = row
                .iter()
                .fold(F::zero(), |s, &v| s + (v - mean) * (v - mean))
                / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let tracked = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    /// Tanh-approximate GeLU, see [`gelu_scalar`].
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<F> = self
            .data(x)
            .iter()
            .map(|&v| F::of(gelu_scalar(v.as_f64())))
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Gelu(x), tracked)
    }

    /// Row lookup: `table[V, d]`, ids → `[len(ids), d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape(format!("embedding table must be rank 2, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::OutOfBounds(format!(
                "embedding id {bad} for table of {v} rows"
            )));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let tracked = self.tracked(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::OutOfBounds(format!(
                "concat axis {axis} for shape {base:?}"
            )));
        }
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!(
                    "concat along axis {axis} of {base:?} and {s:?}"
                )));
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let lens: Vec<usize> = parts.iter().map(|p| self.shape(*p)[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let chunk = len * inner;
                out.extend_from_slice(&self.data(*p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let tracked = self.tracked(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                lens,
            },
            tracked,
        ))
    }

    /// Rectangular slice; one range per axis.
    pub fn slice(&mut self, x: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if ranges.len() != shape.len() {
            return Err(Error::OutOfBounds(format!(
                "slice with {} ranges of rank-{} tensor",
                ranges.len(),
                shape.len()
            )));
        }
        for (d, (r, &ext)) in ranges.iter().zip(&shape).enumerate() {
            if r.start > r.end || r.end > ext {
                return Err(Error::OutOfBounds(format!(
                    "slice range {r:?} on axis {d} of extent {ext}"
                )));
            }
        }
        let (runs, last) = slice_runs(&shape, ranges);
        let src = self.data(x);
        let mut out = Vec::with_capacity(runs.len() * last);
        for &start in &runs {
            out.extend_from_slice(&src[start..start + last]);
        }
        let out_shape: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Slice {
                x,
                ranges: ranges.to_vec(),
            },
            tracked,
        ))
    }

    /// Column slice of a rank-2 tensor.
    pub fn columns(&mut self, x: Var, cols: Range<usize>) -> Result<Var> {
        let rows = self.shape(x).first().copied().unwrap_or(0);
        self.slice(x, &[0..rows, cols])
    }

    /// Rotary position encoding on `x[T, heads·head_dim]`: within each head,
    /// pair `(2i, 2i+1)` at row `t` is rotated by `(t + offset)·base^(−2i/head_dim)`.
    pub fn rope(&mut self, x: Var, heads: usize, offset: usize, base: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || heads == 0 || shape[1] % heads != 0 || (shape[1] / heads) % 2 != 0 {
            return Err(Error::Shape(format!(
                "rope needs [T, heads·even_dim], got {shape:?} with {heads} heads"
            )));
        }
        let (t, d) = (shape[0], shape[1]);
        let hd = d / heads;
        let src = self.data(x);
        let mut out = src.to_vec();
        for row in 0..t {
            for pair in 0..hd / 2 {
                let (c, s) = rope_angles(row + offset, pair, hd, base);
                let (c, s) = (F::of(c), F::of(s));
                for h in 0..heads {
                    let i = row * d + h * hd + 2 * pair;
                    let (x0, x1) = (src[i], src[i + 1]);
                    out[i] = x0 * c - x1 * s;
                    out[i + 1] = x0 * s + x1 * c;
                }
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Rope {
                x,
                heads,
                offset,
                base,
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(F::zero(), |a, &v| a + v);
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// Mean over masked rows of `−log softmax(logits[t])[targets[t]]`.
    ///
    /// Unmasked rows contribute nothing to the value or the gradient.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || targets.len() != shape[0] || mask.len() != shape[0] {
            return Err(Error::Shape(format!(
                "cross entropy over logits {shape:?} with {} targets and {} mask flags",
                targets.len(),
                mask.len()
            )));
        }
        let (t, v) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::OutOfBounds(format!(
                "target id {bad} for vocabulary of {v}"
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let src = self.data(logits);
        let mut probs = vec![F::zero(); t * v];
        let mut total = F::zero();
        for row in 0..t {
            if !mask[row] {
                continue;
            }
            let x = &src[row * v..(row + 1) * v];
            let max = x.iter().fold(F::neg_infinity(), |m, &a| m.max(a));
            let sum = x.iter().fold(F::zero(), |s, &a| s + (a - max).exp());
            let lse = sum.ln();
            for (p, &a) in probs[row * v..(row + 1) * v].iter_mut().zip(x) {
                *p = (a - max).exp() / sum;
            }
            total = total + (lse - (x[targets[row]] - max));
        }
        let loss = total / F::of(count as f64);
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            tracked,
        ))
    }

    /// Gradient of the last backward pass with respect to `v`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse-mode sweep from a one-element root, seeding `d root = 1`.
    ///
    /// Each node is visited once, in reverse creation order. Gradients of
    /// interior nodes are released as soon as they are propagated; leaf
    /// gradients stay available through [`Graph::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let Graph { nodes, grads } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[root.0].tracked {
            return Ok(());
        }
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            propagate(nodes, grads, i, &g);
        }
        Ok(())
    }
}

fn slot<'a, F: Scalar>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].tracked {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

fn accumulate<F: Scalar>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
    if !nodes[v.0].tracked {
        return;
    }
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

fn propagate<F: Scalar>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], i: usize, g: &[F]) {
    let node = &nodes[i];
    let out = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    let shp = |v: Var| nodes[v.0].value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k, n) = (shp(*a)[0], shp(*a)[1], shp(*b)[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm(m, n, k, g, false, val(*b), true, ga, F::one());
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm(k, m, n, val(*a), true, g, false, gb, F::one());
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (shp(*x)[0], shp(*x)[1]);
            let mut gx = vec![F::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::AddRow(x, row) => {
            accumulate(nodes, grads, *x, g.to_vec());
            if let Some(gr) = slot(nodes, grads, *row) {
                let n = gr.len();
                for (j, &v) in g.iter().enumerate() {
                    gr[j % n] = gr[j % n] + v;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if nodes[a.0].tracked {
                let ga = g.iter().zip(bv).map(|(&d, &y)| d * y).collect();
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[b.0].tracked {
                let gb = g.iter().zip(av).map(|(&d, &x)| d * x).collect();
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Scale(x, c) => {
            accumulate(nodes, grads, *x, g.iter().map(|&d| d * *c).collect());
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let mut gx = vec![F::zero(); g.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let dot = (0..*len).fold(F::zero(), |s, a| s + out[at(a)] * g[at(a)]);
                    for a in 0..*len {
                        gx[at(a)] = out[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::CausalSoftmax { x, offset } => {
            let (tq, tk) = (shp(*x)[0], shp(*x)[1]);
            let mut gx = vec![F::zero(); g.len()];
            for r in 0..tq {
                let visible = (r + offset + 1).min(tk);
                let y = &out[r * tk..r * tk + visible];
                let dy = &g[r * tk..r * tk + visible];
                let dot = y.iter().zip(dy).fold(F::zero(), |s, (&a, &b)| s + a * b);
                for j in 0..visible {
                    gx[r * tk + j] = y[j] * (dy[j] - dot);
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = shp(*gain)[0];
            let gv = val(*gain);
            let rows = rstd.len();
            if let Some(gg) = slot(nodes, grads, *gain) {
                for r in 0..rows {
                    for j in 0..n {
                        gg[j] = gg[j] + g[r * n + j] * xhat[r * n + j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for r in 0..rows {
                    for j in 0..n {
                        gb[j] = gb[j] + g[r * n + j];
                    }
                }
            }
            if nodes[x.0].tracked {
                let nf = F::of(n as f64);
                let mut gx = vec![F::zero(); rows * n];
                for r in 0..rows {
                    let (mut s1, mut s2) = (F::zero(), F::zero());
                    for j in 0..n {
                        let dh = g[r * n + j] * gv[j];
                        s1 = s1 + dh;
                        s2 = s2 + dh * xhat[r * n + j];
                    }
                    let (m1, m2) = (s1 / nf, s2 / nf);
                    for j in 0..n {
                        let dh = g[r * n + j] * gv[j];
                        gx[r * n + j] = rstd[r] * (dh - m1 - xhat[r * n + j] * m2);
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
        }
        Op::Gelu(x) => {
            let gx = g
                .iter()
                .zip(val(*x))
                .map(|(&d, &v)| d * F::of(gelu_grad(v.as_f64())))
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Embed { table, ids } => {
            let d = shp(*table)[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] = gt[id * d + j] + g[row * d + j];
                    }
                }
            }
        }
        Op::Concat {
            parts,
            outer,
            inner,
            lens,
        } => {
            let total: usize = lens.iter().sum();
            let mut start = 0;
            for (p, &len) in parts.iter().zip(lens) {
                if let Some(gp) = slot(nodes, grads, *p) {
                    let chunk = len * inner;
                    for o in 0..*outer {
                        let src = o * total * inner + start * inner;
                        for j in 0..chunk {
                            gp[o * chunk + j] = gp[o * chunk + j] + g[src + j];
                        }
                    }
                }
                start += len;
            }
        }
        Op::Slice { x, ranges } => {
            let shape = shp(*x).to_vec();
            let (runs, last) = slice_runs(&shape, ranges);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &start) in runs.iter().enumerate() {
                    for j in 0..last {
                        gx[start + j] = gx[start + j] + g[r * last + j];
                    }
                }
            }
        }
        Op::Rope {
            x,
            heads,
            offset,
            base,
        } => {
            let (t, d) = (shp(*x)[0], shp(*x)[1]);
            let hd = d / heads;
            let mut gx = g.to_vec();
            for row in 0..t {
                for pair in 0..hd / 2 {
                    let (c, s) = rope_angles(row + offset, pair, hd, *base);
                    let (c, s) = (F::of(c), F::of(s));
                    for h in 0..*heads {
                        let i = row * d + h * hd + 2 * pair;
                        let (g0, g1) = (g[i], g[i + 1]);
                        gx[i] = g0 * c + g1 * s;
                        gx[i + 1] = g1 * c - g0 * s;
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Sum(x) => {
            let n = nodes[x.0].value.numel();
            accumulate(nodes, grads, *x, vec![g[0]; n]);
        }
        Op::MaskedCrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            let v = shp(*logits)[1];
            if let Some(gl) = slot(nodes, grads, *logits) {
                let scale = g[0] / F::of(*count as f64);
                for (row, (&m, &target)) in mask.iter().zip(targets).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == target { F::one() } else { F::zero() };
                        gl[row * v + j] = gl[row * v + j] + (probs[row * v + j] - onehot) * scale;
                    }
                }
            }
        }
    }
}
