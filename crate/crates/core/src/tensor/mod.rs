//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Production math runs in `f32`; the same code instantiated at `f64` is the
//! reference mode used by the gradient checks.

mod graph;
mod scalar;

pub use graph::{Graph, Var};
pub use scalar::Scalar;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr_normal::sample_normal;

use crate::error::{Error, Result};

/// Dense n-dimensional value with an optional gradient buffer.
///
/// The data buffer is shared (`Arc`) so tensors handed to a [`Graph`] as
/// leaves are not copied.
#[derive(Clone)]
pub struct Tensor<F: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<F> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            grad: None,
            requires_grad: false,
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::of(v)).collect())
    }

    pub fn scalar(v: F) -> Self {
        Self::new(vec![], vec![v]).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Self::new(shape.to_vec(), vec![v; numel(shape)]).expect("consistent shape")
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![F::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = F::one();
        }
        Self::new(vec![n, n], data).expect("square")
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| F::of(sample_normal(rng) * std))
            .collect();
        Self::new(shape.to_vec(), data).expect("consistent shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<F>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.data.to_vec()
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> F {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i} of extent {ext}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Returns the single element of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self::from_shared(shape, self.shared_data()))
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        let mut t = Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        )
        .expect("same shape");
        t.requires_grad = self.requires_grad;
        t
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[F]) -> Result<()> {
        if g.len() != self.numel() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits64() == b.to_bits64())
    }
}

impl<F: Scalar> PartialEq for Tensor<F> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Box-Muller normal sampling; keeps init independent of any distribution crate
/// version so seeded weights stay stable.
mod rand_distr_normal {
    use rand::Rng;

    pub fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        loop {
            let u1: f64 = rng.gen();
            if u1 > f64::MIN_POSITIVE {
                let u2: f64 = rng.gen();
                return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(Tensor::<f32>::scalar(2.0).shape(), &[] as &[usize]);
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(t.accumulate_grad(&[1.0; 3]).is_err());
        t.accumulate_grad(&[1.0; 4]).unwrap();
        t.accumulate_grad(&[0.5; 4]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5; 4]);
    }

    #[test]
    fn data_mut_does_not_alias_shared_buffers() {
        let a = Tensor::<f32>::ones(&[3]);
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 5.0);
    }
}
