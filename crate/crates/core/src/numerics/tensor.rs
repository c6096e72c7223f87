use rand::Rng;
use rand_distr::StandardNormal;

use super::Scalar;
use crate::error::{ensure, Error, Result};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            dim,
            "shape {:?} needs {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
        }
    }

    /// Standard-normal samples.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64_lossy(z)
        })
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        ensure!(self.data.len() == 1, dim, "item() on tensor of shape {:?}", self.shape);
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        ensure!(
            shape.iter().product::<usize>() == self.data.len(),
            dim,
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape;
        Ok(self)
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(format!("expected NCHW tensor, got {:?}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure!(
            self.shape == other.shape,
            dim,
            "shape mismatch {:?} vs {:?}",
            self.shape,
            other.shape
        );
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Error out when any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("non-finite values in {what}")))
        }
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum_f64() / self.data.len() as f64
        }
    }

    /// Slice `[start, start+count)` along the batch (first) axis.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Self> {
        ensure!(!self.shape.is_empty(), dim, "batch_slice on scalar");
        ensure!(
            start + count <= self.shape[0],
            dim,
            "batch slice {}..{} out of {}",
            start,
            start + count,
            self.shape[0]
        );
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Tensor::new(shape, self.data[start * per..(start + count) * per].to_vec())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        ensure!(!items.is_empty(), dim, "stack of nothing");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            ensure!(t.shape == inner, dim, "stack shape mismatch {:?} vs {:?}", t.shape, inner);
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(items: &[&Self]) -> Result<Self> {
        ensure!(!items.is_empty(), dim, "concat of nothing");
        let (n, _, h, w) = items[0].dims4()?;
        let mut total_c = 0;
        for t in items {
            let (tn, tc, th, tw) = t.dims4()?;
            ensure!(
                tn == n && th == h && tw == w,
                dim,
                "concat: {:?} vs {:?}",
                t.shape,
                items[0].shape
            );
            total_c += tc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for t in items {
                let c = t.shape[1];
                data.extend_from_slice(&t.data[b * c * plane..(b + 1) * c * plane]);
            }
        }
        Tensor::new(vec![n, total_c, h, w], data)
    }

    /// Channels `[start, start+count)` of an NCHW tensor.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        ensure!(start + count <= c, dim, "channel slice {}..{} of {}", start, start + count, c);
        let plane = h * w;
        let mut data = Vec::with_capacity(n * count * plane);
        for b in 0..n {
            let off = (b * c + start) * plane;
            data.extend_from_slice(&self.data[off..off + count * plane]);
        }
        Tensor::new(vec![n, count, h, w], data)
    }
}
