//! Dense row-major tensors in N,C,H,W order.

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;

/// Dense real array. `dims` holds the extents (each at least 1) and `data`
/// holds `product(dims)` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(shape_err!("every extent must be at least 1, got {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "dims {dims:?} hold {n} values but {} were supplied",
                data.len()
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Self {
        let dims = dims.into();
        assert!(
            !dims.is_empty() && dims.iter().all(|&d| d > 0),
            "invalid dims {dims:?}"
        );
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; n],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat row-major index.
    pub fn from_fn(dims: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let dims = dims.into();
        let n: usize = dims.iter().product();
        let data = (0..n).map(f).collect();
        Tensor::new(dims, data).expect("from_fn dims")
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn same_dims(&self, other: &Tensor<T>) -> bool {
        self.dims == other.dims
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(dims, self.data)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(shape_err!("expected a scalar, got dims {:?}", self.dims));
        }
        Ok(self.data[0])
    }

    /// Interprets the tensor as N,C,H,W.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!("expected N,C,H,W tensor, got dims {:?}", self.dims)),
        }
    }

    /// Interprets the tensor as C,H,W.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected C,H,W tensor, got dims {:?}", self.dims)),
        }
    }

    /// Adds a leading batch axis of extent 1.
    pub fn unsqueeze0(self) -> Self {
        let mut dims = Vec::with_capacity(self.dims.len() + 1);
        dims.push(1);
        dims.extend_from_slice(&self.dims);
        Tensor {
            dims,
            data: self.data,
        }
    }

    /// Drops a leading batch axis of extent 1.
    pub fn squeeze0(self) -> Result<Self> {
        if self.dims.len() < 2 || self.dims[0] != 1 {
            return Err(shape_err!("cannot squeeze leading axis of {:?}", self.dims));
        }
        let dims = self.dims[1..].to_vec();
        Ok(Tensor {
            dims,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(shape_err!(
                "elementwise operands differ: {:?} vs {:?}",
                self.dims,
                other.dims
            ));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.numel() as f64)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with a numeric fault naming `op` when any value is NaN or infinite.
    pub fn check_finite(&self, op: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{op} produced {} at flat index {i} (dims {:?})",
                self.data[i], self.dims
            ))),
        }
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Channel range `[start, start + len)` of an N,C,H,W tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (n, c, h, w) = self.nchw()?;
        if len == 0 || start + len > c {
            return Err(invalid!("channel slice {start}..{} of {c}", start + len));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor::new(vec![n, len, h, w], data)
    }

    /// Concatenates N,C,H,W tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid!("concat of zero tensors"))?;
        let (n, _, h, w) = first.nchw()?;
        let mut total = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.nchw()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err!(
                    "concat operands disagree: {:?} vs {:?}",
                    first.dims,
                    p.dims
                ));
            }
            total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for p in parts {
                let pc = p.dims[1];
                let base = b * pc * plane;
                data.extend_from_slice(&p.data[base..base + pc * plane]);
            }
        }
        Tensor::new(vec![n, total, h, w], data)
    }
}
