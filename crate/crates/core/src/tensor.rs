//! Dense row-major tensors.
//!
//! Public entry points take images and feature maps in `(batch, channels,
//! height, width)` order. Inside the network feature maps are kept
//! channels-last, `(batch, height, width, channels)`, so that every per-pixel
//! linear map is a single matrix product over `batch * height * width` rows.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::from_vec", "len", n, data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("Tensor::reshape", "len", self.data.len(), n));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// The four extents of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::shape("Tensor::dims4", "rank", 4, self.shape.len())),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(B, C, H, W)` -> `(B, H, W, C)`.
    pub fn nchw_to_nhwc(&self) -> Result<Self> {
        let [b, c, h, w] = self.dims4()?;
        let mut out = vec![T::zero(); self.data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let src = &self.data[(bi * c + ci) * h * w..][..h * w];
                for (p, &v) in src.iter().enumerate() {
                    out[(bi * h * w + p) * c + ci] = v;
                }
            }
        }
        Tensor::from_vec(&[b, h, w, c], out)
    }

    /// `(B, H, W, C)` -> `(B, C, H, W)`.
    pub fn nhwc_to_nchw(&self) -> Result<Self> {
        let [b, h, w, c] = self.dims4()?;
        let mut out = vec![T::zero(); self.data.len()];
        for bi in 0..b {
            for p in 0..h * w {
                let src = &self.data[(bi * h * w + p) * c..][..c];
                for (ci, &v) in src.iter().enumerate() {
                    out[(bi * c + ci) * h * w + p] = v;
                }
            }
        }
        Tensor::from_vec(&[b, c, h, w], out)
    }

    /// Copy of batch entry `index`, keeping a leading batch axis of 1.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let b = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("batch_item", "rank", ">=1", 0))?;
        if index >= b {
            return Err(Error::shape("batch_item", "batch", format!("< {b}"), index));
        }
        let per = self.data.len() / b;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::from_vec(&shape, self.data[index * per..(index + 1) * per].to_vec())
    }

    /// Stack tensors of identical shape `(1, ...)` along the batch axis.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Validation("cannot stack an empty batch".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for it in items {
            if it.shape[1..] != first.shape[1..] {
                return Err(Error::shape(
                    "stack_batch",
                    "item",
                    format!("{:?}", first.shape),
                    format!("{:?}", it.shape),
                ));
            }
            data.extend_from_slice(&it.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = data.len() / first.shape[1..].iter().product::<usize>().max(1);
        Tensor::from_vec(&shape, data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_conversion_roundtrip() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4, 5], |i| i as f32);
        let nhwc = t.nchw_to_nhwc().unwrap();
        assert_eq!(nhwc.shape(), &[2, 4, 5, 3]);
        // element (b=1, c=2, y=3, x=4)
        assert_eq!(
            nhwc.data()[((4 + 3) * 5 + 4) * 3 + 2],
            t.data()[((3 + 2) * 4 + 3) * 5 + 4]
        );
        assert_eq!(nhwc.nhwc_to_nchw().unwrap(), t);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn batch_stack_and_split() {
        let a = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::<f32>::full(&[1, 1, 2, 2], 2.0);
        let s = Tensor::stack_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(s.batch_item(1).unwrap(), b);
        assert!(s.batch_item(2).is_err());
    }
}
