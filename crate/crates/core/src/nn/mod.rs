//! Trainable building blocks with explicit forward caches and adjoints.
//!
//! Each layer exposes a `run(&self, input, keep)` forward that optionally
//! returns the activations its `backward(&mut self, cache, grad)` needs.
//! Parameter gradients accumulate into [`Param::grad`] until
//! [`Parameterized::zero_grad`] is called.

mod attention;
mod block;
mod layers;
mod mix_ffn;

pub use attention::{AttentionCache, EfficientAttention};
pub use block::{Block, BlockCache};
pub use layers::{Conv2d, Conv2dCache, DepthwiseConv, LayerNorm, Linear};
pub use mix_ffn::{MixFfn, MixFfnCache};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns named parameters.
///
/// Names are dotted paths (`block1.0.attn.q.weight`); see the crate docs for
/// the full naming scheme.
pub trait Parameterized<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.grad.fill(T::zero()));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name.to_string()));
        names
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A channels-last feature map, `(batch, height, width, channels)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), batch * height * width * channels);
        FeatureMap {
            batch,
            height,
            width,
            channels,
            data,
        }
    }

    pub fn zeros(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Self::new(
            batch,
            height,
            width,
            channels,
            vec![T::zero(); batch * height * width * channels],
        )
    }

    /// Number of pixels, i.e. rows of the `rows x channels` matrix view.
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.height, self.width, self.channels)
    }

    /// Same spatial grid, new channel data.
    pub fn with_data(&self, channels: usize, data: Vec<T>) -> Self {
        Self::new(self.batch, self.height, self.width, channels, data)
    }

    pub fn from_nchw(t: &Tensor<T>) -> Result<Self> {
        let nhwc = t.nchw_to_nhwc()?;
        let [b, h, w, c] = nhwc.dims4()?;
        Ok(Self::new(b, h, w, c, nhwc.into_data()))
    }

    pub fn to_nchw(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.batch, self.height, self.width, self.channels],
            self.data.clone(),
        )
        .and_then(|t| t.nhwc_to_nchw())
        .expect("feature map buffer matches its dims")
    }

    pub fn resize(&self, height: usize, width: usize) -> Self {
        let data = crate::ops::resize_bilinear(&self.data, self.dims(), (height, width));
        Self::new(self.batch, height, width, self.channels, data)
    }
}

pub(crate) fn expect_channels<T>(op: &'static str, x: &FeatureMap<T>, c: usize) -> Result<()> {
    if x.channels != c {
        return Err(Error::shape(op, "channels", c, x.channels));
    }
    Ok(())
}

/// Normal samples truncated to two standard deviations.
pub(crate) fn trunc_normal<T: Scalar>(rng: &mut impl Rng, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::c(v);
            }
        })
        .collect()
}

pub(crate) fn normal<T: Scalar>(rng: &mut impl Rng, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| T::c(dist.sample(rng))).collect()
}
