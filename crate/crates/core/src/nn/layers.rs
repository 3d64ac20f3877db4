use rand::Rng;

use super::{expect_channels, join, normal, trunc_normal, FeatureMap, Param, Parameterized};
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry, NormStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-pixel affine map, weight stored `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let w = trunc_normal(rng, cin * cout, 0.02);
        Linear {
            weight: Param::new(Tensor::from_vec(&[cout, cin], w).expect("sized")),
            bias: Param::new(Tensor::zeros(&[cout])),
        }
    }

    pub fn zeros(cin: usize, cout: usize) -> Self {
        Linear {
            weight: Param::new(Tensor::zeros(&[cout, cin])),
            bias: Param::new(Tensor::zeros(&[cout])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        expect_channels("linear", x, self.in_features())?;
        let y = ops::linear(
            &x.data,
            x.rows(),
            x.channels,
            self.weight.value.data(),
            Some(self.bias.value.data()),
            self.out_features(),
        );
        Ok(x.with_data(self.out_features(), y))
    }

    /// Returns the input gradient; `x` is the input seen by the forward pass.
    pub fn backward(
        &mut self,
        x: &FeatureMap<T>,
        dy: &FeatureMap<T>,
        need_dx: bool,
    ) -> FeatureMap<T> {
        let (cin, cout) = (self.in_features(), self.out_features());
        let dx = ops::linear_backward(
            &dy.data,
            &x.data,
            x.rows(),
            cin,
            self.weight.value.data(),
            cout,
            self.weight.grad.data_mut(),
            Some(self.bias.grad.data_mut()),
            need_dx,
        );
        x.with_data(cin, dx)
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Layer normalization over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl<T: Scalar> LayerNorm<T> {
    pub fn new(c: usize) -> Self {
        LayerNorm {
            weight: Param::new(Tensor::full(&[c], T::one())),
            bias: Param::new(Tensor::zeros(&[c])),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }

    pub fn run(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, NormStats<T>)> {
        expect_channels("layer_norm", x, self.channels())?;
        let (y, stats) = ops::layer_norm(
            &x.data,
            x.channels,
            self.weight.value.data(),
            self.bias.value.data(),
            T::c(self.eps),
        );
        Ok((x.with_data(x.channels, y), stats))
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.run(x)?.0)
    }

    pub fn backward(&mut self, stats: &NormStats<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let c = self.channels();
        let dx = ops::layer_norm_backward(
            &dy.data,
            stats,
            c,
            self.weight.value.data(),
            self.weight.grad.data_mut(),
            self.bias.grad.data_mut(),
        );
        dy.with_data(c, dx)
    }
}

impl<T: Scalar> Parameterized<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Dense strided convolution, weight stored `(out, in, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

/// Unfolded input patches kept for the weight gradient.
#[derive(Clone, Debug)]
pub struct Conv2dCache<T> {
    geometry: ConvGeometry,
    cols: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights over fan-out, zero bias.
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_out = kernel * kernel * cout;
        let w = normal(
            rng,
            cout * cin * kernel * kernel,
            (2.0 / fan_out as f64).sqrt(),
        );
        Conv2d {
            weight: Param::new(Tensor::from_vec(&[cout, cin, kernel, kernel], w).expect("sized")),
            bias: Param::new(Tensor::zeros(&[cout])),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    fn geometry(&self, x: &FeatureMap<T>) -> Result<ConvGeometry> {
        expect_channels("conv2d", x, self.in_channels())?;
        let k = self.kernel();
        if x.height + 2 * self.padding < k {
            return Err(Error::shape(
                "conv2d",
                "height",
                format!(">= {k}"),
                x.height,
            ));
        }
        if x.width + 2 * self.padding < k {
            return Err(Error::shape("conv2d", "width", format!(">= {k}"), x.width));
        }
        Ok(ConvGeometry {
            batch: x.batch,
            in_h: x.height,
            in_w: x.width,
            cin: x.channels,
            kernel: k,
            stride: self.stride,
            pad: self.padding,
        })
    }

    pub fn run(
        &self,
        x: &FeatureMap<T>,
        keep: bool,
    ) -> Result<(FeatureMap<T>, Option<Conv2dCache<T>>)> {
        let g = self.geometry(x)?;
        let (cout, k) = (self.out_channels(), self.kernel());
        let cols = ops::im2col(&x.data, &g);
        let w = ops::weight_oihw_to_ohwi(self.weight.value.data(), cout, g.cin, k);
        let y = ops::linear(
            &cols,
            g.out_rows(),
            g.patch_len(),
            &w,
            Some(self.bias.value.data()),
            cout,
        );
        let out = FeatureMap::new(g.batch, g.out_h(), g.out_w(), cout, y);
        let cache = keep.then(|| Conv2dCache { geometry: g, cols });
        Ok((out, cache))
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.run(x, false)?.0)
    }

    pub fn backward(
        &mut self,
        cache: &Conv2dCache<T>,
        dy: &FeatureMap<T>,
        need_dx: bool,
    ) -> FeatureMap<T> {
        let g = &cache.geometry;
        let (cout, k) = (self.out_channels(), self.kernel());
        let w = ops::weight_oihw_to_ohwi(self.weight.value.data(), cout, g.cin, k);
        let mut dw = vec![T::zero(); w.len()];
        let dcols = ops::linear_backward(
            &dy.data,
            &cache.cols,
            g.out_rows(),
            g.patch_len(),
            &w,
            cout,
            &mut dw,
            Some(self.bias.grad.data_mut()),
            need_dx,
        );
        let dw = ops::weight_ohwi_to_oihw(&dw, cout, g.cin, k);
        ops::add_assign(self.weight.grad.data_mut(), &dw);
        if !need_dx {
            // Callers that skip the input gradient get dims and no data.
            return FeatureMap {
                batch: g.batch,
                height: g.in_h,
                width: g.in_w,
                channels: g.cin,
                data: Vec::new(),
            };
        }
        FeatureMap::new(g.batch, g.in_h, g.in_w, g.cin, ops::col2im(&dcols, g))
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Depthwise `k x k` convolution, stride 1, same padding; weight `(c, 1, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> DepthwiseConv<T> {
    pub fn new(c: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        // fan_out = k * k * c / groups
        let w = normal(
            rng,
            c * kernel * kernel,
            (2.0 / (kernel * kernel) as f64).sqrt(),
        );
        DepthwiseConv {
            weight: Param::new(Tensor::from_vec(&[c, 1, kernel, kernel], w).expect("sized")),
            bias: Param::new(Tensor::zeros(&[c])),
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    /// `(c, k*k)` -> `(k*k, c)`.
    fn taps_major(w: &[T], c: usize, kk: usize) -> Vec<T> {
        let mut t = vec![T::zero(); w.len()];
        for ch in 0..c {
            for p in 0..kk {
                t[p * c + ch] = w[ch * kk + p];
            }
        }
        t
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (c, k) = (self.channels(), self.kernel());
        expect_channels("depthwise_conv", x, c)?;
        let wt = Self::taps_major(self.weight.value.data(), c, k * k);
        let y = ops::depthwise_conv(&x.data, x.dims(), &wt, self.bias.value.data(), k);
        Ok(x.with_data(c, y))
    }

    pub fn backward(&mut self, x: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let (c, k) = (self.channels(), self.kernel());
        let wt = Self::taps_major(self.weight.value.data(), c, k * k);
        let mut dwt = vec![T::zero(); wt.len()];
        let dx = ops::depthwise_conv_backward(
            &dy.data,
            &x.data,
            x.dims(),
            &wt,
            k,
            &mut dwt,
            self.bias.grad.data_mut(),
        );
        let g = self.weight.grad.data_mut();
        for ch in 0..c {
            for p in 0..k * k {
                g[ch * k * k + p] += dwt[p * c + ch];
            }
        }
        x.with_data(c, dx)
    }
}

impl<T: Scalar> Parameterized<T> for DepthwiseConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn naive_conv(x: &FeatureMap<f64>, conv: &Conv2d<f64>) -> Vec<f64> {
        let (cout, cin, k) = (conv.out_channels(), conv.in_channels(), conv.kernel());
        let (s, p) = (conv.stride as isize, conv.padding as isize);
        let oh = (x.height + 2 * conv.padding - k) / conv.stride + 1;
        let ow = (x.width + 2 * conv.padding - k) / conv.stride + 1;
        let w = conv.weight.value.data();
        let mut out = vec![0.0; x.batch * oh * ow * cout];
        for b in 0..x.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..cout {
                        let mut acc = conv.bias.value.data()[o];
                        for i in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize * s + ky as isize - p;
                                    let ix = ox as isize * s + kx as isize - p;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= x.height as isize
                                        || ix >= x.width as isize
                                    {
                                        continue;
                                    }
                                    let xv = x.data[((b * x.height + iy as usize) * x.width
                                        + ix as usize)
                                        * cin
                                        + i];
                                    acc += xv * w[((o * cin + i) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((b * oh + oy) * ow + ox) * cout + o] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new(3, 4, 3, 2, 1, &mut rng);
        conv.bias.value = Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let x = FeatureMap::new(
            2,
            6,
            5,
            3,
            (0..180).map(|i| (i as f64 * 0.21).sin()).collect(),
        );
        let y = conv.forward(&x).unwrap();
        assert_eq!((y.height, y.width), (3, 3));
        let expected = naive_conv(&x, &conv);
        for (a, b) in y.data.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let mut rng = StdRng::seed_from_u64(0);
        let conv = Conv2d::<f32>::new(3, 4, 3, 2, 1, &mut rng);
        let x = FeatureMap::<f32>::zeros(1, 4, 4, 5);
        assert!(matches!(
            conv.forward(&x),
            Err(Error::Shape {
                axis: "channels",
                ..
            })
        ));
    }

    #[test]
    fn depthwise_matches_dense_grouped_reference() {
        let mut rng = StdRng::seed_from_u64(5);
        let dw = DepthwiseConv::<f64>::new(3, 3, &mut rng);
        let x = FeatureMap::new(
            1,
            4,
            4,
            3,
            (0..48).map(|i| (i as f64 * 0.5).cos()).collect(),
        );
        let y = dw.forward(&x).unwrap();
        // a dense conv whose weight is diagonal across channels is the same operator
        let mut dense = Conv2d::<f64>::new(3, 3, 3, 1, 1, &mut rng);
        let mut w = vec![0.0; 3 * 3 * 9];
        for c in 0..3 {
            for p in 0..9 {
                w[(c * 3 + c) * 9 + p] = dw.weight.value.data()[c * 9 + p];
            }
        }
        dense.weight.value = Tensor::from_vec(&[3, 3, 3, 3], w).unwrap();
        let yd = dense.forward(&x).unwrap();
        for (a, b) in y.data.iter().zip(&yd.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let ln = LayerNorm::<f64>::new(8);
        let x = FeatureMap::new(1, 1, 3, 8, (0..24).map(|i| (i * i) as f64).collect());
        let y = ln.forward(&x).unwrap();
        for row in y.data.chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
