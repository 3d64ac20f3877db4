//! Efficient stage-wise feature pyramid (ESFP) decoder.
//!
//! Dataflow, with `P_i` the per-stage linear predictions and `up_k` a
//! bilinear (half-pixel) upsample by `k`:
//!
//! ```text
//! P_i  = LP_i(F_i)                                   i = 1..4
//! F_34 = LP_34(fuse_34([P_3, up_2(P_4)]))           1/16 scale
//! F_23 = LP_23(fuse_23([P_2, up_2(F_34)]))          1/8  scale
//! F_12 = LP_12(fuse_12([P_1, up_2(F_23)]))          1/4  scale
//! out  = up_4(pred([F_12, up_2(F_23), up_4(F_34), up_8(P_4)]))
//! ```
//!
//! Every map above is a per-pixel linear map (1x1 convolution); `[a, b]` is
//! channel concatenation. The deepest prediction `P_4` reaches the head both
//! through the fusion chain and directly. There is no normalization or
//! nonlinearity anywhere in the decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, FeatureMap, Linear, Param, Parameterized};
use crate::ops;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Channel counts of the four incoming encoder levels.
    pub stage_dims: [usize; 4],
    /// Output width of each stage's linear prediction (and of the fused map at that stage).
    pub predict_dims: [usize; 4],
    /// Upsampling factor from the 1/4-scale head to input resolution.
    pub output_scale: usize,
}

impl DecoderConfig {
    /// Predictions keep each stage's own width.
    pub fn matching(stage_dims: [usize; 4]) -> Self {
        DecoderConfig {
            stage_dims,
            predict_dims: stage_dims,
            output_scale: 4,
        }
    }

    /// A single common prediction width `d` for every stage.
    pub fn uniform(stage_dims: [usize; 4], d: usize) -> Self {
        DecoderConfig {
            stage_dims,
            predict_dims: [d; 4],
            output_scale: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.predict_dims.contains(&0) || self.stage_dims.contains(&0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if self.output_scale == 0 {
            return Err(Error::Config("output_scale must be positive".into()));
        }
        Ok(())
    }

    /// Channel count entering the segmentation head.
    pub fn head_in(&self) -> usize {
        self.predict_dims.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EsfpDecoder<T> {
    pub config: DecoderConfig,
    /// `LP_1 .. LP_4`.
    pub predict: Vec<Linear<T>>,
    /// `fuse_34, fuse_23, fuse_12` (deep to shallow).
    pub fuse: Vec<Linear<T>>,
    /// `LP_34, LP_23, LP_12`.
    pub refine: Vec<Linear<T>>,
    pub head: Linear<T>,
}

/// Indices into `fuse` / `refine` name the stage pair they join.
const FUSE_NAMES: [&str; 3] = ["34", "23", "12"];

#[derive(Clone, Debug)]
pub struct FusionCache<T> {
    /// Concatenated fusion inputs, deep to shallow.
    concat: Vec<FeatureMap<T>>,
    /// Outputs of the fusion maps (inputs of the refining maps).
    fused_raw: Vec<FeatureMap<T>>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    levels: [FeatureMap<T>; 4],
    preds: [FeatureMap<T>; 4],
    fusion: FusionCache<T>,
    fused: [FeatureMap<T>; 3],
    head_in: FeatureMap<T>,
    head_out_dims: (usize, usize, usize, usize),
}

impl<T: Scalar> EsfpDecoder<T> {
    pub fn new(config: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (s, p) = (config.stage_dims, config.predict_dims);
        let predict = (0..4).map(|i| Linear::new(s[i], p[i], rng)).collect();
        let fuse = [2usize, 1, 0]
            .iter()
            .map(|&i| Linear::new(p[i] + p[i + 1], p[i], rng))
            .collect();
        let refine = [2usize, 1, 0]
            .iter()
            .map(|&i| Linear::new(p[i], p[i], rng))
            .collect();
        let head = Linear::new(config.head_in(), 1, rng);
        Ok(EsfpDecoder {
            config,
            predict,
            fuse,
            refine,
            head,
        })
    }

    /// Per-pixel linear map of stage `stage` (0-based) to its prediction width.
    pub fn stage_linear_predict(
        &self,
        feature: &FeatureMap<T>,
        stage: usize,
    ) -> Result<FeatureMap<T>> {
        let lp = self
            .predict
            .get(stage)
            .ok_or_else(|| Error::shape("stage_linear_predict", "stage", "0..4", stage))?;
        if feature.channels != lp.in_features() {
            return Err(Error::shape(
                "stage_linear_predict",
                "channels",
                lp.in_features(),
                feature.channels,
            ));
        }
        lp.forward(feature)
    }

    fn check_ladder(
        op: &'static str,
        shallow: &FeatureMap<T>,
        deep: &FeatureMap<T>,
        factor: usize,
    ) -> Result<()> {
        if shallow.batch != deep.batch {
            return Err(Error::shape(op, "batch", shallow.batch, deep.batch));
        }
        if shallow.height != deep.height * factor {
            return Err(Error::shape(
                op,
                "height",
                deep.height * factor,
                shallow.height,
            ));
        }
        if shallow.width != deep.width * factor {
            return Err(Error::shape(
                op,
                "width",
                deep.width * factor,
                shallow.width,
            ));
        }
        Ok(())
    }

    fn fuse_impl(
        &self,
        preds: &[FeatureMap<T>; 4],
        keep: bool,
    ) -> Result<([FeatureMap<T>; 3], Option<FusionCache<T>>)> {
        let mut running = preds[3].clone();
        let mut fused = Vec::with_capacity(3);
        let mut concat = Vec::new();
        let mut fused_raw = Vec::new();
        for (k, shallow_idx) in [2usize, 1, 0].into_iter().enumerate() {
            let shallow = &preds[shallow_idx];
            Self::check_ladder("fuse_global_to_local", shallow, &running, 2)?;
            if shallow.channels != self.config.predict_dims[shallow_idx] {
                return Err(Error::shape(
                    "fuse_global_to_local",
                    "channels",
                    self.config.predict_dims[shallow_idx],
                    shallow.channels,
                ));
            }
            let up = running.resize(shallow.height, shallow.width);
            let cat = shallow.with_data(
                shallow.channels + up.channels,
                ops::concat_channels(
                    &[(&shallow.data, shallow.channels), (&up.data, up.channels)],
                    shallow.rows(),
                ),
            );
            let f = self.fuse[k].forward(&cat)?;
            let r = self.refine[k].forward(&f)?;
            if keep {
                concat.push(cat);
                fused_raw.push(f);
            }
            fused.push(r.clone());
            running = r;
        }
        let fused: [FeatureMap<T>; 3] = fused.try_into().expect("three fusion steps");
        Ok((fused, keep.then_some(FusionCache { concat, fused_raw })))
    }

    /// Global-to-local fusion; returns maps at 1/16, 1/8 and 1/4 scale.
    pub fn fuse_global_to_local(&self, preds: &[FeatureMap<T>; 4]) -> Result<[FeatureMap<T>; 3]> {
        Ok(self.fuse_impl(preds, false)?.0)
    }

    fn head_input(
        &self,
        deepest: &FeatureMap<T>,
        fused: &[FeatureMap<T>; 3],
    ) -> Result<FeatureMap<T>> {
        let base = &fused[2];
        Self::check_ladder("aggregate_and_head", base, &fused[1], 2)?;
        Self::check_ladder("aggregate_and_head", base, &fused[0], 4)?;
        Self::check_ladder("aggregate_and_head", base, deepest, 8)?;
        let (h, w) = (base.height, base.width);
        let f23 = fused[1].resize(h, w);
        let f34 = fused[0].resize(h, w);
        let p4 = deepest.resize(h, w);
        let parts = [
            (&base.data[..], base.channels),
            (&f23.data[..], f23.channels),
            (&f34.data[..], f34.channels),
            (&p4.data[..], p4.channels),
        ];
        let c: usize = parts.iter().map(|p| p.1).sum();
        if c != self.head.in_features() {
            return Err(Error::shape(
                "aggregate_and_head",
                "channels",
                self.head.in_features(),
                c,
            ));
        }
        Ok(base.with_data(c, ops::concat_channels(&parts, base.rows())))
    }

    /// Concatenate at 1/4 scale, project to one channel and upsample to
    /// input resolution. Returns raw logits as a channels-last map with one channel.
    pub fn aggregate_and_head(
        &self,
        deepest: &FeatureMap<T>,
        fused: &[FeatureMap<T>; 3],
    ) -> Result<FeatureMap<T>> {
        let x = self.head_input(deepest, fused)?;
        let y = self.head.forward(&x)?;
        let s = self.config.output_scale;
        Ok(y.resize(y.height * s, y.width * s))
    }

    pub fn forward(&self, levels: &[FeatureMap<T>; 4]) -> Result<FeatureMap<T>> {
        Ok(self.run(levels, false)?.0)
    }

    pub fn run(
        &self,
        levels: &[FeatureMap<T>; 4],
        keep: bool,
    ) -> Result<(FeatureMap<T>, Option<DecoderCache<T>>)> {
        let preds: Vec<FeatureMap<T>> = (0..4)
            .map(|i| self.stage_linear_predict(&levels[i], i))
            .collect::<Result<_>>()?;
        let preds: [FeatureMap<T>; 4] = preds.try_into().expect("four levels");
        let (fused, fusion) = self.fuse_impl(&preds, keep)?;
        let head_in = self.head_input(&preds[3], &fused)?;
        let y = self.head.forward(&head_in)?;
        let s = self.config.output_scale;
        let logits = y.resize(y.height * s, y.width * s);
        let cache = fusion.map(|fusion| DecoderCache {
            levels: levels.clone(),
            preds,
            fusion,
            fused,
            head_in,
            head_out_dims: y.dims(),
        });
        Ok((logits, cache))
    }

    /// Gradients of the four encoder levels given the logits gradient.
    pub fn backward(
        &mut self,
        cache: &DecoderCache<T>,
        dlogits: &FeatureMap<T>,
    ) -> [FeatureMap<T>; 4] {
        let (b, h, w, _) = cache.head_out_dims;
        let dy = FeatureMap::new(
            b,
            h,
            w,
            1,
            ops::resize_bilinear_backward(
                &dlogits.data,
                (b, h, w, 1),
                (dlogits.height, dlogits.width),
            ),
        );
        let dhead = self.head.backward(&cache.head_in, &dy, true);
        let widths: Vec<usize> = [
            cache.fused[2].channels,
            cache.fused[1].channels,
            cache.fused[0].channels,
            cache.preds[3].channels,
        ]
        .to_vec();
        let mut parts = ops::split_channels(&dhead.data, dhead.rows(), &widths).into_iter();
        let d12 = parts.next().expect("part");
        let down = |d: Vec<T>, target: &FeatureMap<T>| {
            ops::resize_bilinear_backward(&d, target.dims(), (h, w))
        };
        let d23 = down(parts.next().expect("part"), &cache.fused[1]);
        let d34 = down(parts.next().expect("part"), &cache.fused[0]);
        let mut dfused = [d34, d23, d12];
        let mut dpreds: [Vec<T>; 4] = [
            vec![T::zero(); cache.preds[0].data.len()],
            vec![T::zero(); cache.preds[1].data.len()],
            vec![T::zero(); cache.preds[2].data.len()],
            down(parts.next().expect("part"), &cache.preds[3]),
        ];

        // Reverse the fusion chain: shallow to deep.
        for k in (0..3).rev() {
            let shallow_idx = 2 - k;
            let r_grad =
                cache.fused[k].with_data(cache.fused[k].channels, std::mem::take(&mut dfused[k]));
            let df = self.refine[k].backward(&cache.fusion.fused_raw[k], &r_grad, true);
            let dcat = self.fuse[k].backward(&cache.fusion.concat[k], &df, true);
            let shallow = &cache.preds[shallow_idx];
            let running = if k == 0 {
                &cache.preds[3]
            } else {
                &cache.fused[k - 1]
            };
            let mut halves = ops::split_channels(
                &dcat.data,
                shallow.rows(),
                &[shallow.channels, running.channels],
            )
            .into_iter();
            ops::add_assign(&mut dpreds[shallow_idx], &halves.next().expect("half"));
            let dup = ops::resize_bilinear_backward(
                &halves.next().expect("half"),
                running.dims(),
                (shallow.height, shallow.width),
            );
            if k == 0 {
                ops::add_assign(&mut dpreds[3], &dup);
            } else {
                ops::add_assign(&mut dfused[k - 1], &dup);
            }
        }

        let mut out = Vec::with_capacity(4);
        for (i, dp) in dpreds.into_iter().enumerate() {
            let g = cache.preds[i].with_data(cache.preds[i].channels, dp);
            out.push(self.predict[i].backward(&cache.levels[i], &g, true));
        }
        out.try_into().expect("four levels")
    }
}

impl<T: Scalar> Parameterized<T> for EsfpDecoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, lp) in self.predict.iter().enumerate() {
            lp.visit(&join(prefix, &format!("LP_{}.proj", i + 1)), f);
        }
        for (k, name) in FUSE_NAMES.iter().enumerate() {
            self.fuse[k].visit(&join(prefix, &format!("linear_fuse{name}.proj")), f);
            self.refine[k].visit(&join(prefix, &format!("LP_{name}.proj")), f);
        }
        self.head.visit(&join(prefix, "linear_pred"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, lp) in self.predict.iter_mut().enumerate() {
            lp.visit_mut(&join(prefix, &format!("LP_{}.proj", i + 1)), f);
        }
        for (k, name) in FUSE_NAMES.iter().enumerate() {
            self.fuse[k].visit_mut(&join(prefix, &format!("linear_fuse{name}.proj")), f);
            self.refine[k].visit_mut(&join(prefix, &format!("LP_{name}.proj")), f);
        }
        self.head.visit_mut(&join(prefix, "linear_pred"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn ladder(
        batch: usize,
        base: usize,
        dims: [usize; 4],
        rng: &mut StdRng,
    ) -> [FeatureMap<f64>; 4] {
        use rand::Rng;
        let mk = |s: usize, c: usize, rng: &mut StdRng| {
            FeatureMap::new(
                batch,
                s,
                s,
                c,
                (0..batch * s * s * c)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
        };
        [
            mk(base, dims[0], rng),
            mk(base / 2, dims[1], rng),
            mk(base / 4, dims[2], rng),
            mk(base / 8, dims[3], rng),
        ]
    }

    fn identity(lin: &mut Linear<f64>) {
        let (o, i) = (lin.out_features(), lin.in_features());
        lin.weight.value = Tensor::from_fn(&[o, i], |k| if k / i == k % i { 1.0 } else { 0.0 });
        lin.bias.value.fill(0.0);
    }

    #[test]
    fn stage_prediction_shape_and_identity() {
        let mut rng = StdRng::seed_from_u64(2);
        let mut dec =
            EsfpDecoder::<f64>::new(DecoderConfig::uniform([32, 64, 160, 256], 64), &mut rng)
                .unwrap();
        let f4 = FeatureMap::<f64>::zeros(1, 11, 11, 256);
        assert_eq!(
            dec.stage_linear_predict(&f4, 3).unwrap().dims(),
            (1, 11, 11, 64)
        );
        assert!(dec.stage_linear_predict(&f4, 2).is_err());

        identity(&mut dec.predict[1]);
        let x = ladder(1, 8, [32, 64, 160, 256], &mut rng)[1].clone();
        assert_eq!(dec.stage_linear_predict(&x, 1).unwrap(), x);

        dec.predict[0].weight.value.fill(0.0);
        dec.predict[0].bias.value.fill(0.25);
        let y = dec
            .stage_linear_predict(&FeatureMap::zeros(1, 4, 4, 32), 0)
            .unwrap();
        assert!(y.data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn fusion_scale_ladder() {
        let mut rng = StdRng::seed_from_u64(4);
        let dec =
            EsfpDecoder::<f64>::new(DecoderConfig::uniform([8, 8, 8, 8], 64), &mut rng).unwrap();
        let preds = [
            FeatureMap::zeros(1, 88, 88, 64),
            FeatureMap::zeros(1, 44, 44, 64),
            FeatureMap::zeros(1, 22, 22, 64),
            FeatureMap::zeros(1, 11, 11, 64),
        ];
        let fused = dec.fuse_global_to_local(&preds).unwrap();
        assert_eq!(fused[0].dims(), (1, 22, 22, 64));
        assert_eq!(fused[1].dims(), (1, 44, 44, 64));
        assert_eq!(fused[2].dims(), (1, 88, 88, 64));

        let mut bad = preds.clone();
        bad[3] = FeatureMap::zeros(1, 10, 10, 64);
        assert!(matches!(
            dec.fuse_global_to_local(&bad),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn fusion_selecting_shallow_operand_passes_it_through() {
        let mut rng = StdRng::seed_from_u64(5);
        let d = 6;
        let mut dec = EsfpDecoder::<f64>::new(DecoderConfig::uniform([d; 4], d), &mut rng).unwrap();
        for k in 0..3 {
            // [I | 0] over the concatenation [shallow, upsampled deep]
            identity(&mut dec.fuse[k]);
            identity(&mut dec.refine[k]);
        }
        let preds = ladder(2, 16, [d; 4], &mut rng);
        let fused = dec.fuse_global_to_local(&preds).unwrap();
        assert_eq!(fused[0], preds[2]);
        assert_eq!(fused[1], preds[1]);
        assert_eq!(fused[2], preds[0]);
    }

    #[test]
    fn zero_head_gives_zero_logits_at_full_resolution() {
        let mut rng = StdRng::seed_from_u64(6);
        let mut dec =
            EsfpDecoder::<f64>::new(DecoderConfig::uniform([4; 4], 64), &mut rng).unwrap();
        dec.head.weight.value.fill(0.0);
        let maps = [
            FeatureMap::full_for_test(88, 64),
            FeatureMap::full_for_test(44, 64),
            FeatureMap::full_for_test(22, 64),
            FeatureMap::full_for_test(11, 64),
        ];
        let logits = dec
            .aggregate_and_head(
                &maps[3],
                &[maps[2].clone(), maps[1].clone(), maps[0].clone()],
            )
            .unwrap();
        assert_eq!(logits.dims(), (1, 352, 352, 1));
        assert!(logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_stage_reaches_the_logits() {
        let mut rng = StdRng::seed_from_u64(7);
        let dims = [4, 6, 8, 10];
        let dec = EsfpDecoder::<f64>::new(DecoderConfig::matching(dims), &mut rng).unwrap();
        let levels = ladder(1, 16, dims, &mut rng);
        let base = dec.forward(&levels).unwrap();
        for i in 0..4 {
            let mut cut = levels.clone();
            cut[i].data.iter_mut().for_each(|v| *v = 0.0);
            let y = dec.forward(&cut).unwrap();
            let diff = y
                .data
                .iter()
                .zip(&base.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff > 1e-9, "stage {} does not affect output", i + 1);
        }
    }

    impl FeatureMap<f64> {
        fn full_for_test(s: usize, c: usize) -> Self {
            FeatureMap::new(1, s, s, c, vec![0.5; s * s * c])
        }
    }
}
