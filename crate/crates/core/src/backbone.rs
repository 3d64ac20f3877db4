//! Four-stage hierarchical transformer encoder.
//!
//! Stage `i` (1-based) opens with an overlapping patch merge (a strided
//! convolution whose kernel is wider than its stride, then layer norm), runs
//! `depth` transformer blocks at that resolution and closes with a layer norm.
//! For an `H x W` input the stages emit maps at `H/4`, `H/8`, `H/16`, `H/32`.

use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, Block, BlockCache, Conv2d, Conv2dCache, FeatureMap, LayerNorm, Param, Parameterized,
};
use crate::ops::NormStats;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hyperparameters of one encoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderStageConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub sr_ratio: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub stride: usize,
}

impl EncoderStageConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.sr_ratio < 1 {
            return fail("sr_ratio must be >= 1".into());
        }
        if self.stride != 2 && self.stride != 4 {
            return fail(format!("stride must be 2 or 4, got {}", self.stride));
        }
        if self.patch_size <= self.stride {
            return fail(format!(
                "patch_size {} must exceed stride {}",
                self.patch_size, self.stride
            ));
        }
        if self.depth < 1 {
            return fail("depth must be >= 1".into());
        }
        if self.mlp_ratio < 1 {
            return fail("mlp_ratio must be >= 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Overlapping patch merge: strided convolution with symmetric padding
/// `patch_size / 2`, then per-position layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapPatchEmbed<T> {
    pub proj: Conv2d<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Scalar> OverlapPatchEmbed<T> {
    pub fn new(in_channels: usize, cfg: &EncoderStageConfig, rng: &mut impl Rng) -> Self {
        OverlapPatchEmbed {
            proj: Conv2d::new(
                in_channels,
                cfg.embed_dim,
                cfg.patch_size,
                cfg.stride,
                cfg.patch_size / 2,
                rng,
            ),
            norm: LayerNorm::new(cfg.embed_dim),
        }
    }

    fn check(&self, x: &FeatureMap<T>) -> Result<()> {
        let s = self.proj.stride;
        if x.channels != self.proj.in_channels() {
            return Err(Error::shape(
                "overlap_patch_embed",
                "channels",
                self.proj.in_channels(),
                x.channels,
            ));
        }
        if x.height % s != 0 {
            return Err(Error::shape(
                "overlap_patch_embed",
                "height",
                format!("multiple of {s}"),
                x.height,
            ));
        }
        if x.width % s != 0 {
            return Err(Error::shape(
                "overlap_patch_embed",
                "width",
                format!("multiple of {s}"),
                x.width,
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check(x)?;
        self.norm.forward(&self.proj.forward(x)?)
    }

    fn run(
        &self,
        x: &FeatureMap<T>,
        keep: bool,
    ) -> Result<(FeatureMap<T>, Option<(Conv2dCache<T>, NormStats<T>)>)> {
        self.check(x)?;
        let (y, conv) = self.proj.run(x, keep)?;
        let (z, stats) = self.norm.run(&y)?;
        Ok((z, conv.map(|c| (c, stats))))
    }

    fn backward(
        &mut self,
        cache: &(Conv2dCache<T>, NormStats<T>),
        dy: &FeatureMap<T>,
        need_dx: bool,
    ) -> FeatureMap<T> {
        let d = self.norm.backward(&cache.1, dy);
        self.proj.backward(&cache.0, &d, need_dx)
    }
}

impl<T: Scalar> Parameterized<T> for OverlapPatchEmbed<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.proj.visit(&join(prefix, "proj"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub patch_embed: OverlapPatchEmbed<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

#[derive(Clone, Debug)]
struct StageCache<T> {
    embed: (Conv2dCache<T>, NormStats<T>),
    blocks: Vec<BlockCache<T>>,
    norm: NormStats<T>,
}

impl<T: Scalar> Stage<T> {
    fn run(
        &self,
        x: &FeatureMap<T>,
        keep: bool,
        mut rng: Option<&mut StdRng>,
    ) -> Result<(FeatureMap<T>, Option<StageCache<T>>)> {
        let (mut h, embed) = self.patch_embed.run(x, keep)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.run(&h, keep, rng.as_deref_mut())?;
            caches.extend(c);
            h = y;
        }
        let (out, stats) = self.norm.run(&h)?;
        let cache = embed.map(|embed| StageCache {
            embed,
            blocks: caches,
            norm: stats,
        });
        Ok((out, cache))
    }

    fn backward(
        &mut self,
        cache: &StageCache<T>,
        dy: &FeatureMap<T>,
        need_dx: bool,
    ) -> FeatureMap<T> {
        let mut d = self.norm.backward(&cache.norm, dy);
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = block.backward(c, &d);
        }
        self.patch_embed.backward(&cache.embed, &d, need_dx)
    }
}

/// The four per-stage encoder outputs, each `(batch, channels, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: [Tensor<T>; 4],
}

impl<T: Scalar> FeaturePyramid<T> {
    pub(crate) fn from_maps(maps: &[FeatureMap<T>; 4]) -> Self {
        FeaturePyramid {
            levels: [
                maps[0].to_nchw(),
                maps[1].to_nchw(),
                maps[2].to_nchw(),
                maps[3].to_nchw(),
            ],
        }
    }

    pub(crate) fn to_maps(&self) -> Result<[FeatureMap<T>; 4]> {
        Ok([
            FeatureMap::from_nchw(&self.levels[0])?,
            FeatureMap::from_nchw(&self.levels[1])?,
            FeatureMap::from_nchw(&self.levels[2])?,
            FeatureMap::from_nchw(&self.levels[3])?,
        ])
    }

    pub fn shapes(&self) -> [[usize; 4]; 4] {
        let s = |t: &Tensor<T>| t.dims4().expect("pyramid levels are rank 4");
        [
            s(&self.levels[0]),
            s(&self.levels[1]),
            s(&self.levels[2]),
            s(&self.levels[3]),
        ]
    }
}

/// Saved activations of a training forward pass through the encoder.
#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    stages: Vec<StageCache<T>>,
}

/// Hierarchical Mix-Transformer encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MixTransformer<T> {
    pub configs: [EncoderStageConfig; 4],
    pub stages: Vec<Stage<T>>,
}

/// Input spatial sizes must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

impl<T: Scalar> MixTransformer<T> {
    /// Random initialization; stochastic-depth rates rise linearly from 0 to
    /// `drop_path_rate` over all blocks.
    pub fn new(
        configs: [EncoderStageConfig; 4],
        in_channels: usize,
        drop_path_rate: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        for c in &configs {
            c.validate()?;
        }
        let total: usize = configs.iter().map(|c| c.depth).sum();
        let rate = |i: usize| {
            if total > 1 {
                drop_path_rate * i as f64 / (total - 1) as f64
            } else {
                0.0
            }
        };
        let mut stages = Vec::with_capacity(4);
        let mut cin = in_channels;
        let mut idx = 0;
        for cfg in &configs {
            let patch_embed = OverlapPatchEmbed::new(cin, cfg, rng);
            let mut blocks = Vec::with_capacity(cfg.depth);
            for _ in 0..cfg.depth {
                blocks.push(Block::new(
                    cfg.embed_dim,
                    cfg.num_heads,
                    cfg.sr_ratio,
                    cfg.mlp_ratio,
                    rate(idx),
                    rng,
                )?);
                idx += 1;
            }
            stages.push(Stage {
                patch_embed,
                blocks,
                norm: LayerNorm::new(cfg.embed_dim),
            });
            cin = cfg.embed_dim;
        }
        Ok(MixTransformer { configs, stages })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.configs.map(|c| c.embed_dim)
    }

    /// Overall downsampling of the deepest level.
    pub fn total_stride(&self) -> usize {
        self.configs.iter().map(|c| c.stride).product()
    }

    pub(crate) fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        let m = self.total_stride();
        let in_ch = self.stages[0].patch_embed.proj.in_channels();
        if x.channels != in_ch {
            return Err(Error::shape("encode", "channels", in_ch, x.channels));
        }
        if x.height == 0 || x.height % m != 0 {
            return Err(Error::shape(
                "encode",
                "height",
                format!("multiple of {m}; resize the image"),
                x.height,
            ));
        }
        if x.width == 0 || x.width % m != 0 {
            return Err(Error::shape(
                "encode",
                "width",
                format!("multiple of {m}; resize the image"),
                x.width,
            ));
        }
        Ok(())
    }

    pub fn forward_maps(&self, x: &FeatureMap<T>) -> Result<[FeatureMap<T>; 4]> {
        Ok(self.run(x, false, None)?.0)
    }

    pub fn run(
        &self,
        x: &FeatureMap<T>,
        keep: bool,
        mut rng: Option<&mut StdRng>,
    ) -> Result<([FeatureMap<T>; 4], Option<EncoderCache<T>>)> {
        self.check_input(x)?;
        let mut outs = Vec::with_capacity(4);
        let mut caches = Vec::with_capacity(4);
        let mut h = x.clone();
        for stage in &self.stages {
            let (y, c) = stage.run(&h, keep, rng.as_deref_mut())?;
            caches.extend(c);
            outs.push(y.clone());
            h = y;
        }
        let levels: [FeatureMap<T>; 4] = outs.try_into().expect("four stages");
        let cache = keep.then_some(EncoderCache { stages: caches });
        Ok((levels, cache))
    }

    /// Backpropagate per-level gradients; returns the input gradient when asked.
    pub fn backward(
        &mut self,
        cache: &EncoderCache<T>,
        dlevels: &[FeatureMap<T>; 4],
        need_dx: bool,
    ) -> Option<FeatureMap<T>> {
        let mut carry: Option<FeatureMap<T>> = None;
        for (i, (stage, c)) in self.stages.iter_mut().zip(&cache.stages).enumerate().rev() {
            let mut d = dlevels[i].clone();
            if let Some(next) = carry.take() {
                crate::ops::add_assign(&mut d.data, &next.data);
            }
            let want = i > 0 || need_dx;
            let dx = stage.backward(c, &d, want);
            if want {
                carry = Some(dx);
            }
        }
        carry
    }

    /// Image `(B, 3, H, W)` to the four-level pyramid.
    pub fn encode(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let x = image_to_map(image)?;
        Ok(FeaturePyramid::from_maps(&self.forward_maps(&x)?))
    }
}

pub(crate) fn image_to_map<T: Scalar>(image: &Tensor<T>) -> Result<FeatureMap<T>> {
    if image.shape().len() != 4 {
        return Err(Error::shape("encode", "rank", 4, image.shape().len()));
    }
    FeatureMap::from_nchw(image)
}

impl<T: Scalar> Parameterized<T> for MixTransformer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            s.patch_embed
                .visit(&join(prefix, &format!("patch_embed{n}")), f);
            for (j, b) in s.blocks.iter().enumerate() {
                b.visit(&join(prefix, &format!("block{n}.{j}")), f);
            }
            s.norm.visit(&join(prefix, &format!("norm{n}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let n = i + 1;
            s.patch_embed
                .visit_mut(&join(prefix, &format!("patch_embed{n}")), f);
            for (j, b) in s.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("block{n}.{j}")), f);
            }
            s.norm.visit_mut(&join(prefix, &format!("norm{n}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn mini_configs() -> [EncoderStageConfig; 4] {
        let base = EncoderStageConfig {
            embed_dim: 4,
            depth: 1,
            num_heads: 2,
            sr_ratio: 1,
            mlp_ratio: 2,
            patch_size: 3,
            stride: 2,
        };
        [
            EncoderStageConfig {
                patch_size: 7,
                stride: 4,
                sr_ratio: 2,
                ..base
            },
            base,
            EncoderStageConfig {
                embed_dim: 6,
                ..base
            },
            EncoderStageConfig {
                embed_dim: 8,
                ..base
            },
        ]
    }

    #[test]
    fn config_invariants() {
        let ok = mini_configs()[0];
        assert!(ok.validate().is_ok());
        assert!(EncoderStageConfig { num_heads: 3, ..ok }
            .validate()
            .is_err());
        assert!(EncoderStageConfig { stride: 3, ..ok }.validate().is_err());
        assert!(EncoderStageConfig {
            patch_size: 4,
            ..ok
        }
        .validate()
        .is_err());
        assert!(EncoderStageConfig { depth: 0, ..ok }.validate().is_err());
        assert!(EncoderStageConfig { sr_ratio: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn pyramid_scale_law_on_small_input() {
        let mut rng = StdRng::seed_from_u64(1);
        let enc = MixTransformer::<f32>::new(mini_configs(), 3, 0.0, &mut rng).unwrap();
        let img = Tensor::from_fn(&[1, 3, 64, 96], |i| (i as f32 * 0.01).sin());
        let p = enc.encode(&img).unwrap();
        assert_eq!(
            p.shapes(),
            [[1, 4, 16, 24], [1, 4, 8, 12], [1, 6, 4, 6], [1, 8, 2, 3]]
        );
    }

    #[test]
    fn indivisible_input_names_the_axis() {
        let mut rng = StdRng::seed_from_u64(1);
        let enc = MixTransformer::<f32>::new(mini_configs(), 3, 0.0, &mut rng).unwrap();
        let img = Tensor::zeros(&[1, 3, 64, 40]);
        match enc.encode(&img) {
            Err(Error::Shape { axis, expected, .. }) => {
                assert_eq!(axis, "width");
                assert!(expected.contains("resize"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn patch_embed_averaging_kernel_gives_patch_mean() {
        let cfg = EncoderStageConfig {
            embed_dim: 1,
            depth: 1,
            num_heads: 1,
            sr_ratio: 1,
            mlp_ratio: 4,
            patch_size: 7,
            stride: 4,
        };
        let mut rng = StdRng::seed_from_u64(0);
        let mut pe = OverlapPatchEmbed::<f64>::new(3, &cfg, &mut rng);
        pe.proj.weight.value.fill(1.0 / 48.0);
        let x = FeatureMap::new(1, 4, 4, 3, (0..48).map(|i| i as f64).collect());
        let y = pe.proj.forward(&x).unwrap();
        assert_eq!(y.dims(), (1, 1, 1, 1));
        let mean = x.data.iter().sum::<f64>() / 48.0;
        assert!((y.data[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn parameter_names_follow_reference_layout() {
        let mut rng = StdRng::seed_from_u64(1);
        let enc = MixTransformer::<f32>::new(mini_configs(), 3, 0.0, &mut rng).unwrap();
        let names = enc.param_names();
        for n in [
            "patch_embed1.proj.weight",
            "patch_embed1.norm.bias",
            "block1.0.attn.sr.weight",
            "block1.0.attn.norm.weight",
            "block2.0.attn.kv.bias",
            "block4.0.mlp.dwconv.dwconv.weight",
            "norm4.weight",
        ] {
            assert!(names.iter().any(|x| x == n), "missing {n}");
        }
        assert!(!names.iter().any(|x| x == "block2.0.attn.sr.weight"));
    }
}
