//! Variant definitions and the assembled encoder-decoder network.

use std::fmt;
use std::str::FromStr;

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    image_to_map, EncoderCache, EncoderStageConfig, FeaturePyramid, MixTransformer,
};
use crate::decoder::{DecoderCache, DecoderConfig, EsfpDecoder};
use crate::error::{Error, Result};
use crate::nn::{join, FeatureMap, Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named model sizes: T(iny) on B0, S(tandard) on B2, L(arge) on B4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantId {
    B0,
    B2,
    B4,
}

impl VariantId {
    pub const ALL: [VariantId; 3] = [VariantId::B0, VariantId::B2, VariantId::B4];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantId::B0 => "B0",
            VariantId::B2 => "B2",
            VariantId::B4 => "B4",
        }
    }

    pub fn model_name(self) -> &'static str {
        match self {
            VariantId::B0 => "ESFPNet-T",
            VariantId::B2 => "ESFPNet-S",
            VariantId::B4 => "ESFPNet-L",
        }
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "B0" | "T" | "ESFPNET-T" => Ok(VariantId::B0),
            "B2" | "S" | "ESFPNET-S" => Ok(VariantId::B2),
            "B4" | "L" | "ESFPNET-L" => Ok(VariantId::B4),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected B0, B2 or B4)"
            ))),
        }
    }
}

/// Per-channel input normalization, applied to `[0, 1]` RGB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for InputNorm {
    /// ImageNet statistics, matching pretrained encoder weights.
    fn default() -> Self {
        InputNorm {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Complete architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    /// `"B0"`, `"B2"`, `"B4"` for the named variants; anything else is a custom build.
    pub id: String,
    pub stages: [EncoderStageConfig; 4],
    pub decoder: DecoderConfig,
    pub input_norm: InputNorm,
}

const HEADS: [usize; 4] = [1, 2, 5, 8];
const SR_RATIOS: [usize; 4] = [8, 4, 2, 1];

fn stage_configs(widths: [usize; 4], depths: [usize; 4]) -> [EncoderStageConfig; 4] {
    std::array::from_fn(|i| EncoderStageConfig {
        embed_dim: widths[i],
        depth: depths[i],
        num_heads: HEADS[i],
        sr_ratio: SR_RATIOS[i],
        mlp_ratio: 4,
        patch_size: if i == 0 { 7 } else { 3 },
        stride: if i == 0 { 4 } else { 2 },
    })
}

impl VariantSpec {
    pub fn named(id: VariantId) -> Self {
        let (widths, depths) = match id {
            VariantId::B0 => ([32, 64, 160, 256], [2, 2, 2, 2]),
            VariantId::B2 => ([64, 128, 320, 512], [3, 4, 6, 3]),
            VariantId::B4 => ([64, 128, 320, 512], [3, 8, 27, 3]),
        };
        VariantSpec {
            id: id.as_str().to_string(),
            stages: stage_configs(widths, depths),
            decoder: DecoderConfig::matching(widths),
            input_norm: InputNorm::default(),
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Ok(Self::named(id.parse()?))
    }

    pub fn variant(&self) -> Option<VariantId> {
        self.id.parse().ok()
    }

    pub fn widths(&self) -> [usize; 4] {
        self.stages.map(|s| s.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.stages {
            s.validate()?;
        }
        self.decoder.validate()?;
        if self.decoder.stage_dims != self.widths() {
            return Err(Error::Config(format!(
                "decoder stage dims {:?} do not match encoder widths {:?}",
                self.decoder.stage_dims,
                self.widths()
            )));
        }
        if let Some(v) = self.variant() {
            if *self != Self::named(v) {
                return Err(Error::Config(format!(
                    "spec labelled `{}` differs from the named variant",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Saved activations of a training forward pass.
#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    encoder: EncoderCache<T>,
    decoder: DecoderCache<T>,
    input_dims: (usize, usize, usize, usize),
}

/// Mix-Transformer encoder + ESFP decoder producing single-channel logits.
#[derive(Clone, Debug, PartialEq)]
pub struct EsfpNet<T> {
    pub spec: VariantSpec,
    pub encoder: MixTransformer<T>,
    pub decoder: EsfpDecoder<T>,
}

impl<T: Scalar> EsfpNet<T> {
    /// Randomly initialized model for a named variant.
    pub fn build(variant: &str, seed: u64) -> Result<Self> {
        Self::new(VariantSpec::from_id(variant)?, seed, 0.0)
    }

    pub fn new(spec: VariantSpec, seed: u64, drop_path_rate: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let encoder = MixTransformer::new(spec.stages, 3, drop_path_rate, &mut rng)?;
        let decoder = EsfpDecoder::new(spec.decoder, &mut rng)?;
        Ok(EsfpNet {
            spec,
            encoder,
            decoder,
        })
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        self.encoder.encode(image)
    }

    pub fn decode(&self, pyramid: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        let maps = pyramid.to_maps()?;
        for (i, m) in maps.iter().enumerate() {
            if m.channels != self.spec.decoder.stage_dims[i] {
                return Err(Error::shape(
                    "decode",
                    "channels",
                    self.spec.decoder.stage_dims[i],
                    m.channels,
                ));
            }
        }
        Ok(self.decoder.forward(&maps)?.to_nchw())
    }

    /// Image `(B, 3, H, W)` to logits `(B, 1, H, W)`.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let x = image_to_map(image)?;
        let levels = self.encoder.forward_maps(&x)?;
        Ok(self.decoder.forward(&levels)?.to_nchw())
    }

    /// Sigmoid probabilities `(B, 1, H, W)`.
    pub fn predict_probs(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self
            .forward(image)?
            .map(|z| T::one() / (T::one() + (-z).exp())))
    }

    /// Forward pass that keeps activations for [`EsfpNet::backward`].
    /// Stochastic depth is active only when `rng` is given.
    pub fn forward_train(
        &self,
        image: &Tensor<T>,
        rng: Option<&mut StdRng>,
    ) -> Result<(Tensor<T>, ModelCache<T>)> {
        let x = image_to_map(image)?;
        let (levels, enc) = self.encoder.run(&x, true, rng)?;
        let (logits, dec) = self.decoder.run(&levels, true)?;
        let cache = ModelCache {
            encoder: enc.expect("kept"),
            decoder: dec.expect("kept"),
            input_dims: x.dims(),
        };
        Ok((logits.to_nchw(), cache))
    }

    /// Accumulate parameter gradients for `dlogits` (shape of the logits).
    /// Returns the image gradient `(B, 3, H, W)` when `need_input_grad`.
    pub fn backward(
        &mut self,
        cache: &ModelCache<T>,
        dlogits: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let d = FeatureMap::from_nchw(dlogits)?;
        let (b, h, w, _) = cache.input_dims;
        if d.dims() != (b, h, w, 1) {
            return Err(Error::shape(
                "backward",
                "dlogits",
                format!("({b}, 1, {h}, {w})"),
                format!("{:?}", dlogits.shape()),
            ));
        }
        let dlevels = self.decoder.backward(&cache.decoder, &d);
        let dx = self
            .encoder
            .backward(&cache.encoder, &dlevels, need_input_grad);
        Ok(dx.map(|m| m.to_nchw()))
    }

    /// Visit only encoder or only decoder parameters (used by freezing).
    pub fn visit_encoder_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut("backbone", f);
    }

    pub fn visit_decoder_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.decoder.visit_mut("", f);
    }
}

impl<T: Scalar> Parameterized<T> for EsfpNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&join(prefix, "backbone"), f);
        self.decoder.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "backbone"), f);
        self.decoder.visit_mut(prefix, f);
    }
}
