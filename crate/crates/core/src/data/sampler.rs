//! Epoch orderings over a training set.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::FrameClass;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Balanced when both classes are present, shuffle otherwise.
    #[default]
    Auto,
    Shuffle,
    Balanced,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(SamplerKind::Auto),
            "shuffle" => Ok(SamplerKind::Shuffle),
            "balanced" => Ok(SamplerKind::Balanced),
            _ => Err(Error::Config(format!(
                "unknown sampler `{s}` (auto, shuffle, balanced)"
            ))),
        }
    }
}

/// Draws with replacement so that lesion and normal frames are equally
/// likely: each frame's weight is the inverse of its class count.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    dist: WeightedIndex<f64>,
    len: usize,
}

impl BalancedSampler {
    pub fn new(labels: &[FrameClass]) -> Result<Self> {
        let lesion = labels.iter().filter(|&&l| l == FrameClass::Lesion).count();
        let normal = labels.len() - lesion;
        if lesion == 0 || normal == 0 {
            return Err(Error::Validation(format!(
                "balanced sampling needs both classes (lesion {lesion}, normal {normal})"
            )));
        }
        let weights = labels.iter().map(|&l| match l {
            FrameClass::Lesion => 1.0 / lesion as f64,
            FrameClass::Normal => 1.0 / normal as f64,
        });
        let dist = WeightedIndex::new(weights).map_err(|e| Error::Validation(e.to_string()))?;
        Ok(BalancedSampler {
            dist,
            len: labels.len(),
        })
    }

    pub fn draw(&self, rng: &mut StdRng, count: usize) -> Vec<usize> {
        (0..count).map(|_| self.dist.sample(rng)).collect()
    }

    /// One epoch: as many draws as there are frames.
    pub fn epoch(&self, rng: &mut StdRng) -> Vec<usize> {
        self.draw(rng, self.len)
    }
}

/// Index order for one epoch under `kind`.
pub fn epoch_order(
    kind: SamplerKind,
    labels: &[FrameClass],
    rng: &mut StdRng,
) -> Result<Vec<usize>> {
    let both = labels.contains(&FrameClass::Lesion) && labels.contains(&FrameClass::Normal);
    match kind {
        SamplerKind::Balanced => Ok(BalancedSampler::new(labels)?.epoch(rng)),
        SamplerKind::Auto if both => Ok(BalancedSampler::new(labels)?.epoch(rng)),
        _ => {
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            idx.shuffle(rng);
            Ok(idx)
        }
    }
}
