use rand::Rng;

use super::{join, DepthwiseConv, FeatureMap, Linear, Param, Parameterized};
use crate::error::Result;
use crate::ops;
use crate::scalar::Scalar;

/// Feed-forward sublayer with a 3x3 depthwise convolution between the two
/// pointwise projections: `fc2(gelu(dwconv(fc1(x))))`.
///
/// The depthwise convolution leaks neighbouring-pixel information into every
/// token, which is what lets the encoder run without positional embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MixFfn<T> {
    pub fc1: Linear<T>,
    pub dwconv: DepthwiseConv<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct MixFfnCache<T> {
    x: FeatureMap<T>,
    expanded: FeatureMap<T>,
    mixed: FeatureMap<T>,
    activated: FeatureMap<T>,
}

impl<T: Scalar> MixFfn<T> {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        MixFfn {
            fc1: Linear::new(dim, hidden, rng),
            dwconv: DepthwiseConv::new(hidden, 3, rng),
            fc2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features()
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.run(x, false)?.0)
    }

    pub fn run(
        &self,
        x: &FeatureMap<T>,
        keep: bool,
    ) -> Result<(FeatureMap<T>, Option<MixFfnCache<T>>)> {
        let expanded = self.fc1.forward(x)?;
        let mixed = self.dwconv.forward(&expanded)?;
        let activated = mixed.with_data(mixed.channels, ops::gelu(&mixed.data));
        let y = self.fc2.forward(&activated)?;
        let cache = keep.then(|| MixFfnCache {
            x: x.clone(),
            expanded,
            mixed,
            activated,
        });
        Ok((y, cache))
    }

    pub fn backward(&mut self, cache: &MixFfnCache<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let d_act = self.fc2.backward(&cache.activated, dy, true);
        let d_mixed = cache.mixed.with_data(
            cache.mixed.channels,
            ops::gelu_backward(&d_act.data, &cache.mixed.data),
        );
        let d_exp = self.dwconv.backward(&cache.expanded, &d_mixed);
        self.fc1.backward(&cache.x, &d_exp, true)
    }
}

impl<T: Scalar> Parameterized<T> for MixFfn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.dwconv.visit(&join(prefix, "dwconv.dwconv"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.dwconv.visit_mut(&join(prefix, "dwconv.dwconv"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
