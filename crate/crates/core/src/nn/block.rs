use rand::rngs::StdRng;
use rand::Rng;

use super::{
    join, AttentionCache, EfficientAttention, FeatureMap, LayerNorm, MixFfn, MixFfnCache, Param,
    Parameterized,
};
use crate::error::Result;
use crate::ops::NormStats;
use crate::scalar::Scalar;

/// Pre-norm transformer block:
/// `x + attn(norm1(x))`, then `x + mlp(norm2(x))`.
///
/// `drop_path` is the stochastic-depth probability; residual branches are
/// dropped per sample only when a random source is supplied to `run`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub attn: EfficientAttention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: MixFfn<T>,
    pub drop_path: f64,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    norm1: NormStats<T>,
    attn: AttentionCache<T>,
    norm2: NormStats<T>,
    mlp: MixFfnCache<T>,
    attn_scale: Vec<T>,
    mlp_scale: Vec<T>,
}

impl<T> BlockCache<T> {
    pub fn attention(&self) -> &AttentionCache<T> {
        &self.attn
    }
}

fn branch_scales<T: Scalar>(batch: usize, rate: f64, rng: Option<&mut StdRng>) -> Vec<T> {
    match rng {
        Some(rng) if rate > 0.0 => (0..batch)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    T::c(1.0 / (1.0 - rate))
                }
            })
            .collect(),
        _ => vec![T::one(); batch],
    }
}

fn add_scaled<T: Scalar>(x: &mut FeatureMap<T>, branch: &FeatureMap<T>, scales: &[T]) {
    let per = x.data.len() / x.batch.max(1);
    for (b, &s) in scales.iter().enumerate() {
        for (d, &v) in x.data[b * per..(b + 1) * per]
            .iter_mut()
            .zip(&branch.data[b * per..])
        {
            *d += s * v;
        }
    }
}

fn scaled<T: Scalar>(g: &FeatureMap<T>, scales: &[T]) -> FeatureMap<T> {
    let per = g.data.len() / g.batch.max(1);
    let mut out = g.clone();
    for (b, &s) in scales.iter().enumerate() {
        out.data[b * per..(b + 1) * per]
            .iter_mut()
            .for_each(|v| *v *= s);
    }
    out
}

impl<T: Scalar> Block<T> {
    pub fn new(
        dim: usize,
        num_heads: usize,
        sr_ratio: usize,
        mlp_ratio: usize,
        drop_path: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let norm1 = LayerNorm::new(dim);
        let attn = EfficientAttention::new(dim, num_heads, sr_ratio, rng)?;
        let norm2 = LayerNorm::new(dim);
        let mlp = MixFfn::new(dim, dim * mlp_ratio, rng);
        Ok(Block {
            norm1,
            attn,
            norm2,
            mlp,
            drop_path,
        })
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.run(x, false, None)?.0)
    }

    pub fn run(
        &self,
        x: &FeatureMap<T>,
        keep: bool,
        mut rng: Option<&mut StdRng>,
    ) -> Result<(FeatureMap<T>, Option<BlockCache<T>>)> {
        let attn_scale = branch_scales(x.batch, self.drop_path, rng.as_deref_mut());
        let mlp_scale = branch_scales(x.batch, self.drop_path, rng.as_deref_mut());

        let (n1, s1) = self.norm1.run(x)?;
        let (a, attn_cache) = self.attn.run(&n1, keep)?;
        let mut x1 = x.clone();
        add_scaled(&mut x1, &a, &attn_scale);

        let (n2, s2) = self.norm2.run(&x1)?;
        let (m, mlp_cache) = self.mlp.run(&n2, keep)?;
        let mut y = x1;
        add_scaled(&mut y, &m, &mlp_scale);

        let cache = match (attn_cache, mlp_cache) {
            (Some(attn), Some(mlp)) => Some(BlockCache {
                norm1: s1,
                attn,
                norm2: s2,
                mlp,
                attn_scale,
                mlp_scale,
            }),
            _ => None,
        };
        Ok((y, cache))
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let dm = scaled(dy, &cache.mlp_scale);
        let dn2 = self.mlp.backward(&cache.mlp, &dm);
        let mut dx1 = self.norm2.backward(&cache.norm2, &dn2);
        crate::ops::add_assign(&mut dx1.data, &dy.data);

        let da = scaled(&dx1, &cache.attn_scale);
        let dn1 = self.attn.backward(&cache.attn, &da);
        let mut dx = self.norm1.backward(&cache.norm1, &dn1);
        crate::ops::add_assign(&mut dx.data, &dx1.data);
        dx
    }
}

impl<T: Scalar> Parameterized<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}
