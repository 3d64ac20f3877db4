use rand::Rng;

use super::{
    expect_channels, join, Conv2d, Conv2dCache, FeatureMap, LayerNorm, Linear, Param, Parameterized,
};
use crate::error::{Error, Result};
use crate::ops::{self, NormStats};
use crate::scalar::Scalar;

/// Multi-head self-attention whose keys and values come from a spatially
/// reduced copy of the input.
///
/// With `sr_ratio > 1` the key/value source is a `sr_ratio x sr_ratio`,
/// stride-`sr_ratio` convolution of the map followed by layer normalization,
/// which shrinks the attention matrix from `N x N` to `N x N / sr_ratio^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct EfficientAttention<T> {
    pub num_heads: usize,
    pub sr_ratio: usize,
    pub q: Linear<T>,
    pub kv: Linear<T>,
    pub proj: Linear<T>,
    pub sr: Option<Conv2d<T>>,
    pub norm: Option<LayerNorm<T>>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    x: FeatureMap<T>,
    sr: Option<(Conv2dCache<T>, NormStats<T>)>,
    reduced: FeatureMap<T>,
    q: Vec<T>,
    kv: Vec<T>,
    probs: Vec<T>,
    context: FeatureMap<T>,
}

impl<T> AttentionCache<T> {
    /// Post-softmax weights laid out `(batch, head, query, key)`.
    pub fn probs(&self) -> &[T] {
        &self.probs
    }
}

struct Dims {
    batch: usize,
    heads: usize,
    head_dim: usize,
    n: usize,
    nr: usize,
}

impl<T: Scalar> EfficientAttention<T> {
    pub fn new(dim: usize, num_heads: usize, sr_ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "dim {dim} not divisible by {num_heads} heads"
            )));
        }
        if sr_ratio == 0 {
            return Err(Error::Config("sr_ratio must be >= 1".into()));
        }
        let q = Linear::new(dim, dim, rng);
        let kv = Linear::new(dim, 2 * dim, rng);
        let (sr, norm) = if sr_ratio > 1 {
            (
                Some(Conv2d::new(dim, dim, sr_ratio, sr_ratio, 0, rng)),
                Some(LayerNorm::new(dim)),
            )
        } else {
            (None, None)
        };
        let proj = Linear::new(dim, dim, rng);
        Ok(EfficientAttention {
            num_heads,
            sr_ratio,
            q,
            kv,
            proj,
            sr,
            norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.in_features()
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.run(x, false)?.0)
    }

    pub fn run(
        &self,
        x: &FeatureMap<T>,
        keep: bool,
    ) -> Result<(FeatureMap<T>, Option<AttentionCache<T>>)> {
        let c = self.dim();
        expect_channels("efficient_self_attention", x, c)?;
        if x.height % self.sr_ratio != 0 {
            return Err(Error::shape(
                "efficient_self_attention",
                "height",
                format!("multiple of sr_ratio {}", self.sr_ratio),
                x.height,
            ));
        }
        if x.width % self.sr_ratio != 0 {
            return Err(Error::shape(
                "efficient_self_attention",
                "width",
                format!("multiple of sr_ratio {}", self.sr_ratio),
                x.width,
            ));
        }

        let q = self.q.forward(x)?.data;
        let (reduced, sr_cache) = match (&self.sr, &self.norm) {
            (Some(sr), Some(norm)) => {
                let (r, conv_cache) = sr.run(x, keep)?;
                let (rn, stats) = norm.run(&r)?;
                (rn, conv_cache.map(|cc| (cc, stats)))
            }
            _ => (x.clone(), None),
        };
        let kv = self.kv.forward(&reduced)?.data;
        let d = Dims {
            batch: x.batch,
            heads: self.num_heads,
            head_dim: c / self.num_heads,
            n: x.height * x.width,
            nr: reduced.height * reduced.width,
        };
        let scale = T::one() / T::c(d.head_dim as f64).sqrt();

        let mut context = vec![T::zero(); x.rows() * c];
        let block = d.n * d.nr;
        let mut probs = vec![
            T::zero();
            if keep {
                d.batch * d.heads * block
            } else {
                block
            }
        ];
        for b in 0..d.batch {
            for h in 0..d.heads {
                let p = if keep {
                    &mut probs[(b * d.heads + h) * block..][..block]
                } else {
                    &mut probs[..]
                };
                let q_bh = &q[b * d.n * c + h * d.head_dim..];
                let k_bh = &kv[b * d.nr * 2 * c + h * d.head_dim..];
                let v_bh = &kv[b * d.nr * 2 * c + c + h * d.head_dim..];
                T::gemm(
                    d.n,
                    d.head_dim,
                    d.nr,
                    scale,
                    q_bh,
                    c,
                    1,
                    k_bh,
                    1,
                    2 * c,
                    T::zero(),
                    p,
                    d.nr,
                    1,
                );
                ops::softmax_rows(p, d.nr);
                let ctx = &mut context[b * d.n * c + h * d.head_dim..];
                T::gemm(
                    d.n,
                    d.nr,
                    d.head_dim,
                    T::one(),
                    p,
                    d.nr,
                    1,
                    v_bh,
                    2 * c,
                    1,
                    T::zero(),
                    ctx,
                    c,
                    1,
                );
            }
        }
        let context = x.with_data(c, context);
        let y = self.proj.forward(&context)?;
        let cache = keep.then(|| AttentionCache {
            x: x.clone(),
            sr: sr_cache,
            reduced,
            q,
            kv,
            probs,
            context,
        });
        Ok((y, cache))
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let c = self.dim();
        let x = &cache.x;
        let d = Dims {
            batch: x.batch,
            heads: self.num_heads,
            head_dim: c / self.num_heads,
            n: x.height * x.width,
            nr: cache.reduced.height * cache.reduced.width,
        };
        let scale = T::one() / T::c(d.head_dim as f64).sqrt();
        let dctx = self.proj.backward(&cache.context, dy, true).data;

        let (q, kv) = (&cache.q, &cache.kv);
        let mut dq = vec![T::zero(); x.rows() * c];
        let mut dkv = vec![T::zero(); cache.reduced.rows() * 2 * c];
        let block = d.n * d.nr;
        let mut ds = vec![T::zero(); block];
        for b in 0..d.batch {
            for h in 0..d.heads {
                let p = &cache.probs[(b * d.heads + h) * block..][..block];
                let q_off = b * d.n * c + h * d.head_dim;
                let k_off = b * d.nr * 2 * c + h * d.head_dim;
                let v_off = k_off + c;
                let dctx_bh = &dctx[q_off..];
                // dP = dCtx V^T
                T::gemm(
                    d.n,
                    d.head_dim,
                    d.nr,
                    T::one(),
                    dctx_bh,
                    c,
                    1,
                    &kv[v_off..],
                    1,
                    2 * c,
                    T::zero(),
                    &mut ds,
                    d.nr,
                    1,
                );
                // dV = P^T dCtx
                T::gemm(
                    d.nr,
                    d.n,
                    d.head_dim,
                    T::one(),
                    p,
                    1,
                    d.nr,
                    dctx_bh,
                    c,
                    1,
                    T::one(),
                    &mut dkv[v_off..],
                    2 * c,
                    1,
                );
                // softmax adjoint: dS = P * (dP - rowsum(dP * P))
                for (ds_row, p_row) in ds.chunks_exact_mut(d.nr).zip(p.chunks_exact(d.nr)) {
                    let dot: T = ds_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum();
                    for (g, &pv) in ds_row.iter_mut().zip(p_row) {
                        *g = pv * (*g - dot);
                    }
                }
                T::gemm(
                    d.n,
                    d.nr,
                    d.head_dim,
                    scale,
                    &ds,
                    d.nr,
                    1,
                    &kv[k_off..],
                    2 * c,
                    1,
                    T::zero(),
                    &mut dq[q_off..],
                    c,
                    1,
                );
                T::gemm(
                    d.nr,
                    d.n,
                    d.head_dim,
                    scale,
                    &ds,
                    1,
                    d.nr,
                    &q[q_off..],
                    c,
                    1,
                    T::one(),
                    &mut dkv[k_off..],
                    2 * c,
                    1,
                );
            }
        }
        let dkv = cache.reduced.with_data(2 * c, dkv);
        let dreduced = self.kv.backward(&cache.reduced, &dkv, true);
        let dq = x.with_data(c, dq);
        let mut dx = self.q.backward(x, &dq, true);
        match (&mut self.sr, &mut self.norm, &cache.sr) {
            (Some(sr), Some(norm), Some((conv_cache, stats))) => {
                let dr = norm.backward(stats, &dreduced);
                let dsr = sr.backward(conv_cache, &dr, true);
                ops::add_assign(&mut dx.data, &dsr.data);
            }
            _ => ops::add_assign(&mut dx.data, &dreduced.data),
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for EfficientAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.q.visit(&join(prefix, "q"), f);
        self.kv.visit(&join(prefix, "kv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        if let Some(sr) = &self.sr {
            sr.visit(&join(prefix, "sr"), f);
        }
        if let Some(norm) = &self.norm {
            norm.visit(&join(prefix, "norm"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.kv.visit_mut(&join(prefix, "kv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        if let Some(sr) = &mut self.sr {
            sr.visit_mut(&join(prefix, "sr"), f);
        }
        if let Some(norm) = &mut self.norm {
            norm.visit_mut(&join(prefix, "norm"), f);
        }
    }
}
