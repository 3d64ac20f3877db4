//! Boundary-weighted IoU + BCE segmentation loss.
//!
//! Both terms share the pixel weights `w = 1 + 5 |avg31(g) - g|`, where
//! `avg31` is a 31x31 box mean that averages only pixels inside the image.
//! Each term is computed per image and the batch value is the mean over
//! images. Logits and masks are `(B, 1, H, W)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WEIGHT_WINDOW: usize = 31;
pub const WEIGHT_GAIN: f64 = 5.0;
/// Additive smoothing in the IoU ratio.
pub const IOU_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossTerms<T> {
    pub l_iou_w: T,
    pub l_bce_w: T,
    pub total: T,
}

impl<T: Scalar> LossTerms<T> {
    fn new(l_iou_w: T, l_bce_w: T) -> Self {
        LossTerms {
            l_iou_w,
            l_bce_w,
            total: l_iou_w + l_bce_w,
        }
    }
}

/// Image count and pixels per image of a `(B, 1, H, W)` tensor.
fn layout<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [b, c, h, w] = t.dims4()?;
    if c != 1 {
        return Err(Error::shape(op, "channels", 1, c));
    }
    Ok((b, h, w))
}

fn check_pair<T: Scalar>(
    op: &'static str,
    logits: &Tensor<T>,
    gt: &Tensor<T>,
) -> Result<(usize, usize)> {
    let (b, h, w) = layout(op, logits)?;
    if logits.shape() != gt.shape() {
        return Err(Error::shape(
            op,
            "shape",
            format!("{:?}", logits.shape()),
            format!("{:?}", gt.shape()),
        ));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits"));
    }
    check_binary(op, gt)?;
    Ok((b, h * w))
}

fn check_binary<T: Scalar>(op: &'static str, gt: &Tensor<T>) -> Result<()> {
    if let Some(v) = gt.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Validation(format!(
            "{op}: mask value {v} is not 0 or 1"
        )));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `-[g ln s(z) + (1 - g) ln(1 - s(z))]` without forming `s(z)`.
fn bce_with_logits<T: Scalar>(z: T, g: T) -> T {
    z.max(T::zero()) - z * g + (-z.abs()).exp().ln_1p()
}

/// Boundary-emphasis weights for binary masks `(B, 1, H, W)`.
pub fn pixel_weight_map<T: Scalar>(gt: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w) = layout("pixel_weight_map", gt)?;
    check_binary("pixel_weight_map", gt)?;
    let r = WEIGHT_WINDOW / 2;
    let gain = T::c(WEIGHT_GAIN);
    let mut out = Vec::with_capacity(gt.len());
    let mut integral = vec![0u64; (h + 1) * (w + 1)];
    for img in gt.data().chunks_exact(h * w) {
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += u64::from(img[y * w + x] == T::one());
                integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let ones = integral[y1 * (w + 1) + x1] + integral[y0 * (w + 1) + x0]
                    - integral[y0 * (w + 1) + x1]
                    - integral[y1 * (w + 1) + x0];
                let area = ((y1 - y0) * (x1 - x0)) as f64;
                let mean = T::c(ones as f64 / area);
                out.push(T::one() + gain * (mean - img[y * w + x]).abs());
            }
        }
    }
    debug_assert_eq!(out.len(), b * h * w);
    Tensor::from_vec(gt.shape(), out)
}

fn check_weights<T: Scalar>(op: &'static str, logits: &Tensor<T>, w: &Tensor<T>) -> Result<()> {
    if w.shape() != logits.shape() {
        return Err(Error::shape(
            op,
            "weights",
            format!("{:?}", logits.shape()),
            format!("{:?}", w.shape()),
        ));
    }
    if !w.all_finite() {
        return Err(Error::NonFinite("weights"));
    }
    Ok(())
}

/// Batch mean of `sum(w * bce) / sum(w)` per image.
pub fn weighted_bce<T: Scalar>(logits: &Tensor<T>, gt: &Tensor<T>, w: &Tensor<T>) -> Result<T> {
    let (b, n) = check_pair("weighted_bce", logits, gt)?;
    check_weights("weighted_bce", logits, w)?;
    let mut acc = T::zero();
    for i in 0..b {
        let r = i * n..(i + 1) * n;
        let (z, g, wi) = (
            &logits.data()[r.clone()],
            &gt.data()[r.clone()],
            &w.data()[r],
        );
        let num: T = (0..n).map(|k| wi[k] * bce_with_logits(z[k], g[k])).sum();
        let den: T = wi.iter().copied().sum();
        acc += num / den;
    }
    Ok(acc / T::c(b as f64))
}

/// Batch mean of `1 - (sum(w p g) + 1) / (sum(w (p + g - p g)) + 1)` per image.
pub fn weighted_iou<T: Scalar>(logits: &Tensor<T>, gt: &Tensor<T>, w: &Tensor<T>) -> Result<T> {
    let (b, n) = check_pair("weighted_iou", logits, gt)?;
    check_weights("weighted_iou", logits, w)?;
    let eps = T::c(IOU_SMOOTH);
    let mut acc = T::zero();
    for i in 0..b {
        let r = i * n..(i + 1) * n;
        let (z, g, wi) = (
            &logits.data()[r.clone()],
            &gt.data()[r.clone()],
            &w.data()[r],
        );
        let (mut inter, mut union) = (T::zero(), T::zero());
        for k in 0..n {
            let p = sigmoid(z[k]);
            inter += wi[k] * p * g[k];
            union += wi[k] * (p + g[k] - p * g[k]);
        }
        acc += T::one() - (inter + eps) / (union + eps);
    }
    Ok(acc / T::c(b as f64))
}

pub fn total_loss<T: Scalar>(logits: &Tensor<T>, gt: &Tensor<T>) -> Result<LossTerms<T>> {
    let w = pixel_weight_map(gt)?;
    Ok(LossTerms::new(
        weighted_iou(logits, gt, &w)?,
        weighted_bce(logits, gt, &w)?,
    ))
}

/// [`total_loss`] together with its gradient with respect to the logits.
pub fn total_loss_with_grad<T: Scalar>(
    logits: &Tensor<T>,
    gt: &Tensor<T>,
) -> Result<(LossTerms<T>, Tensor<T>)> {
    let (b, n) = check_pair("total_loss", logits, gt)?;
    let w = pixel_weight_map(gt)?;
    let eps = T::c(IOU_SMOOTH);
    let inv_b = T::one() / T::c(b as f64);
    let mut grad = vec![T::zero(); logits.len()];
    let (mut iou_acc, mut bce_acc) = (T::zero(), T::zero());
    for i in 0..b {
        let r = i * n..(i + 1) * n;
        let (z, g, wi) = (
            &logits.data()[r.clone()],
            &gt.data()[r.clone()],
            &w.data()[r.clone()],
        );
        let gi = &mut grad[r];
        let p: Vec<T> = z.iter().map(|&v| sigmoid(v)).collect();
        let wsum: T = wi.iter().copied().sum();
        let (mut inter, mut union, mut bce) = (eps, eps, T::zero());
        for k in 0..n {
            inter += wi[k] * p[k] * g[k];
            union += wi[k] * (p[k] + g[k] - p[k] * g[k]);
            bce += wi[k] * bce_with_logits(z[k], g[k]);
        }
        iou_acc += T::one() - inter / union;
        bce_acc += bce / wsum;
        for k in 0..n {
            // d(1 - I/U)/dp = -(w g U - I w (1 - g)) / U^2, then dp/dz = p (1 - p)
            let d_iou =
                -(wi[k] * g[k] * union - inter * wi[k] * (T::one() - g[k])) / (union * union);
            let d_bce = wi[k] * (p[k] - g[k]) / wsum;
            gi[k] = (d_iou * p[k] * (T::one() - p[k]) + d_bce) * inv_b;
        }
    }
    let terms = LossTerms::new(iou_acc * inv_b, bce_acc * inv_b);
    Ok((terms, Tensor::from_vec(logits.shape(), grad)?))
}
