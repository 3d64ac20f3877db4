//! Segmentation evaluation: Dice, IoU, MAE, S-measure, max E-measure and
//! lesion-frame classification.
//!
//! Inputs are single-channel planes given as tensors whose shape is `(H, W)`
//! or has only unit axes before the last two, e.g. `(1, 1, H, W)`. Masks must
//! be binary. Dice and IoU binarize probabilities with `p >= 0.5`; MAE and
//! the S-measure use raw probabilities; the E-measure scans 256 thresholds.
//!
//! The S- and E-measure follow the published MATLAB evaluation code,
//! including its `N - 1 + eps` denominators and MATLAB rounding (half away
//! from zero) of the foreground centroid.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binarization threshold for Dice and IoU.
pub const DICE_THRESHOLD: f64 = 0.5;
/// Number of thresholds scanned by the E-measure: `1, 254/255, ..., 0`.
pub const E_THRESHOLDS: usize = 256;
/// `eps` of the reference MATLAB code (double-precision machine epsilon).
const EPS: f64 = f64::EPSILON;

/// A validated `(H, W)` view in double precision.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

fn plane<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<Plane> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape(
            op,
            "shape",
            "(H, W) or (1, .., 1, H, W)",
            format!("{s:?}"),
        ));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h == 0 || w == 0 {
        return Err(Error::shape(
            op,
            "shape",
            "non-empty plane",
            format!("{s:?}"),
        ));
    }
    let v: Vec<f64> = t.data().iter().map(|x| x.as_f64()).collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("metric input"));
    }
    Ok(Plane { h, w, v })
}

fn mask_plane<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, Vec<bool>)> {
    let p = plane(op, t)?;
    if let Some(x) = p.v.iter().find(|&&x| x != 0.0 && x != 1.0) {
        return Err(Error::Validation(format!(
            "{op}: mask value {x} is not 0 or 1"
        )));
    }
    Ok((p.h, p.w, p.v.iter().map(|&x| x == 1.0).collect()))
}

fn prob_plane<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<Plane> {
    let p = plane(op, t)?;
    if let Some(x) = p.v.iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Validation(format!(
            "{op}: probability {x} outside [0, 1]"
        )));
    }
    Ok(p)
}

fn same_dims(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(
            op,
            "shape",
            format!("{a:?}"),
            format!("{b:?}"),
        ));
    }
    Ok(())
}

/// Binary mask from probabilities, `p >= 0.5`.
pub fn binarize<T: Scalar>(prob: &Tensor<T>) -> Tensor<T> {
    let t = T::c(DICE_THRESHOLD);
    prob.map(|p| if p >= t { T::one() } else { T::zero() })
}

fn overlap_counts<T: Scalar>(
    op: &'static str,
    pred: &Tensor<T>,
    gt: &Tensor<T>,
) -> Result<(u64, u64, u64)> {
    let (ph, pw, p) = mask_plane(op, pred)?;
    let (gh, gw, g) = mask_plane(op, gt)?;
    same_dims(op, (ph, pw), (gh, gw))?;
    let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count() as u64;
    let np = p.iter().filter(|x| **x).count() as u64;
    let ng = g.iter().filter(|x| **x).count() as u64;
    Ok((inter, np, ng))
}

/// `2|P and G| / (|P| + |G|)` as an exact fraction; `1` when both are empty.
pub fn dice_ratio<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Ratio<u64>> {
    let (i, p, g) = overlap_counts("dice", pred, gt)?;
    Ok(if p + g == 0 {
        Ratio::from_integer(1)
    } else {
        Ratio::new(2 * i, p + g)
    })
}

/// `|P and G| / |P or G|` as an exact fraction; `1` when both are empty.
pub fn iou_ratio<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Ratio<u64>> {
    let (i, p, g) = overlap_counts("iou", pred, gt)?;
    let union = p + g - i;
    Ok(if union == 0 {
        Ratio::from_integer(1)
    } else {
        Ratio::new(i, union)
    })
}

fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn dice<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    dice_ratio(pred, gt).map(ratio_f64)
}

pub fn iou<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    iou_ratio(pred, gt).map(ratio_f64)
}

/// Mean absolute error between a probability map and a binary mask.
pub fn mae<T: Scalar>(prob: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let p = prob_plane("mae", prob)?;
    let (h, w, g) = mask_plane("mae", gt)?;
    same_dims("mae", (p.h, p.w), (h, w))?;
    let s: f64 =
        p.v.iter()
            .zip(&g)
            .map(|(&x, &b)| (x - f64::from(u8::from(b))).abs())
            .sum();
    Ok(s / p.v.len() as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Object similarity of the values inside one region.
fn object_score(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = mean(x);
    let sd = if x.len() > 1 {
        (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * m / (m * m + 1.0 + sd + EPS)
}

fn s_object(p: &Plane, g: &[bool]) -> f64 {
    let fg: Vec<f64> =
        p.v.iter()
            .zip(g)
            .filter(|(_, &b)| b)
            .map(|(&x, _)| x)
            .collect();
    let bg: Vec<f64> =
        p.v.iter()
            .zip(g)
            .filter(|(_, &b)| !b)
            .map(|(&x, _)| 1.0 - x)
            .collect();
    let u = fg.len() as f64 / g.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Structural similarity of one quadrant. An empty quadrant scores 0; it
/// always carries zero area weight.
fn quadrant_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sx += (a - mx) * (a - mx);
        sy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let d = n - 1.0 + EPS;
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(p: &Plane, g: &[bool]) -> f64 {
    let (h, w) = (p.h, p.w);
    let total = g.iter().filter(|b| **b).count();
    // 1-based centroid, rounded half away from zero as MATLAB does
    let (cx, cy) = if total == 0 {
        (
            (w as f64 / 2.0).round() as usize,
            (h as f64 / 2.0).round() as usize,
        )
    } else {
        let (mut sx, mut sy) = (0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                if g[y * w + x] {
                    sx += x + 1;
                    sy += y + 1;
                }
            }
        }
        (
            (sx as f64 / total as f64).round() as usize,
            (sy as f64 / total as f64).round() as usize,
        )
    };
    let area = (h * w) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quad = |ys: std::ops::Range<usize>, xs: std::ops::Range<usize>| {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for y in ys {
            for x in xs.clone() {
                a.push(p.v[y * w + x]);
                b.push(f64::from(u8::from(g[y * w + x])));
            }
        }
        quadrant_ssim(&a, &b)
    };
    w1 * quad(0..cy, 0..cx)
        + w2 * quad(0..cy, cx..w)
        + w3 * quad(cy..h, 0..cx)
        + w4 * quad(cy..h, cx..w)
}

/// Structure measure `alpha * S_object + (1 - alpha) * S_region`, clipped at 0.
/// An all-background mask scores `1 - mean(p)`, an all-foreground one `mean(p)`.
pub fn s_measure<T: Scalar>(prob: &Tensor<T>, gt: &Tensor<T>, alpha: f64) -> Result<f64> {
    let p = prob_plane("s_measure", prob)?;
    let (h, w, g) = mask_plane("s_measure", gt)?;
    same_dims("s_measure", (p.h, p.w), (h, w))?;
    let y = g.iter().filter(|b| **b).count() as f64 / g.len() as f64;
    let q = if y == 0.0 {
        1.0 - mean(&p.v)
    } else if y == 1.0 {
        mean(&p.v)
    } else {
        alpha * s_object(&p, &g) + (1.0 - alpha) * s_region(&p, &g)
    };
    Ok(q.clamp(0.0, 1.0))
}

/// Enhanced-alignment score of one binary prediction.
fn enhanced_alignment(fm: &[bool], g: &[bool]) -> f64 {
    let n = g.len() as f64;
    let ng = g.iter().filter(|b| **b).count();
    let sum = if ng == 0 {
        fm.iter().filter(|b| !**b).count() as f64
    } else if ng == g.len() {
        fm.iter().filter(|b| **b).count() as f64
    } else {
        let mu_fm = fm.iter().filter(|b| **b).count() as f64 / n;
        let mu_gt = ng as f64 / n;
        fm.iter()
            .zip(g)
            .map(|(&f, &t)| {
                let af = f64::from(u8::from(f)) - mu_fm;
                let ag = f64::from(u8::from(t)) - mu_gt;
                let align = 2.0 * ag * af / (ag * ag + af * af + EPS);
                (align + 1.0) * (align + 1.0) / 4.0
            })
            .sum()
    };
    // The reference divides by N - 1, which lets a perfect map exceed 1.
    (sum / (n - 1.0 + EPS)).min(1.0)
}

/// Threshold `k` of the E-measure scan, `1 - k / 255`.
pub fn e_threshold(k: usize) -> f64 {
    1.0 - k as f64 / (E_THRESHOLDS - 1) as f64
}

/// Maximum E-measure and the threshold that attains it (the first, scanning
/// from 1 down to 0).
pub fn e_measure_max_detail<T: Scalar>(prob: &Tensor<T>, gt: &Tensor<T>) -> Result<(f64, f64)> {
    let p = prob_plane("e_measure_max", prob)?;
    let (h, w, g) = mask_plane("e_measure_max", gt)?;
    same_dims("e_measure_max", (p.h, p.w), (h, w))?;
    let mut best = (f64::NEG_INFINITY, 1.0);
    for k in 0..E_THRESHOLDS {
        let t = e_threshold(k);
        let fm: Vec<bool> = p.v.iter().map(|&x| x >= t).collect();
        let e = enhanced_alignment(&fm, &g);
        if e > best.0 {
            best = (e, t);
        }
    }
    Ok(best)
}

pub fn e_measure_max<T: Scalar>(prob: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    e_measure_max_detail(prob, gt).map(|(e, _)| e)
}

/// E-measure of `prob` binarized at a single threshold (`p >= t`).
pub fn e_measure_at<T: Scalar>(prob: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<f64> {
    let p = prob_plane("e_measure", prob)?;
    let (h, w, g) = mask_plane("e_measure", gt)?;
    same_dims("e_measure", (p.h, p.w), (h, w))?;
    let fm: Vec<bool> = p.v.iter().map(|&x| x >= threshold).collect();
    Ok(enhanced_alignment(&fm, &g))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FrameClass {
    Lesion,
    Normal,
}

impl FrameClass {
    pub fn of_mask<T: Scalar>(gt: &Tensor<T>) -> Self {
        if gt.data().iter().any(|&v| v != T::zero()) {
            FrameClass::Lesion
        } else {
            FrameClass::Normal
        }
    }
}

/// Scan area `pi (W / 2)^2` of circular-scan imagery of width `W`.
pub fn scan_area(width: usize) -> f64 {
    std::f64::consts::PI * (width as f64 / 2.0).powi(2)
}

/// A frame is a lesion frame when the predicted mask has at least one
/// positive pixel and covers at least `min_area_fraction` of the scan area.
pub fn classify_frame<T: Scalar>(
    pred_mask: &Tensor<T>,
    min_area_fraction: f64,
) -> Result<FrameClass> {
    let (_, w, m) = mask_plane("classify_frame", pred_mask)?;
    let area = m.iter().filter(|b| **b).count();
    Ok(
        if area > 0 && area as f64 >= min_area_fraction * scan_area(w) {
            FrameClass::Lesion
        } else {
            FrameClass::Normal
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub mae: f64,
    pub s_alpha: f64,
    pub e_phi_max: f64,
    pub truth: FrameClass,
    pub predicted: FrameClass,
}

/// All per-image metrics for one probability map.
pub fn evaluate_image<T: Scalar>(
    id: &str,
    prob: &Tensor<T>,
    gt: &Tensor<T>,
    min_area_fraction: f64,
) -> Result<ImageMetrics> {
    let pred = binarize(prob);
    Ok(ImageMetrics {
        id: id.to_string(),
        dice: dice(&pred, gt)?,
        iou: iou(&pred, gt)?,
        mae: mae(prob, gt)?,
        s_alpha: s_measure(prob, gt, 0.5)?,
        e_phi_max: e_measure_max(prob, gt)?,
        truth: FrameClass::of_mask(gt),
        predicted: classify_frame(&pred, min_area_fraction)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    /// Means over every frame.
    pub m_dice: f64,
    pub m_iou: f64,
    pub mae: f64,
    pub s_alpha: f64,
    pub e_phi_max: f64,
    /// Means over frames whose ground truth has a lesion (`None` if there are none).
    pub m_dice_lesion: Option<f64>,
    pub m_iou_lesion: Option<f64>,
    /// Lesion frames classified as normal.
    pub fn_frames: usize,
    /// Normal frames classified as lesion.
    pub fp_frames: usize,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let avg = |f: &dyn Fn(&ImageMetrics) -> f64, only_lesion: bool| {
            let v: Vec<f64> = per_image
                .iter()
                .filter(|m| !only_lesion || m.truth == FrameClass::Lesion)
                .map(f)
                .collect();
            (!v.is_empty()).then(|| mean(&v))
        };
        MetricsReport {
            m_dice: avg(&|m| m.dice, false).unwrap_or(0.0),
            m_iou: avg(&|m| m.iou, false).unwrap_or(0.0),
            mae: avg(&|m| m.mae, false).unwrap_or(0.0),
            s_alpha: avg(&|m| m.s_alpha, false).unwrap_or(0.0),
            e_phi_max: avg(&|m| m.e_phi_max, false).unwrap_or(0.0),
            m_dice_lesion: avg(&|m| m.dice, true),
            m_iou_lesion: avg(&|m| m.iou, true),
            fn_frames: per_image
                .iter()
                .filter(|m| m.truth == FrameClass::Lesion && m.predicted == FrameClass::Normal)
                .count(),
            fp_frames: per_image
                .iter()
                .filter(|m| m.truth == FrameClass::Normal && m.predicted == FrameClass::Lesion)
                .count(),
            per_image,
        }
    }

    /// Tab-separated per-image lines followed by `key=value` aggregates.
    pub fn to_machine_lines(&self) -> String {
        let mut out = String::from("#id\tdice\tiou\tmae\ts_alpha\te_phi_max\ttruth\tpredicted\n");
        for m in &self.per_image {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:?}\t{:?}",
                m.id, m.dice, m.iou, m.mae, m.s_alpha, m.e_phi_max, m.truth, m.predicted
            );
        }
        let opt = |v: Option<f64>| v.map_or("na".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(out, "images={}", self.per_image.len());
        let _ = writeln!(out, "m_dice={:.6}", self.m_dice);
        let _ = writeln!(out, "m_iou={:.6}", self.m_iou);
        let _ = writeln!(out, "m_dice_lesion={}", opt(self.m_dice_lesion));
        let _ = writeln!(out, "m_iou_lesion={}", opt(self.m_iou_lesion));
        let _ = writeln!(out, "mae={:.6}", self.mae);
        let _ = writeln!(out, "s_alpha={:.6}", self.s_alpha);
        let _ = writeln!(out, "e_phi_max={:.6}", self.e_phi_max);
        let _ = writeln!(out, "fn_frames={}", self.fn_frames);
        let _ = writeln!(out, "fp_frames={}", self.fp_frames);
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "image", "dice", "iou", "mae", "S_a", "E_max"
        );
        for m in &self.per_image {
            let _ = writeln!(
                out,
                "{:<24} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                m.id, m.dice, m.iou, m.mae, m.s_alpha, m.e_phi_max
            );
        }
        let _ = writeln!(
            out,
            "{:<24} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            "mean", self.m_dice, self.m_iou, self.mae, self.s_alpha, self.e_phi_max
        );
        if let (Some(d), Some(i)) = (self.m_dice_lesion, self.m_iou_lesion) {
            let _ = writeln!(out, "lesion frames only: mDice {d:.4}, mIoU {i:.4}");
        }
        let _ = writeln!(
            out,
            "FN frames {}, FP frames {}",
            self.fn_frames, self.fp_frames
        );
        out
    }
}
