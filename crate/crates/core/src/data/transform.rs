//! Geometric and photometric transforms on [`Sample`]s and tensor conversion.

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::model::InputNorm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Training-time augmentation. Each enabled transform is drawn in the order
/// hflip, vflip, rotation, brightness, so a seed fixes the whole sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rotation_prob: f64,
    /// Uniform rotation in `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    pub brightness_prob: f64,
    /// Uniform brightness gain range, image only.
    pub brightness: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotation_prob: 0.5,
            max_rotation_deg: 15.0,
            brightness_prob: 0.5,
            brightness: (0.8, 1.2),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        let probs = [
            self.hflip_prob,
            self.vflip_prob,
            self.rotation_prob,
            self.brightness_prob,
        ];
        if !probs.into_iter().all(prob_ok) {
            return Err(Error::Config(
                "augmentation probabilities must lie in [0, 1]".into(),
            ));
        }
        if !(self.max_rotation_deg.is_finite() && self.max_rotation_deg >= 0.0) {
            return Err(Error::Config(
                "max_rotation_deg must be finite and >= 0".into(),
            ));
        }
        let (lo, hi) = self.brightness;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
            return Err(Error::Config(format!(
                "brightness range ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        Ok(())
    }
}

fn map_pair(s: &Sample, image: RgbImage, mask: GrayImage) -> Sample {
    Sample {
        image,
        mask,
        ..s.clone()
    }
}

pub fn hflip(s: &Sample) -> Sample {
    map_pair(
        s,
        image::imageops::flip_horizontal(&s.image),
        image::imageops::flip_horizontal(&s.mask),
    )
}

pub fn vflip(s: &Sample) -> Sample {
    map_pair(
        s,
        image::imageops::flip_vertical(&s.image),
        image::imageops::flip_vertical(&s.mask),
    )
}

/// Rotate about the image centre by `degrees` (counter-clockwise on screen).
/// The image is sampled bilinearly, the mask by nearest neighbour, and
/// pixels that map outside the source are zero in both.
pub fn rotate(s: &Sample, degrees: f64) -> Sample {
    let (w, h) = s.image.dimensions();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    // Destination -> source is the inverse rotation.
    let src = |x: u32, y: u32| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        (cos * dx - sin * dy + cx, sin * dx + cos * dy + cy)
    };
    let inside =
        |fx: f64, fy: f64| fx > -0.5 && fy > -0.5 && fx < w as f64 - 0.5 && fy < h as f64 - 0.5;

    let image = RgbImage::from_fn(w, h, |x, y| {
        let (fx, fy) = src(x, y);
        if !inside(fx, fy) {
            return Rgb([0, 0, 0]);
        }
        let (fx, fy) = (fx.clamp(0.0, w as f64 - 1.0), fy.clamp(0.0, h as f64 - 1.0));
        let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let mut out = [0u8; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let p = |xx: u32, yy: u32| f64::from(s.image.get_pixel(xx, yy)[c]);
            let v = (1.0 - ay) * ((1.0 - ax) * p(x0, y0) + ax * p(x1, y0))
                + ay * ((1.0 - ax) * p(x0, y1) + ax * p(x1, y1));
            *o = v.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    });
    let mask = GrayImage::from_fn(w, h, |x, y| {
        let (fx, fy) = src(x, y);
        if !inside(fx, fy) {
            return Luma([0]);
        }
        let (nx, ny) = (
            fx.round().clamp(0.0, w as f64 - 1.0),
            fy.round().clamp(0.0, h as f64 - 1.0),
        );
        *s.mask.get_pixel(nx as u32, ny as u32)
    });
    map_pair(s, image, mask)
}

/// Scale image intensities by `gain`, saturating at 255. The mask is untouched.
pub fn brightness(s: &Sample, gain: f64) -> Sample {
    let mut image = s.image.clone();
    for v in image.iter_mut() {
        *v = (f64::from(*v) * gain).round().clamp(0.0, 255.0) as u8;
    }
    map_pair(s, image, s.mask.clone())
}

pub fn augment(s: &Sample, cfg: &AugmentConfig, rng: &mut StdRng) -> Sample {
    if !cfg.enabled {
        return s.clone();
    }
    let mut out = s.clone();
    if rng.random_bool(cfg.hflip_prob) {
        out = hflip(&out);
    }
    if rng.random_bool(cfg.vflip_prob) {
        out = vflip(&out);
    }
    if rng.random_bool(cfg.rotation_prob) {
        let deg = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        out = rotate(&out, deg);
    }
    if rng.random_bool(cfg.brightness_prob) {
        let (lo, hi) = cfg.brightness;
        out = brightness(&out, rng.random_range(lo..=hi));
    }
    out
}

/// Resize to `height x width`: bilinear (half-pixel centres) for the image,
/// nearest neighbour for the mask so it stays binary. Same size is a no-op.
pub fn resize_sample(s: &Sample, height: usize, width: usize) -> Result<Sample> {
    if height == 0 || width == 0 {
        return Err(Error::Validation(format!(
            "cannot resize to {height}x{width}"
        )));
    }
    let (w, h) = (s.image.width() as usize, s.image.height() as usize);
    if (h, w) == (height, width) {
        return Ok(s.clone());
    }
    let image = resize_rgb(&s.image, height, width);
    let nearest = |d: usize, out: usize, inp: usize| {
        (((d as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1)
    };
    let mask = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        *s.mask.get_pixel(
            nearest(x as usize, width, w) as u32,
            nearest(y as usize, height, h) as u32,
        )
    });
    Ok(map_pair(s, image, mask))
}

/// Bilinear resize with half-pixel centres, rounded back to 8 bits.
pub fn resize_rgb(image: &RgbImage, height: usize, width: usize) -> RgbImage {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if (h, w) == (height, width) {
        return image.clone();
    }
    let src: Vec<f32> = image.as_raw().iter().map(|&v| f32::from(v)).collect();
    let dst = crate::ops::resize_bilinear(&src, (1, h, w, 3), (height, width));
    let bytes = dst
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage::from_raw(width as u32, height as u32, bytes).expect("buffer sized for the target")
}

/// Normalized `(3, H, W)` tensor of an RGB image.
pub fn image_tensor<T: Scalar>(image: &RgbImage, norm: &InputNorm) -> Tensor<T> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let raw = image.as_raw();
    Tensor::from_fn(&[3, h, w], |k| {
        let (c, p) = (k / (h * w), k % (h * w));
        T::c((f64::from(raw[p * 3 + c]) / 255.0 - norm.mean[c]) / norm.std[c])
    })
}

/// Network input `(1, 3, size, size)` for a frame of any size.
pub fn frame_input<T: Scalar>(
    image: &RgbImage,
    size: usize,
    norm: &InputNorm,
) -> Result<Tensor<T>> {
    if size == 0 {
        return Err(Error::Validation("input size must be positive".into()));
    }
    image_tensor(&resize_rgb(image, size, size), norm).reshape(&[1, 3, size, size])
}

/// `(3, H, W)` normalized image and `(1, H, W)` mask in `{0, 1}`.
pub fn to_tensors<T: Scalar>(s: &Sample, norm: &InputNorm) -> (Tensor<T>, Tensor<T>) {
    let (w, h) = (s.image.width() as usize, s.image.height() as usize);
    let image = image_tensor(&s.image, norm);
    let mask = Tensor::from_fn(&[1, h, w], |k| T::c(f64::from(s.mask.as_raw()[k])));
    (image, mask)
}

pub fn preprocess<T: Scalar>(
    s: &Sample,
    size: usize,
    norm: &InputNorm,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok(to_tensors(&resize_sample(s, size, size)?, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sample(w: u32, h: u32, seed: u64) -> Sample {
        let mut rng = StdRng::seed_from_u64(seed);
        let image = RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
        let mask = GrayImage::from_fn(w, h, |_, _| Luma([u8::from(rng.random_bool(0.3))]));
        Sample::new("d", "f", "c", image, mask).unwrap()
    }

    #[test]
    fn flips_are_involutions_and_move_pixels() {
        let s = sample(5, 4, 1);
        assert_eq!(hflip(&hflip(&s)), s);
        assert_eq!(vflip(&vflip(&s)), s);
        let f = hflip(&s);
        assert_eq!(f.image.get_pixel(0, 1), s.image.get_pixel(4, 1));
        assert_eq!(f.mask.get_pixel(0, 1), s.mask.get_pixel(4, 1));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let s = sample(7, 6, 2);
        assert_eq!(rotate(&s, 0.0), s);
    }

    #[test]
    fn quarter_turn_on_square_matches_transpose_flip() {
        let s = sample(6, 6, 3);
        let r = rotate(&s, 90.0);
        // Inverse map of 90 degrees sends destination (x, y) to source (5 - y, x).
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(r.mask.get_pixel(x, y), s.mask.get_pixel(5 - y, x));
                assert_eq!(r.image.get_pixel(x, y), s.image.get_pixel(5 - y, x));
            }
        }
    }

    #[test]
    fn rotation_fills_corners_with_zero() {
        let s = Sample::new(
            "d",
            "f",
            "c",
            RgbImage::from_pixel(20, 20, Rgb([200, 200, 200])),
            GrayImage::from_pixel(20, 20, Luma([1])),
        )
        .unwrap();
        let r = rotate(&s, 45.0);
        assert_eq!(r.mask.get_pixel(0, 0)[0], 0);
        assert_eq!(r.image.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(r.mask.get_pixel(10, 10)[0], 1);
    }

    #[test]
    fn brightness_leaves_mask_alone() {
        let s = sample(4, 4, 4);
        let b = brightness(&s, 1.2);
        assert_eq!(b.mask, s.mask);
        assert!(b.image.iter().zip(s.image.iter()).all(|(&n, &o)| n >= o));
    }

    #[test]
    fn augment_is_seed_deterministic_and_keeps_mask_binary() {
        let s = sample(16, 12, 5);
        let cfg = AugmentConfig::default();
        let a = augment(&s, &cfg, &mut StdRng::seed_from_u64(9));
        let b = augment(&s, &cfg, &mut StdRng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.mask.iter().all(|&v| v <= 1));
        assert_eq!(
            augment(
                &s,
                &AugmentConfig::disabled(),
                &mut StdRng::seed_from_u64(9)
            ),
            s
        );
        let zero = AugmentConfig {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotation_prob: 0.0,
            brightness_prob: 0.0,
            ..Default::default()
        };
        assert_eq!(augment(&s, &zero, &mut StdRng::seed_from_u64(9)), s);
    }

    #[test]
    fn resize_same_size_is_identity_and_mask_stays_binary() {
        let s = sample(9, 7, 6);
        assert_eq!(resize_sample(&s, 7, 9).unwrap(), s);
        let r = resize_sample(&s, 32, 32).unwrap();
        assert_eq!(r.image.dimensions(), (32, 32));
        assert!(r.mask.iter().all(|&v| v <= 1));
        assert!(resize_sample(&s, 0, 4).is_err());
    }

    #[test]
    fn to_tensors_normalizes_per_channel() {
        let s = Sample::new(
            "d",
            "f",
            "c",
            RgbImage::from_pixel(2, 2, Rgb([255, 0, 51])),
            GrayImage::from_pixel(2, 2, Luma([1])),
        )
        .unwrap();
        let norm = InputNorm {
            mean: [0.5, 0.0, 0.2],
            std: [0.5, 1.0, 0.1],
        };
        let (img, mask) = to_tensors::<f64>(&s, &norm);
        assert_eq!(img.shape(), &[3, 2, 2]);
        assert!((img.data()[0] - 1.0).abs() < 1e-12);
        assert!(img.data()[4].abs() < 1e-12);
        assert!(img.data()[8].abs() < 1e-12);
        assert!(mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            brightness: (1.2, 0.8),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn geometric_transforms_preserve_mask_binarity(seed in 0u64..500, deg in -30.0f64..30.0) {
            let s = sample(11, 9, seed);
            for t in [hflip(&s), vflip(&s), rotate(&s, deg)] {
                prop_assert!(t.mask.iter().all(|&v| v <= 1));
                prop_assert_eq!(t.image.dimensions(), s.image.dimensions());
            }
        }
    }
}
