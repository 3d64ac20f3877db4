//! Synthetic blob frames for smoke runs, overfitting checks and stream tests.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::Sample;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    /// Probability that a frame carries a lesion blob.
    pub lesion_prob: f64,
    /// Blob semi-axes as fractions of the frame width.
    pub radius: (f64, f64),
    /// Amplitude of per-pixel background noise, in 8-bit units.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            lesion_prob: 1.0,
            radius: (0.12, 0.28),
            noise: 12.0,
        }
    }
}

/// A dim reddish background with one bright elliptical blob (when
/// `lesion`), mask = blob interior.
pub fn blob_sample(rng: &mut StdRng, cfg: &SynthConfig, lesion: bool, frame_id: &str) -> Sample {
    let (w, h) = (cfg.width, cfg.height);
    let base = [
        rng.random_range(90.0..130.0),
        rng.random_range(40.0..70.0),
        rng.random_range(30.0..60.0),
    ];
    let (rx, ry) = (
        rng.random_range(cfg.radius.0..=cfg.radius.1) * w as f64,
        rng.random_range(cfg.radius.0..=cfg.radius.1) * w as f64,
    );
    let cx = rng.random_range(rx.min(w as f64 / 2.0)..=(w as f64 - rx).max(w as f64 / 2.0));
    let cy = rng.random_range(ry.min(h as f64 / 2.0)..=(h as f64 - ry).max(h as f64 / 2.0));
    let inside = |x: u32, y: u32| {
        let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
        lesion && dx * dx + dy * dy <= 1.0
    };
    let mask = GrayImage::from_fn(w, h, |x, y| Luma([u8::from(inside(x, y))]));
    let image = RgbImage::from_fn(w, h, |x, y| {
        let lift = if inside(x, y) {
            [110.0, 100.0, 60.0]
        } else {
            [0.0; 3]
        };
        let mut px = [0u8; 3];
        for c in 0..3 {
            let n = rng.random_range(-cfg.noise..=cfg.noise);
            px[c] = (base[c] + lift[c] + n).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    });
    Sample {
        dataset: "synthetic".into(),
        frame_id: frame_id.to_string(),
        case_id: frame_id.to_string(),
        image,
        mask,
    }
}

/// `count` frames named `f0000`, `f0001`, ...
pub fn blob_samples(cfg: &SynthConfig, count: usize, seed: u64) -> Vec<Sample> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let lesion = rng.random_bool(cfg.lesion_prob);
            blob_sample(&mut rng, cfg, lesion, &format!("f{i:04}"))
        })
        .collect()
}

/// Write `count` synthetic frames as a dataset directory `root/name` with
/// `images/*.png` and 0/255 `masks/*.png`. Returns the dataset directory.
pub fn write_dataset(
    root: &Path,
    name: &str,
    count: usize,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<PathBuf> {
    let dir = root.join(name);
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for s in blob_samples(cfg, count, seed) {
        s.image
            .save(dir.join("images").join(format!("{}.png", s.frame_id)))?;
        let m = GrayImage::from_fn(cfg.width, cfg.height, |x, y| {
            Luma([s.mask.get_pixel(x, y)[0] * 255])
        });
        m.save(dir.join("masks").join(format!("{}.png", s.frame_id)))?;
    }
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DatasetLayout};
    use crate::metrics::FrameClass;

    #[test]
    fn lesion_prob_controls_labels() {
        let cfg = SynthConfig {
            lesion_prob: 0.0,
            ..Default::default()
        };
        assert!(blob_samples(&cfg, 5, 1)
            .iter()
            .all(|s| s.label() == FrameClass::Normal));
        let all = blob_samples(&SynthConfig::default(), 5, 1);
        assert!(all.iter().all(|s| s.label() == FrameClass::Lesion));
        assert_eq!(all, blob_samples(&SynthConfig::default(), 5, 1));
    }

    #[test]
    fn written_dataset_loads_back_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            width: 24,
            height: 20,
            lesion_prob: 0.5,
            ..Default::default()
        };
        let root = write_dataset(dir.path(), "Blobs", 6, &cfg, 3).unwrap();
        let ds = load_dataset(&root, &DatasetLayout::default()).unwrap();
        let made = blob_samples(&cfg, 6, 3);
        assert_eq!(ds.samples.len(), 6);
        for (a, b) in ds.samples.iter().zip(&made) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.dataset, "Blobs");
        }
    }
}
