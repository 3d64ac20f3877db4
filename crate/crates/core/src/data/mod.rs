//! Datasets: ingestion, preprocessing, augmentation, sampling and splits.
//!
//! A dataset directory holds `images/` and `masks/` whose files pair up by
//! stem (`images/frame01.jpg` with `masks/frame01.png`). An optional
//! `cases.tsv` maps frame stems to case ids (`frame<TAB>case` per line);
//! frames without an entry form their own case.

mod sampler;
mod split;
mod synth;
mod transform;

pub use sampler::{epoch_order, BalancedSampler, SamplerKind};
pub use split::{
    dataset_hash, make_split, DatasetIndex, Protocol, SplitEntry, SplitManifest, Subset, CLINIC_DB,
    COLON_DB, CVC_300, ETIS, KVASIR,
};
pub use synth::{blob_sample, blob_samples, write_dataset, SynthConfig};
pub use transform::{
    augment, brightness, frame_input, hflip, image_tensor, preprocess, resize_rgb, resize_sample,
    rotate, to_tensors, vflip, AugmentConfig,
};

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{scan_area, FrameClass};

/// Mask pixels at or above this 8-bit value are foreground.
pub const MASK_LEVEL: u8 = 128;
const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// One frame with its binary mask (pixel values 0 or 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub dataset: String,
    pub frame_id: String,
    pub case_id: String,
    pub image: RgbImage,
    pub mask: GrayImage,
}

impl Sample {
    pub fn new(
        dataset: &str,
        frame_id: &str,
        case_id: &str,
        image: RgbImage,
        mask: GrayImage,
    ) -> Result<Self> {
        if image.dimensions() != mask.dimensions() {
            return Err(Error::Validation(format!(
                "{frame_id}: image is {:?} but mask is {:?}",
                image.dimensions(),
                mask.dimensions()
            )));
        }
        if let Some(v) = mask.as_raw().iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!(
                "{frame_id}: mask value {v} is not 0 or 1"
            )));
        }
        Ok(Sample {
            dataset: dataset.to_string(),
            frame_id: frame_id.to_string(),
            case_id: case_id.to_string(),
            image,
            mask,
        })
    }

    /// Empty masks are normal frames.
    pub fn label(&self) -> FrameClass {
        if self.mask.as_raw().iter().any(|&v| v != 0) {
            FrameClass::Lesion
        } else {
            FrameClass::Normal
        }
    }

    /// Foreground area as a fraction of the circular scan area `pi (W/2)^2`.
    pub fn lesion_size_ratio(&self) -> f64 {
        let area = self.mask.as_raw().iter().filter(|&&v| v != 0).count();
        area as f64 / scan_area(self.mask.width() as usize)
    }
}

/// Binarize an 8-bit mask at [`MASK_LEVEL`].
pub fn binarize_mask(mask: &GrayImage) -> GrayImage {
    GrayImage::from_fn(mask.width(), mask.height(), |x, y| {
        image::Luma([u8::from(mask.get_pixel(x, y)[0] >= MASK_LEVEL)])
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetLayout {
    pub images_dir: String,
    pub masks_dir: String,
    pub cases_file: String,
    /// Fail on the first listed problem instead of skipping the frame.
    pub strict: bool,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        DatasetLayout {
            images_dir: "images".into(),
            masks_dir: "masks".into(),
            cases_file: "cases.tsv".into(),
            strict: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestionReport {
    pub loaded: usize,
    /// One entry per skipped frame, naming the stem and the reason.
    pub problems: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    pub report: IngestionReport,
}

impl Dataset {
    pub fn index(&self) -> DatasetIndex {
        DatasetIndex {
            name: self.name.clone(),
            items: self
                .samples
                .iter()
                .map(|s| (s.frame_id.clone(), s.case_id.clone()))
                .collect(),
        }
    }

    pub fn get(&self, frame_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.frame_id == frame_id)
    }
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if !path.is_file() || !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn read_cases(path: &Path) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    for (n, line) in fs::read_to_string(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next()) {
            (Some(frame), Some(case)) if !frame.is_empty() && !case.is_empty() => {
                out.insert(frame.to_string(), case.to_string());
            }
            _ => {
                return Err(Error::Validation(format!(
                    "{}:{}: expected `frame<TAB>case`",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    Ok(out)
}

fn load_pair(image: &Path, mask: &Path) -> std::result::Result<(RgbImage, GrayImage), String> {
    let img = image::open(image)
        .map_err(|e| format!("cannot decode image: {e}"))?
        .to_rgb8();
    let m = image::open(mask)
        .map_err(|e| format!("cannot decode mask: {e}"))?
        .to_luma8();
    if img.dimensions() != m.dimensions() {
        return Err(format!(
            "image is {:?} but mask is {:?}",
            img.dimensions(),
            m.dimensions()
        ));
    }
    Ok((img, binarize_mask(&m)))
}

/// Load every image/mask pair under `root`. The dataset name is the
/// directory name. In strict mode any problem fails the whole load with an
/// itemized report; otherwise problem frames are skipped and listed.
pub fn load_dataset(root: impl AsRef<Path>, layout: &DatasetLayout) -> Result<Dataset> {
    let root = root.as_ref();
    let name = root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    let (img_dir, mask_dir) = (root.join(&layout.images_dir), root.join(&layout.masks_dir));
    for dir in [&img_dir, &mask_dir] {
        if !dir.is_dir() {
            return Err(Error::Ingestion {
                root: root.to_path_buf(),
                problems: vec![format!("missing directory {}", dir.display())],
            });
        }
    }
    let images = stems(&img_dir)?;
    let mut masks = stems(&mask_dir)?;
    let cases = read_cases(&root.join(&layout.cases_file))?;

    let mut report = IngestionReport::default();
    let mut samples = Vec::new();
    for (stem, img_path) in &images {
        let Some(mask_path) = masks.remove(stem) else {
            report.problems.push(format!("{stem}: image without mask"));
            continue;
        };
        match load_pair(img_path, &mask_path) {
            Ok((image, mask)) => {
                let case = cases.get(stem).cloned().unwrap_or_else(|| stem.clone());
                samples.push(Sample {
                    dataset: name.clone(),
                    frame_id: stem.clone(),
                    case_id: case,
                    image,
                    mask,
                });
            }
            Err(why) => report.problems.push(format!("{stem}: {why}")),
        }
    }
    for stem in masks.keys() {
        report.problems.push(format!("{stem}: mask without image"));
    }
    report.loaded = samples.len();
    if layout.strict && !report.problems.is_empty() {
        return Err(Error::Ingestion {
            root: root.to_path_buf(),
            problems: report.problems,
        });
    }
    Ok(Dataset {
        name,
        root: root.to_path_buf(),
        samples,
        report,
    })
}

/// Lesion-size distribution of a set of samples, as fractions of the scan area.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeReport {
    pub lesion_frames: usize,
    pub normal_frames: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// `(upper bound, count)`; a ratio `r` falls into the first bin with `r <= bound`.
    pub bins: Vec<(f64, usize)>,
}

pub fn size_report<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    bounds: &[f64],
) -> SizeReport {
    let mut r = SizeReport {
        lesion_frames: 0,
        normal_frames: 0,
        min: None,
        max: None,
        bins: bounds
            .iter()
            .map(|&b| (b, 0))
            .chain([(f64::INFINITY, 0)])
            .collect(),
    };
    for s in samples {
        if s.label() == FrameClass::Normal {
            r.normal_frames += 1;
            continue;
        }
        r.lesion_frames += 1;
        let ratio = s.lesion_size_ratio();
        r.min = Some(r.min.map_or(ratio, |m: f64| m.min(ratio)));
        r.max = Some(r.max.map_or(ratio, |m: f64| m.max(ratio)));
        if let Some(bin) = r.bins.iter_mut().find(|(b, _)| ratio <= *b) {
            bin.1 += 1;
        }
    }
    r
}
