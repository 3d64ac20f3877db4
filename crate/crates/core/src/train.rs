//! Training loop, evaluation and the three experiment protocols.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment, epoch_order, frame_input, load_dataset, make_split, resize_sample, to_tensors,
    AugmentConfig, Dataset, DatasetLayout, Protocol, Sample, SamplerKind, SplitManifest, Subset,
    CLINIC_DB, KVASIR,
};
use crate::error::{Error, Result};
use crate::io::save_model;
use crate::loss::{total_loss_with_grad, LossTerms};
use crate::metrics::{evaluate_image, MetricsReport};
use crate::model::{EsfpNet, VariantSpec};
use crate::nn::Parameterized;
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: String,
    pub epochs: usize,
    pub batch_size: usize,
    /// Square network input side; a multiple of 32.
    pub input_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub augment: AugmentConfig,
    pub sampler: SamplerKind,
    pub drop_path_rate: f64,
    /// Train only the decoder.
    pub freeze_encoder: bool,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Frame classification threshold used in evaluation.
    pub min_area_fraction: f64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Encoder weights to start from.
    pub pretrained: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: "B0".into(),
            epochs: 200,
            batch_size: 16,
            input_size: 352,
            seed: 0,
            optimizer: AdamWConfig::default(),
            augment: AugmentConfig::default(),
            sampler: SamplerKind::Auto,
            drop_path_rate: 0.0,
            freeze_encoder: false,
            grad_clip: None,
            max_steps: None,
            min_area_fraction: 0.0,
            checkpoint_dir: None,
            pretrained: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be > 0",
                self.optimizer.lr
            )));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config("drop_path_rate must lie in [0, 1)".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.augment.validate()
    }

    pub fn spec(&self) -> Result<VariantSpec> {
        VariantSpec::from_id(&self.variant)
    }

    /// A fresh model for this config (pretrained encoder applied if configured).
    pub fn build_model<T: Scalar>(&self) -> Result<EsfpNet<T>> {
        let mut model = EsfpNet::new(self.spec()?, self.seed, self.drop_path_rate)?;
        if let Some(path) = &self.pretrained {
            let bytes = std::fs::read(path)?;
            let manifest = crate::io::apply_pretrained(&mut model.encoder, &bytes)?;
            if !manifest.is_complete() {
                return Err(Error::Validation(format!(
                    "pretrained archive {} lacks {} encoder tensors, first {}",
                    path.display(),
                    manifest.missing.len(),
                    manifest.missing[0]
                )));
            }
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    /// Optimizer steps so far.
    pub steps: usize,
    /// Means over the epoch's batches.
    pub l_iou_w: f64,
    pub l_bce_w: f64,
    pub loss: f64,
    pub val_m_dice: Option<f64>,
    pub wall_secs: f64,
    /// File written at this epoch, if any.
    pub checkpoint: Option<PathBuf>,
    pub best_epoch: usize,
}

impl TrainLogRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} steps={} loss={:.6} l_iou_w={:.6} l_bce_w={:.6} val_mdice={} wall_s={:.3} best_epoch={} checkpoint={}",
            self.epoch,
            self.steps,
            self.loss,
            self.l_iou_w,
            self.l_bce_w,
            self.val_m_dice.map_or("na".into(), |d| format!("{d:.6}")),
            self.wall_secs,
            self.best_epoch,
            self.checkpoint.as_ref().map_or("-".into(), |p| p.display().to_string()),
        )
    }
}

pub struct TrainOutcome<T> {
    /// The frozen model: best validation mDice, or the last epoch without validation.
    pub model: EsfpNet<T>,
    pub best_epoch: usize,
    pub best_val_m_dice: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub log: Vec<TrainLogRecord>,
}

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

/// Stack augmented `(3, S, S)` / `(1, S, S)` tensors for `ids` into a batch.
fn make_batch<T: Scalar>(
    samples: &[Sample],
    ids: &[usize],
    cfg: &TrainConfig,
    spec: &VariantSpec,
    rng: &mut StdRng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (mut images, mut masks) = (Vec::new(), Vec::new());
    for &i in ids {
        let s = augment(&samples[i], &cfg.augment, rng);
        let (img, m) = to_tensors::<T>(&s, &spec.input_norm);
        let (h, w) = (img.shape()[1], img.shape()[2]);
        images.push(img.reshape(&[1, 3, h, w])?);
        masks.push(m.reshape(&[1, 1, h, w])?);
    }
    Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&masks)?))
}

fn diverged<T: Scalar>(
    epoch: usize,
    samples: &[Sample],
    ids: &[usize],
    terms: Option<LossTerms<T>>,
    why: &str,
) -> Error {
    let names: Vec<String> = ids
        .iter()
        .map(|&i| format!("{}/{}", samples[i].dataset, samples[i].frame_id))
        .collect();
    let terms = terms.map_or("unavailable".to_string(), |t| {
        format!(
            "l_iou_w={} l_bce_w={} total={}",
            t.l_iou_w, t.l_bce_w, t.total
        )
    });
    Error::Diverged {
        epoch,
        detail: format!(
            "{why}; last batch [{}]; loss terms {terms}",
            names.join(", ")
        ),
    }
}

/// Train `model` on `train_set`; see [`train_with_hook`].
pub fn train<T: Scalar>(
    model: EsfpNet<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with_hook(model, train_set, val_set, cfg, &mut |_, _| Ok(()))
}

/// Epochs of sampler-ordered, augmented batches. After each epoch the model
/// is scored on `val_set` (mDice) and kept, and checkpointed, whenever the
/// score improves. With an empty `val_set` the last epoch is kept. `hook`
/// sees the model after every epoch.
pub fn train_with_hook<T: Scalar>(
    mut model: EsfpNet<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(usize, &EsfpNet<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if model.spec.id != cfg.variant {
        return Err(Error::VariantMismatch {
            expected: cfg.variant.clone(),
            found: model.spec.id.clone(),
        });
    }
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let spec = model.spec.clone();
    let resized: Vec<Sample> = train_set
        .iter()
        .map(|s| resize_sample(s, cfg.input_size, cfg.input_size))
        .collect::<Result<_>>()?;
    let labels: Vec<_> = resized.iter().map(Sample::label).collect();

    let mut opt = AdamW::<T>::new(cfg.optimizer.clone())?;
    if cfg.freeze_encoder {
        opt.freeze_prefix("backbone.");
    }
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut log: Vec<TrainLogRecord> = Vec::new();
    let mut best: Option<(f64, usize, EsfpNet<T>)> = None;
    let mut best_path = None;
    let mut steps = 0;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(cfg.sampler, &labels, &mut rng)?;
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for ids in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let (images, masks) = make_batch::<T>(&resized, ids, cfg, &spec, &mut rng)?;
            let drop_rng = (cfg.drop_path_rate > 0.0).then_some(&mut rng);
            let (logits, cache) = model.forward_train(&images, drop_rng)?;
            if !logits.all_finite() {
                return Err(diverged::<T>(
                    epoch,
                    &resized,
                    ids,
                    None,
                    "non-finite logits",
                ));
            }
            let (terms, dlogits) = total_loss_with_grad(&logits, &masks)?;
            if !terms.total.is_finite() {
                return Err(diverged(
                    epoch,
                    &resized,
                    ids,
                    Some(terms),
                    "non-finite loss",
                ));
            }
            model.zero_grad();
            model.backward(&cache, &dlogits, false)?;
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut model, max);
            }
            opt.step(&mut model)?;
            steps += 1;
            batches += 1;
            for (acc, v) in sums
                .iter_mut()
                .zip([terms.l_iou_w, terms.l_bce_w, terms.total])
            {
                *acc += v.as_f64();
            }
        }
        let last_epoch = epoch == cfg.epochs || cfg.max_steps.is_some_and(|m| steps >= m);

        let val_m_dice = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, val_set, cfg.input_size, cfg.min_area_fraction)?.m_dice)
        };
        let mut checkpoint = None;
        let improved = match (val_m_dice, &best) {
            (Some(d), Some((b, _, _))) => d > *b,
            (Some(_), None) => true,
            (None, _) => last_epoch,
        };
        if improved {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(if val_m_dice.is_some() {
                    BEST_CHECKPOINT
                } else {
                    LAST_CHECKPOINT
                });
                save_model(&model, &path)?;
                checkpoint = Some(path.clone());
                best_path = Some(path);
            }
            let mut kept = model.clone();
            kept.zero_grad();
            best = Some((val_m_dice.unwrap_or(f64::NAN), epoch, kept));
        }
        let n = batches.max(1) as f64;
        log.push(TrainLogRecord {
            epoch,
            steps,
            l_iou_w: sums[0] / n,
            l_bce_w: sums[1] / n,
            loss: sums[2] / n,
            val_m_dice,
            wall_secs: start.elapsed().as_secs_f64(),
            checkpoint,
            best_epoch: best.as_ref().map_or(0, |b| b.1),
        });
        hook(epoch, &model)?;
        if last_epoch {
            break;
        }
    }
    let (score, best_epoch, frozen) = best.expect("the last epoch always records a model");
    Ok(TrainOutcome {
        model: frozen,
        best_epoch,
        best_val_m_dice: (!score.is_nan()).then_some(score),
        checkpoint: best_path,
        log,
    })
}

/// Probabilities `(1, 1, H, W)` at the sample's own resolution: the image is
/// resized to `input_size`, and the logits are resized back before the sigmoid.
pub fn predict_sample<T: Scalar>(
    model: &EsfpNet<T>,
    sample: &Sample,
    input_size: usize,
) -> Result<Tensor<T>> {
    let (w, h) = (
        sample.image.width() as usize,
        sample.image.height() as usize,
    );
    let logits = model.forward(&frame_input(
        &sample.image,
        input_size,
        &model.spec.input_norm,
    )?)?;
    let back = crate::ops::resize_bilinear(logits.data(), (1, input_size, input_size, 1), (h, w));
    let probs = back
        .into_iter()
        .map(|z| T::one() / (T::one() + (-z).exp()))
        .collect();
    Tensor::from_vec(&[1, 1, h, w], probs)
}

/// Per-image and aggregate metrics at each sample's original resolution.
pub fn evaluate<T: Scalar>(
    model: &EsfpNet<T>,
    samples: &[Sample],
    input_size: usize,
    min_area_fraction: f64,
) -> Result<MetricsReport> {
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let prob = predict_sample(model, s, input_size)?;
        let (w, h) = (s.mask.width() as usize, s.mask.height() as usize);
        let gt = Tensor::from_fn(&[1, 1, h, w], |k| T::c(f64::from(s.mask.as_raw()[k])));
        per_image.push(evaluate_image(
            &format!("{}/{}", s.dataset, s.frame_id),
            &prob,
            &gt,
            min_area_fraction,
        )?);
    }
    Ok(MetricsReport::from_images(per_image))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    /// Dataset the model was trained on (learning ability) or `"pooled"`.
    pub trained_on: String,
    pub dataset: String,
    pub subset: Subset,
    /// `"frozen"`: the kept model. `"peak"`: best mDice over epochs on this dataset.
    pub selection: String,
    pub frames: usize,
    pub m_dice: f64,
    pub m_iou: f64,
    pub s_alpha: f64,
    pub e_phi_max: f64,
    pub mae: f64,
}

impl ReportRow {
    fn new(
        trained_on: &str,
        dataset: &str,
        subset: Subset,
        selection: &str,
        r: &MetricsReport,
    ) -> Self {
        ReportRow {
            trained_on: trained_on.to_string(),
            dataset: dataset.to_string(),
            subset,
            selection: selection.to_string(),
            frames: r.per_image.len(),
            m_dice: r.m_dice,
            m_iou: r.m_iou,
            s_alpha: r.s_alpha,
            e_phi_max: r.e_phi_max,
            mae: r.mae,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub protocol: Protocol,
    pub variant: String,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    #[serde(skip)]
    pub manifests: Vec<SplitManifest>,
    #[serde(skip)]
    pub logs: Vec<(String, Vec<TrainLogRecord>)>,
}

impl ExperimentReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{} protocol, variant {}, seed {}\n",
            self.protocol, self.variant, self.seed
        );
        let _ = writeln!(
            out,
            "{:<18} {:<18} {:<6} {:<7} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "trained on",
            "dataset",
            "subset",
            "select",
            "frames",
            "mDice",
            "mIoU",
            "S_a",
            "E_max",
            "MAE"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<18} {:<18} {:<6} {:<7} {:>6} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                r.trained_on,
                r.dataset,
                r.subset.as_str(),
                r.selection,
                r.frames,
                r.m_dice,
                r.m_iou,
                r.s_alpha,
                r.e_phi_max,
                r.mae
            );
        }
        out
    }

    pub fn to_machine_lines(&self) -> String {
        let mut out = format!(
            "protocol={}\nvariant={}\nseed={}\n",
            self.protocol, self.variant, self.seed
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "row trained_on={} dataset={} subset={} selection={} frames={} m_dice={:.6} m_iou={:.6} s_alpha={:.6} e_phi_max={:.6} mae={:.6}",
                r.trained_on,
                r.dataset,
                r.subset.as_str(),
                r.selection,
                r.frames,
                r.m_dice,
                r.m_iou,
                r.s_alpha,
                r.e_phi_max,
                r.mae
            );
        }
        out
    }
}

/// Datasets a protocol run needs: the protocol's fixed list, or for
/// learning ability the given ones (Kvasir and CVC-ClinicDB by default).
pub fn protocol_datasets(protocol: Protocol, requested: &[String]) -> Vec<String> {
    match protocol {
        Protocol::LearningAbility if requested.is_empty() => {
            vec![KVASIR.to_string(), CLINIC_DB.to_string()]
        }
        Protocol::LearningAbility => requested.to_vec(),
        p => p
            .required_datasets()
            .iter()
            .map(|s| s.to_string())
            .collect(),
    }
}

fn pick<'a>(
    sets: &'a BTreeMap<String, Dataset>,
    manifest: &SplitManifest,
    subset: Subset,
    dataset: Option<&str>,
) -> Vec<Sample> {
    manifest
        .subset(subset)
        .filter(|e| dataset.is_none_or(|d| d == e.dataset))
        .filter_map(|e| sets.get(&e.dataset).and_then(|d| d.get(&e.id)))
        .cloned()
        .collect()
}

/// Split, train, freeze and evaluate per `protocol` with datasets found
/// under `data_root/<name>`. Nothing runs unless every dataset is present.
pub fn run_protocol<T: Scalar>(
    protocol: Protocol,
    data_root: &Path,
    datasets: &[String],
    cfg: &TrainConfig,
    layout: &DatasetLayout,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let names = protocol_datasets(protocol, datasets);
    let missing: Vec<String> = names
        .iter()
        .filter(|n| !data_root.join(n).is_dir())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingDatasets {
            root: data_root.to_path_buf(),
            missing,
        });
    }
    let mut sets = BTreeMap::new();
    for n in &names {
        let mut d = load_dataset(data_root.join(n), layout)?;
        d.name = n.clone();
        for s in &mut d.samples {
            s.dataset = n.clone();
        }
        sets.insert(n.clone(), d);
    }
    let mut report = ExperimentReport {
        protocol,
        variant: cfg.variant.clone(),
        seed: cfg.seed,
        rows: Vec::new(),
        manifests: Vec::new(),
        logs: Vec::new(),
    };
    let eval = |m: &EsfpNet<T>, s: &[Sample]| evaluate(m, s, cfg.input_size, cfg.min_area_fraction);

    match protocol {
        Protocol::LearningAbility => {
            for n in &names {
                let manifest = make_split(protocol, &[sets[n].index()], cfg.seed)?;
                let (tr, va, te) = (
                    pick(&sets, &manifest, Subset::Train, None),
                    pick(&sets, &manifest, Subset::Validation, None),
                    pick(&sets, &manifest, Subset::Test, None),
                );
                // One model per dataset, so each gets its own checkpoint directory.
                let own = TrainConfig {
                    checkpoint_dir: cfg.checkpoint_dir.as_ref().map(|d| d.join(n)),
                    ..cfg.clone()
                };
                let out = train(own.build_model::<T>()?, &tr, &va, &own)?;
                for (subset, s) in [
                    (Subset::Train, &tr),
                    (Subset::Validation, &va),
                    (Subset::Test, &te),
                ] {
                    report.rows.push(ReportRow::new(
                        n,
                        n,
                        subset,
                        "frozen",
                        &eval(&out.model, s)?,
                    ));
                }
                report.manifests.push(manifest);
                report.logs.push((n.clone(), out.log));
            }
        }
        Protocol::Generalizability | Protocol::PowerBalance => {
            let indices: Vec<_> = sets.values().map(Dataset::index).collect();
            let manifest = make_split(protocol, &indices, cfg.seed)?;
            let tr = pick(&sets, &manifest, Subset::Train, None);
            let va = pick(&sets, &manifest, Subset::Validation, None);
            let tests: Vec<(String, Vec<Sample>)> = manifest
                .datasets_in(Subset::Test)
                .into_iter()
                .map(|d| {
                    let s = pick(&sets, &manifest, Subset::Test, Some(&d));
                    (d, s)
                })
                .collect();
            // Generalizability also reports the best score each unseen set reached.
            let mut peak: BTreeMap<String, MetricsReport> = BTreeMap::new();
            let mut hook = |_: usize, m: &EsfpNet<T>| -> Result<()> {
                if protocol != Protocol::Generalizability {
                    return Ok(());
                }
                for (d, s) in &tests {
                    let r = eval(m, s)?;
                    if peak.get(d).is_none_or(|p| r.m_dice > p.m_dice) {
                        peak.insert(d.clone(), r);
                    }
                }
                Ok(())
            };
            let out = train_with_hook(cfg.build_model::<T>()?, &tr, &va, cfg, &mut hook)?;
            report.rows.push(ReportRow::new(
                "pooled",
                "pooled",
                Subset::Train,
                "frozen",
                &eval(&out.model, &tr)?,
            ));
            if !va.is_empty() {
                report.rows.push(ReportRow::new(
                    "pooled",
                    "pooled",
                    Subset::Validation,
                    "frozen",
                    &eval(&out.model, &va)?,
                ));
            }
            for (d, s) in &tests {
                report.rows.push(ReportRow::new(
                    "pooled",
                    d,
                    Subset::Test,
                    "frozen",
                    &eval(&out.model, s)?,
                ));
                if let Some(p) = peak.get(d) {
                    report
                        .rows
                        .push(ReportRow::new("pooled", d, Subset::Test, "peak", p));
                }
            }
            report.manifests.push(manifest);
            report.logs.push(("pooled".into(), out.log));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{blob_samples, SynthConfig};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            input_size: 32,
            seed: 5,
            augment: AugmentConfig::disabled(),
            ..Default::default()
        }
    }

    fn samples(n: usize, seed: u64) -> Vec<Sample> {
        let cfg = SynthConfig {
            width: 40,
            height: 36,
            lesion_prob: 0.6,
            ..Default::default()
        };
        blob_samples(&cfg, n, seed)
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                input_size: 100,
                ..Default::default()
            },
            TrainConfig {
                optimizer: AdamWConfig {
                    lr: 0.0,
                    ..Default::default()
                },
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_epochs_is_an_error() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let model = EsfpNet::<f32>::build("B0", 0).unwrap();
        assert!(train(model, &samples(2, 0), &[], &cfg).is_err());
    }

    #[test]
    fn variant_mismatch_is_rejected() {
        let cfg = TrainConfig {
            variant: "B2".into(),
            ..tiny_cfg()
        };
        let model = EsfpNet::<f32>::build("B0", 0).unwrap();
        assert!(matches!(
            train(model, &samples(2, 0), &[], &cfg),
            Err(Error::VariantMismatch { .. })
        ));
    }

    #[test]
    fn deterministic_and_best_checkpoint_tracks_max() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            augment: AugmentConfig::default(),
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..Default::default()
            },
            ..tiny_cfg()
        };
        let (tr, va) = (samples(5, 1), samples(3, 2));
        let a = train(EsfpNet::<f32>::build("B0", 0).unwrap(), &tr, &va, &cfg).unwrap();
        let b = train(EsfpNet::<f32>::build("B0", 0).unwrap(), &tr, &va, &cfg).unwrap();
        let losses = |o: &TrainOutcome<f32>| o.log.iter().map(|r| r.loss).collect::<Vec<_>>();
        for (x, y) in losses(&a).iter().zip(losses(&b)) {
            assert!((x - y).abs() <= 1e-6);
        }
        assert_eq!(
            a.log.iter().map(|r| r.epoch).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        let max = a
            .log
            .iter()
            .filter_map(|r| r.val_m_dice)
            .fold(f64::MIN, f64::max);
        assert_eq!(a.best_val_m_dice, Some(max));
        let frozen = evaluate(&a.model, &va, cfg.input_size, 0.0).unwrap().m_dice;
        assert_eq!(frozen, max);
        let saved: EsfpNet<f32> = crate::io::load_model(a.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(saved, a.model);
        assert_eq!(a.log.last().unwrap().best_epoch, a.best_epoch);
    }

    #[test]
    fn no_validation_keeps_last_epoch() {
        let cfg = tiny_cfg();
        let out = train(
            EsfpNet::<f32>::build("B0", 0).unwrap(),
            &samples(3, 1),
            &[],
            &cfg,
        )
        .unwrap();
        assert_eq!(out.best_epoch, 2);
        assert_eq!(out.best_val_m_dice, None);
    }

    #[test]
    fn max_steps_caps_iterations() {
        let cfg = TrainConfig {
            max_steps: Some(3),
            epochs: 10,
            ..tiny_cfg()
        };
        let out = train(
            EsfpNet::<f32>::build("B0", 0).unwrap(),
            &samples(4, 1),
            &[],
            &cfg,
        )
        .unwrap();
        assert_eq!(out.log.last().unwrap().steps, 3);
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn zero_head_gives_half_probability_and_half_mae() {
        let mut model = EsfpNet::<f64>::build("B0", 0).unwrap();
        model.visit_decoder_mut(&mut |name, p| {
            if name.starts_with("linear_pred") {
                p.value.fill(0.0);
            }
        });
        let va = samples(3, 4);
        let r = evaluate(&model, &va, 32, 0.0).unwrap();
        assert!((r.mae - 0.5).abs() < 1e-12);
        assert_eq!(r, evaluate(&model, &va, 32, 0.0).unwrap());
        let mean = r.per_image.iter().map(|m| m.dice).sum::<f64>() / r.per_image.len() as f64;
        assert!((mean - r.m_dice).abs() < 1e-12);
    }

    #[test]
    fn missing_datasets_listed_before_running() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join(KVASIR)).unwrap();
        match run_protocol::<f32>(
            Protocol::PowerBalance,
            dir.path(),
            &[],
            &tiny_cfg(),
            &DatasetLayout::default(),
        ) {
            Err(Error::MissingDatasets { missing, .. }) => assert_eq!(missing.len(), 4),
            other => panic!("{:?}", other.map(|r| r.rows.len())),
        }
    }
}
