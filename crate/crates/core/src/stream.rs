//! Frame-stream segmentation with per-stage timing.
//!
//! Stages: read, preprocess (resize + normalize), inference, postprocess
//! (resize logits back, sigmoid, threshold, classify, sink). In pipelined
//! mode each stage runs on its own thread joined by bounded queues; every
//! stage is FIFO, so results leave in input order.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{blob_sample, frame_input, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::{scan_area, FrameClass};
use crate::model::EsfpNet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A finite or endless sequence of frames. `None` ends the stream; an
/// `Err` item is a frame that failed to decode and is skipped.
pub trait FrameSource: Send {
    fn next_frame(&mut self) -> Option<Result<RgbImage>>;
}

const FRAME_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// Image files of a directory in file-name order.
pub struct DirSource {
    files: std::vec::IntoIter<PathBuf>,
}

impl DirSource {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        Ok(DirSource {
            files: files.into_iter(),
        })
    }
}

impl FrameSource for DirSource {
    fn next_frame(&mut self) -> Option<Result<RgbImage>> {
        let path = self.files.next()?;
        Some(
            image::open(&path)
                .map(|i| i.to_rgb8())
                .map_err(|e| Error::Validation(format!("{}: {e}", path.display()))),
        )
    }
}

/// 8-bit YUV4MPEG2 video (mono, 4:2:0, 4:2:2 or 4:4:4), converted with
/// BT.601 limited-range coefficients.
pub struct Y4mSource<R: Read + Send> {
    decoder: y4m::Decoder<R>,
    done: bool,
}

impl Y4mSource<BufReader<fs::File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(fs::File::open(path)?))
    }
}

impl<R: Read + Send> Y4mSource<R> {
    pub fn new(reader: R) -> Result<Self> {
        let decoder =
            y4m::decode(reader).map_err(|e| Error::Validation(format!("y4m header: {e}")))?;
        if decoder.get_bit_depth() != 8 {
            return Err(Error::Validation(format!(
                "y4m bit depth {} is not supported (8 only)",
                decoder.get_bit_depth()
            )));
        }
        Ok(Y4mSource {
            decoder,
            done: false,
        })
    }
}

fn yuv_to_rgb(y: u8, u: u8, v: u8) -> Rgb<u8> {
    let c = 1.164 * (f64::from(y) - 16.0);
    let (d, e) = (f64::from(u) - 128.0, f64::from(v) - 128.0);
    let px = |x: f64| x.round().clamp(0.0, 255.0) as u8;
    Rgb([
        px(c + 1.596 * e),
        px(c - 0.392 * d - 0.813 * e),
        px(c + 2.017 * d),
    ])
}

impl<R: Read + Send> FrameSource for Y4mSource<R> {
    fn next_frame(&mut self) -> Option<Result<RgbImage>> {
        if self.done {
            return None;
        }
        let (w, h) = (self.decoder.get_width(), self.decoder.get_height());
        let cs = self.decoder.get_colorspace();
        let frame = match self.decoder.read_frame() {
            Ok(f) => f,
            Err(y4m::Error::EOF) => {
                self.done = true;
                return None;
            }
            Err(e) => {
                // A broken frame header or short read leaves the stream unusable.
                self.done = true;
                return Some(Err(Error::Validation(format!("y4m frame: {e}"))));
            }
        };
        use y4m::Colorspace as C;
        let (sx, sy) = match cs {
            C::Cmono => (0, 0),
            C::C420 | C::C420jpeg | C::C420paldv | C::C420mpeg2 => (2, 2),
            C::C422 => (2, 1),
            C::C444 => (1, 1),
            other => {
                return Some(Err(Error::Validation(format!(
                    "y4m colorspace {other:?} is not supported"
                ))))
            }
        };
        let (yp, up, vp) = (
            frame.get_y_plane(),
            frame.get_u_plane(),
            frame.get_v_plane(),
        );
        let cw = if sx == 0 { 0 } else { w.div_ceil(sx) };
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let luma = yp[y * w + x];
            if sx == 0 {
                return yuv_to_rgb(luma, 128, 128);
            }
            let k = (y / sy) * cw + x / sx;
            yuv_to_rgb(luma, up[k], vp[k])
        });
        Some(Ok(img))
    }
}

/// Synthetic blob frames, or one frame repeated.
pub struct SyntheticSource {
    cfg: SynthConfig,
    remaining: usize,
    rng: StdRng,
    index: usize,
    repeat: Option<RgbImage>,
}

impl SyntheticSource {
    pub fn new(cfg: SynthConfig, frames: usize, seed: u64) -> Self {
        SyntheticSource {
            cfg,
            remaining: frames,
            rng: StdRng::seed_from_u64(seed),
            index: 0,
            repeat: None,
        }
    }

    pub fn repeating(frame: RgbImage, frames: usize) -> Self {
        SyntheticSource {
            cfg: SynthConfig::default(),
            remaining: frames,
            rng: StdRng::seed_from_u64(0),
            index: 0,
            repeat: Some(frame),
        }
    }
}

impl FrameSource for SyntheticSource {
    fn next_frame(&mut self) -> Option<Result<RgbImage>> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        self.index += 1;
        if let Some(f) = &self.repeat {
            return Some(Ok(f.clone()));
        }
        let lesion = rand::Rng::random_bool(&mut self.rng, self.cfg.lesion_prob);
        let s = blob_sample(
            &mut self.rng,
            &self.cfg,
            lesion,
            &format!("f{:06}", self.index),
        );
        Some(Ok(s.image))
    }
}

/// Frames from memory; `None` entries stand for undecodable frames.
pub struct VecSource(std::vec::IntoIter<Option<RgbImage>>);

impl VecSource {
    pub fn new(frames: Vec<Option<RgbImage>>) -> Self {
        VecSource(frames.into_iter())
    }
}

impl FrameSource for VecSource {
    fn next_frame(&mut self) -> Option<Result<RgbImage>> {
        Some(
            self.0
                .next()?
                .ok_or_else(|| Error::Validation("undecodable frame".into())),
        )
    }
}

/// Per-stage wall time in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageLatency {
    pub read: f64,
    pub preprocess: f64,
    pub inference: f64,
    pub postprocess: f64,
}

impl StageLatency {
    pub fn sum(&self) -> f64 {
        self.read + self.preprocess + self.inference + self.postprocess
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    /// Position among successfully decoded frames.
    pub index: usize,
    /// Binary mask (0/1) at the frame's resolution.
    pub mask: GrayImage,
    pub class: FrameClass,
    pub latency: StageLatency,
    /// From the start of reading to the end of postprocessing, queueing included.
    pub total_ms: f64,
}

impl FrameResult {
    pub fn is_lesion(&self) -> bool {
        self.class == FrameClass::Lesion
    }
}

pub trait FrameSink: Send {
    fn accept(&mut self, frame: &RgbImage, result: &FrameResult) -> Result<()>;
}

pub struct NullSink;

impl FrameSink for NullSink {
    fn accept(&mut self, _: &RgbImage, _: &FrameResult) -> Result<()> {
        Ok(())
    }
}

/// Keeps every result in memory.
#[derive(Default)]
pub struct CollectSink {
    pub results: Vec<FrameResult>,
}

impl FrameSink for CollectSink {
    fn accept(&mut self, _: &RgbImage, result: &FrameResult) -> Result<()> {
        self.results.push(result.clone());
        Ok(())
    }
}

/// Writes `overlay_NNNNNN.png` and/or `mask_NNNNNN.png` (0/255) per frame.
pub struct DirSink {
    dir: PathBuf,
    pub overlay: bool,
    pub masks: bool,
    pub alpha: f64,
}

impl DirSink {
    pub fn create(dir: impl AsRef<Path>, overlay: bool, masks: bool, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "overlay alpha {alpha} must lie in [0, 1]"
            )));
        }
        fs::create_dir_all(dir.as_ref())?;
        Ok(DirSink {
            dir: dir.as_ref().to_path_buf(),
            overlay,
            masks,
            alpha,
        })
    }
}

impl FrameSink for DirSink {
    fn accept(&mut self, frame: &RgbImage, r: &FrameResult) -> Result<()> {
        if self.overlay {
            overlay(frame, &r.mask, self.alpha)
                .save(self.dir.join(format!("overlay_{:06}.png", r.index)))?;
        }
        if self.masks {
            let m = GrayImage::from_fn(r.mask.width(), r.mask.height(), |x, y| {
                Luma([r.mask.get_pixel(x, y)[0] * 255])
            });
            m.save(self.dir.join(format!("mask_{:06}.png", r.index)))?;
        }
        Ok(())
    }
}

const FILL: [f64; 3] = [0.0, 255.0, 0.0];
const CONTOUR: Rgb<u8> = Rgb([255, 255, 0]);

/// Mask fill blended at `alpha` plus a solid one-pixel contour.
pub fn overlay(frame: &RgbImage, mask: &GrayImage, alpha: f64) -> RgbImage {
    let (w, h) = frame.dimensions();
    let on = |x: i64, y: i64| {
        x >= 0
            && y >= 0
            && x < w as i64
            && y < h as i64
            && mask.get_pixel(x as u32, y as u32)[0] != 0
    };
    RgbImage::from_fn(w, h, |x, y| {
        let (xi, yi) = (x as i64, y as i64);
        if !on(xi, yi) {
            return *frame.get_pixel(x, y);
        }
        if !(on(xi - 1, yi) && on(xi + 1, yi) && on(xi, yi - 1) && on(xi, yi + 1)) {
            return CONTOUR;
        }
        let p = frame.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|c| {
            ((1.0 - alpha) * f64::from(p[c]) + alpha * FILL[c])
                .round()
                .clamp(0.0, 255.0) as u8
        }))
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamMode {
    #[default]
    Pipelined,
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub input_size: usize,
    /// Probability at or above which a pixel is lesion.
    pub threshold: f64,
    pub min_area_fraction: f64,
    pub overlay_alpha: f64,
    pub mode: StreamMode,
    /// Capacity of each inter-stage queue.
    pub queue_depth: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            input_size: 352,
            threshold: 0.5,
            min_area_fraction: 0.0,
            overlay_alpha: 0.4,
            mode: StreamMode::Pipelined,
            queue_depth: 4,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return Err(Error::Config("overlay_alpha must lie in [0, 1]".into()));
        }
        if self.queue_depth == 0 {
            return Err(Error::Config("queue_depth must be >= 1".into()));
        }
        Ok(())
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn preprocess_stage<T: Scalar>(
    frame: &RgbImage,
    model: &EsfpNet<T>,
    cfg: &StreamConfig,
) -> Result<Tensor<T>> {
    frame_input(frame, cfg.input_size, &model.spec.input_norm)
}

/// Logits at input size to a binary mask at `(w, h)` and its class.
fn postprocess_stage<T: Scalar>(
    logits: &Tensor<T>,
    (w, h): (u32, u32),
    cfg: &StreamConfig,
) -> (GrayImage, FrameClass) {
    let s = cfg.input_size;
    let back = crate::ops::resize_bilinear(logits.data(), (1, s, s, 1), (h as usize, w as usize));
    let t = T::c(cfg.threshold);
    let bits: Vec<u8> = back
        .iter()
        .map(|&z| u8::from(T::one() / (T::one() + (-z).exp()) >= t))
        .collect();
    let area = bits.iter().filter(|&&b| b != 0).count();
    let class = if area > 0 && area as f64 >= cfg.min_area_fraction * scan_area(w as usize) {
        FrameClass::Lesion
    } else {
        FrameClass::Normal
    };
    (
        GrayImage::from_raw(w, h, bits).expect("mask sized to the frame"),
        class,
    )
}

/// Resize, normalize, predict, threshold, resize back and classify one frame.
/// The read latency is zero here; [`run_stream`] fills it in.
pub fn process_frame<T: Scalar>(
    model: &EsfpNet<T>,
    frame: &RgbImage,
    index: usize,
    cfg: &StreamConfig,
) -> Result<FrameResult> {
    let start = Instant::now();
    let t = Instant::now();
    let input = preprocess_stage(frame, model, cfg)?;
    let preprocess = ms(t);
    let t = Instant::now();
    let logits = model.forward(&input)?;
    let inference = ms(t);
    let t = Instant::now();
    let (mask, class) = postprocess_stage(&logits, frame.dimensions(), cfg);
    let postprocess = ms(t);
    Ok(FrameResult {
        index,
        mask,
        class,
        latency: StageLatency {
            read: 0.0,
            preprocess,
            inference,
            postprocess,
        },
        total_ms: ms(start),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThroughputReport {
    pub mode: StreamMode,
    pub frames: usize,
    pub skipped: usize,
    pub lesion_frames: usize,
    pub wall_secs: f64,
    /// `frames / wall_secs`; zero for an empty run.
    pub mean_fps: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub stage_means: StageLatency,
}

/// Nearest-rank percentile of unsorted values; zero when empty.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

impl ThroughputReport {
    fn from_results(
        mode: StreamMode,
        latencies: &[(StageLatency, f64)],
        lesion: usize,
        skipped: usize,
        wall: f64,
    ) -> Self {
        let n = latencies.len();
        let mean = |f: &dyn Fn(&StageLatency) -> f64| {
            if n == 0 {
                0.0
            } else {
                latencies.iter().map(|(l, _)| f(l)).sum::<f64>() / n as f64
            }
        };
        let totals: Vec<f64> = latencies.iter().map(|(_, t)| *t).collect();
        ThroughputReport {
            mode,
            frames: n,
            skipped,
            lesion_frames: lesion,
            wall_secs: wall,
            mean_fps: if n > 0 && wall > 0.0 {
                n as f64 / wall
            } else {
                0.0
            },
            p50_ms: percentile(&totals, 50.0),
            p95_ms: percentile(&totals, 95.0),
            stage_means: StageLatency {
                read: mean(&|l| l.read),
                preprocess: mean(&|l| l.preprocess),
                inference: mean(&|l| l.inference),
                postprocess: mean(&|l| l.postprocess),
            },
        }
    }

    pub fn to_machine_lines(&self) -> String {
        let mut out = String::new();
        let mode = match self.mode {
            StreamMode::Pipelined => "pipelined",
            StreamMode::Sequential => "sequential",
        };
        let _ = writeln!(out, "mode={mode}");
        let _ = writeln!(out, "frames={}", self.frames);
        let _ = writeln!(out, "skipped={}", self.skipped);
        let _ = writeln!(out, "lesion_frames={}", self.lesion_frames);
        let _ = writeln!(out, "wall_s={:.6}", self.wall_secs);
        let _ = writeln!(out, "mean_fps={:.3}", self.mean_fps);
        let _ = writeln!(out, "p50_ms={:.3}", self.p50_ms);
        let _ = writeln!(out, "p95_ms={:.3}", self.p95_ms);
        let s = &self.stage_means;
        let _ = writeln!(out, "mean_read_ms={:.3}", s.read);
        let _ = writeln!(out, "mean_preprocess_ms={:.3}", s.preprocess);
        let _ = writeln!(out, "mean_inference_ms={:.3}", s.inference);
        let _ = writeln!(out, "mean_postprocess_ms={:.3}", s.postprocess);
        out
    }

    pub fn to_table(&self) -> String {
        let s = &self.stage_means;
        format!(
            "{} frames ({} skipped, {} lesion) in {:.2} s: {:.2} FPS\n\
             latency p50 {:.1} ms, p95 {:.1} ms\n\
             stage means: read {:.1} ms, preprocess {:.1} ms, inference {:.1} ms, postprocess {:.1} ms\n",
            self.frames,
            self.skipped,
            self.lesion_frames,
            self.wall_secs,
            self.mean_fps,
            self.p50_ms,
            self.p95_ms,
            s.read,
            s.preprocess,
            s.inference,
            s.postprocess
        )
    }
}

/// Run every frame of `source` through `model` into `sink`.
pub fn run_stream<T: Scalar>(
    source: &mut dyn FrameSource,
    model: &EsfpNet<T>,
    sink: &mut dyn FrameSink,
    cfg: &StreamConfig,
) -> Result<ThroughputReport> {
    cfg.validate()?;
    match cfg.mode {
        StreamMode::Sequential => run_sequential(source, model, sink, cfg),
        StreamMode::Pipelined => run_pipelined(source, model, sink, cfg),
    }
}

fn run_sequential<T: Scalar>(
    source: &mut dyn FrameSource,
    model: &EsfpNet<T>,
    sink: &mut dyn FrameSink,
    cfg: &StreamConfig,
) -> Result<ThroughputReport> {
    let wall = Instant::now();
    let (mut lat, mut skipped, mut lesion) = (Vec::new(), 0, 0);
    loop {
        let t = Instant::now();
        let Some(item) = source.next_frame() else {
            break;
        };
        let read = ms(t);
        let Ok(frame) = item else {
            skipped += 1;
            continue;
        };
        let mut r = process_frame(model, &frame, lat.len(), cfg)?;
        r.latency.read = read;
        r.total_ms = ms(t);
        sink.accept(&frame, &r)?;
        lesion += usize::from(r.is_lesion());
        lat.push((r.latency, r.total_ms));
    }
    Ok(ThroughputReport::from_results(
        StreamMode::Sequential,
        &lat,
        lesion,
        skipped,
        wall.elapsed().as_secs_f64(),
    ))
}

struct InFlight<X> {
    index: usize,
    frame: RgbImage,
    started: Instant,
    latency: StageLatency,
    payload: X,
}

fn run_pipelined<T: Scalar>(
    source: &mut dyn FrameSource,
    model: &EsfpNet<T>,
    sink: &mut dyn FrameSink,
    cfg: &StreamConfig,
) -> Result<ThroughputReport> {
    let wall = Instant::now();
    let depth = cfg.queue_depth;
    let (to_pre, pre_rx) = sync_channel::<InFlight<()>>(depth);
    let (to_inf, inf_rx) = sync_channel::<InFlight<Tensor<T>>>(depth);
    let (to_post, post_rx) = sync_channel::<InFlight<Tensor<T>>>(depth);

    std::thread::scope(|scope| {
        let reader = scope.spawn(move || {
            let mut skipped = 0;
            let mut index = 0;
            loop {
                let started = Instant::now();
                let Some(item) = source.next_frame() else {
                    break;
                };
                let Ok(frame) = item else {
                    skipped += 1;
                    continue;
                };
                let latency = StageLatency {
                    read: ms(started),
                    ..Default::default()
                };
                let job = InFlight {
                    index,
                    frame,
                    started,
                    latency,
                    payload: (),
                };
                index += 1;
                if to_pre.send(job).is_err() {
                    break;
                }
            }
            skipped
        });
        let pre = scope.spawn(move || -> Result<()> {
            for mut job in pre_rx {
                let t = Instant::now();
                let input = preprocess_stage(&job.frame, model, cfg)?;
                job.latency.preprocess = ms(t);
                let next = InFlight {
                    index: job.index,
                    frame: job.frame,
                    started: job.started,
                    latency: job.latency,
                    payload: input,
                };
                if to_inf.send(next).is_err() {
                    break;
                }
            }
            Ok(())
        });
        let infer = scope.spawn(move || -> Result<()> {
            for mut job in inf_rx {
                let t = Instant::now();
                let logits = model.forward(&job.payload)?;
                job.latency.inference = ms(t);
                job.payload = logits;
                if to_post.send(job).is_err() {
                    break;
                }
            }
            Ok(())
        });

        // Postprocess and sink on this thread, in arrival (= input) order.
        let mut lat = Vec::new();
        let mut lesion = 0;
        let mut failure = None;
        for mut job in post_rx {
            let t = Instant::now();
            let (mask, class) = postprocess_stage(&job.payload, job.frame.dimensions(), cfg);
            job.latency.postprocess = ms(t);
            let r = FrameResult {
                index: job.index,
                mask,
                class,
                latency: job.latency,
                total_ms: ms(job.started),
            };
            if let Err(e) = sink.accept(&job.frame, &r) {
                failure = Some(e);
                break;
            }
            lesion += usize::from(r.is_lesion());
            lat.push((r.latency, r.total_ms));
        }
        // Dropping the receiver (end of loop) unblocks upstream senders.
        let skipped = reader.join().expect("reader thread");
        pre.join().expect("preprocess thread")?;
        infer.join().expect("inference thread")?;
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(ThroughputReport::from_results(
            StreamMode::Pipelined,
            &lat,
            lesion,
            skipped,
            wall.elapsed().as_secs_f64(),
        ))
    })
}
