//! Desk-scale crop classifier and the multi-crop test-time ensemble.
//!
//! The classifier is multinomial logistic regression over a fixed 280-dim
//! crop descriptor: a 16x16 grayscale downsample plus an 8-bin color
//! histogram per channel. Training draws fixed-size crops per image and per
//! epoch through either the uniform or the overlap-proportional sampler;
//! prediction averages probabilities over five crops and their mirrors from
//! the resized image, plus the same ten from the detection region when a
//! detection is available.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geometry::{ImageBuffer, Rect};
use crate::sampling::{build_crop_distribution, SamplerConfig};
use crate::{OcsError, Result};

/// Gray downsample grid side.
pub const GRAY_GRID: usize = 16;
/// Histogram bins per channel.
pub const HIST_BINS: usize = 8;
/// Total descriptor length: 16*16 gray cells + 3 channels * 8 bins.
pub const FEATURE_DIMS: usize = GRAY_GRID * GRAY_GRID + 3 * HIST_BINS;

/// Fixed-length crop descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct CropFeature(pub Vec<f64>);

/// Deterministic descriptor of an `expected x expected` crop: grayscale
/// block means scaled to [0, 1], then per-channel l1-normalized color
/// histograms (a grayscale crop repeats its histogram on all three
/// channels, so the histogram block always sums to 3).
pub fn extract_crop_feature(crop: &ImageBuffer, expected: usize) -> Result<CropFeature> {
    if crop.width() != expected || crop.height() != expected {
        return Err(OcsError::Geometry(format!(
            "crop is {}x{}, expected {expected}x{expected}",
            crop.width(),
            crop.height()
        )));
    }
    if expected < GRAY_GRID {
        return Err(OcsError::Geometry(format!(
            "crop side {expected} below descriptor grid {GRAY_GRID}"
        )));
    }
    let mut out = Vec::with_capacity(FEATURE_DIMS);
    let n = expected;
    let c = crop.channels();

    // 16x16 block means of the channel-mean gray image.
    for by in 0..GRAY_GRID {
        let y0 = by * n / GRAY_GRID;
        let y1 = (by + 1) * n / GRAY_GRID;
        for bx in 0..GRAY_GRID {
            let x0 = bx * n / GRAY_GRID;
            let x1 = (bx + 1) * n / GRAY_GRID;
            let mut acc = 0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    let gray = if c == 1 {
                        crop.sample(x, y, 0) as f64
                    } else {
                        (crop.sample(x, y, 0) as f64
                            + crop.sample(x, y, 1) as f64
                            + crop.sample(x, y, 2) as f64)
                            / 3.0
                    };
                    acc += gray;
                }
            }
            out.push(acc / ((y1 - y0) * (x1 - x0)) as f64 / 255.0);
        }
    }

    // Per-channel 8-bin histograms, each summing to 1.
    let total = (n * n) as f64;
    for ch in 0..3 {
        let mut hist = [0f64; HIST_BINS];
        let src = ch.min(c - 1);
        for y in 0..n {
            for x in 0..n {
                hist[(crop.sample(x, y, src) >> 5) as usize] += 1.0;
            }
        }
        out.extend(hist.iter().map(|&h| h / total));
    }
    debug_assert_eq!(out.len(), FEATURE_DIMS);
    Ok(CropFeature(out))
}

/// Which crop sampler drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Uniform,
    Multinomial,
}

impl std::str::FromStr for SamplerMode {
    type Err = OcsError;
    fn from_str(s: &str) -> Result<SamplerMode> {
        match s {
            "uniform" => Ok(SamplerMode::Uniform),
            "multinomial" => Ok(SamplerMode::Multinomial),
            other => Err(OcsError::Config(format!(
                "sampler must be uniform or multinomial, got {other:?}"
            ))),
        }
    }
}

/// Classifier training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: SamplerMode,
    pub crops_per_image: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub rng_seed: u64,
    /// Shorter image side after the training resize.
    pub resize_target: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: SamplerMode::Uniform,
            crops_per_image: 4,
            epochs: 8,
            learning_rate: 0.05,
            l2_penalty: 1e-5,
            rng_seed: 0,
            resize_target: 256,
        }
    }
}

/// Multinomial logistic model: one weight row per class over
/// `dims` features plus a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    classes: usize,
    dims: usize,
    /// Row-major `classes x (dims + 1)`, bias last.
    weights: Vec<f64>,
}

impl ClassifierModel {
    pub fn zeros(classes: usize, dims: usize) -> ClassifierModel {
        ClassifierModel {
            classes,
            dims,
            weights: vec![0.0; classes * (dims + 1)],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn dims(&self) -> usize {
        self.dims
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Class probabilities for one descriptor; sums to 1.
    pub fn predict_probs(&self, feature: &CropFeature) -> Vec<f64> {
        let stride = self.dims + 1;
        let mut logits: Vec<f64> = (0..self.classes)
            .map(|k| {
                let row = &self.weights[k * stride..(k + 1) * stride];
                let mut acc = row[self.dims];
                for (w, f) in row[..self.dims].iter().zip(&feature.0) {
                    acc += w * f;
                }
                acc
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        for l in logits.iter_mut() {
            *l /= sum;
        }
        logits
    }
}

/// One training observation.
struct Observation {
    feature: CropFeature,
    label: usize,
}

/// Train with crops drawn per image per epoch.
///
/// Each image is resized so its shorter side hits `cfg.resize_target`, the
/// detection (multinomial mode only) is mapped through the same transform,
/// and `crops_per_image` crops are drawn from the resulting distribution.
/// Each image's crops form one mini-batch gradient step on l2-regularized
/// cross-entropy. Deterministic for a fixed seed.
pub fn train_classifier(
    images: &[ImageBuffer],
    labels: &[usize],
    detections: &[Option<Rect>],
    num_classes: usize,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
) -> Result<(ClassifierModel, Vec<f64>)> {
    if images.is_empty() {
        return Err(OcsError::Config("no training images".into()));
    }
    if images.len() != labels.len() || images.len() != detections.len() {
        return Err(OcsError::Config("images, labels, detections must align".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(OcsError::Config(format!(
            "label {bad} outside model range {num_classes}"
        )));
    }
    if cfg.resize_target < sampler.crop_size {
        return Err(OcsError::Config(format!(
            "resize target {} below crop size {}",
            cfg.resize_target, sampler.crop_size
        )));
    }

    let mut model = ClassifierModel::zeros(num_classes, FEATURE_DIMS);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    const CHUNK: usize = 128;
    for _epoch in 0..cfg.epochs {
        // Visit images in a fresh seeded order each epoch.
        let mut order: Vec<usize> = (0..images.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }

        let mut loss_acc = 0.0;
        let mut loss_n = 0usize;
        for chunk in order.chunks(CHUNK) {
            // Resize in parallel, draw crop positions serially (one RNG
            // stream), extract descriptors in parallel, then apply the
            // gradient steps in order.
            let resized: Vec<ImageBuffer> = chunk
                .par_iter()
                .map(|&i| images[i].resize_shorter_side(cfg.resize_target))
                .collect();

            let mut planned: Vec<(usize, Vec<(Rect, bool)>)> = Vec::with_capacity(chunk.len());
            for (slot, &i) in chunk.iter().enumerate() {
                let img = &resized[slot];
                let det = match cfg.mode {
                    SamplerMode::Uniform => None,
                    SamplerMode::Multinomial => detections[i].map(|d| {
                        d.scale_between(
                            (images[i].width() as i32, images[i].height() as i32),
                            (img.width() as i32, img.height() as i32),
                        )
                    }),
                };
                let dist = build_crop_distribution(img.width(), img.height(), det, sampler)?;
                let samples =
                    dist.sample_training_crops(img, cfg.crops_per_image, sampler, i as u64, &mut rng)?;
                planned.push((
                    slot,
                    samples
                        .iter()
                        .map(|s| (s.rect(sampler.crop_size), s.flipped))
                        .collect(),
                ));
            }

            let batches: Vec<Vec<Observation>> = planned
                .par_iter()
                .map(|(slot, crops)| {
                    let img = &resized[*slot];
                    crops
                        .iter()
                        .map(|(rect, flipped)| {
                            let mut crop = img.crop(rect).expect("sampler stays in bounds");
                            if *flipped {
                                crop = crop.flip_horizontal();
                            }
                            Observation {
                                feature: extract_crop_feature(&crop, sampler.crop_size)
                                    .expect("crop size matches"),
                                label: labels[chunk[*slot]],
                            }
                        })
                        .collect()
                })
                .collect();

            for batch in &batches {
                if batch.is_empty() {
                    continue;
                }
                loss_acc += gradient_step(&mut model, batch, cfg.learning_rate, cfg.l2_penalty);
                loss_n += 1;
            }
        }
        epoch_losses.push(if loss_n > 0 { loss_acc / loss_n as f64 } else { 0.0 });
    }
    Ok((model, epoch_losses))
}

/// One mini-batch step; returns the batch's pre-update regularized loss.
fn gradient_step(
    model: &mut ClassifierModel,
    batch: &[Observation],
    lr: f64,
    l2: f64,
) -> f64 {
    let stride = model.dims + 1;
    let mut grad = vec![0.0f64; model.weights.len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for obs in batch {
        let probs = model.predict_probs(&obs.feature);
        loss -= (probs[obs.label].max(1e-300)).ln() * scale;
        for k in 0..model.classes {
            let err = (probs[k] - if k == obs.label { 1.0 } else { 0.0 }) * scale;
            let row = &mut grad[k * stride..(k + 1) * stride];
            for (g, f) in row[..model.dims].iter_mut().zip(&obs.feature.0) {
                *g += err * f;
            }
            row[model.dims] += err;
        }
    }
    // l2 on weights, not biases.
    for k in 0..model.classes {
        for i in 0..model.dims {
            let w = model.weights[k * stride + i];
            grad[k * stride + i] += l2 * w;
            loss += 0.5 * l2 * w * w;
        }
    }
    for (w, g) in model.weights.iter_mut().zip(&grad) {
        *w -= lr * g;
    }
    loss
}

/// The five standard crops of an image at `crop_size`: four corners plus
/// the center.
pub fn five_crop_rects(w: usize, h: usize, crop_size: usize) -> Vec<Rect> {
    let s = crop_size as i32;
    let mx = (w as i32 - s) / 2;
    let my = (h as i32 - s) / 2;
    [
        (0, 0),
        (w as i32 - s, 0),
        (0, h as i32 - s),
        (w as i32 - s, h as i32 - s),
        (mx, my),
    ]
    .iter()
    .map(|&(x, y)| Rect::from_origin_size(x, y, s, s).expect("crop fits"))
    .collect()
}

/// Enumerate the test-time ensemble crops: five crops plus mirrors from the
/// resized image, and the same ten from the detection region when present
/// (the detection is cropped out first, then resized). 20 crops with a
/// detection, 10 without.
pub fn enumerate_test_crops(
    img: &ImageBuffer,
    detection: Option<Rect>,
    crop_size: usize,
    resize_target: usize,
) -> Result<Vec<ImageBuffer>> {
    if resize_target < crop_size {
        return Err(OcsError::Config(format!(
            "resize target {resize_target} below crop size {crop_size}"
        )));
    }
    let mut sources = vec![img.resize_shorter_side(resize_target)];
    if let Some(det) = detection {
        if let Some(clipped) = det.clip_to_bounds(img.width() as i32, img.height() as i32) {
            sources.push(img.crop(&clipped)?.resize_shorter_side(resize_target));
        }
    }
    let mut crops = Vec::with_capacity(sources.len() * 10);
    for src in &sources {
        for rect in five_crop_rects(src.width(), src.height(), crop_size) {
            let crop = src.crop(&rect)?;
            crops.push(crop.flip_horizontal());
            crops.push(crop);
        }
    }
    Ok(crops)
}

/// Mean probability vector over a set of crops.
pub fn average_crop_probabilities(
    model: &ClassifierModel,
    crops: &[ImageBuffer],
    crop_size: usize,
) -> Result<Vec<f64>> {
    if crops.is_empty() {
        return Err(OcsError::Config("no crops to average".into()));
    }
    let mut acc = vec![0.0f64; model.classes()];
    for crop in crops {
        let probs = model.predict_probs(&extract_crop_feature(crop, crop_size)?);
        for (a, p) in acc.iter_mut().zip(&probs) {
            *a += p;
        }
    }
    let n = crops.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Test-time prediction: the crop-ensemble average probability vector.
pub fn predict_test_time(
    model: &ClassifierModel,
    img: &ImageBuffer,
    detection: Option<Rect>,
    crop_size: usize,
    resize_target: usize,
) -> Result<Vec<f64>> {
    let crops = enumerate_test_crops(img, detection, crop_size, resize_target)?;
    average_crop_probabilities(model, &crops, crop_size)
}

/// Fraction of samples whose true label ranks among the top `k`
/// probabilities; ties rank the lower class index first.
pub fn topk_accuracy(predictions: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(OcsError::Config("predictions and labels must align and be non-empty".into()));
    }
    if k < 1 || predictions.iter().any(|p| p.len() < k) {
        return Err(OcsError::Config(format!("k {k} exceeds prediction dimension")));
    }
    let mut hits = 0usize;
    for (probs, &label) in predictions.iter().zip(labels) {
        let py = probs[label];
        let rank = probs
            .iter()
            .enumerate()
            .filter(|&(c, &p)| p > py || (p == py && c < label))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.8e}")
}

/// `OCSCLS v1 <classes> <dims>` header plus one weight row per class.
pub fn save_classifier(model: &ClassifierModel, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "OCSCLS v1 {} {}", model.classes, model.dims).expect("string write");
    let stride = model.dims + 1;
    for k in 0..model.classes {
        let row: Vec<String> = model.weights[k * stride..(k + 1) * stride]
            .iter()
            .map(|&v| fmt_f64(v))
            .collect();
        writeln!(out, "{}", row.join(" ")).expect("string write");
    }
    fs::write(path, out).map_err(|e| OcsError::io(path.display().to_string(), e))
}

pub fn load_classifier(path: &Path) -> Result<ClassifierModel> {
    let text = fs::read_to_string(path).map_err(|e| OcsError::io(path.display().to_string(), e))?;
    let loc = path.display().to_string();
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| OcsError::format(&loc, 1, "empty file"))?;
    let head: Vec<&str> = header.split(' ').collect();
    if head.len() != 4 || head[0] != "OCSCLS" || head[1] != "v1" {
        return Err(OcsError::format(&loc, 1, format!("bad header {header:?}")));
    }
    let classes: usize = head[2]
        .parse()
        .map_err(|_| OcsError::format(&loc, 1, "bad class count"))?;
    let dims: usize = head[3]
        .parse()
        .map_err(|_| OcsError::format(&loc, 1, "bad dims"))?;
    let mut weights = Vec::with_capacity(classes * (dims + 1));
    for k in 0..classes {
        let line = lines
            .next()
            .ok_or_else(|| OcsError::format(&loc, k + 2, "missing weight row"))?;
        let row: Vec<f64> = line
            .split(' ')
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| OcsError::format(&loc, k + 2, format!("bad real {t:?}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != dims + 1 {
            return Err(OcsError::format(
                &loc,
                k + 2,
                format!("row needs {} values, has {}", dims + 1, row.len()),
            ));
        }
        weights.extend(row);
    }
    Ok(ClassifierModel {
        classes,
        dims,
        weights,
    })
}
