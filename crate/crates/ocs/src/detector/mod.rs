//! Scale-aware boosted cascade detection.
//!
//! Windows are never warped to a canonical resolution: feature regions are
//! defined relative to the detection window and scaled with it, and the
//! feature pool deliberately mixes scale-invariant signals (mean intensity)
//! with scale-sensitive ones (gradient energy, log window area). A boosted
//! cascade over these features can therefore express a preference for
//! object scale, which is what lets the per-image max response pick the
//! large salient object over small lookalikes.
//!
//! Detection output is a single max-response window per image: every
//! proposal is scored and the argmax wins, no non-maximum suppression.

mod regress;
mod train;

pub use regress::{
    fit_box_regressor, load_regressor, refine_detection, regression_features, save_regressor,
    BoxRegressor, RegressionContext, RegressionPair, REGRESSION_FEATURE_DIMS,
};
pub use train::{train_cascade, DetectorTrainConfig, RoundDiagnostics, TrainDiagnostics};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::geometry::{round_half_up, ImageBuffer, Rect};
use crate::{OcsError, Result};

/// The feature pool. Identifiers are stable across serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// Mean gray intensity over the regionlet, scaled to [0, 1].
    /// Scale-invariant.
    MeanIntensity,
    /// Mean absolute horizontal neighbor difference over the regionlet, in
    /// raw 8-bit units. Sensitive to texture and to scale.
    HorizontalEnergy,
    /// Vertical counterpart of `HorizontalEnergy`.
    VerticalEnergy,
    /// Natural log of the detection window's pixel area. Pure scale signal.
    LogArea,
}

impl FeatureKind {
    pub const COUNT: usize = 4;

    pub fn id(&self) -> usize {
        match self {
            FeatureKind::MeanIntensity => 0,
            FeatureKind::HorizontalEnergy => 1,
            FeatureKind::VerticalEnergy => 2,
            FeatureKind::LogArea => 3,
        }
    }

    pub fn from_id(id: usize) -> Result<FeatureKind> {
        Ok(match id {
            0 => FeatureKind::MeanIntensity,
            1 => FeatureKind::HorizontalEnergy,
            2 => FeatureKind::VerticalEnergy,
            3 => FeatureKind::LogArea,
            _ => return Err(OcsError::Config(format!("unknown feature id {id}"))),
        })
    }

    /// Human-readable pool description recorded in model files.
    pub fn pool_description() -> &'static str {
        "mean-intensity h-energy v-energy log-area"
    }
}

/// A feature region in window-relative coordinates, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionletSpec {
    pub rx0: f64,
    pub ry0: f64,
    pub rx1: f64,
    pub ry1: f64,
    pub feature: FeatureKind,
}

impl RegionletSpec {
    pub fn new(rx0: f64, ry0: f64, rx1: f64, ry1: f64, feature: FeatureKind) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&rx0)
            && (0.0..=1.0).contains(&ry0)
            && rx0 < rx1
            && ry0 < ry1
            && rx1 <= 1.0
            && ry1 <= 1.0;
        if !ok {
            return Err(OcsError::Config(format!(
                "bad relative rect ({rx0},{ry0},{rx1},{ry1})"
            )));
        }
        Ok(RegionletSpec {
            rx0,
            ry0,
            rx1,
            ry1,
            feature,
        })
    }

    /// Scale to absolute pixels inside `window`: coordinates are multiplied
    /// by the window size, rounded, offset by the window origin, and clamped
    /// so at least one pixel remains.
    pub fn absolute_rect(&self, window: &Rect) -> Rect {
        let w = window.width() as f64;
        let h = window.height() as f64;
        let mut x0 = window.x0() + round_half_up(self.rx0 * w);
        let mut y0 = window.y0() + round_half_up(self.ry0 * h);
        let mut x1 = window.x0() + round_half_up(self.rx1 * w);
        let mut y1 = window.y0() + round_half_up(self.ry1 * h);
        x0 = x0.clamp(window.x0(), window.x1() - 1);
        y0 = y0.clamp(window.y0(), window.y1() - 1);
        x1 = x1.clamp(x0 + 1, window.x1());
        y1 = y1.clamp(y0 + 1, window.y1());
        Rect::new(x0, y0, x1, y1).expect("clamped to >= 1px")
    }
}

/// Per-image tables for O(1) window feature evaluation: integral images of
/// gray intensity and of absolute horizontal/vertical neighbor differences.
pub struct FeatureContext {
    width: usize,
    height: usize,
    gray: IntegralPlane,
    hdiff: IntegralPlane,
    vdiff: IntegralPlane,
}

/// One summed-area table over a u8 plane. u32 cells hold sums for planes up
/// to 16.8 megapixels.
pub(crate) struct IntegralPlane {
    width: usize,
    height: usize,
    table: Vec<u32>,
}

impl IntegralPlane {
    pub(crate) fn build(
        width: usize,
        height: usize,
        value: impl Fn(usize, usize) -> u32,
    ) -> IntegralPlane {
        assert!(width * height <= 16_000_000, "plane too large for u32 sums");
        let stride = width + 1;
        let mut table = vec![0u32; stride * (height + 1)];
        for y in 0..height {
            let mut row = 0u32;
            for x in 0..width {
                row += value(x, y);
                table[(y + 1) * stride + (x + 1)] = table[y * stride + (x + 1)] + row;
            }
        }
        IntegralPlane {
            width,
            height,
            table,
        }
    }

    /// Sum over `[x0, x1) x [y0, y1)` intersected with the plane.
    #[inline]
    pub(crate) fn sum(&self, x0: i32, y0: i32, x1: i32, y1: i32) -> u64 {
        let x0 = x0.clamp(0, self.width as i32) as usize;
        let y0 = y0.clamp(0, self.height as i32) as usize;
        let x1 = x1.clamp(x0 as i32, self.width as i32) as usize;
        let y1 = y1.clamp(y0 as i32, self.height as i32) as usize;
        let s = self.width + 1;
        (self.table[y1 * s + x1] + self.table[y0 * s + x0]) as u64
            - self.table[y0 * s + x1] as u64
            - self.table[y1 * s + x0] as u64
    }

    /// Like `sum` but without clamping; callers must stay inside the plane.
    #[inline(always)]
    fn sum_unchecked(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> u64 {
        debug_assert!(x0 <= x1 && x1 <= self.width && y0 <= y1 && y1 <= self.height);
        let s = self.width + 1;
        unsafe {
            (*self.table.get_unchecked(y1 * s + x1) + *self.table.get_unchecked(y0 * s + x0))
                as u64
                - *self.table.get_unchecked(y0 * s + x1) as u64
                - *self.table.get_unchecked(y1 * s + x0) as u64
        }
    }
}

impl FeatureContext {
    pub fn new(img: &ImageBuffer) -> FeatureContext {
        let gray = img.to_gray();
        let (w, h) = (gray.width(), gray.height());
        let g = gray.data();
        let gray_plane = IntegralPlane::build(w, h, |x, y| g[y * w + x] as u32);
        let hdiff = IntegralPlane::build(w.saturating_sub(1), h, |x, y| {
            (g[y * w + x + 1] as i32 - g[y * w + x] as i32).unsigned_abs()
        });
        let vdiff = IntegralPlane::build(w, h.saturating_sub(1), |x, y| {
            (g[(y + 1) * w + x] as i32 - g[y * w + x] as i32).unsigned_abs()
        });
        FeatureContext {
            width: w,
            height: h,
            gray: gray_plane,
            hdiff,
            vdiff,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }

    /// Mean gray value over `r`, in [0, 255].
    pub fn mean_gray(&self, r: &Rect) -> f64 {
        self.gray.sum(r.x0(), r.y0(), r.x1(), r.y1()) as f64 / r.area() as f64
    }

    /// Sum of |horizontal difference| over pixel pairs inside `r`.
    pub fn hdiff_sum(&self, r: &Rect) -> u64 {
        self.hdiff.sum(r.x0(), r.y0(), r.x1() - 1, r.y1())
    }

    /// Sum of |vertical difference| over pixel pairs inside `r`.
    pub fn vdiff_sum(&self, r: &Rect) -> u64 {
        self.vdiff.sum(r.x0(), r.y0(), r.x1(), r.y1() - 1)
    }

    /// Evaluate one regionlet feature for a detection `window`, which must
    /// lie inside the image.
    #[inline]
    pub fn extract(&self, window: &Rect, spec: &RegionletSpec) -> f64 {
        if spec.feature == FeatureKind::LogArea {
            return (window.area() as f64).ln();
        }
        let r = spec.absolute_rect(window);
        let (x0, y0, x1, y1) = (
            r.x0() as usize,
            r.y0() as usize,
            r.x1() as usize,
            r.y1() as usize,
        );
        match spec.feature {
            FeatureKind::MeanIntensity => {
                let area = ((x1 - x0) * (y1 - y0)) as f64;
                self.gray.sum_unchecked(x0, y0, x1, y1) as f64 / area / 255.0
            }
            FeatureKind::HorizontalEnergy => {
                let pairs = (x1 - x0 - 1) * (y1 - y0);
                if pairs == 0 {
                    0.0
                } else {
                    self.hdiff.sum_unchecked(x0, y0, x1 - 1, y1) as f64 / pairs as f64
                }
            }
            FeatureKind::VerticalEnergy => {
                let pairs = (x1 - x0) * (y1 - y0 - 1);
                if pairs == 0 {
                    0.0
                } else {
                    self.vdiff.sum_unchecked(x0, y0, x1, y1 - 1) as f64 / pairs as f64
                }
            }
            FeatureKind::LogArea => unreachable!("handled above"),
        }
    }
}

/// A two-output decision stump over the max response of 1–3 regionlets.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakClassifier {
    pub regionlets: Vec<RegionletSpec>,
    pub threshold: f64,
    pub alpha_plus: f64,
    pub alpha_minus: f64,
}

impl WeakClassifier {
    /// Feature value: max over the regionlet set.
    pub fn feature(&self, ctx: &FeatureContext, window: &Rect) -> f64 {
        self.regionlets
            .iter()
            .map(|s| ctx.extract(window, s))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Stump output: `alpha_plus` when the feature exceeds the threshold,
    /// `alpha_minus` otherwise.
    pub fn output(&self, ctx: &FeatureContext, window: &Rect) -> f64 {
        if self.feature(ctx, window) > self.threshold {
            self.alpha_plus
        } else {
            self.alpha_minus
        }
    }
}

/// One cascade stage: a run of weak classifiers plus the running-score
/// threshold below which a window is rejected at the end of the stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeStage {
    pub weak: Vec<WeakClassifier>,
    pub reject_threshold: f64,
}

/// Staged additive classifier: the score of a window is the sum of all weak
/// classifier outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub stages: Vec<CascadeStage>,
    /// Feature pool description, recorded for provenance.
    pub pool: String,
    /// Free-form training metadata.
    pub metadata: String,
}

/// One detection: the max-response window and its score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub rect: Rect,
    pub score: f64,
}

impl CascadeModel {
    pub fn total_weak_count(&self) -> usize {
        self.stages.iter().map(|s| s.weak.len()).sum()
    }

    /// Full additive score, no early rejection.
    pub fn score_full(&self, ctx: &FeatureContext, window: &Rect) -> f64 {
        self.stages
            .iter()
            .flat_map(|s| &s.weak)
            .map(|w| w.output(ctx, window))
            .sum()
    }

    /// Staged score with early rejection: stops at the end of the first
    /// stage whose running total falls below its threshold and reports that
    /// stage index. The returned score is the running total so far.
    pub fn score_window(&self, ctx: &FeatureContext, window: &Rect) -> (f64, Option<usize>) {
        let mut total = 0.0;
        for (i, stage) in self.stages.iter().enumerate() {
            for w in &stage.weak {
                total += w.output(ctx, window);
            }
            if total < stage.reject_threshold {
                return (total, Some(i));
            }
        }
        (total, None)
    }
}

/// Multi-scale grid proposal generation.
#[derive(Debug, Clone)]
pub struct ProposalConfig {
    /// Window side as a fraction of the shorter image side.
    pub scales: Vec<f64>,
    /// Stride as a fraction of the window side.
    pub stride_fraction: f64,
    /// Windows narrower or shorter than this are dropped.
    pub min_window: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            scales: vec![1.0, 0.8, 0.64, 0.512, 0.41],
            stride_fraction: 0.25,
            min_window: 16,
        }
    }
}

/// Grid positions along one axis: multiples of `stride` plus the flush-end
/// position, so both edges are always covered.
fn axis_positions(extent: i32, side: i32, stride: i32) -> Vec<i32> {
    let max_pos = extent - side;
    let mut v = Vec::new();
    let mut p = 0;
    while p < max_pos {
        v.push(p);
        p += stride;
    }
    v.push(max_pos);
    v
}

/// Multi-scale sliding-window proposals: square, 4:3, and 3:4 windows at
/// each configured scale, stride-swept and clipped to bounds, deduplicated,
/// with the full-image window always present. Images smaller than the
/// minimum window yield an empty sequence.
pub fn generate_proposals(img: &ImageBuffer, cfg: &ProposalConfig) -> Vec<Rect> {
    let (w, h) = (img.width() as i32, img.height() as i32);
    let min_w = cfg.min_window as i32;
    if w < min_w || h < min_w {
        return Vec::new();
    }
    let base = w.min(h);
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut push = |r: Rect, out: &mut Vec<Rect>| {
        if seen.insert((r.x0(), r.y0(), r.x1(), r.y1())) {
            out.push(r);
        }
    };

    push(Rect::new(0, 0, w, h).expect("image rect"), &mut out);

    for &scale in &cfg.scales {
        let side = round_half_up(scale * base as f64);
        let narrow = round_half_up(side as f64 * 0.75);
        for (ww, wh) in [(side, side), (side, narrow), (narrow, side)] {
            if ww < min_w || wh < min_w || ww > w || wh > h {
                continue;
            }
            let sx = round_half_up(cfg.stride_fraction * ww as f64).max(1);
            let sy = round_half_up(cfg.stride_fraction * wh as f64).max(1);
            for y in axis_positions(h, wh, sy) {
                for x in axis_positions(w, ww, sx) {
                    push(
                        Rect::from_origin_size(x, y, ww, wh).expect("positive size"),
                        &mut out,
                    );
                }
            }
        }
    }
    out
}

/// Positive/negative/discarded proposal split against the ground truth.
#[derive(Debug, Clone, Default)]
pub struct SamplePartition {
    pub positives: Vec<Rect>,
    pub negatives: Vec<Rect>,
    pub discarded: Vec<Rect>,
}

/// Partition proposals by IoU with the ground truth: above 0.70 is
/// positive, below 0.30 is negative, in between is discarded.
pub fn partition_training_samples(proposals: &[Rect], gt: &Rect) -> SamplePartition {
    let mut p = SamplePartition::default();
    for r in proposals {
        let iou = r.iou(gt);
        if iou > 0.70 {
            p.positives.push(*r);
        } else if iou < 0.30 {
            p.negatives.push(*r);
        } else {
            p.discarded.push(*r);
        }
    }
    p
}

/// Score every proposal and return the single argmax, ties broken by the
/// lowest proposal index. With `cascaded` set, the staged fast path with
/// early rejection ranks windows by their (possibly truncated) running
/// scores; by default every proposal gets its full score for ranking
/// fidelity.
pub fn detect_max(
    model: &CascadeModel,
    ctx: &FeatureContext,
    proposals: &[Rect],
    cascaded: bool,
) -> Result<Detection> {
    if proposals.is_empty() {
        return Err(OcsError::Config("no proposals".into()));
    }
    let mut best_idx = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, r) in proposals.iter().enumerate() {
        let score = if cascaded {
            model.score_window(ctx, r).0
        } else {
            model.score_full(ctx, r)
        };
        if score > best_score {
            best_score = score;
            best_idx = i;
        }
    }
    Ok(Detection {
        rect: proposals[best_idx],
        score: best_score,
    })
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.8e}")
}

/// Write per-image detections: `OCSDET v1` header, then one line per image
/// of `<image-path>\t<x0> <y0> <x1> <y1>\t<score>`.
pub fn save_detections(entries: &[(String, Detection)], path: &Path) -> Result<()> {
    let mut out = String::from("OCSDET v1\n");
    for (image_path, det) in entries {
        if image_path.contains(['\t', '\n']) {
            return Err(OcsError::Config(format!(
                "image path {image_path:?} contains tab or newline"
            )));
        }
        writeln!(
            out,
            "{}\t{} {} {} {}\t{}",
            image_path,
            det.rect.x0(),
            det.rect.y0(),
            det.rect.x1(),
            det.rect.y1(),
            fmt_f64(det.score)
        )
        .expect("string write");
    }
    fs::write(path, out).map_err(|e| OcsError::io(path.display().to_string(), e))
}

/// Parse a detection file written by [`save_detections`].
pub fn load_detections(path: &Path) -> Result<Vec<(String, Detection)>> {
    let text = fs::read_to_string(path).map_err(|e| OcsError::io(path.display().to_string(), e))?;
    let loc = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| OcsError::format(&loc, 1, "empty file"))?;
    if header != "OCSDET v1" {
        return Err(OcsError::format(&loc, 1, format!("bad header {header:?}")));
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(OcsError::format(&loc, line_no, "want 3 tab-separated fields"));
        }
        let coords: Vec<i32> = fields[1]
            .split(' ')
            .map(|t| {
                t.parse::<i32>()
                    .map_err(|_| OcsError::format(&loc, line_no, format!("bad coordinate {t:?}")))
            })
            .collect::<Result<_>>()?;
        if coords.len() != 4 {
            return Err(OcsError::format(&loc, line_no, "want 4 coordinates"));
        }
        let rect = Rect::new(coords[0], coords[1], coords[2], coords[3])
            .map_err(|e| OcsError::format(&loc, line_no, e.to_string()))?;
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| OcsError::format(&loc, line_no, format!("bad score {:?}", fields[2])))?;
        out.push((fields[0].to_string(), Detection { rect, score }));
    }
    Ok(out)
}

/// Serialize to the versioned line format: a count header, `# pool` and
/// `# meta` provenance lines, one `stage` line per stage, then one `weak`
/// line per weak classifier with 9-significant-digit reals. Saving a loaded
/// model reproduces the file byte for byte.
pub fn save_cascade(model: &CascadeModel, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(
        out,
        "OCSCASCADE v1 {} {}",
        model.stages.len(),
        model.total_weak_count()
    )
    .expect("string write");
    writeln!(out, "# pool {}", model.pool).expect("string write");
    writeln!(out, "# meta {}", model.metadata).expect("string write");
    for (i, stage) in model.stages.iter().enumerate() {
        writeln!(
            out,
            "stage {} {} {}",
            i,
            stage.weak.len(),
            fmt_f64(stage.reject_threshold)
        )
        .expect("string write");
    }
    for (i, stage) in model.stages.iter().enumerate() {
        for w in &stage.weak {
            write!(out, "weak {} {}", i, w.regionlets.len()).expect("string write");
            for r in &w.regionlets {
                write!(
                    out,
                    " {} {} {} {} {}",
                    fmt_f64(r.rx0),
                    fmt_f64(r.ry0),
                    fmt_f64(r.rx1),
                    fmt_f64(r.ry1),
                    r.feature.id()
                )
                .expect("string write");
            }
            writeln!(
                out,
                " {} {} {}",
                fmt_f64(w.threshold),
                fmt_f64(w.alpha_plus),
                fmt_f64(w.alpha_minus)
            )
            .expect("string write");
        }
    }
    fs::write(path, out).map_err(|e| OcsError::io(path.display().to_string(), e))
}

/// Parse a model file written by [`save_cascade`].
pub fn load_cascade(path: &Path) -> Result<CascadeModel> {
    let text = fs::read_to_string(path).map_err(|e| OcsError::io(path.display().to_string(), e))?;
    let loc = path.display().to_string();
    let err = |line: usize, msg: String| OcsError::format(&loc, line, msg);

    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let head: Vec<&str> = header.split(' ').collect();
    if head.len() != 4 || head[0] != "OCSCASCADE" || head[1] != "v1" {
        return Err(err(1, format!("bad header {header:?}")));
    }
    let num_stages: usize = head[2].parse().map_err(|_| err(1, "bad stage count".into()))?;
    let num_weak: usize = head[3].parse().map_err(|_| err(1, "bad weak count".into()))?;

    let mut pool = String::new();
    let mut metadata = String::new();
    let mut stages: Vec<CascadeStage> = Vec::new();

    for (idx, line) in lines {
        let line_no = idx + 1;
        if let Some(rest) = line.strip_prefix("# pool ") {
            pool = rest.to_string();
        } else if line == "# pool" {
            pool.clear();
        } else if let Some(rest) = line.strip_prefix("# meta ") {
            metadata = rest.to_string();
        } else if line == "# meta" {
            metadata.clear();
        } else if let Some(rest) = line.strip_prefix("stage ") {
            let t: Vec<&str> = rest.split(' ').collect();
            if t.len() != 3 {
                return Err(err(line_no, "stage line needs 3 fields".into()));
            }
            let idx: usize = t[0].parse().map_err(|_| err(line_no, "bad stage index".into()))?;
            if idx != stages.len() {
                return Err(err(line_no, format!("stage {idx} out of order")));
            }
            let _count: usize = t[1].parse().map_err(|_| err(line_no, "bad weak count".into()))?;
            let thr: f64 = t[2].parse().map_err(|_| err(line_no, "bad threshold".into()))?;
            stages.push(CascadeStage {
                weak: Vec::new(),
                reject_threshold: thr,
            });
        } else if let Some(rest) = line.strip_prefix("weak ") {
            let t: Vec<&str> = rest.split(' ').collect();
            if t.len() < 2 {
                return Err(err(line_no, "truncated weak line".into()));
            }
            let stage_idx: usize =
                t[0].parse().map_err(|_| err(line_no, "bad stage index".into()))?;
            let n_reg: usize =
                t[1].parse().map_err(|_| err(line_no, "bad regionlet count".into()))?;
            if t.len() != 2 + 5 * n_reg + 3 {
                return Err(err(
                    line_no,
                    format!("weak line with {n_reg} regionlets needs {} fields", 2 + 5 * n_reg + 3),
                ));
            }
            let mut regionlets = Vec::with_capacity(n_reg);
            for k in 0..n_reg {
                let base = 2 + 5 * k;
                let f = |j: usize| -> Result<f64> {
                    t[base + j]
                        .parse()
                        .map_err(|_| err(line_no, format!("bad real {:?}", t[base + j])))
                };
                let fid: usize = t[base + 4]
                    .parse()
                    .map_err(|_| err(line_no, "bad feature id".into()))?;
                regionlets.push(RegionletSpec::new(
                    f(0)?,
                    f(1)?,
                    f(2)?,
                    f(3)?,
                    FeatureKind::from_id(fid)?,
                )?);
            }
            let tail = 2 + 5 * n_reg;
            let parse_real = |j: usize| -> Result<f64> {
                t[tail + j]
                    .parse()
                    .map_err(|_| err(line_no, format!("bad real {:?}", t[tail + j])))
            };
            let weak = WeakClassifier {
                regionlets,
                threshold: parse_real(0)?,
                alpha_plus: parse_real(1)?,
                alpha_minus: parse_real(2)?,
            };
            let stage = stages
                .get_mut(stage_idx)
                .ok_or_else(|| err(line_no, format!("weak references unknown stage {stage_idx}")))?;
            stage.weak.push(weak);
        } else if !line.is_empty() {
            return Err(err(line_no, format!("unrecognized line {line:?}")));
        }
    }

    if stages.len() != num_stages {
        return Err(err(1, format!("header says {num_stages} stages, file has {}", stages.len())));
    }
    let model = CascadeModel {
        stages,
        pool,
        metadata,
    };
    if model.total_weak_count() != num_weak {
        return Err(err(
            1,
            format!("header says {num_weak} weak classifiers, file has {}", model.total_weak_count()),
        ));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rect(x0: i32, y0: i32, x1: i32, y1: i32) -> Rect {
        Rect::new(x0, y0, x1, y1).unwrap()
    }

    fn constant_image(w: usize, h: usize, v: u8) -> ImageBuffer {
        ImageBuffer::from_vec(w, h, 1, vec![v; w * h]).unwrap()
    }

    fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = StdRng::seed_from_u64(seed);
        ImageBuffer::from_vec(w, h, 1, (0..w * h).map(|_| rng.random()).collect()).unwrap()
    }

    fn spec(rx0: f64, ry0: f64, rx1: f64, ry1: f64, f: FeatureKind) -> RegionletSpec {
        RegionletSpec::new(rx0, ry0, rx1, ry1, f).unwrap()
    }

    #[test]
    fn constant_image_features() {
        let img = constant_image(120, 80, 137);
        let ctx = FeatureContext::new(&img);
        for window in [rect(0, 0, 120, 80), rect(10, 5, 40, 30), rect(100, 60, 110, 75)] {
            let s = spec(0.1, 0.1, 0.9, 0.9, FeatureKind::MeanIntensity);
            assert!((ctx.extract(&window, &s) - 137.0 / 255.0).abs() < 1e-12);
            let s = spec(0.0, 0.0, 1.0, 1.0, FeatureKind::HorizontalEnergy);
            assert_eq!(ctx.extract(&window, &s), 0.0);
            let s = spec(0.0, 0.0, 1.0, 1.0, FeatureKind::VerticalEnergy);
            assert_eq!(ctx.extract(&window, &s), 0.0);
        }
    }

    #[test]
    fn log_area_feature() {
        let img = constant_image(200, 200, 10);
        let ctx = FeatureContext::new(&img);
        let s = spec(0.0, 0.0, 1.0, 1.0, FeatureKind::LogArea);
        let window = rect(50, 50, 150, 100); // 100 x 50
        assert!((ctx.extract(&window, &s) - 5000f64.ln()).abs() < 1e-12);
        assert!((5000f64.ln() - 8.517).abs() < 1e-3);
    }

    #[test]
    fn gradient_features_match_direct_sums() {
        let img = random_image(64, 48, 21);
        let ctx = FeatureContext::new(&img);
        let mut rng = StdRng::seed_from_u64(22);
        for _ in 0..100 {
            let x0 = rng.random_range(0..60);
            let y0 = rng.random_range(0..44);
            let r = rect(
                x0,
                y0,
                rng.random_range(x0 + 2..=64),
                rng.random_range(y0 + 2..=48),
            );
            let mut hsum = 0u64;
            let mut vsum = 0u64;
            for y in r.y0()..r.y1() {
                for x in r.x0()..r.x1() - 1 {
                    let a = img.sample(x as usize, y as usize, 0) as i64;
                    let b = img.sample(x as usize + 1, y as usize, 0) as i64;
                    hsum += (a - b).unsigned_abs();
                }
            }
            for y in r.y0()..r.y1() - 1 {
                for x in r.x0()..r.x1() {
                    let a = img.sample(x as usize, y as usize, 0) as i64;
                    let b = img.sample(x as usize, y as usize + 1, 0) as i64;
                    vsum += (a - b).unsigned_abs();
                }
            }
            assert_eq!(ctx.hdiff_sum(&r), hsum);
            assert_eq!(ctx.vdiff_sum(&r), vsum);
        }
    }

    #[test]
    fn relative_coordinates_scale_with_window() {
        // Nearest-neighbor upscale by k: feature 0 unchanged, feature 3
        // shifts by 2 ln k.
        let k = 3usize;
        let img = random_image(40, 30, 5);
        let mut big = ImageBuffer::new(40 * k, 30 * k, 1).unwrap();
        for y in 0..30 * k {
            for x in 0..40 * k {
                big.set_sample(x, y, 0, img.sample(x / k, y / k, 0));
            }
        }
        let ctx_small = FeatureContext::new(&img);
        let ctx_big = FeatureContext::new(&big);
        let window_small = rect(4, 6, 24, 21);
        let window_big = rect(4 * k as i32, 6 * k as i32, 24 * k as i32, 21 * k as i32);

        let s = spec(0.2, 0.1, 0.8, 0.9, FeatureKind::MeanIntensity);
        let a = ctx_small.extract(&window_small, &s);
        let b = ctx_big.extract(&window_big, &s);
        assert!((a - b).abs() < 0.02, "mean intensity {a} vs {b}");

        let s = spec(0.0, 0.0, 1.0, 1.0, FeatureKind::LogArea);
        let a = ctx_small.extract(&window_small, &s);
        let b = ctx_big.extract(&window_big, &s);
        assert!((b - a - 2.0 * (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn stump_semantics_by_window_size() {
        let img = constant_image(200, 200, 99);
        let ctx = FeatureContext::new(&img);
        let w = WeakClassifier {
            regionlets: vec![spec(0.0, 0.0, 1.0, 1.0, FeatureKind::LogArea)],
            threshold: (5000f64.ln() + 100f64.ln()) / 2.0,
            alpha_plus: 0.7,
            alpha_minus: -0.4,
        };
        assert_eq!(w.output(&ctx, &rect(0, 0, 100, 50)), 0.7);
        assert_eq!(w.output(&ctx, &rect(0, 0, 10, 10)), -0.4);
    }

    #[test]
    fn empty_model_scores_zero() {
        let img = constant_image(32, 32, 0);
        let ctx = FeatureContext::new(&img);
        let model = CascadeModel {
            stages: vec![],
            pool: String::new(),
            metadata: String::new(),
        };
        let (score, rejected) = model.score_window(&ctx, &rect(0, 0, 32, 32));
        assert_eq!(score, 0.0);
        assert_eq!(rejected, None);
        assert_eq!(model.score_full(&ctx, &rect(0, 0, 32, 32)), 0.0);
    }

    fn random_model(rng: &mut StdRng, stages: usize, weak_per_stage: usize) -> CascadeModel {
        let mut model = CascadeModel {
            stages: Vec::new(),
            pool: FeatureKind::pool_description().to_string(),
            metadata: "test".into(),
        };
        for _ in 0..stages {
            let mut weak = Vec::new();
            for _ in 0..weak_per_stage {
                let n = rng.random_range(1..=3);
                let regionlets = (0..n)
                    .map(|_| {
                        let rx0: f64 = rng.random_range(0.0..0.8);
                        let ry0: f64 = rng.random_range(0.0..0.8);
                        spec(
                            rx0,
                            ry0,
                            rng.random_range(rx0 + 0.125..=1.0),
                            rng.random_range(ry0 + 0.125..=1.0),
                            FeatureKind::from_id(rng.random_range(0..FeatureKind::COUNT)).unwrap(),
                        )
                    })
                    .collect();
                weak.push(WeakClassifier {
                    regionlets,
                    threshold: rng.random_range(-1.0..9.0),
                    alpha_plus: rng.random_range(0.01..1.0),
                    alpha_minus: -rng.random_range(0.01..1.0),
                });
            }
            model.stages.push(CascadeStage {
                weak,
                reject_threshold: rng.random_range(-10.0..-5.0),
            });
        }
        model
    }

    #[test]
    fn score_equals_sum_of_weak_outputs() {
        let mut rng = StdRng::seed_from_u64(31);
        let img = random_image(80, 60, 32);
        let ctx = FeatureContext::new(&img);
        let model = random_model(&mut rng, 3, 7);
        for _ in 0..100 {
            let x0 = rng.random_range(0..70);
            let y0 = rng.random_range(0..50);
            let window = rect(
                x0,
                y0,
                rng.random_range(x0 + 8..=80),
                rng.random_range(y0 + 8..=60),
            );
            let expected: f64 = model
                .stages
                .iter()
                .flat_map(|s| &s.weak)
                .map(|w| w.output(&ctx, &window))
                .sum();
            assert!((model.score_full(&ctx, &window) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rejection_reports_stage() {
        let img = constant_image(40, 40, 0);
        let ctx = FeatureContext::new(&img);
        // Single stump that always outputs -1, stage threshold 0 => reject at stage 0.
        let model = CascadeModel {
            stages: vec![CascadeStage {
                weak: vec![WeakClassifier {
                    regionlets: vec![spec(0.0, 0.0, 1.0, 1.0, FeatureKind::MeanIntensity)],
                    threshold: 0.5,
                    alpha_plus: 1.0,
                    alpha_minus: -1.0,
                }],
                reject_threshold: 0.0,
            }],
            pool: String::new(),
            metadata: String::new(),
        };
        let (score, rejected) = model.score_window(&ctx, &rect(0, 0, 40, 40));
        assert_eq!(score, -1.0);
        assert_eq!(rejected, Some(0));
    }

    #[test]
    fn proposals_single_scale_square_covers_image() {
        let img = constant_image(64, 64, 0);
        let cfg = ProposalConfig {
            scales: vec![1.0],
            ..ProposalConfig::default()
        };
        let props = generate_proposals(&img, &cfg);
        // full-image window, the 1.0-scale square coincides with it, plus
        // the two 3:4 variants strided across the long axis
        assert!(props.contains(&rect(0, 0, 64, 64)));
        assert_eq!(props[0], rect(0, 0, 64, 64));
        for p in &props {
            assert!(img.full_rect().contains_rect(p));
        }
    }

    #[test]
    fn proposals_all_in_bounds_and_deduplicated() {
        let img = random_image(130, 100, 8);
        let props = generate_proposals(&img, &ProposalConfig::default());
        let mut seen = std::collections::HashSet::new();
        for p in &props {
            assert!(img.full_rect().contains_rect(p));
            assert!(p.width() >= 16 && p.height() >= 16);
            assert!(seen.insert((p.x0(), p.y0(), p.x1(), p.y1())), "duplicate {p:?}");
        }
        assert!(props.len() > 50);
    }

    #[test]
    fn proposals_small_image_empty() {
        let img = constant_image(12, 40, 0);
        assert!(generate_proposals(&img, &ProposalConfig::default()).is_empty());
    }

    /// Independent recomputation of the default grid size for 256x256.
    #[test]
    fn proposal_count_closed_form() {
        let img = constant_image(256, 256, 0);
        let cfg = ProposalConfig::default();
        let props = generate_proposals(&img, &cfg);

        let count_axis = |extent: i64, side: i64, stride: i64| -> i64 {
            let max_pos = extent - side;
            if max_pos == 0 {
                1
            } else {
                // positions 0, s, 2s, ... strictly below max_pos, then max_pos
                (max_pos + stride - 1) / stride + 1
            }
        };
        let round = |v: f64| (v + 0.5).floor() as i64;
        let mut expected = 0i64;
        let mut shapes = std::collections::HashSet::new();
        shapes.insert((256i64, 256i64, 0i64, 0i64)); // full-image window
        expected += 1;
        for scale in [1.0, 0.8, 0.64, 0.512, 0.41] {
            let side = round(scale * 256.0);
            let narrow = round(side as f64 * 0.75);
            for (ww, wh) in [(side, side), (side, narrow), (narrow, side)] {
                if ww < 16 || wh < 16 || ww > 256 || wh > 256 {
                    continue;
                }
                let sx = round(0.25 * ww as f64).max(1);
                let sy = round(0.25 * wh as f64).max(1);
                let nx = count_axis(256, ww, sx);
                let ny = count_axis(256, wh, sy);
                // the only duplicate in a square image is the 1.0-scale
                // square, which equals the full-image window at (0,0)
                for ix in 0..nx {
                    for iy in 0..ny {
                        let x = if ix == nx - 1 { 256 - ww } else { ix * sx };
                        let y = if iy == ny - 1 { 256 - wh } else { iy * sy };
                        if shapes.insert((ww, wh, x, y)) {
                            expected += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(props.len() as i64, expected);
    }

    #[test]
    fn partition_thresholds() {
        let gt = rect(0, 0, 100, 100);
        // iou = 5000/10000 = 0.5 -> discarded
        let mid = rect(0, 0, 50, 100);
        // iou = 0.75 -> positive
        let pos = rect(0, 0, 100, 75);
        let pos_iou = pos.iou(&gt);
        assert!((pos_iou - 0.75).abs() < 1e-12);
        // iou = 0.2 -> negative
        let neg = rect(0, 0, 100, 20);
        assert!((neg.iou(&gt) - 0.2).abs() < 1e-12);
        let part = partition_training_samples(&[mid, pos, neg], &gt);
        assert_eq!(part.positives, vec![pos]);
        assert_eq!(part.negatives, vec![neg]);
        assert_eq!(part.discarded, vec![mid]);
    }

    #[test]
    fn detect_max_brute_force_and_ties() {
        let mut rng = StdRng::seed_from_u64(44);
        for trial in 0..50 {
            let img = random_image(60, 60, 100 + trial);
            let ctx = FeatureContext::new(&img);
            let model = random_model(&mut rng, 2, 5);
            let proposals: Vec<Rect> = (0..40)
                .map(|_| {
                    let x0 = rng.random_range(0..40);
                    let y0 = rng.random_range(0..40);
                    rect(
                        x0,
                        y0,
                        rng.random_range(x0 + 10..=60),
                        rng.random_range(y0 + 10..=60),
                    )
                })
                .collect();
            let det = detect_max(&model, &ctx, &proposals, false).unwrap();
            let best = proposals
                .iter()
                .map(|r| model.score_full(&ctx, r))
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(det.score, best);
        }

        // Tie break: two identical proposals, first index wins.
        let img = constant_image(30, 30, 50);
        let ctx = FeatureContext::new(&img);
        let model = CascadeModel {
            stages: vec![],
            pool: String::new(),
            metadata: String::new(),
        };
        let a = rect(0, 0, 20, 20);
        let b = rect(5, 5, 25, 25);
        let det = detect_max(&model, &ctx, &[a, b], false).unwrap();
        assert_eq!(det.rect, a);

        assert!(detect_max(&model, &ctx, &[], false).is_err());
    }

    #[test]
    fn detect_max_invariant_under_positive_scaling() {
        let mut rng = StdRng::seed_from_u64(55);
        let img = random_image(64, 64, 9);
        let ctx = FeatureContext::new(&img);
        let model = random_model(&mut rng, 2, 6);
        let mut scaled = model.clone();
        for s in &mut scaled.stages {
            for w in &mut s.weak {
                w.alpha_plus *= 3.5;
                w.alpha_minus *= 3.5;
            }
        }
        let proposals: Vec<Rect> = (0..30)
            .map(|_| {
                let x0 = rng.random_range(0..40);
                let y0 = rng.random_range(0..40);
                rect(x0, y0, x0 + rng.random_range(12..=24), y0 + rng.random_range(12..=24))
            })
            .collect();
        let a = detect_max(&model, &ctx, &proposals, false).unwrap();
        let b = detect_max(&scaled, &ctx, &proposals, false).unwrap();
        assert_eq!(a.rect, b.rect);
    }

    #[test]
    fn detection_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.txt");
        let entries = vec![
            ("images/a.ppm".to_string(), Detection { rect: rect(1, 2, 30, 42), score: 1.25 }),
            ("images/b.ppm".to_string(), Detection { rect: rect(0, 0, 9, 9), score: -0.5 }),
        ];
        save_detections(&entries, &path).unwrap();
        let loaded = load_detections(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "images/a.ppm");
        assert_eq!(loaded[0].1.rect, rect(1, 2, 30, 42));
        assert!((loaded[1].1.score + 0.5).abs() < 1e-9);
        let bytes = std::fs::read(&path).unwrap();
        save_detections(&loaded, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn cascade_serialization_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cascade");
        let mut rng = StdRng::seed_from_u64(77);
        let model = random_model(&mut rng, 3, 4);
        save_cascade(&model, &path).unwrap();
        let loaded = load_cascade(&path).unwrap();
        assert_eq!(loaded.stages.len(), model.stages.len());
        assert_eq!(loaded.total_weak_count(), model.total_weak_count());
        assert_eq!(loaded.pool, model.pool);
        assert_eq!(loaded.metadata, model.metadata);
        // Save-load-save is byte-identical.
        let bytes = std::fs::read(&path).unwrap();
        save_cascade(&loaded, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        // And values survive within print precision.
        for (a, b) in model
            .stages
            .iter()
            .flat_map(|s| &s.weak)
            .zip(loaded.stages.iter().flat_map(|s| &s.weak))
        {
            assert!((a.threshold - b.threshold).abs() <= 1e-8 * a.threshold.abs().max(1.0));
            assert_eq!(a.regionlets.len(), b.regionlets.len());
        }
    }
}
