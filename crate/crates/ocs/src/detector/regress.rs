//! Box re-localization: ridge regression from window appearance features to
//! center/size offsets in detection-normalized coordinates.
//!
//! The grid proposals quantize scale and position, so the raw max-response
//! window usually sits slightly off the object. The regressor reads where
//! the gradient energy mass lies inside (a dilation of) the detected window
//! and predicts `(dx, dy, dlog w, dlog h)` corrections.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Detection, FeatureContext, IntegralPlane};
use crate::geometry::{round_half_up, ImageBuffer, Rect};
use crate::{OcsError, Result};

/// A training pair for the regressor.
#[derive(Debug, Clone)]
pub struct RegressionPair {
    pub features: Vec<f64>,
    pub detected: Rect,
    pub target: Rect,
}

/// Linear box-offset model: four output rows (dx, dy, dlog w, dlog h), each
/// over `dims` features plus a trailing bias term.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegressor {
    dims: usize,
    rows: [Vec<f64>; 4],
}

/// Number of appearance features produced by [`regression_features`].
pub const REGRESSION_FEATURE_DIMS: usize = 17;

/// Per-image tables for box refinement: the gray feature context plus one
/// integral plane per color channel, so tint boundaries can sharpen the
/// gradient-energy box estimate.
pub struct RegressionContext {
    pub features: FeatureContext,
    channels: [IntegralPlane; 3],
}

impl RegressionContext {
    pub fn new(img: &ImageBuffer) -> RegressionContext {
        let (w, h) = (img.width(), img.height());
        let plane = |c: usize| {
            let src = c.min(img.channels() - 1);
            IntegralPlane::build(w, h, |x, y| img.sample(x, y, src) as u32)
        };
        RegressionContext {
            features: FeatureContext::new(img),
            channels: [plane(0), plane(1), plane(2)],
        }
    }

    /// Normalized chroma of a strip: `((r-g)/v, (g-b)/v)` of the mean color,
    /// which is stable across the brightness modulation of a texture.
    fn strip_chroma(&self, x0: i32, y0: i32, x1: i32, y1: i32) -> (f64, f64) {
        let r = self.channels[0].sum(x0, y0, x1, y1) as f64;
        let g = self.channels[1].sum(x0, y0, x1, y1) as f64;
        let b = self.channels[2].sum(x0, y0, x1, y1) as f64;
        let v = ((r + g + b) / 3.0).max(1.0);
        ((r - g) / v, (g - b) / v)
    }
}

/// Axis summary of an energy profile, in units of the original window:
/// suggested center offset and log-size from three estimators (support run,
/// cumulative quantiles, moments).
struct AxisEstimate {
    support_offset: f64,
    support_log_size: f64,
    quantile_offset: f64,
    quantile_log_size: f64,
    moment_offset: f64,
    moment_log_spread: f64,
}

fn summarize_axis(
    profile: &[f64],
    chroma: &[(f64, f64)],
    origin: f64,
    win_center: f64,
    win_size: f64,
) -> AxisEstimate {
    let n = profile.len();
    let total: f64 = profile.iter().sum();
    if total <= 0.0 || n == 0 {
        return AxisEstimate {
            support_offset: 0.0,
            support_log_size: 0.0,
            quantile_offset: 0.0,
            quantile_log_size: 0.0,
            moment_offset: 0.0,
            moment_log_spread: 0.0,
        };
    }

    // Cumulative quantile positions; for a block of near-uniform texture
    // these track the object edges linearly.
    let quantile = |f: f64| -> f64 {
        let target = f * total;
        let mut acc = 0.0;
        for (i, &e) in profile.iter().enumerate() {
            acc += e;
            if acc >= target {
                return origin + i as f64 + 0.5;
            }
        }
        origin + n as f64 - 0.5
    };
    let q05 = quantile(0.05);
    let q95 = quantile(0.95);
    // The central 90% of a uniform block spans 0.9 of its width.
    let q_size = ((q95 - q05) / 0.9).max(2.0);
    let q_center = (q05 + q95) / 2.0;

    // Contiguous runs above a fraction of the robust peak, with short gaps
    // bridged (texture troughs drop single columns below any threshold).
    // The run carrying the most energy is taken as the object's span, which
    // keeps smaller secondary blobs from stretching the estimate.
    let mut sorted: Vec<f64> = profile.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let peak = sorted[((n as f64 * 0.90) as usize).min(n - 1)];
    let threshold = 0.45 * peak;
    let mut runs: Vec<(usize, usize, f64)> = Vec::new();
    let mut run_start = None;
    let mut gap = 0usize;
    for i in 0..=n {
        let above = i < n && profile[i] >= threshold && threshold > 0.0;
        match (above, run_start) {
            (true, None) => {
                run_start = Some(i);
                gap = 0;
            }
            (true, Some(_)) => gap = 0,
            (false, Some(s)) => {
                gap += 1;
                if gap > 3 || i == n {
                    let end = i + 1 - gap;
                    runs.push((s, end, profile[s..end].iter().sum()));
                    run_start = None;
                }
            }
            (false, None) => {}
        }
    }
    let best_run = runs
        .iter()
        .max_by(|a, b| a.2.partial_cmp(&b.2).expect("finite"))
        .map(|&(s, e, _)| (s, e));
    let (sup_center, sup_size) = match best_run {
        Some((s, e)) if e > s => {
            let (ts, te) = trim_run_by_chroma(profile, chroma, s, e);
            (origin + (ts + te) as f64 / 2.0, (te - ts) as f64)
        }
        _ => (q_center, q_size),
    };

    // Energy moments.
    let mean: f64 = profile
        .iter()
        .enumerate()
        .map(|(i, &e)| e * (i as f64 + 0.5))
        .sum::<f64>()
        / total;
    let var: f64 = profile
        .iter()
        .enumerate()
        .map(|(i, &e)| e * (i as f64 + 0.5 - mean) * (i as f64 + 0.5 - mean))
        .sum::<f64>()
        / total;
    let m_center = origin + mean;
    let m_spread = var.sqrt().max(0.5);

    AxisEstimate {
        support_offset: (sup_center - win_center) / win_size,
        support_log_size: (sup_size.max(2.0) / win_size).ln(),
        quantile_offset: (q_center - win_center) / win_size,
        quantile_log_size: (q_size / win_size).ln(),
        moment_offset: (m_center - win_center) / win_size,
        moment_log_spread: (m_spread / win_size).ln(),
    }
}

/// Trim a support run where the strip tint stops matching the run's core.
/// An adjacent object of another class keeps the energy profile high past
/// the true edge, but its chroma differs; three consecutive off-tint
/// positions end the walk.
fn trim_run_by_chroma(
    profile: &[f64],
    chroma: &[(f64, f64)],
    s: usize,
    e: usize,
) -> (usize, usize) {
    let span = e - s;
    if span < 8 {
        return (s, e);
    }
    let core = &mut chroma[s + span / 4..e - span / 4].to_vec();
    let median = |vals: &mut Vec<f64>| -> f64 {
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        vals[vals.len() / 2]
    };
    let ref1 = median(&mut core.iter().map(|c| c.0).collect());
    let ref2 = median(&mut core.iter().map(|c| c.1).collect());
    let good = |i: usize| -> bool {
        (chroma[i].0 - ref1).abs() + (chroma[i].1 - ref2).abs() < 0.22
    };

    // Start from the energy centroid of the run and walk outward.
    let total: f64 = profile[s..e].iter().sum();
    let centroid = if total > 0.0 {
        let first: f64 = profile[s..e]
            .iter()
            .enumerate()
            .map(|(i, &p)| p * i as f64)
            .sum();
        s + (first / total) as usize
    } else {
        s + span / 2
    };
    let centroid = centroid.clamp(s, e - 1);

    let mut ts = centroid;
    let mut bad = 0;
    for i in (s..=centroid).rev() {
        if good(i) {
            ts = i;
            bad = 0;
        } else {
            bad += 1;
            if bad >= 3 {
                break;
            }
        }
    }
    let mut te = centroid + 1;
    bad = 0;
    for i in centroid..e {
        if good(i) {
            te = i + 1;
            bad = 0;
        } else {
            bad += 1;
            if bad >= 3 {
                break;
            }
        }
    }
    if te > ts + 1 {
        (ts, te)
    } else {
        (s, e)
    }
}

/// Appearance features for box refinement, measured over the detection
/// window dilated by 35% per side (clipped to the image). Each axis
/// contributes three box estimates read off the gradient-energy profile —
/// a chroma-trimmed support run, cumulative quantiles, and moments —
/// expressed directly as offset/log-size suggestions in window units, so
/// the ridge fit is close to an identity map with learned corrections.
pub fn regression_features(rctx: &RegressionContext, window: &Rect) -> Vec<f64> {
    let ctx = &rctx.features;
    let expanded = dilate_clip(window, ctx.width() as i32, ctx.height() as i32, 0.35);
    let (ex0, ey0, ex1, ey1) = (expanded.x0(), expanded.y0(), expanded.x1(), expanded.y1());
    // Each axis is scanned across the expanded span but summed only over
    // the window's cross-band, so off-axis energy sources do not bleed in.
    let (band_y0, band_y1) = (window.y0().max(ey0), window.y1().min(ey1));
    let (band_x0, band_x1) = (window.x0().max(ex0), window.x1().min(ex1));

    let col_profile: Vec<f64> = (ex0..ex1)
        .map(|x| {
            let v = ctx.vdiff_sum(&Rect::new(x, band_y0, x + 1, band_y1).expect("strip")) as f64;
            let h = if x + 2 <= ex1 {
                ctx.hdiff_sum(&Rect::new(x, band_y0, x + 2, band_y1).expect("strip")) as f64
            } else {
                0.0
            };
            v + h
        })
        .collect();
    let col_chroma: Vec<(f64, f64)> = (ex0..ex1)
        .map(|x| rctx.strip_chroma(x, band_y0, x + 1, band_y1))
        .collect();
    let row_profile: Vec<f64> = (ey0..ey1)
        .map(|y| {
            let h = ctx.hdiff_sum(&Rect::new(band_x0, y, band_x1, y + 1).expect("strip")) as f64;
            let v = if y + 2 <= ey1 {
                ctx.vdiff_sum(&Rect::new(band_x0, y, band_x1, y + 2).expect("strip")) as f64
            } else {
                0.0
            };
            h + v
        })
        .collect();
    let row_chroma: Vec<(f64, f64)> = (ey0..ey1)
        .map(|y| rctx.strip_chroma(band_x0, y, band_x1, y + 1))
        .collect();

    let (wcx, wcy) = window.center();
    let xa = summarize_axis(&col_profile, &col_chroma, ex0 as f64, wcx, window.width() as f64);
    let ya = summarize_axis(&row_profile, &row_chroma, ey0 as f64, wcy, window.height() as f64);

    let mean_energy = {
        let pairs_h = (expanded.width() as f64 - 1.0).max(1.0) * expanded.height() as f64;
        let pairs_v = expanded.width() as f64 * (expanded.height() as f64 - 1.0).max(1.0);
        (ctx.hdiff_sum(&expanded) as f64 + ctx.vdiff_sum(&expanded) as f64)
            / (pairs_h + pairs_v)
            / 255.0
    };

    vec![
        xa.support_offset,
        ya.support_offset,
        xa.support_log_size,
        ya.support_log_size,
        xa.quantile_offset,
        ya.quantile_offset,
        xa.quantile_log_size,
        ya.quantile_log_size,
        xa.moment_offset,
        ya.moment_offset,
        xa.moment_log_spread,
        ya.moment_log_spread,
        (window.width() as f64 / window.height() as f64).ln(),
        (window.area() as f64).ln(),
        ((ex1 - ex0) as f64 / window.width() as f64).ln(),
        ((ey1 - ey0) as f64 / window.height() as f64).ln(),
        mean_energy,
    ]
}

/// Apply the regressor repeatedly, re-reading features at each refined box.
pub fn refine_detection(
    reg: &BoxRegressor,
    rctx: &RegressionContext,
    detection: &Detection,
    iterations: usize,
    image_w: i32,
    image_h: i32,
) -> Rect {
    let mut current = *detection;
    for _ in 0..iterations.max(1) {
        let features = regression_features(rctx, &current.rect);
        let refined = reg.apply(&current, &features, image_w, image_h);
        if refined == current.rect {
            break;
        }
        current.rect = refined;
    }
    current.rect
}

fn dilate_clip(r: &Rect, w: i32, h: i32, frac: f64) -> Rect {
    let dx = round_half_up(r.width() as f64 * frac);
    let dy = round_half_up(r.height() as f64 * frac);
    Rect::new(r.x0() - dx, r.y0() - dy, r.x1() + dx, r.y1() + dy)
        .expect("dilation keeps order")
        .clip_to_bounds(w, h)
        .expect("original rect in bounds")
}

fn offsets(detected: &Rect, target: &Rect) -> [f64; 4] {
    let (pcx, pcy) = detected.center();
    let (gcx, gcy) = target.center();
    let pw = detected.width() as f64;
    let ph = detected.height() as f64;
    [
        (gcx - pcx) / pw,
        (gcy - pcy) / ph,
        (target.width() as f64 / pw).ln(),
        (target.height() as f64 / ph).ln(),
    ]
}

/// Fit by ridge-regularized least squares. `lambda = 0` errors out when the
/// normal equations are singular; any positive `lambda` is always solvable.
pub fn fit_box_regressor(pairs: &[RegressionPair], lambda: f64) -> Result<BoxRegressor> {
    if pairs.is_empty() {
        return Err(OcsError::Config("no regression pairs".into()));
    }
    let dims = pairs[0].features.len();
    if pairs.len() < dims + 1 {
        return Err(OcsError::Config(format!(
            "need at least {} pairs for {dims} features, got {}",
            dims + 1,
            pairs.len()
        )));
    }
    if pairs.iter().any(|p| p.features.len() != dims) {
        return Err(OcsError::Config("inconsistent feature lengths".into()));
    }
    if lambda < 0.0 {
        return Err(OcsError::Config("lambda must be non-negative".into()));
    }

    let d = dims + 1; // trailing bias column
    let mut xtx = vec![0.0f64; d * d];
    let mut xty = vec![0.0f64; d * 4];
    let mut row = vec![0.0f64; d];
    for pair in pairs {
        row[..dims].copy_from_slice(&pair.features);
        row[dims] = 1.0;
        let y = offsets(&pair.detected, &pair.target);
        for i in 0..d {
            for j in 0..d {
                xtx[i * d + j] += row[i] * row[j];
            }
            for (k, &yk) in y.iter().enumerate() {
                xty[i * 4 + k] += row[i] * yk;
            }
        }
    }
    for i in 0..d {
        xtx[i * d + i] += lambda;
    }

    let solution = solve_linear_system(&mut xtx, &mut xty, d, 4)
        .ok_or_else(|| OcsError::Config("singular system; use lambda > 0".into()))?;
    let mut rows: [Vec<f64>; 4] = [vec![], vec![], vec![], vec![]];
    for (k, row) in rows.iter_mut().enumerate() {
        *row = (0..d).map(|i| solution[i * 4 + k]).collect();
    }
    Ok(BoxRegressor { dims, rows })
}

/// Gaussian elimination with partial pivoting on `a` (n x n) with `b`
/// (n x m) in place; returns the solution or None when singular.
fn solve_linear_system(a: &mut [f64], b: &mut [f64], n: usize, m: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r1, &r2| {
                a[r1 * n + col]
                    .abs()
                    .partial_cmp(&a[r2 * n + col].abs())
                    .expect("finite")
            })
            .expect("non-empty range");
        if a[pivot * n + col].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            for j in 0..m {
                b.swap(col * m + j, pivot * m + j);
            }
        }
        let diag = a[col * n + col];
        for r in col + 1..n {
            let factor = a[r * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= factor * a[col * n + j];
            }
            for j in 0..m {
                b[r * m + j] -= factor * b[col * m + j];
            }
        }
    }
    let mut x = vec![0.0f64; n * m];
    for col in (0..n).rev() {
        for k in 0..m {
            let mut v = b[col * m + k];
            for j in col + 1..n {
                v -= a[col * n + j] * x[j * m + k];
            }
            x[col * m + k] = v / a[col * n + col];
        }
    }
    Some(x)
}

impl BoxRegressor {
    pub fn dims(&self) -> usize {
        self.dims
    }

    fn predict(&self, features: &[f64]) -> [f64; 4] {
        let mut out = [0.0f64; 4];
        for (k, row) in self.rows.iter().enumerate() {
            let mut acc = row[self.dims]; // bias
            for (i, &f) in features.iter().enumerate() {
                acc += row[i] * f;
            }
            out[k] = acc;
        }
        out
    }

    /// Apply predicted offsets to a detection; the result is clipped to the
    /// image bounds and never degenerates below one pixel.
    pub fn apply(&self, detection: &Detection, features: &[f64], image_w: i32, image_h: i32) -> Rect {
        let [dx, dy, dw, dh] = self.predict(features);
        let r = &detection.rect;
        let (cx, cy) = r.center();
        let pw = r.width() as f64;
        let ph = r.height() as f64;
        let ncx = cx + dx * pw;
        let ncy = cy + dy * ph;
        // Size corrections beyond e^1.5 are extrapolation noise.
        let nw = pw * dw.clamp(-1.5, 1.5).exp();
        let nh = ph * dh.clamp(-1.5, 1.5).exp();
        let mut x0 = round_half_up(ncx - nw / 2.0);
        let mut y0 = round_half_up(ncy - nh / 2.0);
        let mut x1 = round_half_up(ncx + nw / 2.0);
        let mut y1 = round_half_up(ncy + nh / 2.0);
        x0 = x0.clamp(0, image_w - 1);
        y0 = y0.clamp(0, image_h - 1);
        x1 = x1.clamp(x0 + 1, image_w);
        y1 = y1.clamp(y0 + 1, image_h);
        Rect::new(x0, y0, x1, y1).expect("clamped to valid")
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.8e}")
}

/// `OCSREG v1 <dims>` header plus one line of `dims + 1` reals per output.
pub fn save_regressor(reg: &BoxRegressor, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "OCSREG v1 {}", reg.dims).expect("string write");
    for row in &reg.rows {
        let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(out, "{}", line.join(" ")).expect("string write");
    }
    fs::write(path, out).map_err(|e| OcsError::io(path.display().to_string(), e))
}

pub fn load_regressor(path: &Path) -> Result<BoxRegressor> {
    let text = fs::read_to_string(path).map_err(|e| OcsError::io(path.display().to_string(), e))?;
    let loc = path.display().to_string();
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| OcsError::format(&loc, 1, "empty file"))?;
    let head: Vec<&str> = header.split(' ').collect();
    if head.len() != 3 || head[0] != "OCSREG" || head[1] != "v1" {
        return Err(OcsError::format(&loc, 1, format!("bad header {header:?}")));
    }
    let dims: usize = head[2]
        .parse()
        .map_err(|_| OcsError::format(&loc, 1, "bad dims"))?;
    let mut rows: [Vec<f64>; 4] = [vec![], vec![], vec![], vec![]];
    for (k, row) in rows.iter_mut().enumerate() {
        let line = lines
            .next()
            .ok_or_else(|| OcsError::format(&loc, k + 2, "missing row"))?;
        *row = line
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
    }
    Ok(BoxRegressor { dims, rows })
}
