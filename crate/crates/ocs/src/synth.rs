//! Synthetic cluttered-scene generator.
//!
//! Each scene is a textured background with solid clutter rectangles, a
//! single large salient object painted last (so it is never occluded), and
//! up to a few small distractor objects from other classes. Class identity
//! is a procedural texture — a tinted oriented grating — present only on
//! object pixels, so any class signal a crop picks up away from the object
//! is noise by construction.
//!
//! Generation is deterministic per seed and parallelizable per scene via
//! [`derive_seed`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{select_salient_ground_truth, AnnotationRecord, ObjectAnnotation};
use crate::geometry::{ImageBuffer, Rect};
use crate::{OcsError, Result};

/// Knobs for scene generation.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    /// Image sides are drawn uniformly from this range (inclusive).
    pub min_image_side: usize,
    pub max_image_side: usize,
    pub num_classes: usize,
    /// Salient object area as a fraction of image area.
    pub salient_area: (f64, f64),
    /// Number of distractor objects, inclusive range.
    pub distractor_count: (usize, usize),
    /// Distractor area as a fraction of image area.
    pub distractor_area: (f64, f64),
    /// Probability that a distractor is placed overlapping the salient
    /// object (and thus ends up occluded by it).
    pub occlusion_probability: f64,
    /// Scales the number of solid clutter rectangles in the background.
    pub clutter_density: f64,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            min_image_side: 128,
            max_image_side: 176,
            num_classes: 10,
            salient_area: (0.20, 0.60),
            distractor_count: (0, 3),
            distractor_area: (0.02, 0.12),
            occlusion_probability: 0.35,
            clutter_density: 1.0,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_image_side < 32 || self.max_image_side < self.min_image_side {
            return Err(OcsError::Config(format!(
                "bad image side range [{}, {}]",
                self.min_image_side, self.max_image_side
            )));
        }
        if self.num_classes < 1 {
            return Err(OcsError::Config("need at least one class".into()));
        }
        let (slo, shi) = self.salient_area;
        let (dlo, dhi) = self.distractor_area;
        if !(0.0 < slo && slo < shi && shi <= 0.9) {
            return Err(OcsError::Config(format!("bad salient area range ({slo}, {shi})")));
        }
        if !(0.0 < dlo && dlo < dhi) {
            return Err(OcsError::Config(format!(
                "bad distractor area range ({dlo}, {dhi})"
            )));
        }
        // Keeps the bigger-is-salient criterion decidable.
        if slo <= dhi {
            return Err(OcsError::Config(format!(
                "salient area range must sit strictly above distractor range ({slo} <= {dhi})"
            )));
        }
        if self.distractor_count.0 > self.distractor_count.1 {
            return Err(OcsError::Config("bad distractor count range".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return Err(OcsError::Config("occlusion probability must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Mix a stream index into a base seed so per-scene RNGs are decorrelated.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Per-class texture parameters: tint hue, grating orientation, wavelength.
fn class_style(class_id: usize, num_classes: usize) -> (f64, f64, f64) {
    let hue = class_id as f64 / num_classes as f64;
    let theta = std::f64::consts::PI * class_id as f64 / num_classes as f64;
    let wavelength = 5.0 + 3.0 * (class_id % 3) as f64;
    (hue, theta, wavelength)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn put_rgb(img: &mut ImageBuffer, x: usize, y: usize, rgb: [f64; 3]) {
    for (c, &v) in rgb.iter().enumerate() {
        img.set_sample(x, y, c, (v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
}

/// Paint the class grating over `rect`. Coordinates are taken relative to
/// the rect origin so the texture is translation-invariant.
fn paint_object(
    img: &mut ImageBuffer,
    owner: &mut [u16],
    owner_id: u16,
    rect: &Rect,
    class_id: usize,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) {
    let (hue, theta, wavelength) = class_style(class_id, num_classes);
    let tint = hsv_to_rgb(hue, 0.60, 0.92);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let brightness: f64 = rng.random_range(0.85..1.15);
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let w = img.width();
    for y in rect.y0() as usize..rect.y1() as usize {
        for x in rect.x0() as usize..rect.x1() as usize {
            let u = (x - rect.x0() as usize) as f64 * cos_t
                + (y - rect.y0() as usize) as f64 * sin_t;
            let profile = (0.62
                + 0.38 * (std::f64::consts::TAU * u / wavelength + phase).cos())
                * brightness;
            let rgb = [
                (tint[0] * profile).clamp(0.0, 1.0),
                (tint[1] * profile).clamp(0.0, 1.0),
                (tint[2] * profile).clamp(0.0, 1.0),
            ];
            put_rgb(img, x, y, rgb);
            owner[y * w + x] = owner_id;
        }
    }
}

/// Draw an object box with the given area fraction, fully inside the image.
/// When `center_hint` is given the center lands there (clamped to keep the
/// box in bounds); otherwise the center is drawn from `center_range`
/// fractions of the image.
fn place_box(
    img_w: usize,
    img_h: usize,
    area_frac: f64,
    center_range: (f64, f64),
    center_hint: Option<(f64, f64)>,
    rng: &mut ChaCha8Rng,
) -> Rect {
    let target_area = area_frac * (img_w * img_h) as f64;
    let mut bw;
    let mut bh;
    loop {
        let aspect: f64 = rng.random_range(0.75..4.0 / 3.0);
        bw = (target_area * aspect).sqrt().round().max(4.0);
        bh = (target_area / aspect).sqrt().round().max(4.0);
        if bw <= img_w as f64 * 0.96 && bh <= img_h as f64 * 0.96 {
            break;
        }
    }
    let (bw, bh) = (bw as i32, bh as i32);
    let half_w = bw as f64 / 2.0;
    let half_h = bh as f64 / 2.0;
    let (cx, cy) = match center_hint {
        Some(c) => c,
        None => {
            let lo_x = (img_w as f64 * center_range.0).max(half_w);
            let hi_x = (img_w as f64 * center_range.1).min(img_w as f64 - half_w);
            let lo_y = (img_h as f64 * center_range.0).max(half_h);
            let hi_y = (img_h as f64 * center_range.1).min(img_h as f64 - half_h);
            (
                if lo_x < hi_x {
                    rng.random_range(lo_x..hi_x)
                } else {
                    img_w as f64 / 2.0
                },
                if lo_y < hi_y {
                    rng.random_range(lo_y..hi_y)
                } else {
                    img_h as f64 / 2.0
                },
            )
        }
    };
    let x0 = ((cx - half_w).round() as i32).clamp(0, img_w as i32 - bw);
    let y0 = ((cy - half_h).round() as i32).clamp(0, img_h as i32 - bh);
    Rect::from_origin_size(x0, y0, bw, bh).expect("sides >= 4")
}

/// Generate one scene for `class_id` along with its annotation record.
///
/// The record's `image_path` is left empty; callers writing datasets fill
/// it in. `salient_gt` is assigned through the saliency selection protocol.
pub fn generate_synthetic_scene(
    spec: &SceneSpec,
    class_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageBuffer, AnnotationRecord)> {
    spec.validate()?;
    if class_id >= spec.num_classes {
        return Err(OcsError::Config(format!(
            "class {class_id} out of range for {} classes",
            spec.num_classes
        )));
    }

    let img_w = rng.random_range(spec.min_image_side..=spec.max_image_side);
    let img_h = rng.random_range(spec.min_image_side..=spec.max_image_side);
    let mut img = ImageBuffer::new(img_w, img_h, 3)?;
    let mut owner = vec![0u16; img_w * img_h];

    // Low-frequency background: a muted base tint modulated by two waves.
    let base = hsv_to_rgb(
        rng.random_range(0.0..1.0),
        rng.random_range(0.05..0.25),
        rng.random_range(0.35..0.65),
    );
    let (kx1, ky1): (f64, f64) = (
        rng.random_range(0.5..2.0) / img_w as f64,
        rng.random_range(0.5..2.0) / img_h as f64,
    );
    let (kx2, ky2): (f64, f64) = (
        rng.random_range(0.5..2.0) / img_w as f64,
        rng.random_range(0.5..2.0) / img_h as f64,
    );
    let (p1, p2): (f64, f64) = (
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    for y in 0..img_h {
        for x in 0..img_w {
            let m1 = (std::f64::consts::TAU * (x as f64 * kx1 + y as f64 * ky1) + p1).sin();
            let m2 = (std::f64::consts::TAU * (x as f64 * kx2 - y as f64 * ky2) + p2).sin();
            let gain = 1.0 + 0.10 * m1 + 0.08 * m2;
            put_rgb(
                &mut img,
                x,
                y,
                [
                    (base[0] * gain).clamp(0.0, 1.0),
                    (base[1] * gain).clamp(0.0, 1.0),
                    (base[2] * gain).clamp(0.0, 1.0),
                ],
            );
        }
    }

    // Solid clutter rectangles; they never enter the annotation.
    let clutter_count =
        ((spec.clutter_density * (img_w * img_h) as f64 / 3000.0).round() as usize).min(40);
    for _ in 0..clutter_count {
        let cw = rng.random_range(img_w / 20..=img_w / 6).max(2);
        let ch = rng.random_range(img_h / 20..=img_h / 6).max(2);
        let cx = rng.random_range(0..=img_w - cw);
        let cy = rng.random_range(0..=img_h - ch);
        let col = hsv_to_rgb(
            rng.random_range(0.0..1.0),
            rng.random_range(0.1..0.45),
            rng.random_range(0.3..0.8),
        );
        for y in cy..cy + ch {
            for x in cx..cx + cw {
                put_rgb(&mut img, x, y, col);
            }
        }
    }

    // Salient object parameters first, then distractors, so the placement
    // hint for occluding distractors can reference the salient box.
    let salient_frac = rng.random_range(spec.salient_area.0..spec.salient_area.1);
    let salient_box = place_box(img_w, img_h, salient_frac, (0.2, 0.8), None, rng);

    let n_distractors = if spec.num_classes < 2 {
        0
    } else {
        rng.random_range(spec.distractor_count.0..=spec.distractor_count.1)
    };
    let mut distractors = Vec::with_capacity(n_distractors);
    for _ in 0..n_distractors {
        let mut other = rng.random_range(0..spec.num_classes - 1);
        if other >= class_id {
            other += 1;
        }
        let frac = rng.random_range(spec.distractor_area.0..spec.distractor_area.1);
        let hint = if rng.random::<f64>() < spec.occlusion_probability {
            // Aim at a point inside the salient box.
            let (cx, cy) = salient_box.center();
            let jx: f64 = rng.random_range(-0.6..0.6) * salient_box.width() as f64;
            let jy: f64 = rng.random_range(-0.6..0.6) * salient_box.height() as f64;
            Some((cx + jx, cy + jy))
        } else {
            None
        };
        let bbox = place_box(img_w, img_h, frac, (0.05, 0.95), hint, rng);
        distractors.push((bbox, other));
    }

    // Paint: distractors in order, salient last. Owner ids: distractor i is
    // i+1, salient is the last id.
    for (i, (bbox, class)) in distractors.iter().enumerate() {
        paint_object(
            &mut img,
            &mut owner,
            (i + 1) as u16,
            bbox,
            *class,
            spec.num_classes,
            rng,
        );
    }
    let salient_id = (distractors.len() + 1) as u16;
    paint_object(
        &mut img,
        &mut owner,
        salient_id,
        &salient_box,
        class_id,
        spec.num_classes,
        rng,
    );

    // Occlusion flags from the ownership mask: an object is occluded when
    // at least a quarter of its box is painted over by later objects.
    let mut objects = Vec::with_capacity(distractors.len() + 1);
    for (i, (bbox, class)) in distractors.iter().enumerate() {
        let id = (i + 1) as u16;
        let mut visible = 0i64;
        for y in bbox.y0()..bbox.y1() {
            for x in bbox.x0()..bbox.x1() {
                if owner[y as usize * img_w + x as usize] == id {
                    visible += 1;
                }
            }
        }
        let covered = 1.0 - visible as f64 / bbox.area() as f64;
        objects.push(ObjectAnnotation {
            bbox: *bbox,
            class_label: *class,
            occluded: covered >= 0.25,
            truncated: false,
        });
    }
    objects.push(ObjectAnnotation {
        bbox: salient_box,
        class_label: class_id,
        occluded: false,
        truncated: false,
    });

    // Shuffle so the salient object sits at an arbitrary index.
    for i in (1..objects.len()).rev() {
        let j = rng.random_range(0..=i);
        objects.swap(i, j);
    }

    let salient_gt = select_salient_ground_truth(&objects, class_id, img_w, img_h, rng)?;

    Ok((
        img,
        AnnotationRecord {
            image_path: String::new(),
            label: class_id,
            objects,
            salient_gt: Some(salient_gt),
        },
    ))
}

/// Mean RGB over a rect, for texture statistics.
pub fn mean_rgb(img: &ImageBuffer, rect: &Rect) -> [f64; 3] {
    let mut acc = [0f64; 3];
    for y in rect.y0() as usize..rect.y1() as usize {
        for x in rect.x0() as usize..rect.x1() as usize {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += img.sample(x, y, c.min(img.channels() - 1)) as f64;
            }
        }
    }
    let n = rect.area() as f64;
    [acc[0] / n, acc[1] / n, acc[2] / n]
}
