//! Overlap-proportional multinomial crop sampling.
//!
//! A fixed `s x s` crop at top-left `(x, y)` overlaps an axis-aligned
//! detection box by `overlap_x(x) * overlap_y(y)` pixels — the 2-D overlap
//! factorizes exactly into two 1-D profiles. Sampling therefore draws `x`
//! and `y` independently by inverse transform over integer prefix sums,
//! which is exact (no floating-point normalization) and O(w + h) memory
//! instead of O(w * h).
//!
//! Without a detection, or when the detection carries no overlap mass, the
//! sampler degrades to uniform over all in-bounds positions — the same
//! distribution the uniform baseline uses.

use rand::Rng;

use crate::geometry::{ImageBuffer, Rect};
use crate::{OcsError, Result};

/// Crop sampler parameters.
#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    /// Side length of the square crop.
    pub crop_size: usize,
    /// Minimum joint overlap (in pixels) a position must have with the
    /// detection to stay in the sampling space. 0 keeps every position.
    pub tau: u64,
    /// Probability of mirroring a sampled crop left-right.
    pub flip_probability: f64,
    /// Base seed for sampling streams.
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            crop_size: 224,
            tau: 0,
            flip_probability: 0.5,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size < 1 {
            return Err(OcsError::Config("crop_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(OcsError::Config(format!(
                "flip_probability must be in [0,1], got {}",
                self.flip_probability
            )));
        }
        Ok(())
    }
}

/// 1-D overlap weights for one axis: `weights[k]` is the pixel overlap of
/// the crop interval `[k, k+crop)` with the object interval.
#[derive(Debug, Clone)]
pub struct OverlapProfile {
    extent: usize,
    crop: usize,
    weights: Vec<u64>,
}

impl OverlapProfile {
    pub fn extent(&self) -> usize {
        self.extent
    }
    pub fn crop(&self) -> usize {
        self.crop
    }
    pub fn weights(&self) -> &[u64] {
        &self.weights
    }
    pub fn total(&self) -> u64 {
        self.weights.iter().sum()
    }
}

/// Overlap profile of a `crop`-length window sliding over `[0, extent)`
/// against the object interval `[object_lo, object_hi)`.
pub fn overlap_profile(
    extent: usize,
    crop: usize,
    object_lo: usize,
    object_hi: usize,
) -> Result<OverlapProfile> {
    if crop > extent {
        return Err(OcsError::Geometry(format!(
            "crop {crop} exceeds image extent {extent}; resize first"
        )));
    }
    if !(object_lo < object_hi && object_hi <= extent) {
        return Err(OcsError::Geometry(format!(
            "object interval [{object_lo},{object_hi}) invalid for extent {extent}"
        )));
    }
    let weights = (0..=extent - crop)
        .map(|k| {
            let lo = k.max(object_lo);
            let hi = (k + crop).min(object_hi);
            hi.saturating_sub(lo) as u64
        })
        .collect();
    Ok(OverlapProfile {
        extent,
        crop,
        weights,
    })
}

fn uniform_profile(extent: usize, crop: usize) -> OverlapProfile {
    OverlapProfile {
        extent,
        crop,
        weights: vec![1; extent - crop + 1],
    }
}

fn zero_profile(extent: usize, crop: usize) -> OverlapProfile {
    OverlapProfile {
        extent,
        crop,
        weights: vec![0; extent - crop + 1],
    }
}

/// A sampled crop: top-left position plus mirror flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSample {
    pub x: usize,
    pub y: usize,
    pub flipped: bool,
    pub image_id: u64,
}

impl CropSample {
    pub fn rect(&self, crop_size: usize) -> Rect {
        Rect::from_origin_size(
            self.x as i32,
            self.y as i32,
            crop_size as i32,
            crop_size as i32,
        )
        .expect("crop_size >= 1")
    }
}

/// Per-image sampling distribution over crop positions.
///
/// The joint weight of position `(x, y)` is exactly
/// `x_profile[x] * y_profile[y]`; prefix sums over each axis drive integer
/// inverse-transform sampling.
#[derive(Debug, Clone)]
pub struct CropDistribution {
    image_w: usize,
    image_h: usize,
    crop_size: usize,
    tau: u64,
    x_profile: OverlapProfile,
    y_profile: OverlapProfile,
    x_cdf: Vec<u64>,
    y_cdf: Vec<u64>,
    x_total: u64,
    y_total: u64,
    fallback_uniform: bool,
}

/// Build the sampling distribution for an `image_w x image_h` image and an
/// optional detection box.
///
/// Positions whose joint overlap falls below `cfg.tau` are excluded. A
/// missing detection, a detection with zero total overlap mass, or a `tau`
/// no position can meet all degrade to the uniform fallback.
pub fn build_crop_distribution(
    image_w: usize,
    image_h: usize,
    detection: Option<Rect>,
    cfg: &SamplerConfig,
) -> Result<CropDistribution> {
    cfg.validate()?;
    let s = cfg.crop_size;
    if image_w < s || image_h < s {
        return Err(OcsError::Geometry(format!(
            "image {image_w}x{image_h} smaller than crop {s}; resize first"
        )));
    }

    let clipped = detection.and_then(|d| d.clip_to_bounds(image_w as i32, image_h as i32));
    let (x_profile, y_profile) = match clipped {
        Some(d) => (
            overlap_profile(image_w, s, d.x0() as usize, d.x1() as usize)?,
            overlap_profile(image_h, s, d.y0() as usize, d.y1() as usize)?,
        ),
        None => (zero_profile(image_w, s), zero_profile(image_h, s)),
    };

    let mut dist = CropDistribution::assemble(image_w, image_h, s, cfg.tau, x_profile, y_profile);

    // With tau > 0 the sampler rejects sub-threshold positions at draw time;
    // if not even the best position clears tau, nothing is sampleable and
    // the distribution degrades to uniform exactly like the zero-mass case.
    if cfg.tau > 0 && !dist.fallback_uniform {
        let max_joint = dist.max_x_weight() as u128 * dist.max_y_weight() as u128;
        if max_joint < cfg.tau as u128 {
            dist = CropDistribution::assemble(
                image_w,
                image_h,
                s,
                cfg.tau,
                zero_profile(image_w, s),
                zero_profile(image_h, s),
            );
        }
    }
    Ok(dist)
}

impl CropDistribution {
    fn assemble(
        image_w: usize,
        image_h: usize,
        crop_size: usize,
        tau: u64,
        mut x_profile: OverlapProfile,
        mut y_profile: OverlapProfile,
    ) -> CropDistribution {
        let x_total = x_profile.total();
        let y_total = y_profile.total();
        let fallback = x_total == 0 || y_total == 0;
        if fallback {
            x_profile = uniform_profile(image_w, crop_size);
            y_profile = uniform_profile(image_h, crop_size);
        }
        let x_cdf = prefix_sums(x_profile.weights());
        let y_cdf = prefix_sums(y_profile.weights());
        let x_total = *x_cdf.last().expect("non-empty");
        let y_total = *y_cdf.last().expect("non-empty");
        CropDistribution {
            image_w,
            image_h,
            crop_size,
            tau,
            x_profile,
            y_profile,
            x_cdf,
            y_cdf,
            x_total,
            y_total,
            fallback_uniform: fallback,
        }
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.image_w, self.image_h)
    }
    pub fn crop_size(&self) -> usize {
        self.crop_size
    }
    pub fn fallback_uniform(&self) -> bool {
        self.fallback_uniform
    }
    pub fn x_profile(&self) -> &OverlapProfile {
        &self.x_profile
    }
    pub fn y_profile(&self) -> &OverlapProfile {
        &self.y_profile
    }

    /// Number of valid positions per axis: `(w - s + 1, h - s + 1)`.
    pub fn grid_dims(&self) -> (usize, usize) {
        (
            self.image_w - self.crop_size + 1,
            self.image_h - self.crop_size + 1,
        )
    }

    /// Product of the two axis totals.
    pub fn total_weight(&self) -> u128 {
        if self.fallback_uniform {
            0
        } else {
            self.x_total as u128 * self.y_total as u128
        }
    }

    /// Joint sampling weight of a position before tau exclusion.
    pub fn joint_weight(&self, x: usize, y: usize) -> u64 {
        self.x_profile.weights()[x] * self.y_profile.weights()[y]
    }

    fn max_x_weight(&self) -> u64 {
        self.x_profile.weights().iter().copied().max().unwrap_or(0)
    }

    fn max_y_weight(&self) -> u64 {
        self.y_profile.weights().iter().copied().max().unwrap_or(0)
    }

    /// Draw one crop position.
    ///
    /// Each axis draws an integer `u` uniform in `[0, axis_total)` and
    /// returns the smallest index whose prefix sum exceeds `u`. With
    /// `tau > 0`, sub-threshold positions are redrawn, which restricts the
    /// distribution to exactly the surviving positions.
    pub fn sample_position<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        loop {
            let x = sample_axis(&self.x_cdf, self.x_total, rng);
            let y = sample_axis(&self.y_cdf, self.y_total, rng);
            if self.fallback_uniform || self.tau == 0 || self.joint_weight(x, y) >= self.tau {
                return (x, y);
            }
        }
    }

    /// Draw `count` training crops for `img`, flipping each with the
    /// configured probability. Deterministic given the RNG state.
    pub fn sample_training_crops<R: Rng + ?Sized>(
        &self,
        img: &ImageBuffer,
        count: usize,
        cfg: &SamplerConfig,
        image_id: u64,
        rng: &mut R,
    ) -> Result<Vec<CropSample>> {
        if (img.width(), img.height()) != (self.image_w, self.image_h) {
            return Err(OcsError::Geometry(format!(
                "distribution built for {}x{} but image is {}x{}",
                self.image_w,
                self.image_h,
                img.width(),
                img.height()
            )));
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let (x, y) = self.sample_position(rng);
            let flipped = rng.random::<f64>() < cfg.flip_probability;
            out.push(CropSample {
                x,
                y,
                flipped,
                image_id,
            });
        }
        Ok(out)
    }

    /// Dense normalized probability map over the position grid, for
    /// inspection and testing. Entries sum to 1.
    pub fn probability_map(&self) -> ProbabilityMap {
        let (cols, rows) = self.grid_dims();
        let mut values = vec![0f64; cols * rows];
        if self.fallback_uniform {
            let p = 1.0 / (cols * rows) as f64;
            values.fill(p);
        } else {
            let mut total = 0u128;
            for y in 0..rows {
                for x in 0..cols {
                    let w = self.joint_weight(x, y);
                    if w >= self.tau.max(1) {
                        total += w as u128;
                    }
                }
            }
            debug_assert!(total > 0, "tau guard in build keeps total positive");
            for y in 0..rows {
                for x in 0..cols {
                    let w = self.joint_weight(x, y);
                    if w >= self.tau.max(1) {
                        values[y * cols + x] = w as f64 / total as f64;
                    }
                }
            }
        }
        ProbabilityMap { cols, rows, values }
    }
}

/// Dense position-probability grid exported from a [`CropDistribution`].
#[derive(Debug, Clone)]
pub struct ProbabilityMap {
    pub cols: usize,
    pub rows: usize,
    pub values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.cols + x]
    }

    /// Render max-normalized to an 8-bit grayscale image.
    pub fn to_gray_image(&self) -> ImageBuffer {
        let max = self.values.iter().cloned().fold(0f64, f64::max);
        let data = self
            .values
            .iter()
            .map(|&v| {
                if max > 0.0 {
                    (v / max * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        ImageBuffer::from_vec(self.cols, self.rows, 1, data).expect("valid grid")
    }
}

fn prefix_sums(weights: &[u64]) -> Vec<u64> {
    let mut acc = 0u64;
    weights
        .iter()
        .map(|&w| {
            acc += w;
            acc
        })
        .collect()
}

/// Smallest index with `cdf[i] > u`, for `u` uniform in `[0, total)`.
fn sample_axis<R: Rng + ?Sized>(cdf: &[u64], total: u64, rng: &mut R) -> usize {
    let u = rng.random_range(0..total);
    cdf.partition_point(|&c| c <= u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(s: usize) -> SamplerConfig {
        SamplerConfig {
            crop_size: s,
            ..SamplerConfig::default()
        }
    }

    fn rect(x0: i32, y0: i32, x1: i32, y1: i32) -> Rect {
        Rect::new(x0, y0, x1, y1).unwrap()
    }

    /// Pixel-counting oracle, independent of Rect::intersect.
    fn overlap_by_pixels(k: usize, crop: usize, lo: usize, hi: usize) -> u64 {
        (k..k + crop).filter(|&i| i >= lo && i < hi).count() as u64
    }

    #[test]
    fn profile_matches_enumeration() {
        let p = overlap_profile(6, 4, 2, 5).unwrap();
        assert_eq!(p.weights(), &[2, 3, 3]);
        for extent in 4..20usize {
            for crop in 1..=extent {
                let p = overlap_profile(extent, crop, extent / 3, extent / 3 + 2).unwrap();
                for (k, &w) in p.weights().iter().enumerate() {
                    assert_eq!(w, overlap_by_pixels(k, crop, extent / 3, extent / 3 + 2));
                }
            }
        }
    }

    #[test]
    fn profile_full_extent_and_edge_object() {
        let p = overlap_profile(10, 4, 0, 10).unwrap();
        assert!(p.weights().iter().all(|&w| w == 4));
        let p = overlap_profile(6, 4, 0, 1).unwrap();
        assert_eq!(p.weights(), &[1, 0, 0]);
    }

    #[test]
    fn profile_unimodal() {
        for (lo, hi) in [(0, 3), (2, 9), (5, 12), (11, 12)] {
            let p = overlap_profile(12, 5, lo, hi).unwrap();
            let w = p.weights();
            let peak = w.iter().enumerate().max_by_key(|(_, &v)| v).unwrap().0;
            assert!(w[..=peak].windows(2).all(|p| p[0] <= p[1]));
            assert!(w[peak..].windows(2).all(|p| p[0] >= p[1]));
        }
    }

    #[test]
    fn profile_crop_exceeding_extent_errors() {
        assert!(overlap_profile(4, 6, 0, 2).is_err());
    }

    #[test]
    fn toy_distribution_profiles() {
        let d = build_crop_distribution(6, 6, Some(rect(2, 0, 5, 6)), &cfg(4)).unwrap();
        assert!(!d.fallback_uniform());
        assert_eq!(d.x_profile().weights(), &[2, 3, 3]);
        assert_eq!(d.y_profile().weights(), &[4, 4, 4]);
        assert_eq!(d.total_weight(), 8 * 12);
    }

    #[test]
    fn whole_image_detection_is_uniform() {
        let d = build_crop_distribution(9, 7, Some(rect(0, 0, 9, 7)), &cfg(4)).unwrap();
        assert!(!d.fallback_uniform());
        let (cols, rows) = d.grid_dims();
        let first = d.joint_weight(0, 0);
        assert_eq!(first, 16);
        for y in 0..rows {
            for x in 0..cols {
                assert_eq!(d.joint_weight(x, y), first);
            }
        }
        let map = d.probability_map();
        let uniform = 1.0 / (cols * rows) as f64;
        assert!(map.values.iter().all(|&v| (v - uniform).abs() < 1e-15));
    }

    #[test]
    fn missing_detection_falls_back_uniform() {
        let d = build_crop_distribution(8, 8, None, &cfg(4)).unwrap();
        assert!(d.fallback_uniform());
        assert_eq!(d.total_weight(), 0);
        let map = d.probability_map();
        assert!(map.values.iter().all(|&v| (v - 1.0 / 25.0).abs() < 1e-15));
    }

    #[test]
    fn image_smaller_than_crop_errors() {
        assert!(build_crop_distribution(3, 8, None, &cfg(4)).is_err());
        assert!(build_crop_distribution(8, 3, None, &cfg(4)).is_err());
    }

    #[test]
    fn cdf_search_convention() {
        let cdf = vec![2u64, 5, 8];
        assert_eq!(cdf.partition_point(|&c| c <= 0), 0);
        assert_eq!(cdf.partition_point(|&c| c <= 1), 0);
        assert_eq!(cdf.partition_point(|&c| c <= 2), 1);
        assert_eq!(cdf.partition_point(|&c| c <= 4), 1);
        assert_eq!(cdf.partition_point(|&c| c <= 7), 2);
    }

    #[test]
    fn single_valid_x_position() {
        // width == crop, so x is pinned at 0
        let d = build_crop_distribution(4, 8, Some(rect(1, 2, 3, 7)), &cfg(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (x, _) = d.sample_position(&mut rng);
            assert_eq!(x, 0);
        }
    }

    #[test]
    fn joint_map_is_outer_product_of_profiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let w = rand::Rng::random_range(&mut rng, 5..40usize);
            let h = rand::Rng::random_range(&mut rng, 5..40usize);
            let s = rand::Rng::random_range(&mut rng, 1..=w.min(h));
            let dx0 = rand::Rng::random_range(&mut rng, 0..w as i32 - 1);
            let dy0 = rand::Rng::random_range(&mut rng, 0..h as i32 - 1);
            let det = rect(
                dx0,
                dy0,
                rand::Rng::random_range(&mut rng, dx0 + 1..=w as i32),
                rand::Rng::random_range(&mut rng, dy0 + 1..=h as i32),
            );
            let d = build_crop_distribution(w, h, Some(det), &cfg(s)).unwrap();
            let (cols, rows) = d.grid_dims();
            for y in 0..rows {
                for x in 0..cols {
                    // Oracle: count pixels in both the crop and the detection.
                    let mut count = 0u64;
                    for py in 0..h {
                        for px in 0..w {
                            let in_crop = px >= x && px < x + s && py >= y && py < y + s;
                            let in_det = det.contains_point(px as i32, py as i32);
                            if in_crop && in_det {
                                count += 1;
                            }
                        }
                    }
                    assert_eq!(d.joint_weight(x, y), count);
                }
            }
        }
    }

    #[test]
    fn sampling_respects_zero_weights_and_bounds() {
        let d = build_crop_distribution(6, 6, Some(rect(0, 0, 1, 1)), &cfg(4)).unwrap();
        // x profile [1,0,0], y profile [1,0,0]: only (0,0) has mass
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            assert_eq!(d.sample_position(&mut rng), (0, 0));
        }
    }

    #[test]
    fn empirical_frequencies_match_toy() {
        let d = build_crop_distribution(6, 6, Some(rect(2, 0, 5, 6)), &cfg(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200_000;
        let mut x_counts = [0u64; 3];
        let mut y_counts = [0u64; 3];
        for _ in 0..n {
            let (x, y) = d.sample_position(&mut rng);
            x_counts[x] += 1;
            y_counts[y] += 1;
        }
        let expect_x = [2.0 / 8.0, 3.0 / 8.0, 3.0 / 8.0];
        for i in 0..3 {
            assert!((x_counts[i] as f64 / n as f64 - expect_x[i]).abs() < 5e-3);
            assert!((y_counts[i] as f64 / n as f64 - 1.0 / 3.0).abs() < 5e-3);
        }
    }

    #[test]
    fn monotone_preference() {
        let d = build_crop_distribution(16, 16, Some(rect(3, 5, 11, 14)), &cfg(6)).unwrap();
        let map = d.probability_map();
        let (cols, rows) = d.grid_dims();
        for y in 0..rows {
            for x1 in 0..cols {
                for x2 in 0..cols {
                    if d.joint_weight(x1, y) > d.joint_weight(x2, y) {
                        assert!(map.at(x1, y) > map.at(x2, y));
                    }
                }
            }
        }
    }

    #[test]
    fn tau_excludes_low_overlap_positions() {
        let c = SamplerConfig {
            crop_size: 4,
            tau: 9,
            ..SamplerConfig::default()
        };
        let d = build_crop_distribution(6, 6, Some(rect(2, 0, 5, 6)), &c).unwrap();
        // joint weights: x in [2,3,3] times y in [4,4,4]; tau=9 removes x=0
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (x, _) = d.sample_position(&mut rng);
            assert!(x > 0);
        }
        let map = d.probability_map();
        for y in 0..3 {
            assert_eq!(map.at(0, y), 0.0);
        }
        let total: f64 = map.values.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tau_unreachable_falls_back_uniform() {
        let c = SamplerConfig {
            crop_size: 4,
            tau: 1000,
            ..SamplerConfig::default()
        };
        let d = build_crop_distribution(6, 6, Some(rect(2, 0, 5, 6)), &c).unwrap();
        assert!(d.fallback_uniform());
    }

    #[test]
    fn crops_deterministic_and_in_bounds() {
        let img = ImageBuffer::new(12, 10, 1).unwrap();
        let c = cfg(5);
        let d = build_crop_distribution(12, 10, Some(rect(2, 2, 9, 8)), &c).unwrap();
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            d.sample_training_crops(&img, 300, &c, 42, &mut rng).unwrap()
        };
        let a = draw(9);
        let b = draw(9);
        assert_eq!(a, b);
        assert_ne!(a, draw(10));
        for s in &a {
            assert!(img.full_rect().contains_rect(&s.rect(5)));
            assert_eq!(s.image_id, 42);
        }
        assert!(d
            .sample_training_crops(&img, 0, &c, 0, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn flip_fraction_tracks_probability() {
        let img = ImageBuffer::new(8, 8, 1).unwrap();
        let c = cfg(4);
        let d = build_crop_distribution(8, 8, None, &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples = d
            .sample_training_crops(&img, 100_000, &c, 0, &mut rng)
            .unwrap();
        let frac = samples.iter().filter(|s| s.flipped).count() as f64 / samples.len() as f64;
        assert!((0.49..=0.51).contains(&frac), "flip fraction {frac}");

        let none = SamplerConfig {
            flip_probability: 0.0,
            ..c
        };
        let samples = d
            .sample_training_crops(&img, 1000, &none, 0, &mut rng)
            .unwrap();
        assert!(samples.iter().all(|s| !s.flipped));
    }

    #[test]
    fn probability_map_sums_to_one_and_matches_rationals() {
        let d = build_crop_distribution(6, 6, Some(rect(2, 0, 5, 6)), &cfg(4)).unwrap();
        let map = d.probability_map();
        assert_eq!((map.cols, map.rows), (3, 3));
        let total: f64 = map.values.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        // Rows proportional to the x profile [2,3,3]; each row sums to the
        // y share 1/3 of the mass.
        for y in 0..3 {
            assert_eq!(map.at(0, y), 2.0 * 4.0 / 96.0);
            assert_eq!(map.at(1, y), 3.0 * 4.0 / 96.0);
            assert_eq!(map.at(2, y), 3.0 * 4.0 / 96.0);
        }
    }
}
