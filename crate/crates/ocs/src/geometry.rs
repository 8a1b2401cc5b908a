//! Integer rectangle arithmetic, image buffers, and integral images.
//!
//! Rectangles are half-open (`[x0, x1) x [y0, y1)`) with strictly positive
//! area, so areas and overlaps are integer-exact and immune to off-by-one
//! drift. Images are row-major, channel-interleaved 8-bit buffers with 1
//! (grayscale) or 3 (RGB) channels.

use crate::{OcsError, Result};

/// Half-open integer pixel rectangle `[x0, x1) x [y0, y1)`.
///
/// Invariant: `x0 < x1` and `y0 < y1`, enforced at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    x0: i32,
    y0: i32,
    x1: i32,
    y1: i32,
}

impl Rect {
    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Result<Rect> {
        if x0 >= x1 || y0 >= y1 {
            return Err(OcsError::Geometry(format!(
                "degenerate rect ({x0},{y0},{x1},{y1}): needs x0 < x1 and y0 < y1"
            )));
        }
        Ok(Rect { x0, y0, x1, y1 })
    }

    /// Rect from top-left corner and side lengths.
    pub fn from_origin_size(x: i32, y: i32, w: i32, h: i32) -> Result<Rect> {
        Rect::new(x, y, x + w, y + h)
    }

    pub fn x0(&self) -> i32 {
        self.x0
    }
    pub fn y0(&self) -> i32 {
        self.y0
    }
    pub fn x1(&self) -> i32 {
        self.x1
    }
    pub fn y1(&self) -> i32 {
        self.y1
    }

    pub fn width(&self) -> i32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i64 {
        self.width() as i64 * self.height() as i64
    }

    /// Center point. Half-pixel centers are exact in f64.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }

    pub fn contains_point(&self, x: i32, y: i32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }

    /// Intersection rectangle, or `None` when disjoint.
    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        if x0 < x1 && y0 < y1 {
            Some(Rect { x0, y0, x1, y1 })
        } else {
            None
        }
    }

    /// Pixel count of the intersection; 0 when disjoint.
    pub fn intersect_area(&self, other: &Rect) -> i64 {
        self.intersect(other).map_or(0, |r| r.area())
    }

    /// Intersection over union, in `[0, 1]`.
    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersect_area(other);
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    /// Clip to the rectangle `[0, w) x [0, h)`. `None` when nothing is left.
    pub fn clip_to_bounds(&self, w: i32, h: i32) -> Option<Rect> {
        if w < 1 || h < 1 {
            return None;
        }
        self.intersect(&Rect {
            x0: 0,
            y0: 0,
            x1: w,
            y1: h,
        })
    }

    /// Map through an image resize from `(from_w, from_h)` to `(to_w, to_h)`.
    ///
    /// Corners scale proportionally with round-half-up; the result is clamped
    /// back to at least one pixel inside the target bounds.
    pub fn scale_between(&self, from: (i32, i32), to: (i32, i32)) -> Rect {
        let sx = to.0 as f64 / from.0 as f64;
        let sy = to.1 as f64 / from.1 as f64;
        let mut x0 = round_half_up(self.x0 as f64 * sx);
        let mut y0 = round_half_up(self.y0 as f64 * sy);
        let mut x1 = round_half_up(self.x1 as f64 * sx);
        let mut y1 = round_half_up(self.y1 as f64 * sy);
        x0 = x0.clamp(0, to.0 - 1);
        y0 = y0.clamp(0, to.1 - 1);
        x1 = x1.clamp(x0 + 1, to.0);
        y1 = y1.clamp(y0 + 1, to.1);
        Rect { x0, y0, x1, y1 }
    }

    /// Mirror across the vertical axis of an image of the given width.
    pub fn hflip_within(&self, image_width: i32) -> Rect {
        Rect {
            x0: image_width - self.x1,
            y0: self.y0,
            x1: image_width - self.x0,
            y1: self.y1,
        }
    }
}

/// Round-half-up to the nearest integer.
pub(crate) fn round_half_up(v: f64) -> i32 {
    (v + 0.5).floor() as i32
}

/// Row-major, channel-interleaved 8-bit image. 1 channel (grayscale) or 3
/// channels (RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<ImageBuffer> {
        Self::from_vec(width, height, channels, vec![0; width * height * channels])
    }

    pub fn from_vec(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<ImageBuffer> {
        if width == 0 || height == 0 {
            return Err(OcsError::Geometry(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(OcsError::Geometry(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(OcsError::Geometry(format!(
                "sample count {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Whole-image rect.
    pub fn full_rect(&self) -> Rect {
        Rect {
            x0: 0,
            y0: 0,
            x1: self.width as i32,
            y1: self.height as i32,
        }
    }

    #[inline]
    pub fn sample(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set_sample(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel-mean grayscale copy. Identity for 1-channel images.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.width * self.height);
        for px in self.data.chunks_exact(3) {
            let sum = px[0] as u16 + px[1] as u16 + px[2] as u16;
            data.push((sum / 3) as u8);
        }
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Resize so the shorter side equals `target` exactly; the longer side
    /// scales proportionally (round-half-up, minimum 1). Bilinear.
    pub fn resize_shorter_side(&self, target: usize) -> ImageBuffer {
        let (w, h) = (self.width, self.height);
        let (nw, nh) = if w <= h {
            let nh = round_half_up(h as f64 * target as f64 / w as f64).max(1) as usize;
            (target, nh)
        } else {
            let nw = round_half_up(w as f64 * target as f64 / h as f64).max(1) as usize;
            (nw, target)
        };
        self.resize_to(nw, nh)
    }

    /// Bilinear resize to exact dimensions. Pixel centers are aligned
    /// (`src = (dst + 0.5) * in/out - 0.5`), so a same-size resize copies
    /// pixels unchanged.
    pub fn resize_to(&self, nw: usize, nh: usize) -> ImageBuffer {
        if nw == self.width && nh == self.height {
            return self.clone();
        }
        let c = self.channels;
        let mut data = vec![0u8; nw * nh * c];
        let sx = self.width as f64 / nw as f64;
        let sy = self.height as f64 / nh as f64;
        for oy in 0..nh {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for ox in 0..nw {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for ch in 0..c {
                    let p00 = self.sample(x0, y0, ch) as f64;
                    let p10 = self.sample(x1, y0, ch) as f64;
                    let p01 = self.sample(x0, y1, ch) as f64;
                    let p11 = self.sample(x1, y1, ch) as f64;
                    let top = p00 + (p10 - p00) * wx;
                    let bot = p01 + (p11 - p01) * wx;
                    let v = top + (bot - top) * wy;
                    data[(oy * nw + ox) * c + ch] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
                }
            }
        }
        ImageBuffer {
            width: nw,
            height: nh,
            channels: c,
            data,
        }
    }

    /// Mirror image left-right: column `c` maps to `width - 1 - c`.
    pub fn flip_horizontal(&self) -> ImageBuffer {
        let mut out = self.clone();
        let c = self.channels;
        for y in 0..self.height {
            for x in 0..self.width {
                for ch in 0..c {
                    out.data[(y * self.width + (self.width - 1 - x)) * c + ch] =
                        self.data[(y * self.width + x) * c + ch];
                }
            }
        }
        out
    }

    /// Copy out the pixels under `r`. Errors when `r` is not fully inside the
    /// image, which indicates a caller bug.
    pub fn crop(&self, r: &Rect) -> Result<ImageBuffer> {
        if !self.full_rect().contains_rect(r) {
            return Err(OcsError::Geometry(format!(
                "crop rect ({},{},{},{}) exceeds {}x{} image",
                r.x0, r.y0, r.x1, r.y1, self.width, self.height
            )));
        }
        let (cw, chh) = (r.width() as usize, r.height() as usize);
        let c = self.channels;
        let mut data = Vec::with_capacity(cw * chh * c);
        for y in r.y0 as usize..r.y1 as usize {
            let start = (y * self.width + r.x0 as usize) * c;
            data.extend_from_slice(&self.data[start..start + cw * c]);
        }
        ImageBuffer::from_vec(cw, chh, c, data)
    }
}

/// Summed-area table with a zero first row and column, one `(w+1) x (h+1)`
/// table of 64-bit sums per channel. Rectangle sums are exact 4-corner
/// lookups.
#[derive(Debug, Clone)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    channels: usize,
    tables: Vec<Vec<u64>>,
}

impl IntegralImage {
    pub fn from_image(img: &ImageBuffer) -> IntegralImage {
        let (w, h, c) = (img.width(), img.height(), img.channels());
        let stride = w + 1;
        let mut tables = vec![vec![0u64; stride * (h + 1)]; c];
        for (ch, table) in tables.iter_mut().enumerate() {
            for y in 0..h {
                let mut row_sum = 0u64;
                for x in 0..w {
                    row_sum += img.sample(x, y, ch) as u64;
                    table[(y + 1) * stride + (x + 1)] = table[y * stride + (x + 1)] + row_sum;
                }
            }
        }
        IntegralImage {
            width: w,
            height: h,
            channels: c,
            tables,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Sum of channel `ch` over `r`, which must lie inside the image.
    pub fn rect_sum(&self, ch: usize, r: &Rect) -> u64 {
        debug_assert!(r.x0 >= 0 && r.y0 >= 0);
        debug_assert!(r.x1 as usize <= self.width && r.y1 as usize <= self.height);
        let stride = self.width + 1;
        let t = &self.tables[ch];
        let (x0, y0, x1, y1) = (r.x0 as usize, r.y0 as usize, r.x1 as usize, r.y1 as usize);
        t[y1 * stride + x1] + t[y0 * stride + x0] - t[y0 * stride + x1] - t[y1 * stride + x0]
    }

    /// Raw table value at `(x, y)` for channel `ch`; indices run to
    /// `width`/`height` inclusive.
    pub fn table_value(&self, ch: usize, x: usize, y: usize) -> u64 {
        self.tables[ch][y * (self.width + 1) + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rect(x0: i32, y0: i32, x1: i32, y1: i32) -> Rect {
        Rect::new(x0, y0, x1, y1).unwrap()
    }

    fn random_rect(rng: &mut StdRng, max: i32) -> Rect {
        let x0 = rng.random_range(0..max - 1);
        let y0 = rng.random_range(0..max - 1);
        let x1 = rng.random_range(x0 + 1..=max);
        let y1 = rng.random_range(y0 + 1..=max);
        rect(x0, y0, x1, y1)
    }

    /// Per-pixel membership oracle for intersection area.
    fn intersect_area_by_enumeration(a: &Rect, b: &Rect) -> i64 {
        let mut count = 0;
        for y in a.y0().min(b.y0())..a.y1().max(b.y1()) {
            for x in a.x0().min(b.x0())..a.x1().max(b.x1()) {
                if a.contains_point(x, y) && b.contains_point(x, y) {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn degenerate_rects_unconstructible() {
        assert!(Rect::new(0, 0, 0, 5).is_err());
        assert!(Rect::new(5, 0, 5, 5).is_err());
        assert!(Rect::new(0, 3, 5, 3).is_err());
        assert!(Rect::new(3, 0, 1, 5).is_err());
    }

    #[test]
    fn intersect_area_analytic_cases() {
        assert_eq!(rect(0, 0, 10, 10).intersect_area(&rect(5, 5, 15, 15)), 25);
        assert_eq!(
            rect(0, 0, 224, 224).intersect_area(&rect(0, 0, 224, 224)),
            50176
        );
        // Half-open: sharing an edge means disjoint.
        assert_eq!(rect(0, 0, 5, 5).intersect_area(&rect(5, 5, 10, 10)), 0);
        assert_eq!(rect(0, 0, 5, 5).intersect_area(&rect(5, 0, 10, 5)), 0);
    }

    #[test]
    fn intersect_area_matches_pixel_enumeration() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..1000 {
            let a = random_rect(&mut rng, 40);
            let b = random_rect(&mut rng, 40);
            let expected = intersect_area_by_enumeration(&a, &b);
            assert_eq!(a.intersect_area(&b), expected);
            assert_eq!(b.intersect_area(&a), expected, "symmetry");
        }
    }

    #[test]
    fn intersect_area_bounded_by_min_area() {
        let mut rng = StdRng::seed_from_u64(12);
        for _ in 0..500 {
            let a = random_rect(&mut rng, 30);
            let b = random_rect(&mut rng, 30);
            let inter = a.intersect_area(&b);
            assert!(inter <= a.area().min(b.area()));
            let contained = a.contains_rect(&b) || b.contains_rect(&a);
            assert_eq!(inter == a.area().min(b.area()), contained);
        }
    }

    #[test]
    fn iou_cases() {
        let a = rect(0, 0, 10, 10);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&rect(20, 20, 30, 30)), 0.0);
        let b = rect(5, 5, 15, 15);
        let expected = 25.0 / 175.0;
        assert!((a.iou(&b) - expected).abs() < 1e-12);
        assert_eq!(a.iou(&b), b.iou(&a));
    }

    #[test]
    fn iou_one_only_for_identical() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..500 {
            let a = random_rect(&mut rng, 20);
            let b = random_rect(&mut rng, 20);
            if a.iou(&b) == 1.0 {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn resize_identity_when_already_target() {
        let mut rng = StdRng::seed_from_u64(14);
        let data: Vec<u8> = (0..256 * 256 * 3).map(|_| rng.random()).collect();
        let img = ImageBuffer::from_vec(256, 256, 3, data).unwrap();
        let out = img.resize_shorter_side(256);
        assert_eq!(out, img);
    }

    #[test]
    fn resize_dimension_arithmetic() {
        let img = ImageBuffer::new(300, 600, 1).unwrap();
        let out = img.resize_shorter_side(256);
        assert_eq!((out.width(), out.height()), (256, 512));

        let img = ImageBuffer::new(640, 480, 1).unwrap();
        let out = img.resize_shorter_side(256);
        // 640 * 256 / 480 = 341.33 rounds to 341
        assert_eq!((out.width(), out.height()), (341, 256));
    }

    #[test]
    fn resize_idempotent_at_target() {
        let mut rng = StdRng::seed_from_u64(15);
        let data: Vec<u8> = (0..120 * 77).map(|_| rng.random()).collect();
        let img = ImageBuffer::from_vec(120, 77, 1, data).unwrap();
        let once = img.resize_shorter_side(77);
        assert_eq!(once, img);
    }

    #[test]
    fn flip_tiny_and_involution() {
        let img = ImageBuffer::from_vec(2, 1, 1, vec![7, 9]).unwrap();
        assert_eq!(img.flip_horizontal().data(), &[9, 7]);

        let mut rng = StdRng::seed_from_u64(16);
        let data: Vec<u8> = (0..31 * 17 * 3).map(|_| rng.random()).collect();
        let img = ImageBuffer::from_vec(31, 17, 3, data).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn flip_symmetric_image_unchanged() {
        let mut img = ImageBuffer::new(8, 4, 1).unwrap();
        for y in 0..4 {
            for x in 0..8 {
                let v = (x.min(7 - x) * 10 + y) as u8;
                img.set_sample(x, y, 0, v);
            }
        }
        assert_eq!(img.flip_horizontal(), img);
    }

    #[test]
    fn crop_cases() {
        let mut rng = StdRng::seed_from_u64(17);
        let data: Vec<u8> = (0..20 * 10 * 3).map(|_| rng.random()).collect();
        let img = ImageBuffer::from_vec(20, 10, 3, data).unwrap();

        assert_eq!(img.crop(&img.full_rect()).unwrap(), img);

        let px = img.crop(&rect(3, 4, 4, 5)).unwrap();
        assert_eq!(px.data(), &[
            img.sample(3, 4, 0),
            img.sample(3, 4, 1),
            img.sample(3, 4, 2)
        ]);

        assert!(img.crop(&rect(15, 5, 25, 9)).is_err());
        assert!(img.crop(&rect(-1, 0, 5, 5)).is_err());

        // crop of crop == crop at offset-composed rect
        let outer = rect(2, 1, 18, 9);
        let inner = rect(3, 2, 10, 6);
        let two_step = img.crop(&outer).unwrap().crop(&inner).unwrap();
        let composed = rect(2 + 3, 1 + 2, 2 + 10, 1 + 6);
        assert_eq!(two_step, img.crop(&composed).unwrap());
    }

    #[test]
    fn crop_commutes_with_flip_under_mirrored_rect() {
        let mut rng = StdRng::seed_from_u64(18);
        let data: Vec<u8> = (0..24 * 11).map(|_| rng.random()).collect();
        let img = ImageBuffer::from_vec(24, 11, 1, data).unwrap();
        let r = rect(5, 2, 14, 9);
        let a = img.flip_horizontal().crop(&r.hflip_within(24)).unwrap();
        let b = img.crop(&r).unwrap().flip_horizontal();
        assert_eq!(a, b);
    }

    #[test]
    fn integral_image_small_cases() {
        let ones = ImageBuffer::from_vec(2, 2, 1, vec![1; 4]).unwrap();
        let ii = IntegralImage::from_image(&ones);
        for x in 0..=2 {
            assert_eq!(ii.table_value(0, x, 0), 0, "first row zero");
        }
        for y in 0..=2 {
            assert_eq!(ii.table_value(0, 0, y), 0, "first column zero");
        }
        assert_eq!(ii.table_value(0, 1, 1), 1);
        assert_eq!(ii.table_value(0, 2, 1), 2);
        assert_eq!(ii.table_value(0, 1, 2), 2);
        assert_eq!(ii.table_value(0, 2, 2), 4);

        let zeros = ImageBuffer::new(5, 3, 3).unwrap();
        let ii = IntegralImage::from_image(&zeros);
        for ch in 0..3 {
            assert_eq!(ii.rect_sum(ch, &zeros.full_rect()), 0);
        }
    }

    #[test]
    fn integral_image_matches_brute_force() {
        let mut rng = StdRng::seed_from_u64(19);
        let data: Vec<u8> = (0..37 * 23 * 3).map(|_| rng.random()).collect();
        let img = ImageBuffer::from_vec(37, 23, 3, data).unwrap();
        let ii = IntegralImage::from_image(&img);
        for _ in 0..200 {
            let x0 = rng.random_range(0..36);
            let y0 = rng.random_range(0..22);
            let r = rect(
                x0,
                y0,
                rng.random_range(x0 + 1..=37),
                rng.random_range(y0 + 1..=23),
            );
            for ch in 0..3 {
                let mut brute = 0u64;
                for y in r.y0()..r.y1() {
                    for x in r.x0()..r.x1() {
                        brute += img.sample(x as usize, y as usize, ch) as u64;
                    }
                }
                assert_eq!(ii.rect_sum(ch, &r), brute);
            }
        }
    }

    #[test]
    fn scale_between_maps_and_clamps() {
        let r = rect(10, 20, 30, 60);
        let mapped = r.scale_between((100, 100), (200, 50));
        assert_eq!(mapped, rect(20, 10, 60, 30));

        // A sliver must survive as at least one pixel.
        let tiny = rect(0, 0, 1, 1);
        let mapped = tiny.scale_between((100, 100), (10, 10));
        assert!(mapped.area() >= 1);
        assert!(rect(0, 0, 10, 10).contains_rect(&mapped));
    }
}
