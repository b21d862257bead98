//! Image-plane masks, PNG and run-length encodings.

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    SizeMismatch {
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("run-length counts sum to {sum}, expected {expected}")]
    BadRle { sum: u64, expected: u64 },
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Soft mask with values in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl Mask {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width as usize * height as usize],
        }
    }

    /// Values are clamped to `[0, 1]`; NaN becomes 0.
    pub fn from_values(width: u32, height: u32, mut data: Vec<f32>) -> Result<Self, MaskError> {
        if data.len() != width as usize * height as usize {
            return Err(MaskError::SizeMismatch {
                want_w: width,
                want_h: height,
                got_w: data.len() as u32,
                got_h: 1,
            });
        }
        for v in data.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Self::zeros(width, height);
        for v in 0..height {
            for u in 0..width {
                if f(u, v) {
                    m.set(u, v, 1.0);
                }
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> f32 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, value: f32) {
        self.data[v as usize * self.width as usize + u as usize] = value.clamp(0.0, 1.0);
    }

    #[inline]
    pub fn is_on(&self, u: u32, v: u32) -> bool {
        self.get(u, v) >= 0.5
    }

    pub fn check_size(&self, width: u32, height: u32) -> Result<(), MaskError> {
        if self.width != width || self.height != height {
            return Err(MaskError::SizeMismatch {
                want_w: width,
                want_h: height,
                got_w: self.width,
                got_h: self.height,
            });
        }
        Ok(())
    }

    /// Mask thresholded at 0.5.
    pub fn binarized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Number of pixels at or above 0.5.
    pub fn count_on(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    /// Inclusive pixel bounds `(u0, v0, u1, v1)` of the binarized mask.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bb: Option<(u32, u32, u32, u32)> = None;
        for v in 0..self.height {
            for u in 0..self.width {
                if self.is_on(u, v) {
                    bb = Some(match bb {
                        None => (u, v, u, v),
                        Some((a, b, c, d)) => (a.min(u), b.min(v), c.max(u), d.max(v)),
                    });
                }
            }
        }
        bb
    }

    pub fn to_png(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |u, v| Luma([(self.get(u, v) * 255.0).round() as u8]))
    }

    pub fn from_png(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), MaskError> {
        self.to_png().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, MaskError> {
        Ok(Self::from_png(&image::open(path)?.to_luma8()))
    }

    /// PNG file bytes.
    pub fn png_bytes(&self) -> Result<Vec<u8>, MaskError> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_png().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn to_rle(&self) -> Rle {
        Rle::encode(self)
    }
}

/// Uncompressed run-length encoding of a binary mask.
///
/// Runs walk the image column by column (column-major, as in COCO) and
/// alternate starting with background, so `counts[0]` may be zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(mask: &Mask) -> Self {
        let (w, h) = (mask.width(), mask.height());
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for u in 0..w {
            for v in 0..h {
                let on = mask.is_on(u, v);
                if on != current {
                    counts.push(run);
                    run = 0;
                    current = on;
                }
                run += 1;
            }
        }
        counts.push(run);
        Self { size: [h, w], counts }
    }

    pub fn decode(&self) -> Result<Mask, MaskError> {
        let [h, w] = self.size;
        let total = h as u64 * w as u64;
        let sum: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if sum != total {
            return Err(MaskError::BadRle { sum, expected: total });
        }
        let mut mask = Mask::zeros(w, h);
        let mut pos = 0u64;
        for (i, &c) in self.counts.iter().enumerate() {
            if i % 2 == 1 {
                for p in pos..pos + c as u64 {
                    mask.set((p / h as u64) as u32, (p % h as u64) as u32, 1.0);
                }
            }
            pos += c as u64;
        }
        Ok(mask)
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_known_layout() {
        // 2x3 (w x h); on pixels at column 0 rows 1..2 and column 1 row 0
        let m = Mask::from_fn(2, 3, |u, v| (u == 0 && v >= 1) || (u == 1 && v == 0));
        let rle = m.to_rle();
        assert_eq!(rle.size, [3, 2]);
        assert_eq!(rle.counts, vec![1, 3, 2]);
        assert_eq!(rle.area(), 3);
        assert_eq!(rle.decode().unwrap(), m);
    }

    #[test]
    fn rle_rejects_bad_counts() {
        let rle = Rle { size: [2, 2], counts: vec![1, 1] };
        assert!(matches!(rle.decode(), Err(MaskError::BadRle { .. })));
    }

    #[test]
    fn png_round_trip_binary() {
        let m = Mask::from_fn(17, 9, |u, v| (u * 7 + v * 3) % 5 == 0);
        let bytes = m.png_bytes().unwrap();
        let img = image::load_from_memory(&bytes).unwrap().to_luma8();
        assert_eq!(Mask::from_png(&img), m);
    }

    proptest! {
        #[test]
        fn rle_round_trip(w in 1u32..20, h in 1u32..20, seed in any::<u64>()) {
            let m = Mask::from_fn(w, h, |u, v| (seed >> ((u * 5 + v * 3) % 64)) & 1 == 1);
            prop_assert_eq!(Rle::encode(&m).decode().unwrap(), m);
        }
    }
}
