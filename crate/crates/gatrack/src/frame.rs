//! 8-bit RGB frames.
//!
//! Sequences carry frames in their quantized form so that the in-memory
//! pipeline and a PNG round-trip see bit-identical data.

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    /// Row-major RGB, 3 bytes per pixel.
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn new(h: usize, w: usize) -> Self {
        Frame {
            h,
            w,
            rgb: vec![0; h * w * 3],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.rgb[(row * self.w + col) * 3 + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: u8) {
        self.rgb[(row * self.w + col) * 3 + ch] = v;
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut sums = [0.0f64; 3];
        for px in self.rgb.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as f64;
            }
        }
        let n = (self.h * self.w).max(1) as f64;
        [sums[0] / n, sums[1] / n, sums[2] / n]
    }

    pub fn load(path: &Path) -> Result<Frame> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Ok(Frame {
            h: img.height() as usize,
            w: img.width() as usize,
            rgb: img.into_raw(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let img: image::RgbImage =
            image::ImageBuffer::from_raw(self.w as u32, self.h as u32, self.rgb.clone())
                .ok_or_else(|| Error::Image("frame buffer size mismatch".into()))?;
        img.save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Burns a rectangle outline into the frame, two pixels thick.
    pub fn draw_box(&mut self, b: &BoundingBox, color: [u8; 3]) {
        let x0 = b.x0().floor().max(0.0) as i64;
        let y0 = b.y0().floor().max(0.0) as i64;
        let x1 = (b.x1().ceil() as i64).min(self.w as i64 - 1).max(0);
        let y1 = (b.y1().ceil() as i64).min(self.h as i64 - 1).max(0);
        let x0 = x0.min(self.w as i64 - 1);
        let y0 = y0.min(self.h as i64 - 1);
        for t in 0..2i64 {
            for x in x0..=x1 {
                for y in [y0 + t, y1 - t] {
                    if (0..self.h as i64).contains(&y) {
                        for c in 0..3 {
                            self.set(y as usize, x as usize, c, color[c]);
                        }
                    }
                }
            }
            for y in y0..=y1 {
                for x in [x0 + t, x1 - t] {
                    if (0..self.w as i64).contains(&x) {
                        for c in 0..3 {
                            self.set(y as usize, x as usize, c, color[c]);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let mut f = Frame::new(8, 11);
        for (i, v) in f.rgb.iter_mut().enumerate() {
            *v = (i * 37 % 256) as u8;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.png");
        f.save(&path).unwrap();
        let g = Frame::load(&path).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn mean_rgb_averages_each_channel() {
        let mut f = Frame::new(2, 2);
        for r in 0..2 {
            for c in 0..2 {
                f.set(r, c, 0, 10);
                f.set(r, c, 1, 20);
                f.set(r, c, 2, 30);
            }
        }
        assert_eq!(f.mean_rgb(), [10.0, 20.0, 30.0]);
    }
}
