//! RGB float images: decoding, `.f32` planar files and bilinear resizing.
//!
//! The `.f32` format is an 8-byte header (little-endian u32 width, height)
//! followed by one or three planes of `width·height` little-endian f32
//! values. A single plane is replicated to three channels.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved `height × width × 3` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::contract(format!(
                "image buffer of {} values does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn solid(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        RgbImage::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RgbImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Decodes PNG (or any format `image` recognises) or a `.f32` planar file.
    pub fn load(path: &Path) -> Result<Self> {
        let is_raw = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("f32"));
        if is_raw {
            return Self::from_f32_bytes(&fs::read(path)?)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())));
        }
        let decoded = image::ImageReader::open(path)?
            .with_guessed_format()?
            .decode()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let rgb = decoded.to_rgb32f();
        let (w, h) = rgb.dimensions();
        Self::new(w as usize, h as usize, rgb.into_raw())
    }

    pub fn from_f32_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Image("missing 8-byte header".into()));
        }
        let width = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let height = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let plane = width * height;
        let body = &bytes[8..];
        if plane == 0 || body.len() % 4 != 0 {
            return Err(Error::Image(format!("malformed body for {width}x{height}")));
        }
        let values: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let channels = values.len() / plane;
        if values.len() != plane * channels || !(channels == 1 || channels == 3) {
            return Err(Error::Image(format!(
                "{} values is neither 1 nor 3 planes of {width}x{height}",
                values.len()
            )));
        }
        let mut data = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for c in 0..3 {
                let src = if channels == 1 { 0 } else { c };
                data.push(values[src * plane + p]);
            }
        }
        Self::new(width, height, data)
    }

    pub fn to_f32_bytes(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = Vec::with_capacity(8 + plane * 12);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for c in 0..3 {
            for p in 0..plane {
                out.extend_from_slice(&self.data[p * 3 + c].to_le_bytes());
            }
        }
        out
    }

    pub fn save_f32(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_f32_bytes())?;
        Ok(())
    }

    /// Writes an 8-bit PNG; values are clamped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn clamp_unit(&self) -> Self {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Bilinear resampling with half-pixel centres. Same-size input is
    /// returned unchanged and constant images stay exactly constant.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract(format!("cannot resize to {width}x{height}")));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let xs = sample_axis(self.width, width);
        let ys = sample_axis(self.height, height);
        let mut data = Vec::with_capacity(width * height * 3);
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let (p00, p01) = (self.pixel(x0, y0), self.pixel(x1, y0));
                let (p10, p11) = (self.pixel(x0, y1), self.pixel(x1, y1));
                for c in 0..3 {
                    let top = lerp(p00[c], p01[c], tx);
                    let bottom = lerp(p10[c], p11[c], tx);
                    data.push(lerp(top, bottom, ty));
                }
            }
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::contract(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(RgbImage::from_fn(width, height, |x, y| self.pixel(x0 + x, y0 + y)))
    }

    /// Copies `src` with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, src: &RgbImage, x0: usize, y0: usize) -> Result<()> {
        if x0 + src.width > self.width || y0 + src.height > self.height {
            return Err(Error::contract("pasted image does not fit"));
        }
        for y in 0..src.height {
            let dst = ((y0 + y) * self.width + x0) * 3;
            let s = y * src.width * 3;
            self.data[dst..dst + src.width * 3].copy_from_slice(&src.data[s..s + src.width * 3]);
        }
        Ok(())
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height) as f64;
        acc.map(|v| v / n)
    }
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Source index pair and weight for each destination coordinate.
fn sample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_bit_equal() {
        let img = RgbImage::from_fn(7, 5, |x, y| [x as f32 / 7.0, y as f32 / 5.0, 0.3]);
        assert_eq!(img.resize_bilinear(7, 5).unwrap(), img);
    }

    #[test]
    fn constant_field_stays_constant() {
        let img = RgbImage::solid(448, 448, [0.2, 0.4, 0.6]);
        let small = img.resize_bilinear(224, 224).unwrap();
        assert!(small.data().chunks(3).all(|p| p == [0.2, 0.4, 0.6]));
    }

    #[test]
    fn downscale_by_two_averages_pairs() {
        let img = RgbImage::from_fn(4, 1, |x, _| [x as f32; 3]);
        let half = img.resize_bilinear(2, 1).unwrap();
        assert_eq!(half.pixel(0, 0)[0], 0.5);
        assert_eq!(half.pixel(1, 0)[0], 2.5);
    }

    #[test]
    fn f32_round_trip_and_gray_replication() {
        let img = RgbImage::from_fn(3, 2, |x, y| [x as f32, y as f32, 0.5]);
        assert_eq!(RgbImage::from_f32_bytes(&img.to_f32_bytes()).unwrap(), img);

        let mut gray = Vec::new();
        gray.extend_from_slice(&2u32.to_le_bytes());
        gray.extend_from_slice(&1u32.to_le_bytes());
        gray.extend_from_slice(&0.25f32.to_le_bytes());
        gray.extend_from_slice(&0.75f32.to_le_bytes());
        let g = RgbImage::from_f32_bytes(&gray).unwrap();
        assert_eq!(g.pixel(1, 0), [0.75; 3]);
        assert!(RgbImage::from_f32_bytes(&gray[..10]).is_err());
    }

    #[test]
    fn png_round_trip_is_quantised() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = RgbImage::from_fn(5, 4, |x, y| [x as f32 / 4.0, y as f32 / 3.0, 1.0]);
        img.save_png(&path).unwrap();
        let back = RgbImage::load(&path).unwrap();
        let worst = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn crop_and_paste_are_inverse() {
        let img = RgbImage::from_fn(6, 6, |x, y| [x as f32, y as f32, 0.0]);
        let part = img.crop(2, 3, 3, 2).unwrap();
        let mut canvas = RgbImage::solid(6, 6, [0.0; 3]);
        canvas.paste(&part, 2, 3).unwrap();
        assert_eq!(canvas.crop(2, 3, 3, 2).unwrap(), part);
        assert!(img.crop(5, 5, 2, 2).is_err());
    }
}
