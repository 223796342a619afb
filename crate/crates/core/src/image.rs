//! Planar float images and PNG I/O.
//!
//! Intensities are `f32` in `[0, 1]`. [`Image`] stores channels as separate
//! row-major planes, which is also the `(C, H, W)` tensor layout the
//! networks consume.

use std::path::Path;

use crate::error::{Error, Result};

/// Luma weights used for every RGB to gray conversion.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "gray image {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite intensity".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample with coordinates clamped to the image border.
    #[inline]
    pub fn sample_clamped(&self, x: f64, y: f64) -> f64 {
        sample_plane(&self.data, self.width, self.height, x, y)
    }
}

/// Multi-channel planar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * width * height {
            return Err(Error::Dimension(format!(
                "image {channels}x{width}x{height} needs {} values, got {}",
                channels * width * height,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            width,
            height,
            data,
        })
    }

    pub fn filled(channels: usize, width: usize, height: usize, value: f32) -> Self {
        Self {
            channels,
            width,
            height,
            data: vec![value; channels * width * height],
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Copy out the `w x h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Dimension(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds image {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(self.channels * w * h);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * self.width + x0..y * self.width + x0 + w]);
            }
        }
        Ok(Image {
            channels: self.channels,
            width: w,
            height: h,
            data,
        })
    }

    /// Luma conversion for 3-channel images; single-channel images pass through.
    pub fn to_gray(&self) -> Result<GrayImage> {
        match self.channels {
            1 => GrayImage::new(self.width, self.height, self.data.clone()),
            3 => {
                let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
                let data = r
                    .iter()
                    .zip(g)
                    .zip(b)
                    .map(|((&r, &g), &b)| LUMA[0] * r + LUMA[1] * g + LUMA[2] * b)
                    .collect();
                GrayImage::new(self.width, self.height, data)
            }
            c => Err(Error::InvalidArgument(format!(
                "cannot convert {c}-channel image to gray"
            ))),
        }
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * w * h];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = f32::from(px[c]) / 255.0;
            }
        }
        Image::new(3, w, h, data)
    }

    /// Quantize to 8 bits per channel. Gray images are written as L8,
    /// 3-channel images as RGB8.
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(n * self.channels);
        for i in 0..n {
            for c in 0..self.channels {
                out.push(to_u8(self.data[c * n + i]));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let buf = self.to_u8_interleaved();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => {
                return Err(Error::InvalidArgument(format!(
                    "cannot encode {c}-channel image as png"
                )))
            }
        };
        image::save_buffer_with_format(path, &buf, w, h, color, image::ImageFormat::Png)?;
        Ok(())
    }
}

impl From<GrayImage> for Image {
    fn from(g: GrayImage) -> Self {
        Image {
            channels: 1,
            width: g.width,
            height: g.height,
            data: g.data,
        }
    }
}

#[inline]
pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear sample of a row-major plane; coordinates are clamped so samples
/// outside the plane take the border value.
#[inline]
pub(crate) fn sample_plane(data: &[f32], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p = |xx: usize, yy: usize| f64::from(data[yy * width + xx]);
    let top = p(x0, y0) + fx * (p(x1, y0) - p(x0, y0));
    let bottom = p(x0, y1) + fx * (p(x1, y1) - p(x0, y1));
    top + fy * (bottom - top)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_copies_window() {
        let img = Image::new(1, 3, 2, vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let c = img.crop(1, 0, 2, 2).unwrap();
        assert_eq!(c.data(), &[1., 2., 4., 5.]);
        assert!(img.crop(2, 0, 2, 2).is_err());
    }

    #[test]
    fn gray_uses_luma_weights() {
        let img = Image::new(3, 1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(img.to_gray().unwrap().data(), &[0.299]);
    }

    #[test]
    fn sample_is_exact_at_integer_coordinates_and_clamps() {
        let g = GrayImage::from_fn(4, 3, |x, y| (x + 10 * y) as f32);
        assert_eq!(g.sample_clamped(2.0, 1.0), 12.0);
        assert_eq!(g.sample_clamped(-5.0, -5.0), 0.0);
        assert_eq!(g.sample_clamped(50.0, 50.0), 23.0);
        assert!((g.sample_clamped(1.5, 0.5) - 6.5).abs() < 1e-12);
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let data: Vec<f32> = (0..12).map(|i| (i * 20) as f32 / 255.0).collect();
        let img = Image::new(3, 2, 2, data).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
