//! RGB raster with channel intensities in `[0, 1]`, plus the geometric
//! primitives (crop boxes, bilinear resampling, flips) the pipeline needs.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("invalid image dimensions {width}x{height}")]
    EmptyImage { width: usize, height: usize },
    #[error("pixel buffer has {got} values, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("intensity {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("crop box {0:?} does not fit the image")]
    BadCrop(CropBox),
    #[error("{path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

impl ImageError {
    pub fn is_io(&self) -> bool {
        matches!(self, ImageError::Codec { source: image::ImageError::IoError(_), .. })
    }
}

/// Row-major `height x width x 3` raster, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyImage { width, height });
        }
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(ImageError::BufferSize {
                expected,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Image with every pixel set to `rgb`.
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self, ImageError> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data)
    }

    /// Build an image from a per-pixel function of `(x, y)`; values are clamped.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(width, height, data)
    }

    pub(crate) fn from_raw_unchecked(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * 3);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(3)
    }

    /// Unweighted channel mean of the pixel at `(x, y)`.
    pub fn gray(&self, x: usize, y: usize) -> f64 {
        let [r, g, b] = self.pixel(x, y);
        (r + g + b) / 3.0
    }

    /// Per-channel arithmetic means.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sum = [0.0; 3];
        for px in self.pixels() {
            for c in 0..3 {
                sum[c] += px[c];
            }
        }
        let n = (self.width * self.height) as f64;
        sum.map(|s| s / n)
    }

    pub fn full_box(&self) -> CropBox {
        CropBox {
            x0: 0,
            y0: 0,
            x1: self.width,
            y1: self.height,
        }
    }

    pub fn crop(&self, b: CropBox) -> Result<RgbImage, ImageError> {
        if !b.fits(self.width, self.height) {
            return Err(ImageError::BadCrop(b));
        }
        let (w, h) = (b.width(), b.height());
        let mut data = Vec::with_capacity(w * h * 3);
        for y in b.y0..b.y1 {
            let start = (y * self.width + b.x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Self::from_raw_unchecked(w, h, data))
    }

    /// Bilinear resampling to exactly `width x height` (pixel-center aligned).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<RgbImage, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyImage { width, height });
        }
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let xs = sample_positions(self.width, width);
        let ys = sample_positions(self.height, height);
        let mut data = Vec::with_capacity(width * height * 3);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for c in 0..3 {
                    let at = |x: usize, y: usize| self.data[(y * self.width + x) * 3 + c];
                    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                    data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
                }
            }
        }
        Ok(Self::from_raw_unchecked(width, height, data))
    }

    pub fn flipped(&self, flip: Flip) -> RgbImage {
        let (h_flip, v_flip) = match flip {
            Flip::None => return self.clone(),
            Flip::Horizontal => (true, false),
            Flip::Vertical => (false, true),
            Flip::Both => (true, true),
        };
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            let sy = if v_flip { self.height - 1 - y } else { y };
            for x in 0..self.width {
                let sx = if h_flip { self.width - 1 - x } else { x };
                data.extend_from_slice(&self.pixel(sx, sy));
            }
        }
        Self::from_raw_unchecked(self.width, self.height, data)
    }

    /// Apply per-channel gains and clip to `[0, 1]`.
    pub fn scaled_channels(&self, gains: [f64; 3]) -> RgbImage {
        let data = self
            .data
            .chunks_exact(3)
            .flat_map(|px| (0..3).map(move |c| (px[c] * gains[c]).clamp(0.0, 1.0)))
            .collect();
        Self::from_raw_unchecked(self.width, self.height, data)
    }

    pub fn load(path: &Path) -> Result<RgbImage, ImageError> {
        let codec = |source| ImageError::Codec {
            path: path.display().to_string(),
            source,
        };
        let img = image::open(path).map_err(codec)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
        RgbImage::new(w as usize, h as usize, data)
    }

    /// Quantize to 8 bits per channel.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer size checked at construction")
    }

    /// Encode as an 8-bit PNG.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|source| ImageError::Codec {
                path: "<memory>".into(),
                source,
            })?;
        Ok(out.into_inner())
    }
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Per-pixel boolean mask with the same geometry as an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height, "mask buffer size");
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Coordinates `(x, y)` of every set pixel, row-major.
    pub fn set_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i % self.width, i / self.width))
    }
}

/// Half-open integer rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flip {
    None,
    #[serde(rename = "h")]
    Horizontal,
    #[serde(rename = "v")]
    Vertical,
    #[serde(rename = "hv")]
    Both,
}

impl Flip {
    pub const ALL: [Flip; 4] = [Flip::None, Flip::Horizontal, Flip::Vertical, Flip::Both];

    pub fn code(self) -> &'static str {
        match self {
            Flip::None => "none",
            Flip::Horizontal => "h",
            Flip::Vertical => "v",
            Flip::Both => "hv",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = (x + y * w) as f64 / (w * h) as f64;
            [v, 1.0 - v, 0.5]
        })
        .unwrap()
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(matches!(RgbImage::new(0, 3, vec![]), Err(ImageError::EmptyImage { .. })));
        assert!(matches!(
            RgbImage::new(1, 1, vec![0.0; 2]),
            Err(ImageError::BufferSize { .. })
        ));
        assert!(matches!(
            RgbImage::new(1, 1, vec![0.0, 1.5, 0.0]),
            Err(ImageError::OutOfRange { index: 1, .. })
        ));
    }

    #[test]
    fn crop_copies_the_window() {
        let img = ramp(5, 4);
        let b = CropBox { x0: 1, y0: 2, x1: 4, y1: 4 };
        let c = img.crop(b).unwrap();
        assert_eq!(c.dims(), (3, 2));
        assert_eq!(c.pixel(0, 0), img.pixel(1, 2));
        assert_eq!(c.pixel(2, 1), img.pixel(3, 3));
        assert!(img.crop(CropBox { x0: 0, y0: 0, x1: 6, y1: 1 }).is_err());
    }

    #[test]
    fn resize_keeps_constant_images_constant() {
        let img = RgbImage::filled(17, 9, [0.25, 0.5, 0.75]).unwrap();
        let r = img.resize_bilinear(7, 4).unwrap();
        for px in r.pixels() {
            assert!((px[0] - 0.25).abs() < 1e-12);
            assert!((px[2] - 0.75).abs() < 1e-12);
        }
        let up = img.resize_bilinear(40, 30).unwrap();
        assert_eq!(up.dims(), (40, 30));
    }

    #[test]
    fn double_flip_is_identity() {
        let img = ramp(6, 3);
        for f in Flip::ALL {
            assert_eq!(img.flipped(f).flipped(f), img);
        }
        assert_eq!(img.flipped(Flip::Horizontal).pixel(0, 0), img.pixel(5, 0));
        assert_eq!(img.flipped(Flip::Vertical).pixel(0, 0), img.pixel(0, 2));
        assert_eq!(img.flipped(Flip::Both).pixel(0, 0), img.pixel(5, 2));
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let img = RgbImage::from_fn(4, 3, |x, y| {
            [x as f64 * 51.0 / 255.0, y as f64 * 85.0 / 255.0, 1.0]
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        std::fs::write(&p, img.to_png_bytes().unwrap()).unwrap();
        let back = RgbImage::load(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
