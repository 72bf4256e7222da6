//! Dermoscopy image normalization: field-of-view cropping driven by an
//! equivalent-moment ellipse, Shades-of-Gray color constancy, and
//! aspect-preserving downscaling.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};
use crate::fsutil::write_atomic;
use crate::image::{BinaryMask, CropBox, RgbImage};
use crate::par::{self, Execution};

/// Floor applied to the outside-box mean in [`should_crop`].
pub const OUTSIDE_MEAN_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocessError {
    #[error("mask has fewer than three pixels or all set pixels are collinear")]
    DegenerateMask,
    #[error("illuminant estimate for channel {channel} is zero")]
    ZeroChannel { channel: usize },
    #[error("invalid preprocessing parameter: {0}")]
    InvalidParameter(String),
}

/// Ellipse with the same first and second moments as a binary region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseFit {
    pub centroid_x: f64,
    pub centroid_y: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Angle of the major axis against the x axis, in `(-pi/2, pi/2]`.
    pub orientation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Binarization threshold as a fraction of full scale.
    pub threshold: f64,
    /// Minkowski order of the Shades-of-Gray illuminant estimate.
    pub p: f64,
    /// Longest side after resizing.
    pub target: usize,
    /// Scale applied to the ellipse half-extents when deriving the crop box.
    pub inset: f64,
    /// Minimum inside/outside mean-intensity ratio for cropping to fire.
    pub ratio_threshold: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            threshold: 0.04,
            p: 6.0,
            target: 600,
            inset: 1.0,
            ratio_threshold: 2.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |m: String| Err(PreprocessError::InvalidParameter(m));
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} not in (0, 1)", self.threshold));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return bad(format!("Minkowski order {} must be >= 1", self.p));
        }
        if self.target == 0 {
            return bad("target must be >= 1".into());
        }
        if !(self.inset > 0.0 && self.inset <= 1.0) {
            return bad(format!("inset {} not in (0, 1]", self.inset));
        }
        if !(self.ratio_threshold > 0.0 && self.ratio_threshold.is_finite()) {
            return bad(format!("ratio threshold {} must be positive", self.ratio_threshold));
        }
        Ok(())
    }
}

/// Outcome of the cropping stage for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropReport {
    pub cropped: bool,
    /// The field-of-view mask could not be fitted; the image was left uncropped.
    pub warn_degenerate: bool,
    /// Color constancy was skipped because a channel was entirely black.
    pub warn_zero_channel: bool,
    /// Region kept from the original image (the full frame when not cropped).
    pub region: CropBox,
}

/// Set every pixel whose channel mean exceeds `threshold`.
pub fn binarize_fov(img: &RgbImage, threshold: f64) -> BinaryMask {
    let bits = img
        .pixels()
        .map(|px| (px[0] + px[1] + px[2]) / 3.0 > threshold)
        .collect();
    BinaryMask::new(img.width(), img.height(), bits)
}

pub fn fit_fov_ellipse(mask: &BinaryMask) -> Result<EllipseFit, PreprocessError> {
    let n = mask.count();
    if n < 3 {
        return Err(PreprocessError::DegenerateMask);
    }
    let nf = n as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for (x, y) in mask.set_pixels() {
        sx += x as f64;
        sy += y as f64;
    }
    let (cx, cy) = (sx / nf, sy / nf);
    let (mut mu20, mut mu02, mut mu11) = (0.0, 0.0, 0.0);
    for (x, y) in mask.set_pixels() {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        mu20 += dx * dx;
        mu02 += dy * dy;
        mu11 += dx * dy;
    }
    mu20 /= nf;
    mu02 /= nf;
    mu11 /= nf;

    let mean = 0.5 * (mu20 + mu02);
    let spread = (0.25 * (mu20 - mu02).powi(2) + mu11 * mu11).sqrt();
    let major = mean + spread;
    let minor = mean - spread;
    if !(minor > 1e-10 * major) {
        return Err(PreprocessError::DegenerateMask);
    }
    let mut orientation = 0.5 * (2.0 * mu11).atan2(mu20 - mu02);
    if orientation <= -std::f64::consts::FRAC_PI_2 {
        orientation += std::f64::consts::PI;
    }
    Ok(EllipseFit {
        centroid_x: cx,
        centroid_y: cy,
        semi_major: 2.0 * major.sqrt(),
        semi_minor: 2.0 * minor.sqrt(),
        orientation,
    })
}

/// Axis-aligned box around the ellipse, half-extents scaled by `inset` and
/// clamped to the image. Always nonempty.
pub fn derive_crop_box(fit: &EllipseFit, dims: (usize, usize), inset: f64) -> CropBox {
    let (width, height) = dims;
    let (s, c) = fit.orientation.sin_cos();
    let (a2, b2) = (fit.semi_major.powi(2), fit.semi_minor.powi(2));
    let half_x = inset * (a2 * c * c + b2 * s * s).sqrt();
    let half_y = inset * (a2 * s * s + b2 * c * c).sqrt();
    let (x0, x1) = clamp_span(fit.centroid_x - half_x, fit.centroid_x + half_x, width);
    let (y0, y1) = clamp_span(fit.centroid_y - half_y, fit.centroid_y + half_y, height);
    CropBox { x0, y0, x1, y1 }
}

fn clamp_span(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
    let lo = lo.round().clamp(0.0, (limit - 1) as f64) as usize;
    let hi = hi.round().clamp(0.0, limit as f64) as usize;
    (lo, hi.max(lo + 1))
}

/// Whether the region inside `bx` is markedly brighter than the rest.
pub fn should_crop(img: &RgbImage, bx: CropBox, ratio_threshold: f64) -> bool {
    let (w, h) = img.dims();
    if !bx.fits(w, h) || bx.area() >= w * h {
        return false;
    }
    let (mut inside, mut outside) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if bx.contains(x, y) {
                inside += img.gray(x, y);
            } else {
                outside += img.gray(x, y);
            }
        }
    }
    let inside_mean = inside / bx.area() as f64;
    let outside_mean = (outside / (w * h - bx.area()) as f64).max(OUTSIDE_MEAN_FLOOR);
    inside_mean >= ratio_threshold * outside_mean
}

/// Per-channel Minkowski-`p` mean, the Shades-of-Gray illuminant estimate.
pub fn illuminant_estimate(img: &RgbImage, p: f64) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for px in img.pixels() {
        for c in 0..3 {
            acc[c] += px[c].powf(p);
        }
    }
    let n = (img.width() * img.height()) as f64;
    acc.map(|s| (s / n).powf(1.0 / p))
}

/// Gains that map each channel's illuminant estimate to their common mean.
pub fn shades_of_gray_gains(img: &RgbImage, p: f64) -> Result<[f64; 3], PreprocessError> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(PreprocessError::InvalidParameter(format!(
            "Minkowski order {p} must be >= 1"
        )));
    }
    let e = illuminant_estimate(img, p);
    if let Some(channel) = e.iter().position(|&v| v <= 0.0) {
        return Err(PreprocessError::ZeroChannel { channel });
    }
    let mean = (e[0] + e[1] + e[2]) / 3.0;
    Ok(e.map(|v| mean / v))
}

pub fn shades_of_gray(img: &RgbImage, p: f64) -> Result<RgbImage, PreprocessError> {
    Ok(img.scaled_channels(shades_of_gray_gains(img, p)?))
}

/// Downscale so the longer side equals `target`; smaller images pass through.
pub fn resize_longest(img: &RgbImage, target: usize) -> RgbImage {
    let (w, h) = img.dims();
    let long = w.max(h);
    if target == 0 || long <= target {
        return img.clone();
    }
    let short = ((w.min(h) as f64 * target as f64 / long as f64).round() as usize).max(1);
    let (nw, nh) = if w >= h { (target, short) } else { (short, target) };
    img.resize_bilinear(nw, nh).expect("nonzero target dimensions")
}

/// Full pipeline: crop when the field-of-view heuristic fires, then color
/// constancy, then resize.
pub fn preprocess_image(
    img: &RgbImage,
    cfg: &PreprocessConfig,
) -> Result<(RgbImage, CropReport), PreprocessError> {
    cfg.validate()?;
    let mask = binarize_fov(img, cfg.threshold);
    let mut report = CropReport {
        cropped: false,
        warn_degenerate: false,
        warn_zero_channel: false,
        region: img.full_box(),
    };
    let cropped = match fit_fov_ellipse(&mask) {
        Ok(fit) => {
            let bx = derive_crop_box(&fit, img.dims(), cfg.inset);
            if should_crop(img, bx, cfg.ratio_threshold) {
                report.cropped = true;
                report.region = bx;
                img.crop(bx).expect("derived box lies inside the image")
            } else {
                img.clone()
            }
        }
        Err(PreprocessError::DegenerateMask) => {
            report.warn_degenerate = true;
            img.clone()
        }
        Err(e) => return Err(e),
    };
    let balanced = match shades_of_gray(&cropped, cfg.p) {
        Ok(out) => out,
        Err(PreprocessError::ZeroChannel { .. }) => {
            report.warn_zero_channel = true;
            cropped
        }
        Err(e) => return Err(e),
    };
    Ok((resize_longest(&balanced, cfg.target), report))
}

pub const CROP_REPORT_HEADER: &str = "image,cropped,warn_degenerate,x0,y0,x1,y1";

pub fn crop_report_row(image: &str, r: &CropReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        image,
        u8::from(r.cropped),
        u8::from(r.warn_degenerate),
        r.region.x0,
        r.region.y0,
        r.region.x1,
        r.region.y1
    )
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// One processed file of a directory run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeEntry {
    /// Path relative to the input root, without extension.
    pub image: String,
    pub report: CropReport,
}

/// Preprocess every PNG/JPEG under `input` into a mirrored tree of PNGs under
/// `output`. Entries come back sorted by relative path.
pub fn preprocess_tree(
    input: &Path,
    output: &Path,
    cfg: &PreprocessConfig,
    exec: Execution,
) -> Result<Vec<TreeEntry>> {
    cfg.validate()?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in walkdir::WalkDir::new(input).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| input.to_path_buf());
            crate::Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() && is_image_file(entry.path()) {
            files.push(entry.into_path());
        }
    }
    let results = par::map_slice(exec, &files, |path| -> Result<TreeEntry> {
        let rel = path.strip_prefix(input).unwrap_or(path).with_extension("");
        let img = RgbImage::load(path)?;
        let (out, report) = preprocess_image(&img, cfg)?;
        if report.warn_degenerate {
            log::warn!("{}: degenerate field-of-view mask, not cropped", path.display());
        }
        if report.warn_zero_channel {
            log::warn!("{}: empty color channel, color constancy skipped", path.display());
        }
        let dest = output.join(&rel).with_extension("png");
        write_atomic(&dest, &out.to_png_bytes()?).at(&dest)?;
        Ok(TreeEntry {
            image: rel.to_string_lossy().replace('\\', "/"),
            report,
        })
    });
    let mut entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.image.cmp(&b.image));
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Flip;

    fn disc(w: usize, h: usize, cx: f64, cy: f64, r: f64, v: f64) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            if d2 <= r * r {
                [v; 3]
            } else {
                [0.0; 3]
            }
        })
        .unwrap()
    }

    #[test]
    fn binarize_trivial_cases() {
        let black = RgbImage::filled(8, 6, [0.0; 3]).unwrap();
        assert_eq!(binarize_fov(&black, 0.04).count(), 0);
        let white = RgbImage::filled(8, 6, [1.0; 3]).unwrap();
        assert_eq!(binarize_fov(&white, 0.04).count(), 48);
    }

    #[test]
    fn binarized_disc_matches_pixel_predicate() {
        let (cx, cy, r) = (40.0, 30.0, 17.0);
        let img = disc(80, 60, cx, cy, r, 0.8);
        let mask = binarize_fov(&img, 0.04);
        let expected = BinaryMask::from_fn(80, 60, |x, y| {
            (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r
        });
        assert_eq!(mask, expected);
    }

    #[test]
    fn disc_fit_recovers_radius() {
        let r = 60.0;
        let img = disc(200, 160, 100.0, 80.0, r, 0.8);
        let fit = fit_fov_ellipse(&binarize_fov(&img, 0.04)).unwrap();
        assert!((fit.centroid_x - 100.0).abs() < 1e-9);
        assert!((fit.centroid_y - 80.0).abs() < 1e-9);
        assert!((fit.semi_major / r - 1.0).abs() < 0.02);
        assert!((fit.semi_minor / r - 1.0).abs() < 0.02);
    }

    #[test]
    fn rectangle_fit_uses_uniform_variance() {
        let (w, h) = (300usize, 120usize);
        let fit = fit_fov_ellipse(&BinaryMask::from_fn(w, h, |_, _| true)).unwrap();
        // discrete uniform variance (n^2 - 1) / 12
        let a = 2.0 * ((w * w - 1) as f64 / 12.0).sqrt();
        let b = 2.0 * ((h * h - 1) as f64 / 12.0).sqrt();
        assert!((fit.semi_major - a).abs() < 1e-9);
        assert!((fit.semi_minor - b).abs() < 1e-9);
        assert!((fit.semi_major / (w as f64 / 3f64.sqrt()) - 1.0).abs() < 0.01);
        assert_eq!(fit.orientation, 0.0);
    }

    #[test]
    fn rotated_bar_orientation() {
        // a thick diagonal band along y = x
        let mask = BinaryMask::from_fn(100, 100, |x, y| (x as i64 - y as i64).abs() <= 3);
        let fit = fit_fov_ellipse(&mask).unwrap();
        assert!((fit.orientation - std::f64::consts::FRAC_PI_4).abs() < 1e-9);
        let flipped = BinaryMask::from_fn(100, 100, |x, y| (x as i64 + y as i64 - 99).abs() <= 3);
        let fit2 = fit_fov_ellipse(&flipped).unwrap();
        assert!((fit2.orientation + std::f64::consts::FRAC_PI_4).abs() < 1e-9);
    }

    #[test]
    fn collinear_masks_are_degenerate() {
        let row = BinaryMask::from_fn(50, 10, |_, y| y == 4);
        assert_eq!(fit_fov_ellipse(&row), Err(PreprocessError::DegenerateMask));
        let diag = BinaryMask::from_fn(30, 30, |x, y| x == y);
        assert_eq!(fit_fov_ellipse(&diag), Err(PreprocessError::DegenerateMask));
        let two = BinaryMask::from_fn(5, 5, |x, y| (x, y) == (1, 1) || (x, y) == (3, 2));
        assert_eq!(fit_fov_ellipse(&two), Err(PreprocessError::DegenerateMask));
    }

    fn circle(cx: f64, cy: f64, r: f64) -> EllipseFit {
        EllipseFit {
            centroid_x: cx,
            centroid_y: cy,
            semi_major: r,
            semi_minor: r,
            orientation: 0.0,
        }
    }

    #[test]
    fn crop_box_examples() {
        let fit = circle(300.0, 225.0, 200.0);
        assert_eq!(
            derive_crop_box(&fit, (600, 450), 1.0),
            CropBox { x0: 100, y0: 25, x1: 500, y1: 425 }
        );
        assert_eq!(
            derive_crop_box(&fit, (600, 450), 0.9),
            CropBox { x0: 120, y0: 45, x1: 480, y1: 405 }
        );
        let wide = EllipseFit {
            semi_major: 900.0,
            ..circle(300.0, 225.0, 100.0)
        };
        let b = derive_crop_box(&wide, (600, 450), 1.0);
        assert_eq!((b.x0, b.x1), (0, 600));
        assert_eq!((b.y0, b.y1), (125, 325));
    }

    #[test]
    fn rotated_ellipse_box_uses_projection() {
        let fit = EllipseFit {
            orientation: std::f64::consts::FRAC_PI_2,
            semi_major: 100.0,
            semi_minor: 50.0,
            ..circle(300.0, 225.0, 1.0)
        };
        let b = derive_crop_box(&fit, (600, 450), 1.0);
        assert_eq!(b, CropBox { x0: 250, y0: 125, x1: 350, y1: 325 });
    }

    #[test]
    fn should_crop_cases() {
        let img = disc(200, 200, 100.0, 100.0, 50.0, 0.8);
        let bx = CropBox { x0: 50, y0: 50, x1: 151, y1: 151 };
        assert!(should_crop(&img, bx, 2.0));
        let flat = RgbImage::filled(100, 80, [0.4, 0.5, 0.6]).unwrap();
        assert!(!should_crop(&flat, CropBox { x0: 10, y0: 10, x1: 50, y1: 50 }, 2.0));
        assert!(!should_crop(&img, img.full_box(), 2.0));
    }

    fn textured(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = 0.2 + 0.6 * (((x * 7 + y * 13) % 17) as f64 / 16.0);
            [v, v, v]
        })
        .unwrap()
    }

    #[test]
    fn gray_image_is_unchanged_by_color_constancy() {
        let img = textured(20, 10);
        let out = shades_of_gray(&img, 6.0).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn color_constancy_cancels_channel_scaling() {
        let base = textured(32, 24);
        let scale = [0.9, 0.6, 0.3];
        let tinted = base.scaled_channels(scale);
        let gains = shades_of_gray_gains(&tinted, 6.0).unwrap();
        // pre-clip corrected channel means
        let means = tinted.channel_means();
        let corrected: Vec<f64> = (0..3).map(|c| means[c] * gains[c]).collect();
        assert!((corrected[0] - corrected[1]).abs() < 1e-6);
        assert!((corrected[0] - corrected[2]).abs() < 1e-6);
    }

    #[test]
    fn order_one_is_gray_world() {
        let img = RgbImage::from_fn(16, 9, |x, y| {
            [(x as f64) / 16.0, (y as f64 + 1.0) / 10.0, 0.3 + 0.01 * x as f64]
        })
        .unwrap();
        let sog = shades_of_gray(&img, 1.0).unwrap();
        // gray world: scale each channel so its mean becomes the mean of means
        let m = img.channel_means();
        let avg = (m[0] + m[1] + m[2]) / 3.0;
        let gw = img.scaled_channels([avg / m[0], avg / m[1], avg / m[2]]);
        for (a, b) in sog.data().iter().zip(gw.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_channel_is_reported() {
        let img = RgbImage::filled(4, 4, [0.5, 0.0, 0.5]).unwrap();
        assert_eq!(
            shades_of_gray(&img, 6.0),
            Err(PreprocessError::ZeroChannel { channel: 1 })
        );
    }

    #[test]
    fn resize_examples() {
        let img = RgbImage::filled(1024, 768, [0.5; 3]).unwrap();
        assert_eq!(resize_longest(&img, 600).dims(), (600, 450));
        let portrait = RgbImage::filled(768, 1024, [0.5; 3]).unwrap();
        assert_eq!(resize_longest(&portrait, 600).dims(), (450, 600));
        for (w, h) in [(600, 450), (300, 200)] {
            let img = textured(w, h);
            assert_eq!(resize_longest(&img, 600), img);
        }
    }

    #[test]
    fn pipeline_crops_disc_on_black() {
        let img = disc(1024, 1024, 512.0, 512.0, 300.0, 0.8);
        let (out, report) = preprocess_image(&img, &PreprocessConfig::default()).unwrap();
        assert!(report.cropped);
        assert!(!report.warn_degenerate);
        let r = report.region;
        assert!((r.x0 as i64 - 212).abs() <= 2 && (r.x1 as i64 - 813).abs() <= 2);
        assert!(out.width().max(out.height()) <= 600);
        assert_eq!(out.dims(), resize_longest(&img.crop(r).unwrap(), 600).dims());
    }

    #[test]
    fn pipeline_leaves_cropped_lesions_alone() {
        let img = textured(300, 200);
        let (_, report) = preprocess_image(&img, &PreprocessConfig::default()).unwrap();
        assert!(!report.cropped);
        assert_eq!(report.region, img.full_box());
    }

    #[test]
    fn pipeline_flags_black_images() {
        let img = RgbImage::filled(64, 48, [0.0; 3]).unwrap();
        let (out, report) = preprocess_image(&img, &PreprocessConfig::default()).unwrap();
        assert!(report.warn_degenerate);
        assert!(!report.cropped);
        assert_eq!(out.dims(), (64, 48));
    }

    #[test]
    fn flipped_disc_keeps_radius() {
        let img = disc(120, 100, 50.0, 40.0, 25.0, 0.9).flipped(Flip::Both);
        let fit = fit_fov_ellipse(&binarize_fov(&img, 0.04)).unwrap();
        assert!((fit.centroid_x - 69.0).abs() < 1e-9);
        assert!((fit.centroid_y - 59.0).abs() < 1e-9);
    }

    #[test]
    fn report_row_format() {
        let r = CropReport {
            cropped: true,
            warn_degenerate: false,
            warn_zero_channel: false,
            region: CropBox { x0: 1, y0: 2, x1: 3, y1: 4 },
        };
        assert_eq!(crop_report_row("a/b", &r), "a/b,1,0,1,2,3,4");
    }
}
