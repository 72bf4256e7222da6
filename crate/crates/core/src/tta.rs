//! Test-time augmentation: deterministic crop schedules and softmax
//! averaging.

use serde::{Deserialize, Serialize};

use crate::image::{CropBox, Flip, ImageError, RgbImage};
use crate::predictions::Probs;
use crate::classes::NUM_CLASSES;

/// Views per image in same-size mode (a 6 x 6 grid).
pub const SS_VIEWS: usize = 36;
const SS_GRID: usize = 6;

/// Views per image in random-resize mode (4 scales x 4 flips).
pub const RR_VIEWS: usize = 16;

pub const DEFAULT_RR_SCALES: [f64; 4] = [1.0, 0.875, 0.75, 0.625];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TtaError {
    #[error("crop size {crop} exceeds the image ({width}x{height})")]
    CropTooLarge { crop: usize, width: usize, height: usize },
    #[error("invalid schedule parameter: {0}")]
    InvalidParameter(String),
    #[error("no views to aggregate")]
    NoViews,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropMode {
    /// Fixed-size crops taken at native resolution.
    SameSize,
    /// Center crops rescaled to the network input size.
    Resize,
}

impl CropMode {
    pub fn code(self) -> &'static str {
        match self {
            CropMode::SameSize => "same-size",
            CropMode::Resize => "resize",
        }
    }
}

/// One test-time view of an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub mode: CropMode,
    pub rect: CropBox,
    /// Crop side relative to the shorter image side (1 for same-size crops).
    pub scale: f64,
    pub flip: Flip,
    /// Side length of the square network input.
    pub output: usize,
}

/// Evenly spaced corner offsets `round(i * travel / (n - 1))`.
fn grid_offsets(travel: usize) -> [usize; SS_GRID] {
    let steps = SS_GRID - 1;
    // integer round-half-up of i * travel / steps
    std::array::from_fn(|i| (2 * i * travel + steps) / (2 * steps))
}

/// 36 ordered `crop x crop` windows on a 6 x 6 grid, row-major.
pub fn crop_schedule_ss(dims: (usize, usize), crop: usize) -> Result<[CropSpec; SS_VIEWS], TtaError> {
    let (width, height) = dims;
    if crop == 0 {
        return Err(TtaError::InvalidParameter("crop size must be >= 1".into()));
    }
    if crop > width.min(height) {
        return Err(TtaError::CropTooLarge { crop, width, height });
    }
    let xs = grid_offsets(width - crop);
    let ys = grid_offsets(height - crop);
    Ok(std::array::from_fn(|k| {
        let (x0, y0) = (xs[k % SS_GRID], ys[k / SS_GRID]);
        CropSpec {
            mode: CropMode::SameSize,
            rect: CropBox {
                x0,
                y0,
                x1: x0 + crop,
                y1: y0 + crop,
            },
            scale: 1.0,
            flip: Flip::None,
            output: crop,
        }
    }))
}

pub fn crop_schedule_rr(dims: (usize, usize), input: usize) -> Result<[CropSpec; RR_VIEWS], TtaError> {
    crop_schedule_rr_with(dims, input, DEFAULT_RR_SCALES)
}

/// Four centered square crops (side `floor(scale * shorter side)`), each in
/// all four flip states; scale-major order.
pub fn crop_schedule_rr_with(
    dims: (usize, usize),
    input: usize,
    scales: [f64; 4],
) -> Result<[CropSpec; RR_VIEWS], TtaError> {
    let (width, height) = dims;
    if width == 0 || height == 0 {
        return Err(TtaError::InvalidParameter("empty image".into()));
    }
    if input == 0 {
        return Err(TtaError::InvalidParameter("input size must be >= 1".into()));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
        return Err(TtaError::InvalidParameter(format!("scale {s} not in (0, 1]")));
    }
    let short = width.min(height);
    Ok(std::array::from_fn(|k| {
        let scale = scales[k / 4];
        let side = ((short as f64 * scale).floor() as usize).clamp(1, short);
        let x0 = (width - side) / 2;
        let y0 = (height - side) / 2;
        CropSpec {
            mode: CropMode::Resize,
            rect: CropBox {
                x0,
                y0,
                x1: x0 + side,
                y1: y0 + side,
            },
            scale,
            flip: Flip::ALL[k % 4],
            output: input,
        }
    }))
}

/// Render a view: crop, resize to the network input, flip.
pub fn apply_crop_spec(img: &RgbImage, spec: &CropSpec) -> Result<RgbImage, ImageError> {
    let cropped = img.crop(spec.rect)?;
    let sized = if cropped.dims() == (spec.output, spec.output) {
        cropped
    } else {
        cropped.resize_bilinear(spec.output, spec.output)?
    };
    Ok(sized.flipped(spec.flip))
}

/// Arithmetic mean of per-view probability vectors.
pub fn aggregate_predictions(views: &[Probs]) -> Result<Probs, TtaError> {
    if views.is_empty() {
        return Err(TtaError::NoViews);
    }
    let mut out = [0.0; NUM_CLASSES];
    for v in views {
        for (o, p) in out.iter_mut().zip(v) {
            *o += p;
        }
    }
    let n = views.len() as f64;
    Ok(out.map(|s| s / n))
}

pub const SCHEDULE_HEADER: &str = "image,view,mode,x0,y0,x1,y1,scale,flip,output";

pub fn schedule_row(image: &str, view: usize, s: &CropSpec) -> String {
    format!(
        "{image},{view},{},{},{},{},{},{},{},{}",
        s.mode.code(),
        s.rect.x0,
        s.rect.y0,
        s.rect.x1,
        s.rect.y1,
        s.scale,
        s.flip.code(),
        s.output
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ss_grid_offsets() {
        let specs = crop_schedule_ss((600, 450), 224).unwrap();
        let xs: Vec<usize> = specs[..6].iter().map(|s| s.rect.x0).collect();
        let want: Vec<usize> = (0..6).map(|i| (i as f64 * 376.0 / 5.0).round() as usize).collect();
        assert_eq!(xs, want);
        assert_eq!(xs, vec![0, 75, 150, 226, 301, 376]);
        let ys: Vec<usize> = specs.iter().step_by(6).map(|s| s.rect.y0).collect();
        let want_y: Vec<usize> = (0..6).map(|i| (i as f64 * 226.0 / 5.0).round() as usize).collect();
        assert_eq!(ys, want_y);
        assert!(specs.iter().all(|s| s.rect.width() == 224 && s.rect.height() == 224));
    }

    #[test]
    fn ss_zero_travel_and_too_large() {
        let specs = crop_schedule_ss((300, 300), 300).unwrap();
        assert!(specs.iter().all(|s| s.rect == CropBox { x0: 0, y0: 0, x1: 300, y1: 300 }));
        assert_eq!(
            crop_schedule_ss((600, 700), 601),
            Err(TtaError::CropTooLarge { crop: 601, width: 600, height: 700 })
        );
    }

    #[test]
    fn rr_construction() {
        let specs = crop_schedule_rr((600, 450), 224).unwrap();
        let mut rects: Vec<CropBox> = specs.iter().map(|s| s.rect).collect();
        rects.dedup();
        assert_eq!(rects.len(), 4);
        for chunk in specs.chunks(4) {
            let flips: Vec<Flip> = chunk.iter().map(|s| s.flip).collect();
            assert_eq!(flips, Flip::ALL.to_vec());
        }
        let r = specs[8].rect;
        assert_eq!(r.width(), 337);
        assert_eq!((r.x0, r.y0), ((600 - 337) / 2, (450 - 337) / 2));
        let sq = crop_schedule_rr((256, 256), 224).unwrap();
        assert_eq!(sq[0].rect, CropBox { x0: 0, y0: 0, x1: 256, y1: 256 });
    }

    #[test]
    fn apply_renders_views() {
        let img = RgbImage::from_fn(40, 30, |x, y| [x as f64 / 40.0, y as f64 / 30.0, 0.5]).unwrap();
        let ss = crop_schedule_ss(img.dims(), 20).unwrap();
        let v = apply_crop_spec(&img, &ss[35]).unwrap();
        assert_eq!(v.dims(), (20, 20));
        assert_eq!(v.pixel(0, 0), img.pixel(20, 10));
        let rr = crop_schedule_rr(img.dims(), 16).unwrap();
        let v = apply_crop_spec(&img, &rr[1]).unwrap();
        assert_eq!(v.dims(), (16, 16));
        let unflipped = apply_crop_spec(&img, &rr[0]).unwrap();
        assert_eq!(v, unflipped.flipped(Flip::Horizontal));
    }

    #[test]
    fn aggregation_examples() {
        let p = [0.1, 0.2, 0.3, 0.1, 0.1, 0.1, 0.05, 0.05, 0.0];
        let m = aggregate_predictions(&[p, p, p]).unwrap();
        assert!(m.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut a = [0.0; NUM_CLASSES];
        a[0] = 1.0;
        let mut b = [0.0; NUM_CLASSES];
        b[1] = 1.0;
        let m = aggregate_predictions(&[a, b]).unwrap();
        assert_eq!(&m[..3], &[0.5, 0.5, 0.0]);
        assert_eq!(aggregate_predictions(&[]), Err(TtaError::NoViews));
    }

    proptest! {
        #[test]
        fn schedules_stay_in_bounds(w in 1usize..2000, h in 1usize..2000, c in 1usize..600, input in 1usize..600) {
            match crop_schedule_ss((w, h), c) {
                Ok(specs) => {
                    prop_assert_eq!(specs.len(), 36);
                    for s in specs {
                        prop_assert!(s.rect.fits(w, h));
                    }
                }
                Err(_) => prop_assert!(c > w.min(h)),
            }
            let rr = crop_schedule_rr((w, h), input).unwrap();
            prop_assert_eq!(rr.len(), 16);
            for s in rr {
                prop_assert!(s.rect.fits(w, h));
                prop_assert_eq!(s.rect.width(), s.rect.height());
            }
        }
    }
}
