//! Deterministic synthetic corpus for desk-scale end-to-end runs: dermoscopy-
//! like images (a lit disc on black, or full-frame texture), a manifest with
//! lesion groups and patient meta-data, and per-class Gaussian feature
//! clusters standing in for CNN outputs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::classes::{Label, NUM_CLASSES};
use crate::dataset::{Manifest, ManifestRow, Source};
use crate::error::IoContext;
use crate::fsutil::write_atomic;
use crate::head::{FeatureStore, HeadError};
use crate::image::RgbImage;
use crate::meta::{AnatomSite, MetaRecord, Sex};
use crate::tta::{RR_VIEWS, SS_VIEWS};

/// Relative class frequencies (MEL, NV, BCC, AK, BKL, DF, VASC, SCC, UNK).
const CLASS_WEIGHTS: [f64; NUM_CLASSES] = [3.0, 4.0, 2.0, 1.0, 2.0, 1.0, 1.0, 1.0, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSizes {
    pub images: usize,
    /// Number of classes used, in canonical order; 9 includes external UNK.
    pub classes: usize,
    /// Held-out images without labels in the manifest.
    pub test_images: usize,
    pub feature_dim: usize,
    /// Feature replicates per image in the training feature file.
    pub train_replicates: usize,
    /// Distance of each class center from the origin, in noise units.
    pub separation: f64,
    /// Independent probability that each meta field is blank.
    pub missing_rate: f64,
    /// Largest image width; heights are 3/4 of the width.
    pub max_width: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        Self {
            images: 200,
            classes: NUM_CLASSES,
            test_images: 0,
            feature_dim: 16,
            train_replicates: 4,
            separation: 6.0,
            missing_rate: 0.1,
            max_width: 96,
        }
    }
}

impl SynthSizes {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=NUM_CLASSES).contains(&self.classes) {
            return Err(format!("classes must be in 1..={NUM_CLASSES}"));
        }
        if self.images < self.classes {
            return Err("need at least one image per class".into());
        }
        if self.feature_dim < self.classes {
            return Err("feature_dim must be >= classes".into());
        }
        if self.train_replicates == 0 || self.max_width < 16 {
            return Err("train_replicates must be >= 1 and max_width >= 16".into());
        }
        if !(0.0..=1.0).contains(&self.missing_rate) || !(self.separation >= 0.0) {
            return Err("missing_rate must be in [0, 1] and separation >= 0".into());
        }
        Ok(())
    }
}

pub struct SynthCorpus {
    pub images: Vec<(String, RgbImage)>,
    pub manifest: Manifest,
    /// Labels of the held-out images.
    pub test_truth: Vec<(String, Label)>,
    /// Meta data of the held-out images.
    pub test_meta: Vec<(String, MetaRecord)>,
    pub train_features: FeatureStore,
    pub ss_features: FeatureStore,
    pub rr_features: FeatureStore,
}

/// Largest-remainder split of `n` over the first `classes` weights; every
/// class gets at least one image.
fn class_counts(n: usize, classes: usize) -> Vec<usize> {
    let w = &CLASS_WEIGHTS[..classes];
    let total: f64 = w.iter().sum();
    let spare = n - classes;
    let quotas: Vec<f64> = w.iter().map(|x| x / total * spare as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let short = spare - counts.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    counts.iter().map(|c| c + 1).collect()
}

fn random_meta(rng: &mut Xoshiro256PlusPlus, missing: f64) -> MetaRecord {
    let age = rng.random_range(3..18) as f64 * 5.0;
    let site = AnatomSite::ALL[rng.random_range(0..AnatomSite::ALL.len())];
    let sex = if rng.random_bool(0.5) { Sex::Male } else { Sex::Female };
    MetaRecord {
        age: (!rng.random_bool(missing)).then_some(age),
        site: (!rng.random_bool(missing)).then_some(site),
        sex: (!rng.random_bool(missing)).then_some(sex),
    }
}

/// Lesion tint per class, so images differ visibly between classes.
fn lesion_color(label: Label) -> [f64; 3] {
    let k = label.index() as f64 / NUM_CLASSES as f64;
    [0.25 + 0.4 * k, 0.15 + 0.3 * (1.0 - k), 0.12 + 0.2 * (k * 7.0).fract()]
}

fn render_image(rng: &mut Xoshiro256PlusPlus, label: Label, max_width: usize) -> RgbImage {
    let width = rng.random_range(max_width * 3 / 4..=max_width);
    let height = width * 3 / 4;
    let cast: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.3));
    let skin = [0.85, 0.65, 0.55];
    let lesion = lesion_color(label);
    let disc = rng.random_bool(0.75);
    let (w, h) = (width as f64, height as f64);
    let cx = w / 2.0 + rng.random_range(-0.05..0.05) * w;
    let cy = h / 2.0 + rng.random_range(-0.05..0.05) * h;
    let fov_r = 0.45 * h.min(w);
    let les_r = 0.18 * h.min(w) * rng.random_range(0.8..1.2);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");
    let mut draws: Vec<f64> = Vec::with_capacity(width * height * 3);
    for _ in 0..width * height * 3 {
        draws.push(noise.sample(rng));
    }
    RgbImage::from_fn(width, height, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let d = (dx * dx + dy * dy).sqrt();
        let i = (y * width + x) * 3;
        if disc && d > fov_r {
            let dark: f64 = draws[i].abs() * 0.3;
            return [dark; 3];
        }
        let texture = 1.0 + 0.05 * ((x as f64 * 0.4 + phase).sin() * (y as f64 * 0.3).cos());
        let base = if d < les_r { lesion } else { skin };
        std::array::from_fn(|c| base[c] * cast[c] * texture + draws[i + c])
    })
    .expect("synthetic image has positive size")
}

fn feature_store(
    ids: &[String],
    centers: &[Vec<f64>],
    labels: &[Label],
    latent: &[Vec<f64>],
    replicates: usize,
    rng: &mut Xoshiro256PlusPlus,
) -> Result<FeatureStore, HeadError> {
    let view_noise = Normal::new(0.0, 0.3).expect("valid sigma");
    let dim = centers[0].len();
    let mut data = Vec::with_capacity(ids.len() * replicates * dim);
    for (i, label) in labels.iter().enumerate() {
        for _ in 0..replicates {
            for d in 0..dim {
                let v = centers[label.index()][d] + latent[i][d] + view_noise.sample(rng);
                data.push(v as f32);
            }
        }
    }
    FeatureStore::new(dim, replicates, ids.to_vec(), data)
}

/// Build the corpus; identical `seed` and `sizes` give identical output.
pub fn generate_synthetic(seed: u64, sizes: &SynthSizes) -> crate::Result<SynthCorpus> {
    sizes.validate().map_err(crate::Error::Invalid)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let counts = class_counts(sizes.images, sizes.classes);
    let mut labels: Vec<Label> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(Label::from_index(c).expect("class index"), n))
        .collect();
    labels.shuffle(&mut rng);
    let ids: Vec<String> = (0..sizes.images).map(|i| format!("SYN_{i:05}")).collect();

    // lesion groups: consecutive same-class images sometimes share a lesion
    let mut lesion_ids = vec![None; sizes.images];
    let mut next_lesion = 0usize;
    for c in 0..sizes.classes {
        let label = Label::from_index(c).expect("class index");
        let mut open: Option<(usize, usize)> = None;
        for i in (0..sizes.images).filter(|&i| labels[i] == label) {
            if label == Label::Unk || rng.random_bool(0.1) {
                continue;
            }
            match open {
                Some((id, n)) if n < 3 && rng.random_bool(0.3) => {
                    lesion_ids[i] = Some(format!("LES_{id:05}"));
                    open = Some((id, n + 1));
                }
                _ => {
                    lesion_ids[i] = Some(format!("LES_{next_lesion:05}"));
                    open = Some((next_lesion, 1));
                    next_lesion += 1;
                }
            }
        }
    }

    let rows = (0..sizes.images)
        .map(|i| ManifestRow {
            image: ids[i].clone(),
            lesion_id: lesion_ids[i].clone(),
            label: labels[i],
            source: if labels[i] == Label::Unk { Source::External } else { Source::Main },
            meta: random_meta(&mut rng, sizes.missing_rate),
        })
        .collect();
    let manifest = Manifest::new(rows)?;

    let images = ids
        .iter()
        .zip(&labels)
        .map(|(id, &l)| (id.clone(), render_image(&mut rng, l, sizes.max_width)))
        .collect();

    let known = sizes.classes.min(crate::KNOWN_CLASSES);
    let test_truth: Vec<(String, Label)> = (0..sizes.test_images)
        .map(|i| {
            let l = Label::from_index(rng.random_range(0..known)).expect("class index");
            (format!("TEST_{i:05}"), l)
        })
        .collect();

    let test_meta = test_truth
        .iter()
        .map(|(id, _)| (id.clone(), random_meta(&mut rng, sizes.missing_rate)))
        .collect();

    let dim = sizes.feature_dim;
    let centers: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|c| (0..dim).map(|d| if d == c % dim { sizes.separation } else { 0.0 }).collect())
        .collect();
    let all_ids: Vec<String> = ids.iter().cloned().chain(test_truth.iter().map(|t| t.0.clone())).collect();
    let all_labels: Vec<Label> = labels.iter().copied().chain(test_truth.iter().map(|t| t.1)).collect();
    let unit = Normal::new(0.0, 1.0).expect("valid sigma");
    let latent: Vec<Vec<f64>> = all_ids
        .iter()
        .map(|_| (0..dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let train_features = feature_store(&all_ids, &centers, &all_labels, &latent, sizes.train_replicates, &mut rng)?;
    let ss_features = feature_store(&all_ids, &centers, &all_labels, &latent, SS_VIEWS, &mut rng)?;
    let rr_features = feature_store(&all_ids, &centers, &all_labels, &latent, RR_VIEWS, &mut rng)?;

    Ok(SynthCorpus {
        images,
        manifest,
        test_truth,
        test_meta,
        train_features,
        ss_features,
        rr_features,
    })
}

impl SynthCorpus {
    /// Write `images/*.png`, `manifest.csv`, `test_truth.csv` and
    /// `test_meta.csv` (when there are test images) and the three feature
    /// files under `dir`.
    pub fn write(&self, dir: &Path) -> crate::Result<()> {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).at(&img_dir)?;
        for (id, img) in &self.images {
            let path = img_dir.join(format!("{id}.png"));
            write_atomic(&path, &img.to_png_bytes()?).at(&path)?;
        }
        let path = dir.join("manifest.csv");
        write_atomic(&path, &self.manifest.to_csv_bytes()?).at(&path)?;
        if !self.test_truth.is_empty() {
            let mut s = String::from("image,label\n");
            for (id, l) in &self.test_truth {
                s.push_str(&format!("{id},{}\n", l.code()));
            }
            let path = dir.join("test_truth.csv");
            write_atomic(&path, s.as_bytes()).at(&path)?;
            let mut m = String::from("image,age_approx,anatom_site_general,sex\n");
            for (id, meta) in &self.test_meta {
                m.push_str(&format!(
                    "{id},{},{},{}\n",
                    meta.age.map(|a| format!("{a:.0}")).unwrap_or_default(),
                    meta.site.map(|s| s.name()).unwrap_or(""),
                    meta.sex.map(|s| s.name()).unwrap_or("")
                ));
            }
            let path = dir.join("test_meta.csv");
            write_atomic(&path, m.as_bytes()).at(&path)?;
        }
        for (name, store) in [
            ("features_train.dfv", &self.train_features),
            ("features_ss.dfv", &self.ss_features),
            ("features_rr.dfv", &self.rr_features),
        ] {
            let path = dir.join(name);
            write_atomic(&path, &store.to_bytes()).at(&path)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSizes {
        SynthSizes {
            images: 60,
            test_images: 5,
            max_width: 32,
            ..SynthSizes::default()
        }
    }

    #[test]
    fn counts_follow_weights() {
        let c = class_counts(200, 9);
        assert_eq!(c.iter().sum::<usize>(), 200);
        assert!(c.iter().all(|&n| n >= 1));
        assert!(c[1] > c[0] && c[0] > c[3]);
        assert_eq!(class_counts(3, 3), vec![1, 1, 1]);
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(7, &small()).unwrap();
        let b = generate_synthetic(7, &small()).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.ss_features.to_bytes(), b.ss_features.to_bytes());
        assert_eq!(a.images[3].1, b.images[3].1);
        let c = generate_synthetic(8, &small()).unwrap();
        assert_ne!(a.ss_features.to_bytes(), c.ss_features.to_bytes());
    }

    #[test]
    fn layout() {
        let c = generate_synthetic(1, &small()).unwrap();
        assert_eq!(c.manifest.len(), 60);
        assert!(c.manifest.external_rows().all(|r| r.label == Label::Unk));
        assert!(c.manifest.main_rows().all(|r| r.label.is_known()));
        assert_eq!(c.ss_features.replicates(), 36);
        assert_eq!(c.rr_features.replicates(), 16);
        assert_eq!(c.train_features.ids().len(), 65);
    }

    #[test]
    fn missingness_rate() {
        let sizes = SynthSizes {
            images: 10_000,
            missing_rate: 0.3,
            max_width: 16,
            ..SynthSizes::default()
        };
        let c = generate_synthetic(3, &sizes).unwrap();
        let blanks: usize = c
            .manifest
            .rows()
            .iter()
            .map(|r| r.meta.age.is_none() as usize + r.meta.site.is_none() as usize + r.meta.sex.is_none() as usize)
            .sum();
        let rate = blanks as f64 / 30_000.0;
        assert!((rate - 0.3).abs() < 0.02, "{rate}");
    }
}
