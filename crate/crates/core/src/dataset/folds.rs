use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::RngCore;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{DatasetError, Manifest, ManifestRow, Source};
use crate::classes::{Label, NUM_CLASSES};

/// Generator behind every seeded shuffle in fold splitting: xoshiro256++
/// seeded through SplitMix64.
pub type SplitRng = Xoshiro256PlusPlus;

/// Image id to fold index, for main-source images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    m: usize,
    folds: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FoldWarning {
    /// A class had fewer lesion groups than folds; its lesions were spread
    /// without stratification.
    TooFewLesions { label: Label, lesions: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub assignment: FoldAssignment,
    pub warnings: Vec<FoldWarning>,
}

impl FoldAssignment {
    pub fn new(m: usize, folds: BTreeMap<String, usize>) -> Result<Self, DatasetError> {
        if m < 2 {
            return Err(DatasetError::InvalidFoldCount(m));
        }
        if let Some(&fold) = folds.values().find(|&&f| f >= m) {
            return Err(DatasetError::FoldOutOfRange { fold, m });
        }
        Ok(Self { m, folds })
    }

    pub fn num_folds(&self) -> usize {
        self.m
    }

    pub fn fold_of(&self, image: &str) -> Option<usize> {
        self.folds.get(image).copied()
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.folds.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Images of one fold, sorted by id.
    pub fn images_in(&self, fold: usize) -> Vec<&str> {
        self.iter().filter(|&(_, f)| f == fold).map(|(k, _)| k).collect()
    }

    /// CSV `image,fold`, rows sorted by image id.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["image", "fold"])?;
        for (img, fold) in self.iter() {
            w.write_record([img, fold.to_string().as_str()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }

    /// Read a fold CSV; the fold count is `m` when given, otherwise one more
    /// than the largest fold index present.
    pub fn read_csv<R: Read>(reader: R, file: &str, m: Option<usize>) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| DatasetError::MissingColumn {
                file: file.to_string(),
                column: name.to_string(),
            })
        };
        let (ci, cf) = (col("image")?, col("fold")?);
        let mut folds = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let img = rec.get(ci).unwrap_or("").to_string();
            let raw = rec.get(cf).unwrap_or("");
            let fold = raw.parse::<usize>().map_err(|_| DatasetError::BadField {
                file: file.to_string(),
                line,
                column: "fold".into(),
                value: raw.into(),
                reason: "expected a non-negative integer".into(),
            })?;
            if folds.insert(img.clone(), fold).is_some() {
                return Err(DatasetError::DuplicateImage(img));
            }
        }
        let m = m.unwrap_or_else(|| folds.values().max().map_or(0, |&f| f + 1));
        Self::new(m, folds)
    }

    pub fn read_path(path: &std::path::Path, m: Option<usize>) -> crate::Result<Self> {
        use crate::error::IoContext;
        let f = std::fs::File::open(path).at(path)?;
        Ok(Self::read_csv(f, &path.display().to_string(), m)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum GroupKey {
    Lesion(String),
    /// Image without a lesion id; forms its own group.
    Image(String),
}

/// Uniform integer in `0..n` by rejection sampling on 64-bit outputs.
fn below(rng: &mut SplitRng, n: usize) -> usize {
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

/// Fisher-Yates shuffle driven by [`below`].
fn shuffle<T>(items: &mut [T], rng: &mut SplitRng) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

/// Distribute lesion groups of the main rows over `m` folds, stratified by
/// each lesion's majority class.
///
/// Lesion keys are sorted, shuffled per class with a seeded [`SplitRng`] and
/// dealt round-robin; the dealing cursor carries over between classes so fold
/// sizes stay balanced. Classes with fewer than `m` lesions are pooled and
/// dealt last, unstratified.
pub fn split_folds(manifest: &Manifest, m: usize, seed: u64) -> Result<FoldSplit, DatasetError> {
    if m < 2 {
        return Err(DatasetError::InvalidFoldCount(m));
    }
    let mut groups: BTreeMap<GroupKey, Vec<&ManifestRow>> = BTreeMap::new();
    for row in manifest.main_rows() {
        let key = match &row.lesion_id {
            Some(id) => GroupKey::Lesion(id.clone()),
            None => GroupKey::Image(row.image.clone()),
        };
        groups.entry(key).or_default().push(row);
    }

    let mut by_class: [Vec<&GroupKey>; NUM_CLASSES] = Default::default();
    for (key, rows) in &groups {
        let mut counts = [0usize; NUM_CLASSES];
        for r in rows {
            counts[r.label.index()] += 1;
        }
        let mut majority = 0;
        for (i, &c) in counts.iter().enumerate() {
            if c > counts[majority] {
                majority = i;
            }
        }
        by_class[majority].push(key);
    }

    let mut rng = SplitRng::seed_from_u64(seed);
    let mut cursor = 0usize;
    let mut lesion_fold: BTreeMap<&GroupKey, usize> = BTreeMap::new();
    let mut leftovers: Vec<&GroupKey> = Vec::new();
    let mut warnings = Vec::new();
    fn deal<'a>(
        keys: &mut Vec<&'a GroupKey>,
        rng: &mut SplitRng,
        cursor: &mut usize,
        m: usize,
        lesion_fold: &mut BTreeMap<&'a GroupKey, usize>,
    ) {
        shuffle(keys, rng);
        for k in keys.iter() {
            lesion_fold.insert(k, *cursor);
            *cursor = (*cursor + 1) % m;
        }
    }
    for (ci, keys) in by_class.iter_mut().enumerate() {
        if keys.is_empty() {
            continue;
        }
        if keys.len() < m {
            warnings.push(FoldWarning::TooFewLesions {
                label: Label::ALL[ci],
                lesions: keys.len(),
            });
            log::warn!(
                "class {} has {} lesion groups for {m} folds; assigning unstratified",
                Label::ALL[ci],
                keys.len()
            );
            leftovers.append(keys);
            continue;
        }
        deal(keys, &mut rng, &mut cursor, m, &mut lesion_fold);
    }
    if !leftovers.is_empty() {
        leftovers.sort();
        deal(&mut leftovers, &mut rng, &mut cursor, m, &mut lesion_fold);
    }

    let mut folds = BTreeMap::new();
    for (key, rows) in &groups {
        let f = lesion_fold[key];
        for r in rows {
            folds.insert(r.image.clone(), f);
        }
    }
    Ok(FoldSplit {
        assignment: FoldAssignment::new(m, folds)?,
        warnings,
    })
}

/// Training rows (main rows outside `val_fold` plus every external row) and
/// validation rows (main rows of `val_fold`), both in manifest order.
pub fn assemble_training_set<'a>(
    assignment: &FoldAssignment,
    manifest: &'a Manifest,
    val_fold: usize,
) -> Result<(Vec<&'a ManifestRow>, Vec<&'a ManifestRow>), DatasetError> {
    if val_fold >= assignment.num_folds() {
        return Err(DatasetError::FoldOutOfRange {
            fold: val_fold,
            m: assignment.num_folds(),
        });
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for row in manifest.rows() {
        match row.source {
            Source::External => train.push(row),
            Source::Main => {
                let fold = assignment
                    .fold_of(&row.image)
                    .ok_or_else(|| DatasetError::Unassigned(row.image.clone()))?;
                if fold == val_fold {
                    val.push(row);
                } else {
                    train.push(row);
                }
            }
        }
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::MetaRecord;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn row(image: String, lesion: Option<String>, label: Label, source: Source) -> ManifestRow {
        ManifestRow {
            image,
            lesion_id: lesion,
            label,
            source,
            meta: MetaRecord::MISSING,
        }
    }

    fn lesions(layout: &[(Label, usize, usize)]) -> Manifest {
        // (label, number of lesions, images per lesion)
        let mut rows = Vec::new();
        let mut n = 0;
        for &(label, count, per) in layout {
            for _ in 0..count {
                n += 1;
                for j in 0..per {
                    rows.push(row(format!("img{n}_{j}"), Some(format!("L{n}")), label, Source::Main));
                }
            }
        }
        Manifest::new(rows).unwrap()
    }

    #[test]
    fn even_single_class_split() {
        let m = lesions(&[(Label::Nv, 10, 2)]);
        let split = split_folds(&m, 5, 3).unwrap();
        assert!(split.warnings.is_empty());
        for f in 0..5 {
            assert_eq!(split.assignment.images_in(f).len(), 4);
        }
    }

    #[test]
    fn stratified_ratio_is_exact() {
        let m = lesions(&[(Label::Nv, 40, 1), (Label::Mel, 10, 1)]);
        let split = split_folds(&m, 5, 11).unwrap();
        for f in 0..5 {
            let imgs = split.assignment.images_in(f);
            let mel = imgs.iter().filter(|i| m.get(i).unwrap().label == Label::Mel).count();
            assert_eq!((imgs.len() - mel, mel), (8, 2));
        }
    }

    #[test]
    fn small_classes_degrade_with_warning() {
        let m = lesions(&[(Label::Nv, 10, 1), (Label::Df, 2, 1)]);
        let split = split_folds(&m, 5, 0).unwrap();
        assert_eq!(
            split.warnings,
            vec![FoldWarning::TooFewLesions { label: Label::Df, lesions: 2 }]
        );
        assert_eq!(split.assignment.len(), 12);
    }

    #[test]
    fn fold_count_checked() {
        let m = lesions(&[(Label::Nv, 3, 1)]);
        assert!(matches!(split_folds(&m, 1, 0), Err(DatasetError::InvalidFoldCount(1))));
    }

    #[test]
    fn assembly_respects_sources() {
        let mut rows = lesions(&[(Label::Nv, 10, 1), (Label::Mel, 5, 1)]).rows().to_vec();
        rows.push(row("ext1".into(), None, Label::Unk, Source::External));
        rows.push(row("ext2".into(), None, Label::Bcc, Source::External));
        let m = Manifest::new(rows).unwrap();
        let split = split_folds(&m, 5, 5).unwrap();
        let mut train_hits: HashMap<&str, usize> = HashMap::new();
        let mut val_hits: HashMap<&str, usize> = HashMap::new();
        for f in 0..5 {
            let (train, val) = assemble_training_set(&split.assignment, &m, f).unwrap();
            assert!(val.iter().all(|r| r.label != Label::Unk && r.source == Source::Main));
            for r in train {
                *train_hits.entry(r.image.as_str()).or_default() += 1;
            }
            for r in val {
                *val_hits.entry(r.image.as_str()).or_default() += 1;
            }
        }
        for r in m.rows() {
            match r.source {
                Source::Main => {
                    assert_eq!(train_hits[r.image.as_str()], 4);
                    assert_eq!(val_hits[r.image.as_str()], 1);
                }
                Source::External => {
                    assert_eq!(train_hits[r.image.as_str()], 5);
                    assert!(!val_hits.contains_key(r.image.as_str()));
                }
            }
        }
        assert!(assemble_training_set(&split.assignment, &m, 5).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = lesions(&[(Label::Nv, 7, 2), (Label::Mel, 6, 1)]);
        let a = split_folds(&m, 3, 9).unwrap().assignment;
        let bytes = a.to_csv_bytes().unwrap();
        assert!(bytes.starts_with(b"image,fold\n"));
        let back = FoldAssignment::read_csv(bytes.as_slice(), "f", Some(3)).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn below_is_in_range() {
        let mut rng = SplitRng::seed_from_u64(1);
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            seen[below(&mut rng, 7)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800 && c < 1200));
    }

    fn arb_manifest() -> impl Strategy<Value = Manifest> {
        proptest::collection::vec((0usize..40, 0usize..9, any::<bool>()), 1..120).prop_map(|layout| {
            let rows = layout
                .into_iter()
                .enumerate()
                .map(|(i, (lesion, class, has_id))| {
                    let label = Label::ALL[class % 8];
                    let id = has_id.then(|| format!("L{lesion}"));
                    row(format!("img{i}"), id, label, Source::Main)
                })
                .collect();
            Manifest::new(rows).unwrap()
        })
    }

    proptest! {
        #[test]
        fn lesions_never_span_folds(m in arb_manifest(), k in 2usize..7, seed in any::<u64>()) {
            let split = split_folds(&m, k, seed).unwrap();
            let a = &split.assignment;
            prop_assert_eq!(a.len(), m.len());
            let mut lesion_fold: HashMap<&str, usize> = HashMap::new();
            for r in m.rows() {
                let f = a.fold_of(&r.image).unwrap();
                prop_assert!(f < k);
                if let Some(id) = &r.lesion_id {
                    let prev = *lesion_fold.entry(id.as_str()).or_insert(f);
                    prop_assert_eq!(prev, f);
                }
            }
            let again = split_folds(&m, k, seed).unwrap();
            prop_assert_eq!(a.to_csv_bytes().unwrap(), again.assignment.to_csv_bytes().unwrap());
        }
    }
}
