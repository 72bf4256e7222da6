use std::io::{Read, Write};

use super::{DatasetError, ManifestRow};
use crate::classes::{Label, NUM_CLASSES};

/// Image count per class over `rows`.
pub fn class_counts<'a>(rows: impl IntoIterator<Item = &'a ManifestRow>) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for r in rows {
        counts[r.label.index()] += 1;
    }
    counts
}

/// Balancing factors `(N / N_i)^k` with `N = sum(N_i)`.
pub fn class_weights(counts: &[usize], k: f64) -> Result<Vec<f64>, DatasetError> {
    if !(k >= 0.0 && k.is_finite()) {
        return Err(DatasetError::InvalidExponent(k));
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(DatasetError::EmptyClass { class });
    }
    let total: usize = counts.iter().sum();
    let n = total as f64;
    Ok(counts.iter().map(|&c| (n / c as f64).powf(k)).collect())
}

/// Per-class loss weights over the nine output classes. Classes absent from
/// the training data carry no weight and are omitted from the weights file.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: [Option<f64>; NUM_CLASSES],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self {
            weights: [Some(1.0); NUM_CLASSES],
        }
    }

    /// Weights for the classes with nonzero counts.
    pub fn from_counts(counts: &[usize; NUM_CLASSES], k: f64) -> Result<Self, DatasetError> {
        let present: Vec<usize> = (0..NUM_CLASSES).filter(|&i| counts[i] > 0).collect();
        if present.is_empty() {
            return Err(DatasetError::EmptyClass { class: 0 });
        }
        let sub: Vec<usize> = present.iter().map(|&i| counts[i]).collect();
        let w = class_weights(&sub, k)?;
        let mut weights = [None; NUM_CLASSES];
        for (&i, wi) in present.iter().zip(w) {
            weights[i] = Some(wi);
        }
        Ok(Self { weights })
    }

    pub fn from_rows<'a>(
        rows: impl IntoIterator<Item = &'a ManifestRow>,
        k: f64,
    ) -> Result<Self, DatasetError> {
        Self::from_counts(&class_counts(rows), k)
    }

    /// Weight for `label`; absent classes fall back to 1.
    pub fn get(&self, label: Label) -> f64 {
        self.weights[label.index()].unwrap_or(1.0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (Label, f64)> + '_ {
        Label::ALL
            .iter()
            .zip(self.weights.iter())
            .filter_map(|(&l, w)| w.map(|w| (l, w)))
    }

    pub fn as_array(&self) -> [f64; NUM_CLASSES] {
        Label::ALL.map(|l| self.get(l))
    }

    /// CSV `class,weight` in canonical class order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["class", "weight"])?;
        for (l, v) in self.entries() {
            w.write_record([l.code(), format!("{v}").as_str()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }

    pub fn read_csv<R: Read>(reader: R, file: &str) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut weights = [None; NUM_CLASSES];
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let bad = |column: &str, value: &str, reason: &str| DatasetError::BadField {
                file: file.into(),
                line,
                column: column.into(),
                value: value.into(),
                reason: reason.into(),
            };
            let c = rec.get(0).unwrap_or("");
            let label: Label = c.parse().map_err(|_| bad("class", c, "unknown class"))?;
            let v = rec.get(1).unwrap_or("");
            let w: f64 = v
                .parse()
                .ok()
                .filter(|w: &f64| *w > 0.0 && w.is_finite())
                .ok_or_else(|| bad("weight", v, "expected a positive number"))?;
            weights[label.index()] = Some(w);
        }
        Ok(Self { weights })
    }
}
