//! Row-stochastic prediction matrices and the prediction CSV format
//! (`image,MEL,NV,BCC,AK,BKL,DF,VASC,SCC,UNK`).

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::classes::{Label, NUM_CLASSES};

/// Class probabilities for one image, in canonical class order.
pub type Probs = [f64; NUM_CLASSES];

/// Row sums must be within this of 1 for in-memory matrices.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Rows read from CSV may deviate this much before renormalization
/// (files carry a limited number of decimals).
pub const CSV_ROW_SUM_TOL: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum PredictionError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0} image ids but {1} probability rows")]
    LengthMismatch(usize, usize),
    #[error("row for `{image}` is not a probability vector (sum {sum})")]
    NotStochastic { image: String, sum: f64 },
    #[error("duplicate image id `{0}`")]
    DuplicateImage(String),
    #[error("{file}: expected header image,{}", class_header())]
    BadHeader { file: String },
    #[error("{file}:{line}: {reason}")]
    BadRow { file: String, line: u64, reason: String },
}

fn class_header() -> String {
    Label::ALL.map(|l| l.code()).join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    ids: Vec<String>,
    probs: Vec<Probs>,
}

fn check_row(image: &str, p: &Probs, tol: f64) -> Result<(), PredictionError> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > tol {
        return Err(PredictionError::NotStochastic {
            image: image.to_string(),
            sum,
        });
    }
    Ok(())
}

impl PredictionMatrix {
    pub fn new(ids: Vec<String>, probs: Vec<Probs>) -> Result<Self, PredictionError> {
        if ids.len() != probs.len() {
            return Err(PredictionError::LengthMismatch(ids.len(), probs.len()));
        }
        let mut seen = std::collections::HashSet::with_capacity(ids.len());
        for (id, p) in ids.iter().zip(&probs) {
            if !seen.insert(id.as_str()) {
                return Err(PredictionError::DuplicateImage(id.clone()));
            }
            check_row(id, p, ROW_SUM_TOL)?;
        }
        Ok(Self { ids, probs })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn probs(&self) -> &[Probs] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row_index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Probs> {
        self.ids.iter().position(|x| x == id).map(|i| &self.probs[i])
    }

    /// Concatenate matrices (e.g. validation folds) in order.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a PredictionMatrix>) -> Result<Self, PredictionError> {
        let mut ids = Vec::new();
        let mut probs = Vec::new();
        for p in parts {
            ids.extend(p.ids.iter().cloned());
            probs.extend(p.probs.iter().copied());
        }
        Self::new(ids, probs)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PredictionError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["image".to_string()];
        header.extend(Label::ALL.iter().map(|l| l.code().to_string()));
        w.write_record(&header)?;
        for (id, p) in self.ids.iter().zip(&self.probs) {
            let mut rec = Vec::with_capacity(NUM_CLASSES + 1);
            rec.push(id.clone());
            rec.extend(p.iter().map(|v| format!("{v:.8}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>, PredictionError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }

    /// Parse a prediction CSV; rows within [`CSV_ROW_SUM_TOL`] of unit sum
    /// are renormalized exactly.
    pub fn read_csv<R: Read>(reader: R, file: &str) -> Result<Self, PredictionError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected: Vec<&str> = std::iter::once("image")
            .chain(Label::ALL.iter().map(|l| l.code()))
            .collect();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(PredictionError::BadHeader { file: file.into() });
        }
        let mut ids = Vec::new();
        let mut probs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let bad = |reason: String| PredictionError::BadRow {
                file: file.into(),
                line,
                reason,
            };
            let id = rec.get(0).unwrap_or("").to_string();
            let mut p = [0.0; NUM_CLASSES];
            for (c, slot) in p.iter_mut().enumerate() {
                let raw = rec.get(c + 1).unwrap_or("");
                *slot = raw
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad probability `{raw}`")))?;
            }
            check_row(&id, &p, CSV_ROW_SUM_TOL)?;
            let sum: f64 = p.iter().sum();
            for v in &mut p {
                *v /= sum;
            }
            ids.push(id);
            probs.push(p);
        }
        Self::new(ids, probs)
    }

    pub fn read_path(path: &std::path::Path) -> crate::Result<Self> {
        use crate::error::IoContext;
        let f = std::fs::File::open(path).at(path)?;
        Ok(Self::read_csv(f, &path.display().to_string())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(c: usize) -> Probs {
        let mut p = [0.0; NUM_CLASSES];
        p[c] = 1.0;
        p
    }

    #[test]
    fn validates_rows() {
        assert!(PredictionMatrix::new(vec!["a".into()], vec![[0.0; NUM_CLASSES]]).is_err());
        assert!(PredictionMatrix::new(vec!["a".into(), "a".into()], vec![onehot(0), onehot(1)]).is_err());
        assert!(PredictionMatrix::new(vec!["a".into()], vec![]).is_err());
        let mut neg = onehot(0);
        neg[0] = 1.5;
        neg[1] = -0.5;
        assert!(PredictionMatrix::new(vec!["a".into()], vec![neg]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let p = [0.1, 0.2, 0.05, 0.05, 0.1, 0.1, 0.1, 0.2, 0.1];
        let m = PredictionMatrix::new(vec!["x".into(), "y".into()], vec![p, onehot(8)]).unwrap();
        let bytes = m.to_csv_bytes().unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("image,MEL,NV,BCC,AK,BKL,DF,VASC,SCC,UNK\nx,0.10000000,"));
        let back = PredictionMatrix::read_csv(bytes.as_slice(), "p").unwrap();
        for (a, b) in back.probs()[0].iter().zip(p) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(back.ids(), m.ids());
    }

    #[test]
    fn rejects_wrong_header() {
        let csv = "image,MEL,NV\nx,0.5,0.5\n";
        assert!(matches!(
            PredictionMatrix::read_csv(csv.as_bytes(), "p"),
            Err(PredictionError::BadHeader { .. })
        ));
    }
}
