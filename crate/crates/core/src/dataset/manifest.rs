use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::classes::Label;
use crate::meta::{AnatomSite, MetaRecord, Sex};

/// Required manifest columns, in the order they are written.
pub const MANIFEST_COLUMNS: [&str; 6] = [
    "image",
    "age_approx",
    "anatom_site_general",
    "sex",
    "lesion_id",
    "label",
];

/// Where an image comes from. External images only ever train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Main,
    External,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Main => "main",
            Source::External => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub image: String,
    pub lesion_id: Option<String>,
    pub label: Label,
    pub source: Source,
    pub meta: MetaRecord,
}

/// Validated collection of labelled images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::with_capacity(rows.len());
        for r in &rows {
            if !seen.insert(r.image.as_str()) {
                return Err(DatasetError::DuplicateImage(r.image.clone()));
            }
            if r.label == Label::Unk && r.source == Source::Main {
                return Err(DatasetError::UnkInMain(r.image.clone()));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn main_rows(&self) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(|r| r.source == Source::Main)
    }

    pub fn external_rows(&self) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(|r| r.source == Source::External)
    }

    pub fn get(&self, image: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.image == image)
    }

    /// Append `external` with every row marked as external data.
    pub fn merged_with_external(self, external: Manifest) -> Result<Self, DatasetError> {
        let mut rows = self.rows;
        rows.extend(external.rows.into_iter().map(|mut r| {
            r.source = Source::External;
            r
        }));
        Manifest::new(rows)
    }

    /// Parse a meta/manifest CSV. An optional `source` column (`main` or
    /// `external`) marks external data; `default_source` applies otherwise.
    pub fn read_csv<R: Read>(
        reader: R,
        file: &str,
        default_source: Source,
    ) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| -> Result<usize, DatasetError> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DatasetError::MissingColumn {
                    file: file.to_string(),
                    column: name.to_string(),
                })
        };
        let [c_img, c_age, c_site, c_sex, c_lesion, c_label] = [
            col("image")?,
            col("age_approx")?,
            col("anatom_site_general")?,
            col("sex")?,
            col("lesion_id")?,
            col("label")?,
        ];
        let c_source = headers.iter().position(|h| h == "source");

        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let field = |i: usize| rec.get(i).unwrap_or("");
            let bad = |column: &str, value: &str, reason: &str| DatasetError::BadField {
                file: file.to_string(),
                line,
                column: column.to_string(),
                value: value.to_string(),
                reason: reason.to_string(),
            };

            let image = field(c_img);
            if image.is_empty() {
                return Err(bad("image", image, "empty image id"));
            }
            let meta = parse_meta(file, line, field(c_age), field(c_site), field(c_sex))?;
            let label_s = field(c_label);
            let label = label_s
                .parse::<Label>()
                .map_err(|_| bad("label", label_s, "expected one of MEL,NV,BCC,AK,BKL,DF,VASC,SCC,UNK"))?;
            let source = match c_source.map(field) {
                None | Some("") => default_source,
                Some(s) if s.eq_ignore_ascii_case("main") => Source::Main,
                Some(s) if s.eq_ignore_ascii_case("external") => Source::External,
                Some(s) => return Err(bad("source", s, "expected `main` or `external`")),
            };
            let lesion_id = match field(c_lesion) {
                "" => None,
                s => Some(s.to_string()),
            };
            rows.push(ManifestRow {
                image: image.to_string(),
                lesion_id,
                label,
                source,
                meta,
            });
        }
        Manifest::new(rows)
    }

    pub fn read_path(path: &std::path::Path, default_source: Source) -> crate::Result<Self> {
        use crate::error::IoContext;
        let f = std::fs::File::open(path).at(path)?;
        Ok(Self::read_csv(f, &path.display().to_string(), default_source)?)
    }

    /// Write the manifest with a trailing `source` column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = MANIFEST_COLUMNS.to_vec();
        header.push("source");
        w.write_record(&header)?;
        for r in &self.rows {
            let age = r.meta.age.map(fmt_age).unwrap_or_default();
            w.write_record([
                r.image.as_str(),
                age.as_str(),
                r.meta.site.map(|s| s.name()).unwrap_or(""),
                r.meta.sex.map(|s| s.name()).unwrap_or(""),
                r.lesion_id.as_deref().unwrap_or(""),
                r.label.code(),
                r.source.name(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }
}

fn parse_meta(file: &str, line: u64, age: &str, site: &str, sex: &str) -> Result<MetaRecord, DatasetError> {
    let age = match age {
        "" => None,
        s => match s.parse::<f64>() {
            Ok(a) if a >= 0.0 && a.is_finite() => Some(a),
            _ => {
                return Err(DatasetError::BadField {
                    file: file.to_string(),
                    line,
                    column: "age_approx".into(),
                    value: s.to_string(),
                    reason: "expected a non-negative number".into(),
                })
            }
        },
    };
    let site = match site {
        "" => None,
        s => {
            let parsed = AnatomSite::parse(s);
            if parsed.is_none() {
                log::warn!("{file}:{line}: unknown anatomical site `{s}` treated as missing");
            }
            parsed
        }
    };
    let sex = match sex {
        "" => None,
        s => {
            let parsed = Sex::parse(s);
            if parsed.is_none() {
                log::warn!("{file}:{line}: unknown sex `{s}` treated as missing");
            }
            parsed
        }
    };
    Ok(MetaRecord { age, site, sex })
}

/// Read unlabelled meta data (`image` plus any of `age_approx`,
/// `anatom_site_general`, `sex`); absent columns mean missing values.
pub fn read_meta_csv<R: Read>(reader: R, file: &str) -> Result<Vec<(String, MetaRecord)>, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let c_img = col("image").ok_or_else(|| DatasetError::MissingColumn {
        file: file.to_string(),
        column: "image".into(),
    })?;
    let (c_age, c_site, c_sex) = (col("age_approx"), col("anatom_site_general"), col("sex"));
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |c: Option<usize>| c.and_then(|i| rec.get(i)).unwrap_or("");
        let image = field(Some(c_img)).to_string();
        if !seen.insert(image.clone()) {
            return Err(DatasetError::DuplicateImage(image));
        }
        let meta = parse_meta(file, line, field(c_age), field(c_site), field(c_sex))?;
        out.push((image, meta));
    }
    Ok(out)
}

fn fmt_age(a: f64) -> String {
    if a.fract() == 0.0 {
        format!("{a:.0}")
    } else {
        a.to_string()
    }
}
