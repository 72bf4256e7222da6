//! Patient meta data: raw records, the 11-feature encoding and meta-data
//! dropout.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Length of an encoded [`MetaVector`].
pub const META_DIM: usize = 11;

/// Age feature used for a missing age.
pub const MISSING_AGE: f64 = -5.0;

/// General anatomical site, in one-hot column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnatomSite {
    HeadNeck,
    UpperExtremity,
    LowerExtremity,
    AnteriorTorso,
    PosteriorTorso,
    LateralTorso,
    PalmsSoles,
    OralGenital,
}

impl AnatomSite {
    pub const ALL: [AnatomSite; 8] = [
        AnatomSite::HeadNeck,
        AnatomSite::UpperExtremity,
        AnatomSite::LowerExtremity,
        AnatomSite::AnteriorTorso,
        AnatomSite::PosteriorTorso,
        AnatomSite::LateralTorso,
        AnatomSite::PalmsSoles,
        AnatomSite::OralGenital,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Vocabulary string as it appears in meta CSV files.
    pub fn name(self) -> &'static str {
        match self {
            AnatomSite::HeadNeck => "head/neck",
            AnatomSite::UpperExtremity => "upper extremity",
            AnatomSite::LowerExtremity => "lower extremity",
            AnatomSite::AnteriorTorso => "anterior torso",
            AnatomSite::PosteriorTorso => "posterior torso",
            AnatomSite::LateralTorso => "lateral torso",
            AnatomSite::PalmsSoles => "palms/soles",
            AnatomSite::OralGenital => "oral/genital",
        }
    }

    /// Parse a site string; `None` for anything outside the vocabulary.
    pub fn parse(s: &str) -> Option<AnatomSite> {
        let t = s.trim();
        Self::ALL.into_iter().find(|a| a.name().eq_ignore_ascii_case(t))
    }
}

impl fmt::Display for AnatomSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }

    pub fn parse(s: &str) -> Option<Sex> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" => Some(Sex::Male),
            "female" => Some(Sex::Female),
            _ => None,
        }
    }
}

/// Raw meta data for one image; every property may be missing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetaRecord {
    pub age: Option<f64>,
    pub site: Option<AnatomSite>,
    pub sex: Option<Sex>,
}

impl MetaRecord {
    pub const MISSING: MetaRecord = MetaRecord {
        age: None,
        site: None,
        sex: None,
    };

    pub fn is_fully_missing(&self) -> bool {
        self.age.is_none() && self.site.is_none() && self.sex.is_none()
    }
}

/// Encoded meta data: site one-hot (8), sex one-hot (2), age (1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaVector(pub [f64; META_DIM]);

impl MetaVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// How the age scalar is presented to the network.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AgeEncoding {
    /// Age in years as-is.
    #[default]
    Raw,
    /// `(age - mean) / std`; a missing age still encodes as [`MISSING_AGE`].
    Standardized { mean: f64, std: f64 },
}

pub fn encode_meta(rec: &MetaRecord) -> MetaVector {
    encode_meta_with(rec, AgeEncoding::Raw)
}

pub fn encode_meta_with(rec: &MetaRecord, age: AgeEncoding) -> MetaVector {
    let mut v = [0.0; META_DIM];
    if let Some(site) = rec.site {
        v[site.index()] = 1.0;
    }
    if let Some(sex) = rec.sex {
        v[8 + sex.index()] = 1.0;
    }
    v[10] = match (rec.age, age) {
        (None, _) => MISSING_AGE,
        (Some(a), AgeEncoding::Raw) => a,
        (Some(a), AgeEncoding::Standardized { mean, std }) => (a - mean) / std,
    };
    MetaVector(v)
}

/// Independently drop each property with probability `p`.
pub fn meta_dropout<R: Rng + ?Sized>(rec: &MetaRecord, p: f64, rng: &mut R) -> MetaRecord {
    // one draw per property keeps the random stream independent of the record
    let mut drop = || rng.random::<f64>() < p;
    let (d_age, d_site, d_sex) = (drop(), drop(), drop());
    MetaRecord {
        age: if d_age { None } else { rec.age },
        site: if d_site { None } else { rec.site },
        sex: if d_sex { None } else { rec.sex },
    }
}
