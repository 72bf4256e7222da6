use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of output classes, including the catch-all `UNK` class.
pub const NUM_CLASSES: usize = 9;

/// Number of classes used for evaluation (`UNK` excluded).
pub const KNOWN_CLASSES: usize = 8;

/// Diagnostic class, in canonical column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Mel,
    Nv,
    Bcc,
    Ak,
    Bkl,
    Df,
    Vasc,
    Scc,
    Unk,
}

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [
        Label::Mel,
        Label::Nv,
        Label::Bcc,
        Label::Ak,
        Label::Bkl,
        Label::Df,
        Label::Vasc,
        Label::Scc,
        Label::Unk,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            Label::Mel => "MEL",
            Label::Nv => "NV",
            Label::Bcc => "BCC",
            Label::Ak => "AK",
            Label::Bkl => "BKL",
            Label::Df => "DF",
            Label::Vasc => "VASC",
            Label::Scc => "SCC",
            Label::Unk => "UNK",
        }
    }

    pub fn is_known(self) -> bool {
        self != Label::Unk
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unrecognized class label `{0}`")]
pub struct ParseLabelError(pub String);

impl FromStr for Label {
    type Err = ParseLabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        Label::ALL
            .iter()
            .copied()
            .find(|l| l.code().eq_ignore_ascii_case(t))
            .ok_or_else(|| ParseLabelError(s.to_string()))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
