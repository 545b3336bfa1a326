use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const NUM_CLASSES: usize = 5;

/// Clip annotation. The discriminant order (R, P, B, I, F) is the canonical
/// label order used by score vectors, confusion matrices and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "R")]
    Repetition = 0,
    #[serde(rename = "P")]
    Prolongation = 1,
    #[serde(rename = "B")]
    Block = 2,
    #[serde(rename = "I")]
    Interjection = 3,
    #[serde(rename = "F")]
    Fluent = 4,
}

pub const LABELS: [Label; NUM_CLASSES] = [
    Label::Repetition,
    Label::Prolongation,
    Label::Block,
    Label::Interjection,
    Label::Fluent,
];

impl Label {
    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        LABELS.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            Label::Repetition => "R",
            Label::Prolongation => "P",
            Label::Block => "B",
            Label::Interjection => "I",
            Label::Fluent => "F",
        }
    }

    pub fn is_fluent(self) -> bool {
        self == Label::Fluent
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "R" => Ok(Label::Repetition),
            "P" => Ok(Label::Prolongation),
            "B" => Ok(Label::Block),
            "I" => Ok(Label::Interjection),
            "F" => Ok(Label::Fluent),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}
