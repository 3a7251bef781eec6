use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::MarioError;

/// One of the three modality views. Used both for a node's planted regime and
/// for the prompt template kind; the order `Txt < Vis < Mm` is fixed and is
/// the tie-break order for routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Txt,
    Vis,
    Mm,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Txt, Modality::Vis, Modality::Mm];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Modality> {
        Modality::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Txt => "txt",
            Modality::Vis => "vis",
            Modality::Mm => "mm",
        }
    }

    pub fn uses_text(self) -> bool {
        matches!(self, Modality::Txt | Modality::Mm)
    }

    pub fn uses_image(self) -> bool {
        matches!(self, Modality::Vis | Modality::Mm)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = MarioError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "txt" => Ok(Modality::Txt),
            "vis" => Ok(Modality::Vis),
            "mm" => Ok(Modality::Mm),
            other => Err(MarioError::Config(format!("unknown modality '{other}'"))),
        }
    }
}
