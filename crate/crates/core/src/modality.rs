use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One input stream of a video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Flow,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Flow, Modality::Audio];

    pub fn letter(self) -> char {
        match self {
            Modality::Rgb => 'r',
            Modality::Flow => 'f',
            Modality::Audio => 'a',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
            Modality::Audio => "audio",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "r" | "rgb" => Ok(Modality::Rgb),
            "f" | "flow" => Ok(Modality::Flow),
            "a" | "audio" => Ok(Modality::Audio),
            other => Err(Error::config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Parses a comma-separated list such as `r,f,a`, returned in canonical order.
pub fn parse_modalities(s: &str) -> Result<Vec<Modality>> {
    let mut out: Vec<Modality> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    let n = out.len();
    out.dedup();
    if out.len() != n {
        return Err(Error::config(format!("duplicate modality in `{s}`")));
    }
    Ok(out)
}

pub fn format_modalities(ms: &[Modality]) -> String {
    ms.iter().map(|m| m.letter().to_string()).collect::<Vec<_>>().join(",")
}

/// Ordered fusion pair `(source, target)`: information of `source` is condensed into `target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub source: Modality,
    pub target: Modality,
}

impl Pair {
    pub fn label(self) -> String {
        format!(
            "{}{}",
            self.source.letter().to_ascii_uppercase(),
            self.target.letter().to_ascii_uppercase()
        )
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// All ordered pairs of the configured modalities in the fixed fusion order
/// `RF, FR, RA, AR, FA, AF` (restricted to what is configured).
pub fn ordered_pairs(modalities: &[Modality]) -> Vec<Pair> {
    let mut sorted = modalities.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut pairs = Vec::new();
    for j in 1..sorted.len() {
        for i in 0..j {
            let (a, b) = (sorted[i], sorted[j]);
            pairs.push(Pair { source: a, target: b });
            pairs.push(Pair { source: b, target: a });
        }
    }
    pairs
}
