//! Labeled face samples, CutMix label discretization, a synthetic
//! multi-domain real/fake generator, and PNG directory ingestion.

mod cutmix;
mod generate;
mod ingest;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

pub use cutmix::{cutmix_at_level, cutmix_discretize, snap_real_fraction, CompositeSample, CutBox, LevelSampling};
pub use generate::{default_domains, generate_domain, SpoofCue, SynthDomainSpec, SynthSettings};
pub use ingest::{ingest_directory, write_directory, Ingested};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Fake = 0,
    Real = 1,
}

impl Label {
    pub fn value(self) -> f64 {
        self as u8 as f64
    }

    pub fn from_bit(bit: u8) -> Result<Self> {
        match bit {
            0 => Ok(Label::Fake),
            1 => Ok(Label::Real),
            other => Err(Error::Data(format!("label must be 0 or 1, got {other}"))),
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Fake => "fake",
            Label::Real => "real",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFace {
    pub image: Image,
    pub label: Label,
    pub domain: usize,
}

impl LabeledFace {
    pub fn new(image: Image, label: Label, domain: usize) -> Result<Self> {
        if !image.in_unit_range() {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(LabeledFace { image, label, domain })
    }
}

/// The label grid `M = {0, 1/K, …, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelGrid {
    k: usize,
}

impl LabelGrid {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("label grid needs K >= 2, got {k}")));
        }
        Ok(LabelGrid { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `K + 1`.
    pub fn len(&self) -> usize {
        self.k + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn value(&self, index: usize) -> f64 {
        index as f64 / self.k as f64
    }

    pub fn points(&self) -> Vec<f64> {
        (0..=self.k).map(|i| self.value(i)).collect()
    }
}

/// Samples of several named domains; `domain` fields index `domains`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub domains: Vec<String>,
    pub samples: Vec<LabeledFace>,
}

impl Dataset {
    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d == name)
            .ok_or_else(|| Error::Config(format!("unknown domain `{name}` (have: {})", self.domains.join(", "))))
    }

    pub fn of_domain(&self, domain: usize) -> impl Iterator<Item = &LabeledFace> {
        self.samples.iter().filter(move |s| s.domain == domain)
    }

    /// `[fake, real]` counts for each domain.
    pub fn counts(&self) -> Vec<[usize; 2]> {
        let mut counts = vec![[0, 0]; self.domains.len()];
        for s in &self.samples {
            counts[s.domain][s.label as usize] += 1;
        }
        counts
    }
}
