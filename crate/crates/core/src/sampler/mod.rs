//! Anchor/neighbor/distant triplet generation.
//!
//! Slide triplets use spatial proximity for the neighbor and one of four
//! strategies for the distant tile (same slide but remote, another slide of
//! the same subtype, another subtype of the same organ, another organ).
//! Labeled triplets take the neighbor from the anchor's class and the distant
//! item from a different class.

mod generate;
mod labeled;
mod spatial;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::TileRef;
use crate::error::{Error, Result};
use crate::jsonl;

pub use generate::{generate_manifest, ManifestSource, MANIFEST_CHUNK};
pub use labeled::{sample_labeled_triplet, LabeledSampler};
pub use spatial::{sample_spatial_triplet, SpatialSampler};
pub use validate::{validate_triplet, TripletCheck, TripletMetadata};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistantType {
    /// Type 1: same slide, at least `distant_min_dist` away.
    SameSlideRemote,
    /// Type 2: another slide of the same subtype.
    SameSubtypeOtherSlide,
    /// Type 3: another subtype of the same organ site.
    SameOrganOtherSubtype,
    /// Type 4: another organ site.
    OtherOrgan,
    /// Labeled sets: a different tissue class.
    DifferentClassLabel,
}

impl DistantType {
    pub const ALL: [DistantType; 5] = [
        DistantType::SameSlideRemote,
        DistantType::SameSubtypeOtherSlide,
        DistantType::SameOrganOtherSubtype,
        DistantType::OtherOrgan,
        DistantType::DifferentClassLabel,
    ];

    pub const SPATIAL: [DistantType; 4] = [
        DistantType::SameSlideRemote,
        DistantType::SameSubtypeOtherSlide,
        DistantType::SameOrganOtherSubtype,
        DistantType::OtherOrgan,
    ];

    pub fn is_spatial(self) -> bool {
        self != DistantType::DifferentClassLabel
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DistantType::SameSlideRemote => "same_slide_remote",
            DistantType::SameSubtypeOtherSlide => "same_subtype_other_slide",
            DistantType::SameOrganOtherSubtype => "same_organ_other_subtype",
            DistantType::OtherOrgan => "other_organ",
            DistantType::DifferentClassLabel => "different_class_label",
        }
    }
}

impl fmt::Display for DistantType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistantType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "1" | "type1" => return Ok(DistantType::SameSlideRemote),
            "2" | "type2" => return Ok(DistantType::SameSubtypeOtherSlide),
            "3" | "type3" => return Ok(DistantType::SameOrganOtherSubtype),
            "4" | "type4" => return Ok(DistantType::OtherOrgan),
            "labeled" | "label" => return Ok(DistantType::DifferentClassLabel),
            _ => {}
        }
        DistantType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown distant type {s:?}"))
    }
}

/// A triplet member: a slide tile or a labeled item id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TripletRef {
    Tile(TileRef),
    Item(String),
}

impl TripletRef {
    pub fn as_tile(&self) -> Option<&TileRef> {
        match self {
            TripletRef::Tile(t) => Some(t),
            TripletRef::Item(_) => None,
        }
    }

    pub fn as_item(&self) -> Option<&str> {
        match self {
            TripletRef::Item(id) => Some(id),
            TripletRef::Tile(_) => None,
        }
    }

    /// Reference identity: tiles compare by location, items by id.
    pub fn same_as(&self, other: &TripletRef) -> bool {
        match (self, other) {
            (TripletRef::Tile(a), TripletRef::Tile(b)) => a.same_location(b),
            (TripletRef::Item(a), TripletRef::Item(b)) => a == b,
            _ => false,
        }
    }
}

impl fmt::Display for TripletRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TripletRef::Tile(t) => write!(f, "{}@({},{})", t.slide_id, t.center_x, t.center_y),
            TripletRef::Item(id) => f.write_str(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: TripletRef,
    pub neighbor: TripletRef,
    pub distant: TripletRef,
    pub distant_type: DistantType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Largest anchor–neighbor center distance, base pixels.
    pub neighbor_max_dist: f64,
    /// Smallest anchor–distant center distance for same-slide distants.
    pub distant_min_dist: f64,
    pub seed: u64,
    pub counts_per_type: BTreeMap<DistantType, usize>,
    pub max_rejections: usize,
}

impl SamplerConfig {
    pub const DEFAULT_MAX_REJECTIONS: usize = 1000;

    /// Radii at 2× and 8× the patch footprint (in base pixels).
    pub fn for_footprint(footprint: u32, seed: u64) -> Self {
        SamplerConfig {
            neighbor_max_dist: 2.0 * f64::from(footprint),
            distant_min_dist: 8.0 * f64::from(footprint),
            seed,
            counts_per_type: BTreeMap::new(),
            max_rejections: Self::DEFAULT_MAX_REJECTIONS,
        }
    }

    pub fn with_counts(mut self, counts: impl IntoIterator<Item = (DistantType, usize)>) -> Self {
        self.counts_per_type = counts.into_iter().collect();
        self
    }

    /// Spreads `total` uniformly over `types`, earlier types taking the
    /// remainder.
    pub fn uniform_counts(types: &[DistantType], total: usize) -> BTreeMap<DistantType, usize> {
        let mut sorted = types.to_vec();
        sorted.sort();
        sorted.dedup();
        let n = sorted.len().max(1);
        sorted
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, total / n + usize::from(i < total % n)))
            .collect()
    }

    pub fn total(&self) -> usize {
        self.counts_per_type.values().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.neighbor_max_dist > 0.0 && self.neighbor_max_dist < self.distant_min_dist) {
            return Err(Error::Contract(format!(
                "need 0 < neighbor_max_dist ({}) < distant_min_dist ({})",
                self.neighbor_max_dist, self.distant_min_dist
            )));
        }
        if self.max_rejections == 0 {
            return Err(Error::Contract("max_rejections must be positive".into()));
        }
        Ok(())
    }
}

pub fn write_triplets(path: &Path, triplets: &[Triplet]) -> Result<()> {
    jsonl::write(path, triplets)
}

pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    jsonl::read(path)
}
