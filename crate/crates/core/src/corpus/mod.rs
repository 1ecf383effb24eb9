//! Slide collections, grid tiling, patch materialization and labeled patch
//! sets.

mod labeled;
mod manifest;
mod split;
mod store;
mod tiling;

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use labeled::{center_crop_offset, load_labeled_patches, CropPolicy, LoadReport};
pub use manifest::{
    index_slides, parse_slide_manifest, read_labeled_manifest, read_tiles, write_labeled_manifest,
    write_slide_manifest, write_tiles, LabeledEntry,
};
pub(crate) use split::group_by_class;
pub use split::{largest_remainder, split_source_target, DatasetSplit};
pub use store::{materialize_patch, FnSlideStore, ImageFileStore, InMemoryStore, SlideStore};
pub use tiling::{grid_tile_slide, mean_saturation, TissueFilter};

/// Side length of every patch fed to the encoders.
pub const PATCH_SIZE: u32 = 128;
/// Extraction magnification for slide patches.
pub const TARGET_MAGNIFICATION: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrganSite {
    Prostate,
    Gastrointestinal,
    Lung,
    Other,
}

impl OrganSite {
    pub fn as_str(self) -> &'static str {
        match self {
            OrganSite::Prostate => "prostate",
            OrganSite::Gastrointestinal => "gastrointestinal",
            OrganSite::Lung => "lung",
            OrganSite::Other => "other",
        }
    }
}

impl FromStr for OrganSite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "prostate" => Ok(OrganSite::Prostate),
            "gastrointestinal" | "gi" => Ok(OrganSite::Gastrointestinal),
            "lung" => Ok(OrganSite::Lung),
            "other" => Ok(OrganSite::Other),
            other => Err(format!("unknown organ site {other:?}")),
        }
    }
}

impl fmt::Display for OrganSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// TCGA cancer subtypes drawn from the three organ sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subtype {
    #[serde(rename = "PRAD")]
    Prad,
    #[serde(rename = "TGCT")]
    Tgct,
    #[serde(rename = "ESCA")]
    Esca,
    #[serde(rename = "STAD")]
    Stad,
    #[serde(rename = "COAD")]
    Coad,
    #[serde(rename = "READ")]
    Read,
    #[serde(rename = "LUAD")]
    Luad,
    #[serde(rename = "LUSC")]
    Lusc,
    #[serde(rename = "MESO")]
    Meso,
    #[serde(rename = "unlabeled")]
    Unlabeled,
}

impl Subtype {
    pub const LABELED: [Subtype; 9] = [
        Subtype::Prad,
        Subtype::Tgct,
        Subtype::Esca,
        Subtype::Stad,
        Subtype::Coad,
        Subtype::Read,
        Subtype::Luad,
        Subtype::Lusc,
        Subtype::Meso,
    ];

    /// Lenient parse: anything unrecognised maps to `Unlabeled`.
    pub fn parse(s: &str) -> Subtype {
        match s.trim().to_ascii_uppercase().as_str() {
            "PRAD" => Subtype::Prad,
            "TGCT" => Subtype::Tgct,
            "ESCA" => Subtype::Esca,
            "STAD" => Subtype::Stad,
            "COAD" => Subtype::Coad,
            "READ" => Subtype::Read,
            "LUAD" => Subtype::Luad,
            "LUSC" => Subtype::Lusc,
            "MESO" => Subtype::Meso,
            _ => Subtype::Unlabeled,
        }
    }

    /// The organ site a labeled subtype belongs to.
    pub fn organ(self) -> Option<OrganSite> {
        match self {
            Subtype::Prad | Subtype::Tgct => Some(OrganSite::Prostate),
            Subtype::Esca | Subtype::Stad | Subtype::Coad | Subtype::Read => {
                Some(OrganSite::Gastrointestinal)
            }
            Subtype::Luad | Subtype::Lusc | Subtype::Meso => Some(OrganSite::Lung),
            Subtype::Unlabeled => None,
        }
    }

    pub fn is_labeled(self) -> bool {
        self != Subtype::Unlabeled
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subtype::Prad => "PRAD",
            Subtype::Tgct => "TGCT",
            Subtype::Esca => "ESCA",
            Subtype::Stad => "STAD",
            Subtype::Coad => "COAD",
            Subtype::Read => "READ",
            Subtype::Luad => "LUAD",
            Subtype::Lusc => "LUSC",
            Subtype::Meso => "MESO",
            Subtype::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One whole-slide image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub organ_site: OrganSite,
    pub subtype: Subtype,
    pub base_width: u32,
    pub base_height: u32,
    pub base_magnification: f64,
    pub path: String,
}

impl SlideRecord {
    pub fn validate(&self) -> Result<()> {
        if self.slide_id.is_empty() {
            return Err(Error::Validation("empty slide_id".into()));
        }
        if self.base_width == 0 || self.base_height == 0 {
            return Err(Error::Validation(format!(
                "slide {} has zero-sized base level",
                self.slide_id
            )));
        }
        if !(self.base_magnification.is_finite() && self.base_magnification > 0.0) {
            return Err(Error::Validation(format!(
                "slide {} has invalid base magnification {}",
                self.slide_id, self.base_magnification
            )));
        }
        if let Some(organ) = self.subtype.organ() {
            if organ != self.organ_site {
                return Err(Error::Validation(format!(
                    "slide {}: subtype {} belongs to {}, not {}",
                    self.slide_id, self.subtype, organ, self.organ_site
                )));
            }
        }
        Ok(())
    }

    /// Base-level pixels per target-magnification pixel.
    pub fn scale_to(&self, magnification: f64) -> f64 {
        self.base_magnification / magnification
    }
}

/// A patch location. Centers are in base-level pixel coordinates; the patch
/// size is measured at `magnification`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRef {
    pub slide_id: String,
    pub center_x: u32,
    pub center_y: u32,
    pub patch_size: u32,
    pub magnification: f64,
}

impl TileRef {
    /// Side of the patch footprint in base-level pixels.
    pub fn footprint(&self, slide: &SlideRecord) -> u32 {
        footprint_side(self.patch_size, slide.scale_to(self.magnification))
    }

    /// Top-left corner of the footprint in base coordinates. May be negative
    /// for an invalid tile.
    pub fn origin(&self, slide: &SlideRecord) -> (i64, i64) {
        let half = i64::from(self.footprint(slide) / 2);
        (
            i64::from(self.center_x) - half,
            i64::from(self.center_y) - half,
        )
    }

    /// Whether the footprint lies inside the slide's base level.
    pub fn fits(&self, slide: &SlideRecord) -> bool {
        if self.patch_size == 0 || self.slide_id != slide.slide_id {
            return false;
        }
        let side = i64::from(self.footprint(slide));
        let (x0, y0) = self.origin(slide);
        x0 >= 0
            && y0 >= 0
            && x0 + side <= i64::from(slide.base_width)
            && y0 + side <= i64::from(slide.base_height)
    }

    /// Euclidean distance between tile centers, in base pixels.
    pub fn distance(&self, other: &TileRef) -> f64 {
        let dx = f64::from(self.center_x) - f64::from(other.center_x);
        let dy = f64::from(self.center_y) - f64::from(other.center_y);
        dx.hypot(dy)
    }

    pub fn same_location(&self, other: &TileRef) -> bool {
        self.slide_id == other.slide_id
            && self.center_x == other.center_x
            && self.center_y == other.center_y
    }
}

pub(crate) fn footprint_side(patch_size: u32, scale: f64) -> u32 {
    (f64::from(patch_size) * scale).round() as u32
}

/// The eight tissue classes of the colorectal cancer patch dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TissueClass {
    TumourEpithelium,
    SimpleStroma,
    ComplexStroma,
    ImmuneCells,
    Debris,
    NormalMucosalGlands,
    AdiposeTissue,
    Background,
}

impl TissueClass {
    pub const ALL: [TissueClass; 8] = [
        TissueClass::TumourEpithelium,
        TissueClass::SimpleStroma,
        TissueClass::ComplexStroma,
        TissueClass::ImmuneCells,
        TissueClass::Debris,
        TissueClass::NormalMucosalGlands,
        TissueClass::AdiposeTissue,
        TissueClass::Background,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<TissueClass> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TissueClass::TumourEpithelium => "tumour_epithelium",
            TissueClass::SimpleStroma => "simple_stroma",
            TissueClass::ComplexStroma => "complex_stroma",
            TissueClass::ImmuneCells => "immune_cells",
            TissueClass::Debris => "debris",
            TissueClass::NormalMucosalGlands => "normal_mucosal_glands",
            TissueClass::AdiposeTissue => "adipose_tissue",
            TissueClass::Background => "background",
        }
    }

    /// Maps a class directory name to a class. Accepts the canonical names
    /// above and the numbered folder names of the public release
    /// (`01_TUMOR` … `08_EMPTY`).
    pub fn from_dir_name(name: &str) -> Option<TissueClass> {
        let lower = name.trim().to_ascii_lowercase();
        let stem = lower.trim_start_matches(|c: char| c.is_ascii_digit() || c == '_' || c == '-');
        Some(match stem {
            "tumour_epithelium" | "tumor_epithelium" | "tumor" | "tumour" => {
                TissueClass::TumourEpithelium
            }
            "simple_stroma" | "stroma" => TissueClass::SimpleStroma,
            "complex_stroma" | "complex" => TissueClass::ComplexStroma,
            "immune_cells" | "lympho" | "lymphocytes" | "immune" => TissueClass::ImmuneCells,
            "debris" => TissueClass::Debris,
            "normal_mucosal_glands" | "mucosa" | "mucosal_glands" => {
                TissueClass::NormalMucosalGlands
            }
            "adipose_tissue" | "adipose" => TissueClass::AdiposeTissue,
            "background" | "empty" => TissueClass::Background,
            _ => return None,
        })
    }
}

impl fmt::Display for TissueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TissueClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        TissueClass::from_dir_name(s).ok_or_else(|| format!("unknown tissue class {s:?}"))
    }
}

#[derive(Debug, Clone)]
pub struct LabeledPatch {
    pub image: RgbImage,
    pub label: TissueClass,
    pub item_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub dataset: String,
    pub split: String,
}

/// Labeled patches sharing one image size, with unique item ids.
#[derive(Debug, Clone)]
pub struct LabeledPatchSet {
    items: Vec<LabeledPatch>,
    pub provenance: Provenance,
}

impl LabeledPatchSet {
    pub fn new(items: Vec<LabeledPatch>, provenance: Provenance) -> Result<Self> {
        if let Some(first) = items.first() {
            let dims = first.image.dimensions();
            if let Some(bad) = items.iter().find(|p| p.image.dimensions() != dims) {
                return Err(Error::Validation(format!(
                    "item {} is {:?}, expected {:?}",
                    bad.item_id,
                    bad.image.dimensions(),
                    dims
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for p in &items {
            if !seen.insert(p.item_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate item id {}",
                    p.item_id
                )));
            }
        }
        Ok(LabeledPatchSet { items, provenance })
    }

    pub fn items(&self) -> &[LabeledPatch] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<TissueClass> {
        self.items.iter().map(|p| p.label).collect()
    }

    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.items.iter().position(|p| p.item_id == item_id)
    }

    /// Index from item id to position.
    pub fn id_index(&self) -> std::collections::HashMap<&str, usize> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, p)| (p.item_id.as_str(), i))
            .collect()
    }

    /// Items whose ids are listed, in listed order.
    pub fn subset(&self, ids: &[String], split: &str) -> Result<LabeledPatchSet> {
        let index = self.id_index();
        let items = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| self.items[i].clone())
                    .ok_or_else(|| Error::Lookup(format!("item {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledPatchSet::new(
            items,
            Provenance {
                dataset: self.provenance.dataset.clone(),
                split: split.to_string(),
            },
        )
    }
}

/// Slides plus the tiles kept on each, aligned by index.
#[derive(Debug, Clone, Default)]
pub struct SlideCorpus {
    pub slides: Vec<SlideRecord>,
    pub tiles: Vec<Vec<TileRef>>,
}

impl SlideCorpus {
    pub fn new(slides: Vec<SlideRecord>, tiles: Vec<Vec<TileRef>>) -> Result<Self> {
        if slides.len() != tiles.len() {
            return Err(Error::Contract(format!(
                "{} slides but {} tile lists",
                slides.len(),
                tiles.len()
            )));
        }
        for (slide, list) in slides.iter().zip(&tiles) {
            slide.validate()?;
            if let Some(t) = list.iter().find(|t| !t.fits(slide)) {
                return Err(Error::Validation(format!(
                    "tile ({}, {}) does not fit slide {}",
                    t.center_x, t.center_y, slide.slide_id
                )));
            }
        }
        Ok(SlideCorpus { slides, tiles })
    }

    /// Groups a flat tile list by slide. Tiles of unknown slides are a lookup
    /// error.
    pub fn from_tiles(slides: Vec<SlideRecord>, tiles: Vec<TileRef>) -> Result<Self> {
        let mut grouped = vec![Vec::new(); slides.len()];
        let index: std::collections::HashMap<&str, usize> = slides
            .iter()
            .enumerate()
            .map(|(i, s)| (s.slide_id.as_str(), i))
            .collect();
        for t in tiles {
            let i = *index
                .get(t.slide_id.as_str())
                .ok_or_else(|| Error::Lookup(format!("slide {}", t.slide_id)))?;
            grouped[i].push(t);
        }
        SlideCorpus::new(slides, grouped)
    }

    pub fn slide(&self, id: &str) -> Option<&SlideRecord> {
        self.slides.iter().find(|s| s.slide_id == id)
    }

    pub fn slide_index(&self, id: &str) -> Option<usize> {
        self.slides.iter().position(|s| s.slide_id == id)
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.iter().map(Vec::len).sum()
    }
}
