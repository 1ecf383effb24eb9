use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OrganSite, SlideRecord, Subtype, TileRef, TissueClass};
use crate::error::{Error, IoContext, Result};
use crate::jsonl;

#[derive(Deserialize)]
struct RawSlide {
    slide_id: String,
    organ_site: String,
    #[serde(default)]
    subtype: Option<String>,
    base_width: u32,
    base_height: u32,
    base_magnification: f64,
    path: String,
}

/// Reads a slide manifest: one JSON object per line.
pub fn index_slides(manifest_path: &Path) -> Result<Vec<SlideRecord>> {
    let text = std::fs::read_to_string(manifest_path).at(manifest_path)?;
    parse_slide_manifest(&text, manifest_path)
}

pub fn parse_slide_manifest(text: &str, origin: &Path) -> Result<Vec<SlideRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let raw: RawSlide = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let organ_site: OrganSite = raw.organ_site.parse().map_err(parse_err)?;
        let record = SlideRecord {
            slide_id: raw.slide_id,
            organ_site,
            subtype: raw
                .subtype
                .as_deref()
                .map(Subtype::parse)
                .unwrap_or(Subtype::Unlabeled),
            base_width: raw.base_width,
            base_height: raw.base_height,
            base_magnification: raw.base_magnification,
            path: raw.path,
        };
        record.validate().map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("line {}: {m}", i + 1)),
            other => other,
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_slide_manifest(path: &Path, slides: &[SlideRecord]) -> Result<()> {
    jsonl::write(path, slides)
}

pub fn read_tiles(path: &Path) -> Result<Vec<TileRef>> {
    jsonl::read(path)
}

pub fn write_tiles(path: &Path, tiles: &[TileRef]) -> Result<()> {
    jsonl::write(path, tiles)
}

/// One line of a labeled-set manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledEntry {
    pub item_id: String,
    pub label: TissueClass,
    pub split: String,
}

pub fn read_labeled_manifest(path: &Path) -> Result<Vec<LabeledEntry>> {
    jsonl::read(path)
}

pub fn write_labeled_manifest(path: &Path, entries: &[LabeledEntry]) -> Result<()> {
    jsonl::write(path, entries)
}
