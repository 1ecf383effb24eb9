use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{LabeledPatch, LabeledPatchSet, Provenance, TissueClass, PATCH_SIZE};
use crate::error::{Error, IoContext, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CropPolicy {
    Center,
    /// Uniform crop offsets; item `i` draws from stream `i` of `seed`.
    Random {
        seed: u64,
    },
}

impl Default for CropPolicy {
    fn default() -> Self {
        CropPolicy::Center
    }
}

/// Offset of the central `target` window inside `source`.
pub fn center_crop_offset(source: u32, target: u32) -> u32 {
    source.saturating_sub(target) / 2
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Images smaller than the patch size, left out of the set.
    pub skipped_small: Vec<PathBuf>,
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "tif", "tiff", "jpg", "jpeg", "bmp"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .at(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .at(dir)?;
    entries.sort();
    Ok(entries)
}

/// Loads a directory tree with one subdirectory per tissue class, cropping
/// every image to 128×128.
pub fn load_labeled_patches(
    root: &Path,
    crop: CropPolicy,
) -> Result<(LabeledPatchSet, LoadReport)> {
    let mut items = Vec::new();
    let mut report = LoadReport::default();
    for class_dir in sorted_entries(root)? {
        if !class_dir.is_dir() {
            continue;
        }
        let dir_name = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let label = TissueClass::from_dir_name(&dir_name)
            .ok_or_else(|| Error::Validation(format!("unknown class directory {dir_name:?}")))?;
        for file in sorted_entries(&class_dir)? {
            let ext = file
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .unwrap_or_default();
            if !file.is_file() || !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                continue;
            }
            let img = image::open(&file)
                .map_err(|e| Error::Validation(format!("{}: {e}", file.display())))?
                .to_rgb8();
            if img.width() < PATCH_SIZE || img.height() < PATCH_SIZE {
                log::warn!(
                    "skipping {} ({}x{} < {PATCH_SIZE})",
                    file.display(),
                    img.width(),
                    img.height()
                );
                report.skipped_small.push(file);
                continue;
            }
            let name = file
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            let index = items.len() as u64;
            items.push(LabeledPatch {
                image: crop_to(&img, PATCH_SIZE, crop, index),
                label,
                item_id: format!("{dir_name}/{name}"),
            });
        }
    }
    let dataset = root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("labeled")
        .to_string();
    let set = LabeledPatchSet::new(
        items,
        Provenance {
            dataset,
            split: "all".into(),
        },
    )?;
    Ok((set, report))
}

pub(crate) fn crop_to(img: &RgbImage, size: u32, policy: CropPolicy, index: u64) -> RgbImage {
    let (w, h) = img.dimensions();
    if (w, h) == (size, size) {
        return img.clone();
    }
    let (x, y) = match policy {
        CropPolicy::Center => (center_crop_offset(w, size), center_crop_offset(h, size)),
        CropPolicy::Random { seed } => {
            let mut rng = seed::stream_rng(seed, index);
            (
                rng.random_range(0..=w - size),
                rng.random_range(0..=h - size),
            )
        }
    };
    imageops::crop_imm(img, x, y, size, size).to_image()
}
