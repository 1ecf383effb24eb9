use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{footprint_side, SlideRecord, TileRef};
use crate::error::{Error, Result};

/// Lays a regular grid of tiles over a slide.
///
/// `patch_size` and `stride` are in target-magnification pixels. Tiles are
/// returned row-major; a tile is emitted only where its whole footprint fits
/// on the base level.
pub fn grid_tile_slide(
    slide: &SlideRecord,
    patch_size: u32,
    magnification: f64,
    stride: u32,
) -> Result<Vec<TileRef>> {
    if patch_size == 0 || stride == 0 {
        return Err(Error::Contract(format!(
            "patch size ({patch_size}) and stride ({stride}) must be positive"
        )));
    }
    if !(magnification.is_finite() && magnification > 0.0) {
        return Err(Error::Contract(format!(
            "invalid magnification {magnification}"
        )));
    }
    if magnification > slide.base_magnification {
        return Err(Error::UnsupportedResolution {
            requested: magnification,
            base: slide.base_magnification,
        });
    }
    let scale = slide.scale_to(magnification);
    let side = footprint_side(patch_size, scale);
    let step = footprint_side(stride, scale).max(1);
    let per_axis = |extent: u32| {
        if extent < side {
            0
        } else {
            (extent - side) / step + 1
        }
    };
    let (nx, ny) = (per_axis(slide.base_width), per_axis(slide.base_height));
    let half = side / 2;
    let mut tiles = Vec::with_capacity((nx * ny) as usize);
    for row in 0..ny {
        for col in 0..nx {
            tiles.push(TileRef {
                slide_id: slide.slide_id.clone(),
                center_x: col * step + half,
                center_y: row * step + half,
                patch_size,
                magnification,
            });
        }
    }
    Ok(tiles)
}

/// Mean HSV saturation in [0, 1].
pub fn mean_saturation(img: &RgbImage) -> f64 {
    let n = img.pixels().len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = img
        .pixels()
        .map(|p| {
            let max = p.0.iter().copied().max().unwrap_or(0);
            let min = p.0.iter().copied().min().unwrap_or(0);
            if max == 0 {
                0.0
            } else {
                f64::from(max - min) / f64::from(max)
            }
        })
        .sum();
    total / n as f64
}

/// Background rejection: glass is nearly unsaturated, tissue is not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueFilter {
    pub enabled: bool,
    pub min_saturation: f64,
}

impl Default for TissueFilter {
    fn default() -> Self {
        TissueFilter {
            enabled: true,
            min_saturation: 0.05,
        }
    }
}

impl TissueFilter {
    pub const DISABLED: TissueFilter = TissueFilter {
        enabled: false,
        min_saturation: 0.0,
    };

    pub fn keep(&self, patch: &RgbImage) -> bool {
        !self.enabled || mean_saturation(patch) > self.min_saturation
    }
}
