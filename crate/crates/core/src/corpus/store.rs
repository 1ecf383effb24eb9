use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use image::{imageops, Rgb, RgbImage};

use super::{SlideRecord, TileRef};
use crate::error::{Error, Result};

/// Read access to base-level slide pixels. Implementations must be usable
/// from several workers at once.
pub trait SlideStore: Send + Sync {
    fn read_region(
        &self,
        slide: &SlideRecord,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    ) -> Result<RgbImage>;
}

fn region_error(slide: &SlideRecord, x: u32, y: u32, message: impl Into<String>) -> Error {
    Error::SlideRead {
        slide_id: slide.slide_id.clone(),
        x: i64::from(x),
        y: i64::from(y),
        message: message.into(),
    }
}

fn crop_checked(
    img: &RgbImage,
    slide: &SlideRecord,
    x: u32,
    y: u32,
    width: u32,
    height: u32,
) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    if u64::from(x) + u64::from(width) > u64::from(w)
        || u64::from(y) + u64::from(height) > u64::from(h)
    {
        return Err(region_error(
            slide,
            x,
            y,
            format!("region {width}x{height} outside {w}x{h} image"),
        ));
    }
    Ok(imageops::crop_imm(img, x, y, width, height).to_image())
}

/// Slides held fully in memory, keyed by slide id.
#[derive(Default)]
pub struct InMemoryStore {
    images: HashMap<String, RgbImage>,
}

impl InMemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, slide_id: impl Into<String>, image: RgbImage) {
        self.images.insert(slide_id.into(), image);
    }
}

impl SlideStore for InMemoryStore {
    fn read_region(
        &self,
        slide: &SlideRecord,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    ) -> Result<RgbImage> {
        let img = self
            .images
            .get(&slide.slide_id)
            .ok_or_else(|| region_error(slide, x, y, "slide not loaded"))?;
        crop_checked(img, slide, x, y, width, height)
    }
}

/// Slides stored as ordinary raster files (the base level only), resolved
/// relative to `root`. Decoded images are cached.
pub struct ImageFileStore {
    root: PathBuf,
    cache: Mutex<HashMap<String, Arc<RgbImage>>>,
}

impl ImageFileStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ImageFileStore {
            root: root.into(),
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn load(&self, slide: &SlideRecord) -> Result<Arc<RgbImage>> {
        if let Some(img) = self.cache.lock().expect("cache poisoned").get(&slide.path) {
            return Ok(Arc::clone(img));
        }
        let path = self.root.join(&slide.path);
        let img = image::open(&path)
            .map_err(|e| region_error(slide, 0, 0, format!("{}: {e}", path.display())))?
            .to_rgb8();
        if img.dimensions() != (slide.base_width, slide.base_height) {
            return Err(region_error(
                slide,
                0,
                0,
                format!(
                    "file is {:?} but manifest says {}x{}",
                    img.dimensions(),
                    slide.base_width,
                    slide.base_height
                ),
            ));
        }
        let img = Arc::new(img);
        self.cache
            .lock()
            .expect("cache poisoned")
            .insert(slide.path.clone(), Arc::clone(&img));
        Ok(img)
    }
}

impl SlideStore for ImageFileStore {
    fn read_region(
        &self,
        slide: &SlideRecord,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    ) -> Result<RgbImage> {
        let img = self.load(slide)?;
        crop_checked(&img, slide, x, y, width, height)
    }
}

/// Procedural slides: pixel values come from a function of
/// `(slide_id, x, y)` in base coordinates.
pub struct FnSlideStore<F> {
    pixel: F,
}

impl<F> FnSlideStore<F>
where
    F: Fn(&str, u32, u32) -> [u8; 3] + Send + Sync,
{
    pub fn new(pixel: F) -> Self {
        FnSlideStore { pixel }
    }
}

impl<F> SlideStore for FnSlideStore<F>
where
    F: Fn(&str, u32, u32) -> [u8; 3] + Send + Sync,
{
    fn read_region(
        &self,
        slide: &SlideRecord,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    ) -> Result<RgbImage> {
        if u64::from(x) + u64::from(width) > u64::from(slide.base_width)
            || u64::from(y) + u64::from(height) > u64::from(slide.base_height)
        {
            return Err(region_error(slide, x, y, "region outside slide"));
        }
        Ok(RgbImage::from_fn(width, height, |i, j| {
            Rgb((self.pixel)(&slide.slide_id, x + i, y + j))
        }))
    }
}

/// Block-mean downsampling by an integer factor; rounds half up.
fn box_downsample(img: &RgbImage, factor: u32) -> RgbImage {
    let (w, h) = (img.width() / factor, img.height() / factor);
    let n = factor * factor;
    RgbImage::from_fn(w, h, |i, j| {
        let mut acc = [0u32; 3];
        for dy in 0..factor {
            for dx in 0..factor {
                let p = img.get_pixel(i * factor + dx, j * factor + dy);
                for c in 0..3 {
                    acc[c] += u32::from(p[c]);
                }
            }
        }
        Rgb(acc.map(|s| ((s + n / 2) / n) as u8))
    })
}

/// Reads a tile's footprint and resamples it to `patch_size` pixels square.
pub fn materialize_patch(
    tile: &TileRef,
    slide: &SlideRecord,
    store: &dyn SlideStore,
) -> Result<RgbImage> {
    if !tile.fits(slide) {
        return Err(Error::Contract(format!(
            "tile ({}, {}) footprint does not fit slide {}",
            tile.center_x, tile.center_y, slide.slide_id
        )));
    }
    let side = tile.footprint(slide);
    let (x0, y0) = tile.origin(slide);
    let region = store.read_region(slide, x0 as u32, y0 as u32, side, side)?;
    if region.dimensions() != (side, side) {
        return Err(region_error(
            slide,
            x0 as u32,
            y0 as u32,
            format!("store returned {:?}", region.dimensions()),
        ));
    }
    let patch = tile.patch_size;
    Ok(if side == patch {
        region
    } else if side % patch == 0 {
        box_downsample(&region, side / patch)
    } else {
        imageops::resize(&region, patch, patch, imageops::FilterType::Triangle)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{OrganSite, Subtype};

    fn slide(mag: f64, size: u32) -> SlideRecord {
        SlideRecord {
            slide_id: "grad".into(),
            organ_site: OrganSite::Lung,
            subtype: Subtype::Luad,
            base_width: size,
            base_height: size,
            base_magnification: mag,
            path: String::new(),
        }
    }

    fn gradient(_: &str, x: u32, y: u32) -> [u8; 3] {
        [(x % 256) as u8, (y % 256) as u8, ((x + 3 * y) % 251) as u8]
    }

    fn tile(cx: u32, cy: u32) -> TileRef {
        TileRef {
            slide_id: "grad".into(),
            center_x: cx,
            center_y: cy,
            patch_size: 128,
            magnification: 20.0,
        }
    }

    #[test]
    fn identity_scale_equals_raw_region() {
        let s = slide(20.0, 1024);
        let store = FnSlideStore::new(gradient);
        let patch = materialize_patch(&tile(512, 512), &s, &store).unwrap();
        assert_eq!(patch.dimensions(), (128, 128));
        for (i, j, p) in patch.enumerate_pixels() {
            assert_eq!(p.0, gradient("", 448 + i, 448 + j));
        }
    }

    #[test]
    fn half_magnification_matches_crop_oracle() {
        let s = slide(40.0, 2048);
        let store = FnSlideStore::new(gradient);
        let t = tile(700, 900);
        assert_eq!(t.footprint(&s), 256);
        let patch = materialize_patch(&t, &s, &store).unwrap();
        assert_eq!(patch.dimensions(), (128, 128));
        // Independent oracle: average each 2x2 base block directly from the
        // pixel function.
        let (x0, y0) = (700 - 128, 900 - 128);
        for (i, j, p) in patch.enumerate_pixels() {
            for c in 0..3 {
                let mut sum = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        sum += u32::from(gradient("", x0 + 2 * i + dx, y0 + 2 * j + dy)[c]);
                    }
                }
                assert_eq!(
                    u32::from(p[c]),
                    (sum + 2) / 4,
                    "pixel ({i},{j}) channel {c}"
                );
            }
        }
    }

    #[test]
    fn missing_slide_reports_coordinates() {
        let s = slide(20.0, 1024);
        let store = InMemoryStore::new();
        match materialize_patch(&tile(512, 512), &s, &store) {
            Err(Error::SlideRead { slide_id, x, y, .. }) => {
                assert_eq!(slide_id, "grad");
                assert_eq!((x, y), (448, 448));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_store_reads_png() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(256, 256, |x, y| Rgb(gradient("", x, y)));
        img.save(dir.path().join("g.png")).unwrap();
        let mut s = slide(20.0, 256);
        s.path = "g.png".into();
        let store = ImageFileStore::new(dir.path());
        let patch = materialize_patch(&tile(128, 128), &s, &store).unwrap();
        assert_eq!(patch.get_pixel(0, 0).0, gradient("", 64, 64));
    }
}
