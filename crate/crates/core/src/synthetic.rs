//! Procedural fixtures: oriented-grating patch sets and tiled synthetic
//! slides. Used by tests, smoke runs and the demo pipeline.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::corpus::{
    InMemoryStore, LabeledPatch, LabeledPatchSet, OrganSite, Provenance, SlideRecord, Subtype,
    TissueClass, PATCH_SIZE,
};
use crate::embedding::EmbeddingMatrix;
use crate::seed::{self, Rng};

/// Texture parameters for one grating class.
#[derive(Debug, Clone, Copy)]
pub struct GratingStyle {
    /// Dominant orientation in radians.
    pub orientation: f64,
    /// RGB tint applied to the bright phase.
    pub tint: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct GratingNoise {
    /// Uniform orientation jitter, ± this many radians.
    pub jitter: f64,
    /// Pixel noise standard deviation on the [0, 1] scale.
    pub pixel_sigma: f64,
    /// Spatial frequency range in cycles per pixel.
    pub frequency: (f64, f64),
}

impl Default for GratingNoise {
    fn default() -> Self {
        GratingNoise {
            jitter: 10f64.to_radians(),
            pixel_sigma: 0.15,
            frequency: (0.05, 0.12),
        }
    }
}

/// Styles for `k` classes: orientations evenly spread over 180°, shared tint
/// so only the texture separates the classes.
pub fn grating_styles(k: usize) -> Vec<GratingStyle> {
    (0..k)
        .map(|c| GratingStyle {
            orientation: PI * c as f64 / k as f64,
            tint: [0.85, 0.45, 0.7],
        })
        .collect()
}

/// One `size`×`size` grating patch with random phase and frequency.
pub fn grating_patch(
    size: u32,
    style: GratingStyle,
    noise: &GratingNoise,
    rng: &mut Rng,
) -> RgbImage {
    let theta = style.orientation + rng.random_range(-noise.jitter..=noise.jitter);
    let freq = rng.random_range(noise.frequency.0..=noise.frequency.1);
    let phase = rng.random_range(0.0..2.0 * PI);
    let pixel = Normal::new(0.0, noise.pixel_sigma).expect("finite sigma");
    let (c, s) = (theta.cos(), theta.sin());
    RgbImage::from_fn(size, size, |x, y| {
        let u = f64::from(x) * c + f64::from(y) * s;
        let v = 0.5 + 0.3 * (2.0 * PI * freq * u + phase).sin();
        let mut px = [0u8; 3];
        for (ch, p) in px.iter_mut().enumerate() {
            let value = v * style.tint[ch] + 0.1 + pixel.sample(rng);
            *p = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(px)
    })
}

/// `per_class` grating patches for each of the first `classes` tissue
/// classes, grouped by class. Item ids are `"{class}/{k}"`.
pub fn grating_dataset(
    classes: usize,
    per_class: usize,
    noise: &GratingNoise,
    seed_value: u64,
) -> LabeledPatchSet {
    assert!(
        (1..=TissueClass::ALL.len()).contains(&classes),
        "1..=8 classes"
    );
    let styles = grating_styles(classes);
    let mut items = Vec::with_capacity(classes * per_class);
    for (c, &style) in styles.iter().enumerate() {
        let label = TissueClass::ALL[c];
        for k in 0..per_class {
            let mut rng = seed::stream_rng(seed_value, (c * per_class + k) as u64);
            items.push(LabeledPatch {
                image: grating_patch(PATCH_SIZE, style, noise, &mut rng),
                label,
                item_id: format!("{label}/{k:04}"),
            });
        }
    }
    LabeledPatchSet::new(
        items,
        Provenance {
            dataset: "synthetic-gratings".into(),
            split: "all".into(),
        },
    )
    .expect("generated ids are unique")
}

/// Eight-class grating set, `per_class` items each.
pub fn tissue_patch_set(per_class: usize, seed_value: u64) -> LabeledPatchSet {
    grating_dataset(
        TissueClass::ALL.len(),
        per_class,
        &GratingNoise::default(),
        seed_value,
    )
}

/// A slide image whose texture orientation is set by its subtype and drifts
/// slowly across the slide, so nearby tiles look alike and far ones less so.
pub fn synthetic_slide_image(size: u32, subtype: Subtype, seed_value: u64) -> RgbImage {
    let mut rng = seed::rng(seed_value);
    let base = PI * subtype_rank(subtype) as f64 / Subtype::LABELED.len() as f64;
    let drift = rng.random_range(0.5..1.5);
    let freq = rng.random_range(0.06..0.1);
    let pixel = Normal::new(0.0, 0.08).expect("finite sigma");
    let organ_tint = match subtype.organ() {
        Some(OrganSite::Prostate) => [0.85, 0.5, 0.75],
        Some(OrganSite::Gastrointestinal) => [0.75, 0.4, 0.8],
        Some(OrganSite::Lung) => [0.9, 0.55, 0.6],
        _ => [0.7, 0.7, 0.7],
    };
    let n = f64::from(size);
    RgbImage::from_fn(size, size, |x, y| {
        let (fx, fy) = (f64::from(x) / n, f64::from(y) / n);
        let theta = base + drift * (fx - 0.5) * 0.6;
        let u = f64::from(x) * theta.cos() + f64::from(y) * theta.sin();
        let contrast = 0.2 + 0.15 * (PI * fy).sin();
        let v = 0.5 + contrast * (2.0 * PI * freq * u).sin();
        let mut px = [0u8; 3];
        for (ch, p) in px.iter_mut().enumerate() {
            let value = v * organ_tint[ch] + 0.1 + pixel.sample(&mut rng);
            *p = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(px)
    })
}

fn subtype_rank(s: Subtype) -> usize {
    Subtype::LABELED.iter().position(|&l| l == s).unwrap_or(0)
}

/// `per_subtype` square slides of `size` pixels at 20× for each labeled
/// subtype, with their pixels held in memory.
pub fn synthetic_slides(
    per_subtype: usize,
    size: u32,
    seed_value: u64,
) -> (Vec<SlideRecord>, InMemoryStore) {
    let mut slides = Vec::new();
    let mut store = InMemoryStore::new();
    for (r, &subtype) in Subtype::LABELED.iter().enumerate() {
        for k in 0..per_subtype {
            let slide_id = format!("{}-{k:02}", subtype.as_str().to_lowercase());
            let image = synthetic_slide_image(size, subtype, seed_value ^ ((r * 1000 + k) as u64));
            slides.push(SlideRecord {
                slide_id: slide_id.clone(),
                organ_site: subtype.organ().unwrap_or(OrganSite::Other),
                subtype,
                base_width: size,
                base_height: size,
                base_magnification: 20.0,
                path: format!("{slide_id}.png"),
            });
            store.insert(slide_id, image);
        }
    }
    (slides, store)
}

/// Isotropic unit-variance Gaussian clusters whose centres sit pairwise
/// `separation` apart (scaled one-hot directions, so `classes ≤ dim`).
/// Labels follow `TissueClass::ALL`; classes alternate in row order.
pub fn gaussian_clusters(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed_value: u64,
) -> EmbeddingMatrix {
    assert!(classes <= dim && classes <= TissueClass::ALL.len());
    let mut rng = seed::rng(seed_value);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let offset = separation / 2f64.sqrt();
    let n = classes * per_class;
    let mut values = ndarray::Array2::<f32>::zeros((n, dim));
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for d in 0..dim {
            let centre = if d == c { offset } else { 0.0 };
            values[[i, d]] = (centre + noise.sample(&mut rng)) as f32;
        }
        ids.push(format!("cluster-{i:05}"));
        labels.push(TissueClass::ALL[c]);
    }
    EmbeddingMatrix::new(values, ids, labels).expect("aligned by construction")
}
