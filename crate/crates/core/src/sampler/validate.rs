use std::collections::HashMap;

use super::{DistantType, SamplerConfig, Triplet, TripletRef};
use crate::corpus::{LabeledPatchSet, SlideRecord, TileRef, TissueClass};
use crate::error::{Error, Result};

/// What the validator knows about referenced slides and items. Built from
/// metadata only; it shares no state with the samplers.
#[derive(Debug, Clone, Default)]
pub struct TripletMetadata {
    slides: HashMap<String, SlideRecord>,
    labels: HashMap<String, TissueClass>,
}

impl TripletMetadata {
    pub fn from_slides(slides: &[SlideRecord]) -> Self {
        TripletMetadata {
            slides: slides
                .iter()
                .map(|s| (s.slide_id.clone(), s.clone()))
                .collect(),
            labels: HashMap::new(),
        }
    }

    pub fn from_labels<'a>(items: impl IntoIterator<Item = (&'a str, TissueClass)>) -> Self {
        TripletMetadata {
            slides: HashMap::new(),
            labels: items
                .into_iter()
                .map(|(id, l)| (id.to_string(), l))
                .collect(),
        }
    }

    pub fn from_dataset(dataset: &LabeledPatchSet) -> Self {
        Self::from_labels(
            dataset
                .items()
                .iter()
                .map(|p| (p.item_id.as_str(), p.label)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletCheck {
    pub valid: bool,
    pub violations: Vec<String>,
}

fn euclid(a: &TileRef, b: &TileRef) -> f64 {
    let dx = f64::from(a.center_x) - f64::from(b.center_x);
    let dy = f64::from(a.center_y) - f64::from(b.center_y);
    (dx * dx + dy * dy).sqrt()
}

/// Checks every constraint implied by the triplet's distant type. Dangling
/// references are a lookup error rather than a violation.
pub fn validate_triplet(
    t: &Triplet,
    meta: &TripletMetadata,
    config: &SamplerConfig,
) -> Result<TripletCheck> {
    let mut violations = Vec::new();
    if t.anchor.same_as(&t.neighbor) {
        violations.push("anchor and neighbor are the same reference".to_string());
    }
    if t.anchor.same_as(&t.distant) {
        violations.push("anchor and distant are the same reference".to_string());
    }
    if t.neighbor.same_as(&t.distant) {
        violations.push("neighbor and distant are the same reference".to_string());
    }
    if t.distant_type.is_spatial() {
        check_spatial(t, meta, config, &mut violations)?;
    } else {
        check_labeled(t, meta, &mut violations)?;
    }
    Ok(TripletCheck {
        valid: violations.is_empty(),
        violations,
    })
}

fn tile_of<'a>(
    r: &'a TripletRef,
    role: &str,
    meta: &'a TripletMetadata,
) -> Result<std::result::Result<(&'a TileRef, &'a SlideRecord), String>> {
    let Some(tile) = r.as_tile() else {
        return Ok(Err(format!("{role} is an item id, expected a tile")));
    };
    let slide = meta
        .slides
        .get(&tile.slide_id)
        .ok_or_else(|| Error::Lookup(format!("slide {} ({role})", tile.slide_id)))?;
    if !tile.fits(slide) {
        return Ok(Err(format!(
            "{role} footprint falls outside slide {}",
            slide.slide_id
        )));
    }
    Ok(Ok((tile, slide)))
}

fn check_spatial(
    t: &Triplet,
    meta: &TripletMetadata,
    config: &SamplerConfig,
    violations: &mut Vec<String>,
) -> Result<()> {
    let anchor = tile_of(&t.anchor, "anchor", meta)?;
    let neighbor = tile_of(&t.neighbor, "neighbor", meta)?;
    let distant = tile_of(&t.distant, "distant", meta)?;
    let (anchor, neighbor, distant) = match (anchor, neighbor, distant) {
        (Ok(a), Ok(n), Ok(d)) => (a, n, d),
        (a, n, d) => {
            violations.extend([a.err(), n.err(), d.err()].into_iter().flatten());
            return Ok(());
        }
    };
    let ((a, a_slide), (n, _), (d, d_slide)) = (anchor, neighbor, distant);
    if n.slide_id != a.slide_id {
        violations.push("neighbor is on a different slide".into());
    } else if euclid(a, n) > config.neighbor_max_dist {
        violations.push(format!(
            "neighbor distance {:.1} exceeds {}",
            euclid(a, n),
            config.neighbor_max_dist
        ));
    }
    let same_slide = d.slide_id == a.slide_id;
    match t.distant_type {
        DistantType::SameSlideRemote => {
            if !same_slide {
                violations.push("distant is on another slide".into());
            } else if euclid(a, d) < config.distant_min_dist {
                violations.push(format!(
                    "distant distance {:.1} below {}",
                    euclid(a, d),
                    config.distant_min_dist
                ));
            }
        }
        DistantType::SameSubtypeOtherSlide => {
            if same_slide {
                violations.push("same slide".into());
            }
            if !a_slide.subtype.is_labeled() || d_slide.subtype != a_slide.subtype {
                violations.push(format!(
                    "distant subtype {} differs from anchor subtype {}",
                    d_slide.subtype, a_slide.subtype
                ));
            }
        }
        DistantType::SameOrganOtherSubtype => {
            if d_slide.organ_site != a_slide.organ_site {
                violations.push("distant organ differs from anchor organ".into());
            }
            if !a_slide.subtype.is_labeled() || !d_slide.subtype.is_labeled() {
                violations.push("subtype unknown".into());
            } else if d_slide.subtype == a_slide.subtype {
                violations.push("distant shares the anchor subtype".into());
            }
        }
        DistantType::OtherOrgan => {
            if d_slide.organ_site == a_slide.organ_site {
                violations.push("distant shares the anchor organ".into());
            }
        }
        DistantType::DifferentClassLabel => unreachable!("handled by check_labeled"),
    }
    Ok(())
}

fn check_labeled(t: &Triplet, meta: &TripletMetadata, violations: &mut Vec<String>) -> Result<()> {
    let mut labels = Vec::with_capacity(3);
    for (r, role) in [
        (&t.anchor, "anchor"),
        (&t.neighbor, "neighbor"),
        (&t.distant, "distant"),
    ] {
        match r.as_item() {
            Some(id) => labels.push(
                *meta
                    .labels
                    .get(id)
                    .ok_or_else(|| Error::Lookup(format!("item {id} ({role})")))?,
            ),
            None => violations.push(format!("{role} is a tile, expected an item id")),
        }
    }
    if let [a, n, d] = labels[..] {
        if n != a {
            violations.push(format!("neighbor class {n} differs from anchor class {a}"));
        }
        if d == a {
            violations.push(format!("distant shares the anchor class {a}"));
        }
    }
    Ok(())
}
