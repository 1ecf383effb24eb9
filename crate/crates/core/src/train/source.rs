use std::collections::HashMap;

use image::RgbImage;

use crate::corpus::{materialize_patch, LabeledPatchSet, SlideCorpus, SlideRecord, SlideStore};
use crate::error::{Error, Result};
use crate::sampler::TripletRef;

/// Resolves triplet references to patch pixels.
pub trait PatchSource: Sync {
    fn fetch(&self, r: &TripletRef) -> Result<RgbImage>;
}

/// Item ids of a labeled set.
pub struct LabeledSource<'a> {
    set: &'a LabeledPatchSet,
    index: HashMap<&'a str, usize>,
}

impl<'a> LabeledSource<'a> {
    pub fn new(set: &'a LabeledPatchSet) -> Self {
        LabeledSource {
            set,
            index: set.id_index(),
        }
    }
}

impl PatchSource for LabeledSource<'_> {
    fn fetch(&self, r: &TripletRef) -> Result<RgbImage> {
        match r {
            TripletRef::Item(id) => self
                .index
                .get(id.as_str())
                .map(|&i| self.set.items()[i].image.clone())
                .ok_or_else(|| Error::Lookup(format!("item {id}"))),
            TripletRef::Tile(t) => Err(Error::Lookup(format!(
                "tile on {} in a labeled set",
                t.slide_id
            ))),
        }
    }
}

/// Tiles of a slide corpus, read through a slide store.
pub struct SlideSource<'a> {
    slides: HashMap<&'a str, &'a SlideRecord>,
    store: &'a dyn SlideStore,
}

impl<'a> SlideSource<'a> {
    pub fn new(corpus: &'a SlideCorpus, store: &'a dyn SlideStore) -> Self {
        SlideSource {
            slides: corpus
                .slides
                .iter()
                .map(|s| (s.slide_id.as_str(), s))
                .collect(),
            store,
        }
    }
}

impl PatchSource for SlideSource<'_> {
    fn fetch(&self, r: &TripletRef) -> Result<RgbImage> {
        match r {
            TripletRef::Tile(t) => {
                let slide = self
                    .slides
                    .get(t.slide_id.as_str())
                    .ok_or_else(|| Error::Lookup(format!("slide {}", t.slide_id)))?;
                materialize_patch(t, slide, self.store)
            }
            TripletRef::Item(id) => Err(Error::Lookup(format!("item {id} in a slide corpus"))),
        }
    }
}
