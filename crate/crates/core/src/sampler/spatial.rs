use std::collections::HashMap;

use rand::Rng as _;

use super::{DistantType, SamplerConfig, Triplet, TripletRef};
use crate::corpus::{SlideCorpus, SlideRecord, TileRef};
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Rejection sampler over a slide corpus.
///
/// Neighbor proposals are drawn uniformly from the tiles in the 3×3 block of
/// buckets around the anchor. Buckets are `neighbor_max_dist` wide, so the
/// block covers the whole neighbor disk and rejection leaves the accepted
/// neighbor uniform over the disk.
pub struct SpatialSampler<'a> {
    corpus: &'a SlideCorpus,
    config: &'a SamplerConfig,
    buckets: Vec<HashMap<(i64, i64), Vec<usize>>>,
}

impl<'a> SpatialSampler<'a> {
    pub fn new(corpus: &'a SlideCorpus, config: &'a SamplerConfig) -> Result<Self> {
        config.validate()?;
        let width = config.neighbor_max_dist;
        let buckets = corpus
            .tiles
            .iter()
            .map(|tiles| {
                let mut map: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
                for (i, t) in tiles.iter().enumerate() {
                    map.entry(bucket_of(t, width)).or_default().push(i);
                }
                map
            })
            .collect();
        Ok(SpatialSampler {
            corpus,
            config,
            buckets,
        })
    }

    pub fn corpus(&self) -> &SlideCorpus {
        self.corpus
    }

    fn exhausted(&self, what: &str, dtype: DistantType) -> Error {
        Error::Exhaustion {
            kind: format!("{dtype} ({what})"),
            attempts: self.config.max_rejections,
            progress: String::new(),
        }
    }

    fn sample_neighbor(&self, slide: usize, anchor: &TileRef, rng: &mut Rng) -> Option<TileRef> {
        let (bx, by) = bucket_of(anchor, self.config.neighbor_max_dist);
        let mut pool: Vec<usize> = Vec::new();
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(ids) = self.buckets[slide].get(&(bx + dx, by + dy)) {
                    pool.extend_from_slice(ids);
                }
            }
        }
        if pool.is_empty() {
            return None;
        }
        let tiles = &self.corpus.tiles[slide];
        for _ in 0..self.config.max_rejections {
            let cand = &tiles[pool[rng.random_range(0..pool.len())]];
            if !cand.same_location(anchor) && anchor.distance(cand) <= self.config.neighbor_max_dist
            {
                return Some(cand.clone());
            }
        }
        None
    }

    fn distant_slide_ok(
        &self,
        anchor: &SlideRecord,
        cand: usize,
        anchor_slide: usize,
        dtype: DistantType,
    ) -> bool {
        let other = &self.corpus.slides[cand];
        if self.corpus.tiles[cand].is_empty() {
            return false;
        }
        match dtype {
            DistantType::SameSubtypeOtherSlide => {
                cand != anchor_slide
                    && anchor.subtype.is_labeled()
                    && other.subtype == anchor.subtype
            }
            DistantType::SameOrganOtherSubtype => {
                anchor.subtype.is_labeled()
                    && other.subtype.is_labeled()
                    && other.organ_site == anchor.organ_site
                    && other.subtype != anchor.subtype
            }
            DistantType::OtherOrgan => other.organ_site != anchor.organ_site,
            DistantType::SameSlideRemote | DistantType::DifferentClassLabel => false,
        }
    }

    fn sample_distant(
        &self,
        slide: usize,
        anchor: &TileRef,
        dtype: DistantType,
        rng: &mut Rng,
    ) -> Option<TileRef> {
        match dtype {
            DistantType::SameSlideRemote => {
                let tiles = &self.corpus.tiles[slide];
                (0..self.config.max_rejections).find_map(|_| {
                    let cand = &tiles[rng.random_range(0..tiles.len())];
                    (anchor.distance(cand) >= self.config.distant_min_dist).then(|| cand.clone())
                })
            }
            DistantType::DifferentClassLabel => None,
            _ => {
                let anchor_slide = &self.corpus.slides[slide];
                let n = self.corpus.slides.len();
                (0..self.config.max_rejections).find_map(|_| {
                    let cand = rng.random_range(0..n);
                    self.distant_slide_ok(anchor_slide, cand, slide, dtype)
                        .then(|| {
                            let tiles = &self.corpus.tiles[cand];
                            tiles[rng.random_range(0..tiles.len())].clone()
                        })
                })
            }
        }
    }

    /// Draws a neighbor and a distant tile for `anchor`.
    pub fn sample(&self, anchor: &TileRef, dtype: DistantType, rng: &mut Rng) -> Result<Triplet> {
        if !dtype.is_spatial() {
            return Err(Error::Contract(format!(
                "{dtype} triplets come from labeled sets, not slides"
            )));
        }
        let slide = self
            .corpus
            .slide_index(&anchor.slide_id)
            .ok_or_else(|| Error::Lookup(format!("slide {}", anchor.slide_id)))?;
        let neighbor = self
            .sample_neighbor(slide, anchor, rng)
            .ok_or_else(|| self.exhausted("neighbor", dtype))?;
        let distant = self
            .sample_distant(slide, anchor, dtype, rng)
            .ok_or_else(|| self.exhausted("distant", dtype))?;
        Ok(Triplet {
            anchor: TripletRef::Tile(anchor.clone()),
            neighbor: TripletRef::Tile(neighbor),
            distant: TripletRef::Tile(distant),
            distant_type: dtype,
        })
    }

    /// Slides that can host an anchor for `dtype`, judged from metadata only.
    pub(crate) fn eligible_anchor_slides(&self, dtype: DistantType) -> Vec<usize> {
        (0..self.corpus.slides.len())
            .filter(|&s| {
                let tiles = &self.corpus.tiles[s];
                if tiles.len() < 2 {
                    return false;
                }
                match dtype {
                    DistantType::SameSlideRemote => {
                        extent_diagonal(tiles) >= self.config.distant_min_dist
                    }
                    _ => {
                        let anchor = &self.corpus.slides[s];
                        (0..self.corpus.slides.len())
                            .any(|c| self.distant_slide_ok(anchor, c, s, dtype))
                    }
                }
            })
            .collect()
    }
}

fn bucket_of(t: &TileRef, width: f64) -> (i64, i64) {
    (
        (f64::from(t.center_x) / width).floor() as i64,
        (f64::from(t.center_y) / width).floor() as i64,
    )
}

fn extent_diagonal(tiles: &[TileRef]) -> f64 {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for t in tiles {
        x0 = x0.min(t.center_x);
        y0 = y0.min(t.center_y);
        x1 = x1.max(t.center_x);
        y1 = y1.max(t.center_y);
    }
    f64::from(x1.saturating_sub(x0)).hypot(f64::from(y1.saturating_sub(y0)))
}

/// One-shot form of [`SpatialSampler::sample`].
pub fn sample_spatial_triplet(
    anchor: &TileRef,
    corpus: &SlideCorpus,
    dtype: DistantType,
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Triplet> {
    SpatialSampler::new(corpus, config)?.sample(anchor, dtype, rng)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{grid_tile_slide, OrganSite, Subtype};
    use crate::seed;

    pub(crate) fn slide(id: &str, subtype: Subtype, size: u32) -> SlideRecord {
        SlideRecord {
            slide_id: id.into(),
            organ_site: subtype.organ().unwrap_or(OrganSite::Other),
            subtype,
            base_width: size,
            base_height: size,
            base_magnification: 20.0,
            path: format!("{id}.png"),
        }
    }

    /// Two 2048² slides per labeled subtype, fully tiled at stride 128.
    pub(crate) fn nine_subtype_corpus() -> SlideCorpus {
        let slides: Vec<_> = Subtype::LABELED
            .iter()
            .flat_map(|&s| {
                [
                    slide(&format!("slide-{s}"), s, 2048),
                    slide(&format!("slide-{s}-b"), s, 2048),
                ]
            })
            .collect();
        let tiles = slides
            .iter()
            .map(|s| grid_tile_slide(s, 128, 20.0, 128).unwrap())
            .collect();
        SlideCorpus::new(slides, tiles).unwrap()
    }

    fn tile(id: &str, x: u32, y: u32) -> TileRef {
        TileRef {
            slide_id: id.into(),
            center_x: x,
            center_y: y,
            patch_size: 128,
            magnification: 20.0,
        }
    }

    #[test]
    fn neighbor_radius_arithmetic() {
        let a = tile("s", 1024, 1024);
        assert!(a.distance(&tile("s", 1152, 1024)) <= 256.0);
        assert!(a.distance(&tile("s", 1100, 1024)) < 1024.0);
    }

    #[test]
    fn type3_distant_stays_in_organ_with_other_subtype() {
        let corpus = nine_subtype_corpus();
        let config = SamplerConfig::for_footprint(128, 0);
        let sampler = SpatialSampler::new(&corpus, &config).unwrap();
        let anchor = corpus.tiles[corpus.slide_index("slide-STAD").unwrap()][100].clone();
        // Exhaustive oracle over slide pairs.
        let allowed: Vec<Subtype> = corpus
            .slides
            .iter()
            .filter(|s| s.organ_site == OrganSite::Gastrointestinal && s.subtype != Subtype::Stad)
            .map(|s| s.subtype)
            .collect();
        let mut allowed_set = allowed.clone();
        allowed_set.dedup();
        assert_eq!(allowed_set, [Subtype::Esca, Subtype::Coad, Subtype::Read]);
        let mut rng = seed::rng(5);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let t = sampler
                .sample(&anchor, DistantType::SameOrganOtherSubtype, &mut rng)
                .unwrap();
            let d = t.distant.as_tile().unwrap();
            let subtype = corpus.slide(&d.slide_id).unwrap().subtype;
            assert!(allowed.contains(&subtype), "{subtype}");
            seen.insert(subtype);
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn other_organ_needs_two_organs() {
        let slides = vec![
            slide("a", Subtype::Luad, 1024),
            slide("b", Subtype::Lusc, 1024),
        ];
        let tiles = slides
            .iter()
            .map(|s| grid_tile_slide(s, 128, 20.0, 128).unwrap())
            .collect();
        let corpus = SlideCorpus::new(slides, tiles).unwrap();
        let config = SamplerConfig::for_footprint(128, 0);
        let anchor = corpus.tiles[0][10].clone();
        let err = sample_spatial_triplet(
            &anchor,
            &corpus,
            DistantType::OtherOrgan,
            &config,
            &mut seed::rng(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Exhaustion { ref kind, .. } if kind.contains("other_organ")));
    }

    #[test]
    fn neighbor_and_remote_constraints_hold() {
        let corpus = nine_subtype_corpus();
        let config = SamplerConfig::for_footprint(128, 0);
        let sampler = SpatialSampler::new(&corpus, &config).unwrap();
        let mut rng = seed::rng(11);
        for k in 0..100 {
            let anchor = &corpus.tiles[k % 18][(k * 37) % 256];
            let t = sampler
                .sample(anchor, DistantType::SameSlideRemote, &mut rng)
                .unwrap();
            let n = t.neighbor.as_tile().unwrap();
            let d = t.distant.as_tile().unwrap();
            assert_eq!(n.slide_id, anchor.slide_id);
            assert!(anchor.distance(n) <= 256.0 && !anchor.same_location(n));
            assert_eq!(d.slide_id, anchor.slide_id);
            assert!(anchor.distance(d) >= 1024.0);
        }
    }
}
