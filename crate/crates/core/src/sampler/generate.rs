use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use super::{DistantType, LabeledSampler, SamplerConfig, SpatialSampler, Triplet};
use crate::corpus::SlideCorpus;
use crate::error::{Error, Result};
use crate::seed;

/// Triplets per independent RNG stream. Work is split into chunks of this
/// size regardless of thread count, so the manifest never depends on
/// scheduling.
pub const MANIFEST_CHUNK: usize = 512;

/// Stream ids: high bits select the purpose, then the distant type.
const ANCHOR_ORDER_STREAM: u64 = 1 << 62;

pub enum ManifestSource<'a> {
    Slides(&'a SlideCorpus),
    Labeled(&'a LabeledSampler),
}

/// Round-robin over `pool` in a fresh random order each cycle, so anchors are
/// spread evenly across slides (or items).
struct AnchorOrder<'a> {
    pool: &'a [usize],
    seed: u64,
    dtype: DistantType,
    cycle: Option<usize>,
    perm: Vec<usize>,
}

impl<'a> AnchorOrder<'a> {
    fn new(pool: &'a [usize], seed: u64, dtype: DistantType) -> Self {
        AnchorOrder {
            pool,
            seed,
            dtype,
            cycle: None,
            perm: Vec::new(),
        }
    }

    fn get(&mut self, i: usize) -> usize {
        let n = self.pool.len();
        let cycle = i / n;
        if self.cycle != Some(cycle) {
            let mut rng = seed::stream_rng(
                self.seed,
                ANCHOR_ORDER_STREAM | ((self.dtype.index() as u64) << 40) | cycle as u64,
            );
            self.perm = self.pool.to_vec();
            self.perm.shuffle(&mut rng);
            self.cycle = Some(cycle);
        }
        self.perm[i % n]
    }
}

fn chunk_stream(dtype: DistantType, chunk: usize) -> u64 {
    ((dtype.index() as u64) << 40) | chunk as u64
}

fn exhausted(dtype: DistantType, attempts: usize, done: usize, total: usize) -> Error {
    Error::Exhaustion {
        kind: dtype.to_string(),
        attempts,
        progress: format!(" ({done} of {total} {dtype} triplets generated)"),
    }
}

/// Generates `counts_per_type[t]` triplets for every requested type, in
/// distant-type order. The result is a pure function of the source and the
/// config.
pub fn generate_manifest(
    source: ManifestSource<'_>,
    config: &SamplerConfig,
) -> Result<Vec<Triplet>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.total());
    let spatial = match source {
        ManifestSource::Slides(corpus) => Some(SpatialSampler::new(corpus, config)?),
        ManifestSource::Labeled(_) => None,
    };
    for (&dtype, &count) in &config.counts_per_type {
        if count == 0 {
            continue;
        }
        let triplets = match (&source, &spatial) {
            (ManifestSource::Slides(_), Some(sampler)) => {
                spatial_type(sampler, dtype, count, config)?
            }
            (ManifestSource::Labeled(sampler), _) => labeled_type(sampler, dtype, count, config)?,
            _ => unreachable!("spatial sampler exists for slide sources"),
        };
        out.extend(triplets);
    }
    Ok(out)
}

fn run_chunks<F>(dtype: DistantType, count: usize, chunk_fn: F) -> Result<Vec<Triplet>>
where
    F: Fn(usize, std::ops::Range<usize>) -> std::result::Result<Vec<Triplet>, (usize, Error)>
        + Sync,
{
    let chunks = count.div_ceil(MANIFEST_CHUNK);
    let results: Vec<_> = (0..chunks)
        .into_par_iter()
        .map(|j| {
            let start = j * MANIFEST_CHUNK;
            chunk_fn(j, start..(start + MANIFEST_CHUNK).min(count))
        })
        .collect();
    let mut out = Vec::with_capacity(count);
    for r in results {
        match r {
            Ok(v) => out.extend(v),
            Err((done_in_chunk, e)) => {
                let attempts = match &e {
                    Error::Exhaustion { attempts, .. } => *attempts,
                    _ => return Err(e),
                };
                return Err(exhausted(dtype, attempts, out.len() + done_in_chunk, count));
            }
        }
    }
    Ok(out)
}

fn spatial_type(
    sampler: &SpatialSampler<'_>,
    dtype: DistantType,
    count: usize,
    config: &SamplerConfig,
) -> Result<Vec<Triplet>> {
    if !dtype.is_spatial() {
        return Err(Error::Contract(format!(
            "{dtype} triplets need a labeled set, not a slide corpus"
        )));
    }
    let eligible = sampler.eligible_anchor_slides(dtype);
    if eligible.is_empty() {
        return Err(exhausted(dtype, 0, 0, count));
    }
    let corpus = sampler.corpus();
    run_chunks(dtype, count, |j, range| {
        let mut rng = seed::stream_rng(config.seed, chunk_stream(dtype, j));
        let mut order = AnchorOrder::new(&eligible, config.seed, dtype);
        let mut out = Vec::with_capacity(range.len());
        for i in range {
            let slide = order.get(i);
            let tiles = &corpus.tiles[slide];
            let mut failures = 0;
            loop {
                let anchor = &tiles[rng.random_range(0..tiles.len())];
                match sampler.sample(anchor, dtype, &mut rng) {
                    Ok(t) => {
                        out.push(t);
                        break;
                    }
                    Err(Error::Exhaustion { .. }) => {
                        failures += 1;
                        if failures >= config.max_rejections {
                            let e = Error::Exhaustion {
                                kind: dtype.to_string(),
                                attempts: failures,
                                progress: String::new(),
                            };
                            return Err((out.len(), e));
                        }
                    }
                    Err(e) => return Err((out.len(), e)),
                }
            }
        }
        Ok(out)
    })
}

fn labeled_type(
    sampler: &LabeledSampler,
    dtype: DistantType,
    count: usize,
    config: &SamplerConfig,
) -> Result<Vec<Triplet>> {
    if dtype != DistantType::DifferentClassLabel {
        return Err(Error::Contract(format!(
            "{dtype} triplets need a slide corpus, not a labeled set"
        )));
    }
    let eligible = sampler.eligible_anchors();
    if eligible.is_empty() {
        return Err(exhausted(dtype, 0, 0, count));
    }
    run_chunks(dtype, count, |j, range| {
        let mut rng = seed::stream_rng(config.seed, chunk_stream(dtype, j));
        let mut order = AnchorOrder::new(&eligible, config.seed, dtype);
        range
            .enumerate()
            .map(|(done, i)| {
                sampler
                    .sample_at(order.get(i), &mut rng)
                    .map_err(|e| (done, e))
            })
            .collect()
    })
}
