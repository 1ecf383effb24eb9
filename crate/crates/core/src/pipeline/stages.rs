use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{issue, RunConfig};
use crate::corpus::{
    grid_tile_slide, index_slides, load_labeled_patches, materialize_patch, read_labeled_manifest,
    read_tiles, split_source_target, write_labeled_manifest, write_slide_manifest, write_tiles,
    DatasetSplit, ImageFileStore, LabeledEntry, LabeledPatchSet, SlideCorpus, SlideRecord, TileRef,
    TissueFilter,
};
use crate::embedding::{extract_embeddings, EmbeddingMatrix};
use crate::error::{Error, IoContext, Result};
use crate::eval::{build_report, EvalReport};
use crate::jsonl;
use crate::nn::{load_checkpoint, save_checkpoint, CheckpointMetadata, Encoder};
use crate::projector::{plot_embeddings, PlotFiles};
use crate::sampler::{
    generate_manifest, read_triplets, write_triplets, LabeledSampler, ManifestSource, Triplet,
    TripletRef,
};
use crate::synthetic::{grating_dataset, GratingNoise};
use crate::train::{
    train_supervised, train_triplet, LabeledSource, PatchSource, SlideSource, TrainLog, TrainMode,
    TrainOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Sample,
    Train,
    Embed,
    Eval,
    Plot,
}

impl Stage {
    /// Dependency order.
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Sample,
        Stage::Train,
        Stage::Embed,
        Stage::Eval,
        Stage::Plot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Sample => "sample",
            Stage::Train => "train",
            Stage::Embed => "embed",
            Stage::Eval => "eval",
            Stage::Plot => "plot",
        }
    }

    /// The stage's output, relative to the run directory.
    pub fn artifact(self) -> &'static str {
        match self {
            Stage::Ingest => "corpus",
            Stage::Sample => "triplets.jsonl",
            Stage::Train => "checkpoint",
            Stage::Embed => "embeddings",
            Stage::Eval => "report",
            Stage::Plot => "plot",
        }
    }

    /// Direct inputs. Cross-entropy training reads labels, not triplets.
    pub fn upstream(self, mode: TrainMode) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Sample => &[Stage::Ingest],
            Stage::Train if mode == TrainMode::Triplet => &[Stage::Ingest, Stage::Sample],
            Stage::Train => &[Stage::Ingest],
            Stage::Embed => &[Stage::Ingest, Stage::Train],
            Stage::Eval | Stage::Plot => &[Stage::Embed],
        }
    }

    /// Whether `self` reads `other`'s output, directly or not.
    pub fn depends_on(self, other: Stage, mode: TrainMode) -> bool {
        self.upstream(mode)
            .iter()
            .any(|&u| u == other || u.depends_on(other, mode))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

pub const LABELED_FILE: &str = "labeled.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const SLIDES_FILE: &str = "slides.jsonl";
pub const TILES_FILE: &str = "tiles.jsonl";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EMBEDDING_FILE: &str = "embeddings.bin";
pub const PLOT_FILE: &str = "embeddings.png";

pub fn model_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Triplet => "triplet",
        TrainMode::CrossEntropy => "cross_entropy",
    }
}

fn needs_labeled(stage: &str) -> Error {
    Error::Config(vec![issue(
        "corpus.labeled_root",
        format!("{stage} needs a labeled set (corpus.labeled_root or corpus.synthetic)"),
    )])
}

/// Grid-tiles every slide in a manifest and drops background tiles.
pub fn ingest_slides(
    manifest: &Path,
    slide_root: &Path,
    patch_size: u32,
    magnification: f64,
    stride: u32,
    filter: TissueFilter,
) -> Result<SlideCorpus> {
    let slides = index_slides(manifest)?;
    let store = ImageFileStore::new(slide_root);
    let mut tiles = Vec::with_capacity(slides.len());
    for slide in &slides {
        let grid = grid_tile_slide(slide, patch_size, magnification, stride)?;
        let kept = if filter.enabled {
            let keep = grid
                .par_iter()
                .map(|t| materialize_patch(t, slide, &store).map(|p| filter.keep(&p)))
                .collect::<Result<Vec<bool>>>()?;
            grid.into_iter()
                .zip(keep)
                .filter_map(|(t, k)| k.then_some(t))
                .collect()
        } else {
            grid
        };
        log::info!("slide {}: {} tiles kept", slide.slide_id, kept.len());
        tiles.push(kept);
    }
    SlideCorpus::new(slides, tiles)
}

/// The configured labeled set, with images.
pub fn load_labeled_set(config: &RunConfig) -> Result<Option<LabeledPatchSet>> {
    let c = &config.corpus;
    let crop = c.crop_policy(config.module_seed("corpus"));
    if let Some(root) = &c.labeled_root {
        let (set, report) = load_labeled_patches(root, crop)?;
        if !report.skipped_small.is_empty() {
            log::warn!(
                "{} images smaller than the patch size were skipped",
                report.skipped_small.len()
            );
        }
        Ok(Some(set))
    } else if let Some(s) = c.synthetic {
        Ok(Some(grating_dataset(
            s.classes,
            s.per_class,
            &GratingNoise::default(),
            config.module_seed("corpus"),
        )))
    } else {
        Ok(None)
    }
}

fn slide_root(config: &RunConfig, manifest: &Path) -> PathBuf {
    config
        .corpus
        .slide_root
        .clone()
        .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

/// Everything the later stages read from the data sources.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub labeled: Option<LabeledPatchSet>,
    pub split: Option<DatasetSplit>,
    pub slides: Option<SlideCorpus>,
}

impl PreparedCorpus {
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        let c = &config.corpus;
        if !c.has_labeled_set() && c.slide_manifest.is_none() {
            return Err(Error::Config(vec![issue(
                "corpus",
                "no data source: set labeled_root, synthetic or slide_manifest",
            )]));
        }
        let labeled = load_labeled_set(config)?;
        let split = labeled
            .as_ref()
            .map(|set| split_source_target(set, c.split, config.module_seed("split")))
            .transpose()?;
        let slides = c
            .slide_manifest
            .as_ref()
            .map(|m| {
                ingest_slides(
                    m,
                    &slide_root(config, m),
                    c.patch_size,
                    c.magnification,
                    c.stride(),
                    c.tissue_filter,
                )
            })
            .transpose()?;
        Ok(PreparedCorpus {
            labeled,
            split,
            slides,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        if let (Some(set), Some(split)) = (&self.labeled, &self.split) {
            let source: std::collections::HashSet<&str> =
                split.source_ids.iter().map(String::as_str).collect();
            let entries: Vec<LabeledEntry> = set
                .items()
                .iter()
                .map(|p| LabeledEntry {
                    item_id: p.item_id.clone(),
                    label: p.label,
                    split: if source.contains(p.item_id.as_str()) {
                        "source"
                    } else {
                        "target"
                    }
                    .into(),
                })
                .collect();
            write_labeled_manifest(&dir.join(LABELED_FILE), &entries)?;
            let path = dir.join(SPLIT_FILE);
            fs::write(&path, serde_json::to_string_pretty(split)? + "\n").at(&path)?;
        }
        if let Some(corpus) = &self.slides {
            write_slide_manifest(&dir.join(SLIDES_FILE), &corpus.slides)?;
            let flat: Vec<TileRef> = corpus.tiles.iter().flatten().cloned().collect();
            write_tiles(&dir.join(TILES_FILE), &flat)?;
        }
        Ok(())
    }

    /// Restores what [`PreparedCorpus::write`] saved, reloading images from
    /// the configured source.
    pub fn load(config: &RunConfig, dir: &Path) -> Result<Self> {
        let split_path = dir.join(SPLIT_FILE);
        let (labeled, split) = if split_path.exists() {
            let set =
                load_labeled_set(config)?.ok_or_else(|| needs_labeled("the ingested corpus"))?;
            let entries = read_labeled_manifest(&dir.join(LABELED_FILE))?;
            let same = entries.len() == set.len()
                && entries
                    .iter()
                    .zip(set.items())
                    .all(|(e, p)| e.item_id == p.item_id && e.label == p.label);
            if !same {
                return Err(Error::Stale {
                    stage: "ingest".into(),
                    path: dir.join(LABELED_FILE),
                });
            }
            let bytes = fs::read(&split_path).at(&split_path)?;
            let split: DatasetSplit = serde_json::from_slice(&bytes)?;
            (Some(set), Some(split))
        } else {
            (None, None)
        };
        let slides_path = dir.join(SLIDES_FILE);
        let slides = if slides_path.exists() {
            let records: Vec<SlideRecord> = jsonl::read(&slides_path)?;
            Some(SlideCorpus::from_tiles(
                records,
                read_tiles(&dir.join(TILES_FILE))?,
            )?)
        } else {
            None
        };
        Ok(PreparedCorpus {
            labeled,
            split,
            slides,
        })
    }

    fn side(&self, source: bool, stage: &str) -> Result<LabeledPatchSet> {
        match (&self.labeled, &self.split) {
            (Some(set), Some(split)) => {
                let (ids, name) = if source {
                    (&split.source_ids, "source")
                } else {
                    (&split.target_ids, "target")
                };
                set.subset(ids, name)
            }
            _ => Err(needs_labeled(stage)),
        }
    }

    pub fn source_set(&self, stage: &str) -> Result<LabeledPatchSet> {
        self.side(true, stage)
    }

    pub fn target_set(&self, stage: &str) -> Result<LabeledPatchSet> {
        self.side(false, stage)
    }
}

/// Draws the configured triplet manifest.
pub fn sample_triplets(config: &RunConfig, corpus: &PreparedCorpus) -> Result<Vec<Triplet>> {
    sample_triplets_seeded(config, corpus, config.module_seed("sampler"))
}

/// [`sample_triplets`] with an explicit sampler seed.
pub fn sample_triplets_seeded(
    config: &RunConfig,
    corpus: &PreparedCorpus,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let c = &config.corpus;
    let have_slides = corpus.slides.is_some();
    let spatial = config
        .sampler
        .types(have_slides)
        .iter()
        .any(|t| t.is_spatial());
    if spatial {
        let slides = corpus.slides.as_ref().ok_or_else(|| {
            Error::Config(vec![issue(
                "corpus.slide_manifest",
                "spatial triplets need slides",
            )])
        })?;
        let footprint = slides
            .slides
            .iter()
            .zip(&slides.tiles)
            .filter_map(|(s, t)| t.first().map(|t| t.footprint(s)))
            .max()
            .unwrap_or(c.patch_size);
        let sc = config.sampler.sampler_config(footprint, true, seed);
        generate_manifest(ManifestSource::Slides(slides), &sc)
    } else {
        let source = corpus.source_set("sample")?;
        let sc = config
            .sampler
            .sampler_config(c.patch_size, have_slides, seed);
        generate_manifest(ManifestSource::Labeled(&LabeledSampler::new(&source)), &sc)
    }
}

/// Resolves tiles through the slide store and item ids through the
/// labeled source split.
struct RunSource<'a> {
    labeled: Option<LabeledSource<'a>>,
    slides: Option<SlideSource<'a>>,
}

impl PatchSource for RunSource<'_> {
    fn fetch(&self, r: &TripletRef) -> Result<image::RgbImage> {
        match (r, &self.labeled, &self.slides) {
            (TripletRef::Item(_), Some(s), _) => s.fetch(r),
            (TripletRef::Tile(_), _, Some(s)) => s.fetch(r),
            (TripletRef::Item(id), None, _) => {
                Err(Error::Lookup(format!("item {id}: no labeled set")))
            }
            (TripletRef::Tile(t), _, None) => {
                Err(Error::Lookup(format!("tile on {}: no slides", t.slide_id)))
            }
        }
    }
}

/// Trains the configured encoder and writes its checkpoint and log to
/// `out`. Triplet mode reads `triplets`; cross-entropy mode the labeled
/// source split.
pub fn train_model(
    config: &RunConfig,
    corpus: &PreparedCorpus,
    triplets: Option<&[Triplet]>,
    out: &Path,
) -> Result<TrainLog> {
    fs::create_dir_all(out).at(out)?;
    let train = config.train_config();
    let options = TrainOptions {
        log_path: Some(out.join(TRAIN_LOG_FILE)),
        metadata_margin: Some(config.loss.margin),
        ..Default::default()
    };
    let encoder_seed = config.module_seed("encoder");
    let (encoder, log) = match train.mode {
        TrainMode::Triplet => {
            let triplets = triplets
                .ok_or_else(|| Error::Contract("triplet training needs a manifest".into()))?;
            let source_set = corpus.source_set("train").ok();
            let store = corpus.slides.as_ref().and_then(|_| {
                config
                    .corpus
                    .slide_manifest
                    .as_ref()
                    .map(|m| ImageFileStore::new(slide_root(config, m)))
            });
            let source = RunSource {
                labeled: source_set.as_ref().map(LabeledSource::new),
                slides: corpus
                    .slides
                    .as_ref()
                    .zip(store.as_ref())
                    .map(|(c, s)| SlideSource::new(c, s)),
            };
            let encoder = Encoder::new(config.encoder, encoder_seed)?;
            train_triplet(encoder, triplets, &source, &train, &config.loss, &options)?
        }
        TrainMode::CrossEntropy => {
            let source_set = corpus.source_set("cross-entropy training")?;
            let encoder = Encoder::with_classifier(config.encoder, encoder_seed)?;
            train_supervised(encoder, &source_set, &train, &options)?
        }
    };
    let meta = CheckpointMetadata::for_encoder(
        &encoder,
        config.loss.margin,
        train.seed,
        log.steps.len() as u64,
    );
    save_checkpoint(out, &encoder, &meta)?;
    Ok(log)
}

/// Embeds the target split with a saved encoder.
pub fn embed_target(
    config: &RunConfig,
    corpus: &PreparedCorpus,
    checkpoint: &Path,
) -> Result<EmbeddingMatrix> {
    let (encoder, _) = load_checkpoint(checkpoint)?;
    let target = corpus.target_set("embed")?;
    extract_embeddings(&target, &encoder, config.train.batch_size)
}

/// Writes `report.csv`, `report.txt` (the table) and `report.json`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for (name, text) in [
        ("report.csv", report.to_csv()),
        ("report.txt", report.to_table()),
        ("report.json", serde_json::to_string_pretty(report)? + "\n"),
    ] {
        let path = dir.join(name);
        fs::write(&path, text).at(&path)?;
    }
    Ok(())
}

fn read_embeddings(out_dir: &Path) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::read(&out_dir.join(Stage::Embed.artifact()).join(EMBEDDING_FILE))
}

/// Runs one stage of a pipeline rooted at `out_dir`, writing its artifact
/// to `dest`.
pub(super) fn execute(stage: Stage, config: &RunConfig, out_dir: &Path, dest: &Path) -> Result<()> {
    let corpus = || PreparedCorpus::load(config, &out_dir.join(Stage::Ingest.artifact()));
    match stage {
        Stage::Ingest => PreparedCorpus::prepare(config)?.write(dest),
        Stage::Sample => write_triplets(dest, &sample_triplets(config, &corpus()?)?),
        Stage::Train => {
            let triplets = match config.train.mode {
                TrainMode::Triplet => Some(read_triplets(&out_dir.join(Stage::Sample.artifact()))?),
                TrainMode::CrossEntropy => None,
            };
            train_model(config, &corpus()?, triplets.as_deref(), dest).map(|_| ())
        }
        Stage::Embed => {
            let m = embed_target(config, &corpus()?, &out_dir.join(Stage::Train.artifact()))?;
            fs::create_dir_all(dest).at(dest)?;
            m.write(&dest.join(EMBEDDING_FILE))
        }
        Stage::Eval => {
            let models = vec![(
                model_name(config.train.mode).to_string(),
                read_embeddings(out_dir)?,
            )];
            write_report(&build_report(&models, &config.eval_config())?, dest)
        }
        Stage::Plot => {
            fs::create_dir_all(dest).at(dest)?;
            let _: PlotFiles = plot_embeddings(
                &read_embeddings(out_dir)?,
                &config.projection_config(),
                &dest.join(PLOT_FILE),
            )?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("deploy".parse::<Stage>().is_err());
    }

    #[test]
    fn dependency_closure() {
        let t = TrainMode::Triplet;
        assert!(Stage::Eval.depends_on(Stage::Sample, t));
        assert!(!Stage::Eval.depends_on(Stage::Sample, TrainMode::CrossEntropy));
        assert!(!Stage::Plot.depends_on(Stage::Eval, t));
        assert!(Stage::ALL.iter().all(|s| !s.depends_on(*s, t)));
    }
}
