//! Optimisation of the encoder: triplet training over a manifest and the
//! cross-entropy baseline over a labeled set.

mod source;

pub use source::{LabeledSource, PatchSource, SlideSource};

use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledPatchSet;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::nn::{
    cross_entropy_grad, images_to_tensor, save_checkpoint, triplet_loss_grad, Adam,
    CheckpointMetadata, Encoder, Tensor, TripletLossConfig,
};
use crate::sampler::Triplet;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Triplet,
    #[serde(alias = "xent")]
    CrossEntropy,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(TrainMode::Triplet),
            "xent" | "cross_entropy" | "cross-entropy" => Ok(TrainMode::CrossEntropy),
            _ => Err(Error::Validation(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    None,
    /// Random shift (reflect-padded, up to 8 px) and horizontal flip.
    RandomCropFlip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub augmentation: Augmentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            mode: TrainMode::Triplet,
            augmentation: Augmentation::None,
        }
    }
}

impl TrainConfig {
    /// Checks the optimiser settings. A zero learning rate is accepted here
    /// (it freezes the weights); run configurations reject it.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Validation(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Validation(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        Ok(())
    }

    /// Optimizer steps for `n` training examples.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size.max(1))
    }
}

/// Where and how often to write checkpoints and the log during training.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Save to `checkpoint_dir/step-NNNNNN` every this many steps.
    pub checkpoint_every: Option<usize>,
    /// Append-only JSONL log.
    pub log_path: Option<PathBuf>,
    /// Margin recorded in checkpoint metadata for cross-entropy runs.
    pub metadata_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_sum: f64,
    pub loss_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of triplets with a zero hinge term (triplet mode).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub satisfaction_rate: Option<f64>,
    /// Training accuracy under batch statistics (cross-entropy mode).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn from_records(records: Vec<LogRecord>) -> Self {
        let mut log = TrainLog::default();
        for r in records {
            match r {
                LogRecord::Step(s) => log.steps.push(s),
                LogRecord::Epoch(e) => log.epochs.push(e),
            }
        }
        log
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(Self::from_records(jsonl::read(path)?))
    }
}

struct Logger<'a> {
    log: TrainLog,
    path: Option<&'a Path>,
}

impl Logger<'_> {
    fn step(&mut self, r: StepRecord) -> Result<()> {
        if let Some(p) = self.path {
            jsonl::append(p, &LogRecord::Step(r.clone()))?;
        }
        self.log.steps.push(r);
        Ok(())
    }

    fn epoch(&mut self, r: EpochRecord) -> Result<()> {
        if let Some(p) = self.path {
            jsonl::append(p, &LogRecord::Epoch(r.clone()))?;
        }
        log::info!("epoch {} mean loss {:.5}", r.epoch, r.mean_loss);
        self.log.epochs.push(r);
        Ok(())
    }
}

const SHUFFLE_STREAM: u64 = 1 << 60;
const AUGMENT_STREAM: u64 = 2 << 60;

fn epoch_order(n: usize, seed_value: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream_rng(
        seed_value,
        SHUFFLE_STREAM | epoch as u64,
    ));
    order
}

/// Reflect-padded random shift of up to `pad` pixels plus a coin-flip mirror.
fn augment(img: &RgbImage, rng: &mut seed::Rng) -> RgbImage {
    let pad = 8i64;
    let (w, h) = img.dimensions();
    let dx = rng.random_range(-pad..=pad);
    let dy = rng.random_range(-pad..=pad);
    let flip = rng.random_bool(0.5);
    let reflect = |v: i64, n: u32| -> u32 {
        let n = i64::from(n);
        let mut v = v;
        if v < 0 {
            v = -v - 1;
        }
        if v >= n {
            v = 2 * n - v - 1;
        }
        v.clamp(0, n - 1) as u32
    };
    RgbImage::from_fn(w, h, |x, y| {
        let sx = if flip {
            i64::from(w) - 1 - i64::from(x)
        } else {
            i64::from(x)
        };
        *img.get_pixel(reflect(sx + dx, w), reflect(i64::from(y) + dy, h))
    })
}

/// Prepares a batch in the order given, fetching in parallel. The batch is a
/// function of `(seed, step, order)` only.
fn load_batch<F>(count: usize, step: usize, config: &TrainConfig, fetch: F) -> Result<Tensor>
where
    F: Fn(usize) -> Result<RgbImage> + Sync,
{
    let images: Vec<RgbImage> = (0..count)
        .into_par_iter()
        .map(|k| {
            let img = fetch(k)?;
            Ok(match config.augmentation {
                Augmentation::None => img,
                Augmentation::RandomCropFlip => {
                    let stream = AUGMENT_STREAM | ((step as u64) << 24) | k as u64;
                    augment(&img, &mut seed::stream_rng(config.seed, stream))
                }
            })
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&RgbImage> = images.iter().collect();
    images_to_tensor(&refs)
}

fn to_f64(out: &Tensor, rows: std::ops::Range<usize>, dim: usize) -> Array2<f64> {
    ArrayView2::from_shape((out.n(), dim), &out.data)
        .expect("output shape")
        .slice(s![rows, ..])
        .mapv(f64::from)
}

fn checkpoint(
    dir: &Path,
    encoder: &Encoder,
    margin: f64,
    seed_value: u64,
    step: usize,
) -> Result<()> {
    save_checkpoint(
        dir,
        encoder,
        &CheckpointMetadata::for_encoder(encoder, margin, seed_value, step as u64),
    )
}

fn abort_non_finite(
    encoder: &Encoder,
    options: &TrainOptions,
    margin: f64,
    seed_value: u64,
    step: usize,
) -> Error {
    let diagnostic = options.checkpoint_dir.as_ref().and_then(|d| {
        let dir = d.join("diagnostic");
        checkpoint(&dir, encoder, margin, seed_value, step)
            .ok()
            .map(|_| dir)
    });
    Error::NonFiniteLoss { step, diagnostic }
}

fn periodic_checkpoint(
    options: &TrainOptions,
    encoder: &Encoder,
    margin: f64,
    seed_value: u64,
    step: usize,
) -> Result<()> {
    if let (Some(dir), Some(every)) = (&options.checkpoint_dir, options.checkpoint_every) {
        if every > 0 && step % every == 0 {
            checkpoint(
                &dir.join(format!("step-{step:06}")),
                encoder,
                margin,
                seed_value,
                step,
            )?;
        }
    }
    Ok(())
}

/// Triplet training: each step embeds anchors, neighbors and distants as
/// one batch through the shared encoder and minimises the summed hinge loss.
pub fn train_triplet(
    mut encoder: Encoder,
    manifest: &[Triplet],
    source: &dyn PatchSource,
    config: &TrainConfig,
    loss_config: &TripletLossConfig,
    options: &TrainOptions,
) -> Result<(Encoder, TrainLog)> {
    config.validate()?;
    loss_config.validate()?;
    if config.mode != TrainMode::Triplet {
        return Err(Error::Contract("train_triplet needs mode = triplet".into()));
    }
    if manifest.is_empty() {
        return Err(Error::Contract("empty triplet manifest".into()));
    }
    let dim = encoder.config().embedding_dim;
    let mut adam = Adam::new(
        config.learning_rate as f32,
        config.beta1 as f32,
        config.beta2 as f32,
    );
    let mut logger = Logger {
        log: TrainLog::default(),
        path: options.log_path.as_deref(),
    };
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = epoch_order(manifest.len(), config.seed, epoch);
        let (mut epoch_sum, mut satisfied) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let b = batch.len();
            let x = load_batch(3 * b, step, config, |k| {
                let idx = batch[k % b];
                let t = &manifest[idx];
                let r = match k / b {
                    0 => &t.anchor,
                    1 => &t.neighbor,
                    _ => &t.distant,
                };
                source.fetch(r).map_err(|e| Error::Data {
                    index: idx,
                    message: e.to_string(),
                })
            })?;
            let (out, tape) = encoder.forward_train(&x, false)?;
            let fa = to_f64(&out, 0..b, dim);
            let fn_ = to_f64(&out, b..2 * b, dim);
            let fd = to_f64(&out, 2 * b..3 * b, dim);
            let (loss, grads) = triplet_loss_grad(fa.view(), fn_.view(), fd.view(), loss_config)?;
            step += 1;
            if !loss.value.is_finite() {
                return Err(abort_non_finite(
                    &encoder,
                    options,
                    loss_config.margin,
                    config.seed,
                    step,
                ));
            }
            let mut g = Tensor::zeros(out.shape);
            for (part, grad) in [&grads.anchor, &grads.neighbor, &grads.distant]
                .into_iter()
                .enumerate()
            {
                for (i, row) in grad.rows().into_iter().enumerate() {
                    let off = (part * b + i) * dim;
                    for (d, &v) in row.iter().enumerate() {
                        g.data[off + d] = v as f32;
                    }
                }
            }
            encoder.backward(tape, g);
            adam.step(encoder.store_mut());
            epoch_sum += loss.sum();
            satisfied += loss.satisfied();
            logger.step(StepRecord {
                step,
                epoch,
                loss_sum: loss.sum(),
                loss_mean: loss.mean(),
            })?;
            periodic_checkpoint(options, &encoder, loss_config.margin, config.seed, step)?;
        }
        logger.epoch(EpochRecord {
            epoch,
            mean_loss: epoch_sum / manifest.len() as f64,
            satisfaction_rate: Some(satisfied as f64 / manifest.len() as f64),
            accuracy: None,
        })?;
    }
    Ok((encoder, logger.log))
}

/// Cross-entropy baseline: the encoder plus its linear head, trained on
/// class labels. The encoder must carry a classification head.
pub fn train_supervised(
    mut encoder: Encoder,
    dataset: &LabeledPatchSet,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<(Encoder, TrainLog)> {
    config.validate()?;
    if config.mode != TrainMode::CrossEntropy {
        return Err(Error::Contract(
            "train_supervised needs mode = cross_entropy".into(),
        ));
    }
    let classes = encoder
        .num_classes()
        .ok_or_else(|| Error::Contract("encoder has no classification head".into()))?;
    let labels: Vec<usize> = dataset.labels().iter().map(|l| l.index()).collect();
    let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::Validation(format!(
            "supervised training needs at least 2 classes, found {}",
            distinct.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!(
            "label {bad} exceeds head width {classes}"
        )));
    }
    let margin = options.metadata_margin.unwrap_or(0.0);
    let mut adam = Adam::new(
        config.learning_rate as f32,
        config.beta1 as f32,
        config.beta2 as f32,
    );
    let mut logger = Logger {
        log: TrainLog::default(),
        path: options.log_path.as_deref(),
    };
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = epoch_order(dataset.len(), config.seed, epoch);
        let (mut epoch_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let x = load_batch(batch.len(), step, config, |k| {
                Ok(dataset.items()[batch[k]].image.clone())
            })?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (out, tape) = encoder.forward_train(&x, true)?;
            let logits = to_f64(&out, 0..batch.len(), classes);
            let (loss, grad) = cross_entropy_grad(logits.view(), &y)?;
            step += 1;
            if !loss.value.is_finite() {
                return Err(abort_non_finite(
                    &encoder,
                    options,
                    margin,
                    config.seed,
                    step,
                ));
            }
            correct += logits
                .rows()
                .into_iter()
                .zip(&y)
                .filter(|(row, &l)| argmax(row.as_slice().expect("contiguous")) == l)
                .count();
            let g = Tensor::from_vec(out.shape, grad.iter().map(|&v| v as f32).collect());
            encoder.backward(tape, g);
            adam.step(encoder.store_mut());
            let batch_sum: f64 = loss.per_item.iter().sum();
            epoch_sum += batch_sum;
            logger.step(StepRecord {
                step,
                epoch,
                loss_sum: batch_sum,
                loss_mean: loss.value,
            })?;
            periodic_checkpoint(options, &encoder, margin, config.seed, step)?;
        }
        logger.epoch(EpochRecord {
            epoch,
            mean_loss: epoch_sum / dataset.len() as f64,
            satisfaction_rate: None,
            accuracy: Some(correct as f64 / dataset.len() as f64),
        })?;
    }
    Ok((encoder, logger.log))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Inference-mode accuracy of the classification head.
pub fn classification_accuracy(
    encoder: &Encoder,
    dataset: &LabeledPatchSet,
    batch_size: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in dataset.items().chunks(batch_size.max(1)) {
        let images: Vec<&RgbImage> = chunk.iter().map(|p| &p.image).collect();
        let logits = encoder.logits(&images_to_tensor(&images)?)?.mapv(f64::from);
        correct += logits
            .rows()
            .into_iter()
            .zip(chunk)
            .filter(|(row, p)| argmax(&row.to_vec()) == p.label.index())
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Fraction of triplets whose embedded anchor is strictly closer to the
/// neighbor than to the distant, in inference mode.
pub fn triplet_accuracy(
    encoder: &Encoder,
    manifest: &[Triplet],
    source: &dyn PatchSource,
    batch_size: usize,
) -> Result<f64> {
    if manifest.is_empty() {
        return Ok(0.0);
    }
    let mut ok = 0;
    for (c, chunk) in manifest.chunks(batch_size.max(1)).enumerate() {
        let b = chunk.len();
        let cfg = TrainConfig::default();
        let x = load_batch(3 * b, 0, &cfg, |k| {
            let t = &chunk[k % b];
            let r = [&t.anchor, &t.neighbor, &t.distant][k / b];
            source.fetch(r).map_err(|e| Error::Data {
                index: c * batch_size + k % b,
                message: e.to_string(),
            })
        })?;
        let e = encoder.embed_batch(&x)?;
        for i in 0..b {
            let d = |j: usize| -> f64 {
                e.row(i)
                    .iter()
                    .zip(e.row(j).iter())
                    .map(|(a, b)| f64::from(a - b).powi(2))
                    .sum()
            };
            if d(b + i) < d(2 * b + i) {
                ok += 1;
            }
        }
    }
    Ok(ok as f64 / manifest.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderConfig;
    use crate::sampler::{
        generate_manifest, DistantType, LabeledSampler, ManifestSource, SamplerConfig,
    };
    use crate::synthetic::{grating_dataset, GratingNoise};

    fn labeled_manifest(set: &LabeledPatchSet, n: usize, seed_value: u64) -> Vec<Triplet> {
        let sampler = LabeledSampler::new(set);
        let config = SamplerConfig::for_footprint(128, seed_value)
            .with_counts([(DistantType::DifferentClassLabel, n)]);
        generate_manifest(ManifestSource::Labeled(&sampler), &config).unwrap()
    }

    #[test]
    fn step_count_arithmetic() {
        let set = grating_dataset(2, 8, &GratingNoise::default(), 0);
        let manifest = labeled_manifest(&set, 64, 1);
        let config = TrainConfig {
            epochs: 1,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let enc = Encoder::new(EncoderConfig::small_conv(), 0).unwrap();
        let (_, log) = train_triplet(
            enc,
            &manifest,
            &LabeledSource::new(&set),
            &config,
            &TripletLossConfig::default(),
            &TrainOptions::default(),
        )
        .unwrap();
        assert_eq!(log.steps.len(), 2);
        assert_eq!(config.total_steps(64), 2);
        assert_eq!(log.epochs.len(), 1);
        let steps: Vec<usize> = log.steps.iter().map(|s| s.step).collect();
        assert_eq!(steps, [1, 2]);
    }

    #[test]
    fn zero_learning_rate_freezes_weights() {
        let set = grating_dataset(2, 4, &GratingNoise::default(), 0);
        let manifest = labeled_manifest(&set, 12, 2);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.0,
            ..Default::default()
        };
        let enc = Encoder::new(EncoderConfig::small_conv(), 3).unwrap();
        let before: Vec<Vec<f32>> = enc.store().params.iter().map(|p| p.value.clone()).collect();
        let (after, log) = train_triplet(
            enc,
            &manifest,
            &LabeledSource::new(&set),
            &config,
            &TripletLossConfig::default(),
            &TrainOptions::default(),
        )
        .unwrap();
        assert_eq!(log.steps.len(), 6);
        for (b, a) in before.iter().zip(&after.store().params) {
            assert!(b
                .iter()
                .zip(&a.value)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn unresolvable_reference_names_triplet() {
        let set = grating_dataset(2, 4, &GratingNoise::default(), 0);
        let mut manifest = labeled_manifest(&set, 8, 2);
        manifest[5].distant = crate::sampler::TripletRef::Item("missing".into());
        let config = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        };
        let err = train_triplet(
            Encoder::new(EncoderConfig::small_conv(), 0).unwrap(),
            &manifest,
            &LabeledSource::new(&set),
            &config,
            &TripletLossConfig::default(),
            &TrainOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data { index: 5, .. }), "{err}");
    }

    #[test]
    fn supervised_preconditions() {
        let one_class = grating_dataset(1, 4, &GratingNoise::default(), 0);
        let enc = Encoder::with_classifier(EncoderConfig::small_conv(), 0).unwrap();
        let xent = TrainConfig {
            mode: TrainMode::CrossEntropy,
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(
            train_supervised(enc.clone(), &one_class, &xent, &TrainOptions::default()),
            Err(Error::Validation(_))
        ));
        let two = grating_dataset(2, 2, &GratingNoise::default(), 0);
        let triplet_mode = TrainConfig {
            mode: TrainMode::Triplet,
            ..xent
        };
        assert!(matches!(
            train_supervised(enc, &two, &triplet_mode, &TrainOptions::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn log_and_checkpoints_written() {
        let dir = tempfile::tempdir().unwrap();
        let set = grating_dataset(2, 4, &GratingNoise::default(), 0);
        let manifest = labeled_manifest(&set, 8, 2);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let options = TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            checkpoint_every: Some(2),
            log_path: Some(dir.path().join("train.jsonl")),
            metadata_margin: None,
        };
        let (_, log) = train_triplet(
            Encoder::new(EncoderConfig::small_conv(), 0).unwrap(),
            &manifest,
            &LabeledSource::new(&set),
            &config,
            &TripletLossConfig::default(),
            &options,
        )
        .unwrap();
        assert_eq!(
            TrainLog::read(&dir.path().join("train.jsonl")).unwrap(),
            log
        );
        let (_, meta) = crate::nn::load_checkpoint(&dir.path().join("step-000004")).unwrap();
        assert_eq!(meta.step, 4);
        assert!(log.epochs.iter().all(|e| e.satisfaction_rate.is_some()));
    }

    #[test]
    fn augmentation_keeps_shape_and_is_seeded() {
        let set = grating_dataset(1, 1, &GratingNoise::default(), 0);
        let img = &set.items()[0].image;
        let a = augment(img, &mut seed::rng(1));
        let b = augment(img, &mut seed::rng(1));
        assert_eq!(a.dimensions(), img.dimensions());
        assert_eq!(a, b);
    }
}
