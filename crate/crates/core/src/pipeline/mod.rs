//! Run configuration, stage orchestration and provenance.
//!
//! A run directory holds one artifact per stage (see [`Stage::artifact`])
//! and a `run_manifest.json` listing each artifact's content hash and the
//! hash of the inputs it was built from. A requested stage whose recorded
//! input key and output hash still match is skipped. Rebuilding a stage
//! deletes the artifacts of unrequested stages that depend on it, so the
//! directory never holds outputs the manifest does not account for.
//!
//! Module seeds are `derive_seed(seed, name)` for the names in
//! [`SEED_MODULES`].

mod config;
mod provenance;
mod stages;

pub use config::{
    validate_config, CorpusConfig, CropMode, RunConfig, SamplerSection, SyntheticFixture,
    SEED_MODULES,
};
pub use provenance::{
    hash_file, hash_path, list_files, ArtifactRecord, OutputLock, RunManifest, LOCK_FILE,
    MANIFEST_FILE,
};
pub use stages::{
    embed_target, ingest_slides, load_labeled_set, model_name, sample_triplets,
    sample_triplets_seeded, train_model, write_report, PreparedCorpus, Stage, EMBEDDING_FILE,
    LABELED_FILE, PLOT_FILE, SLIDES_FILE, SPLIT_FILE, TILES_FILE, TRAIN_LOG_FILE,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
    /// Downstream artifacts removed because a stage they read was rebuilt.
    pub invalidated: Vec<Stage>,
}

fn stage_settings(config: &RunConfig, stage: Stage) -> serde_json::Value {
    let seed = config.seed;
    match stage {
        Stage::Ingest => json!({ "seed": seed, "corpus": config.corpus }),
        Stage::Sample => json!({ "seed": seed, "sampler": config.sampler }),
        Stage::Train => json!({
            "seed": seed,
            "encoder": config.encoder,
            "loss": config.loss,
            "train": config.train,
        }),
        Stage::Embed => json!({}),
        Stage::Eval => {
            json!({ "seed": seed, "eval": config.eval, "model": model_name(config.train.mode) })
        }
        Stage::Plot => json!({ "seed": seed, "projection": config.projection }),
    }
}

/// Hash of everything a stage's output is a function of: its settings,
/// external inputs and the recorded hashes of its upstream artifacts.
fn input_key(
    config: &RunConfig,
    stage: Stage,
    records: &BTreeMap<Stage, ArtifactRecord>,
) -> Result<String> {
    let mut inputs = BTreeMap::new();
    for &up in stage.upstream(config.train.mode) {
        let r = records.get(&up).ok_or_else(|| Error::Dependency {
            stage: stage.to_string(),
            missing: format!("{} (from stage {up})", up.artifact()),
        })?;
        inputs.insert(up.to_string(), r.sha256.clone());
    }
    if stage == Stage::Ingest {
        let c = &config.corpus;
        if let Some(root) = &c.labeled_root {
            inputs.insert("labeled_root".into(), hash_path(root)?);
        }
        if let Some(m) = &c.slide_manifest {
            inputs.insert("slide_manifest".into(), hash_file(m)?);
        }
    }
    let doc = json!({
        "stage": stage,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "settings": stage_settings(config, stage),
        "inputs": inputs,
    });
    Ok(provenance::hash_bytes(&serde_json::to_vec(&doc)?))
}

/// An upstream artifact not rebuilt in this run must exist, match its
/// recorded hash and have been built under the current configuration.
fn check_upstream(
    config: &RunConfig,
    out_dir: &Path,
    stage: Stage,
    up: Stage,
    records: &BTreeMap<Stage, ArtifactRecord>,
) -> Result<()> {
    let path = out_dir.join(up.artifact());
    let missing = || Error::Dependency {
        stage: stage.to_string(),
        missing: format!("{} (from stage {up})", path.display()),
    };
    let record = records.get(&up).ok_or_else(missing)?;
    if !path.exists() {
        return Err(missing());
    }
    if hash_path(&path)? != record.sha256 || input_key(config, up, records)? != record.input_key {
        return Err(Error::Stale {
            stage: up.to_string(),
            path,
        });
    }
    Ok(())
}

fn remove_path(path: &Path) -> Result<()> {
    if path.is_dir() {
        fs::remove_dir_all(path).at(path)
    } else if path.exists() {
        fs::remove_file(path).at(path)
    } else {
        Ok(())
    }
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Builds into a sibling `.partial` path and renames on success, so a
/// failed stage leaves its previous artifact, or nothing, behind.
fn build(stage: Stage, config: &RunConfig, out_dir: &Path) -> Result<String> {
    let dest = out_dir.join(stage.artifact());
    let tmp = partial_path(&dest);
    remove_path(&tmp)?;
    log::info!("running stage {stage}");
    if let Err(e) = stages::execute(stage, config, out_dir, &tmp) {
        let _ = remove_path(&tmp);
        return Err(e);
    }
    remove_path(&dest)?;
    fs::rename(&tmp, &dest).at(&dest)?;
    hash_path(&dest)
}

/// Runs `stages` of the pipeline in dependency order under `config.out_dir`
/// and writes the run manifest last. Unrequested upstream artifacts must
/// already be present and current.
pub fn run_pipeline(config: &RunConfig, stages: &[Stage]) -> Result<RunOutcome> {
    config.validate()?;
    if stages.is_empty() {
        return Err(Error::Contract("no stages requested".into()));
    }
    match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Contract(format!("worker pool: {e}")))?
            .install(|| run_locked(config, stages)),
        None => run_locked(config, stages),
    }
}

fn run_locked(config: &RunConfig, stages: &[Stage]) -> Result<RunOutcome> {
    let out_dir = config.out_dir.as_path();
    let _lock = OutputLock::acquire(out_dir)?;
    let started = provenance::unix_now();
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut records: BTreeMap<Stage, ArtifactRecord> = if manifest_path.exists() {
        RunManifest::read(&manifest_path)?
            .artifacts
            .into_iter()
            .map(|a| (a.stage, a))
            .collect()
    } else {
        BTreeMap::new()
    };
    let requested: BTreeSet<Stage> = stages.iter().copied().collect();
    let mode = config.train.mode;
    let mut outcome = RunOutcome {
        manifest: RunManifest::new(config, Vec::new(), started),
        executed: Vec::new(),
        skipped: Vec::new(),
        invalidated: Vec::new(),
    };
    for stage in Stage::ALL.into_iter().filter(|s| requested.contains(s)) {
        for &up in stage.upstream(mode) {
            if !requested.contains(&up) {
                check_upstream(config, out_dir, stage, up, &records)?;
            }
        }
        let key = input_key(config, stage, &records)?;
        let dest = out_dir.join(stage.artifact());
        let current = match records.get(&stage) {
            Some(r) if r.input_key == key && dest.exists() => hash_path(&dest)? == r.sha256,
            _ => false,
        };
        if current {
            log::info!("stage {stage} is up to date");
            outcome.skipped.push(stage);
            continue;
        }
        let sha256 = build(stage, config, out_dir)?;
        records.insert(
            stage,
            ArtifactRecord {
                stage,
                path: stage.artifact().into(),
                sha256,
                input_key: key,
            },
        );
        outcome.executed.push(stage);
        for down in Stage::ALL {
            if !requested.contains(&down)
                && down.depends_on(stage, mode)
                && records.remove(&down).is_some()
            {
                log::warn!(
                    "removing {} built from the previous {stage} output",
                    down.artifact()
                );
                remove_path(&out_dir.join(down.artifact()))?;
                outcome.invalidated.push(down);
            }
        }
    }
    outcome.manifest = RunManifest::new(config, records.into_values().collect(), started);
    outcome.manifest.write(&manifest_path)?;
    Ok(outcome)
}
