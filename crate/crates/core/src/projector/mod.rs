//! 2-D manifold projections of embedding matrices and class-coloured
//! scatter plots.

mod render;
mod umap;

pub use render::{coordinate_csv, render_scatter, Palette, ScatterFiles};

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{ConfigIssue, Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub n_neighbors: usize,
    pub output_dim: usize,
    pub seed: u64,
    pub min_dist: f64,
    pub spread: f64,
    /// Defaults to 500 below 10,000 items and 200 above.
    pub n_epochs: Option<usize>,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            n_neighbors: 40,
            output_dim: 2,
            seed: 0,
            min_dist: 0.1,
            spread: 1.0,
            n_epochs: None,
        }
    }
}

impl ProjectionConfig {
    /// Issues with paths relative to the projection section.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut push = |path: &str, message: String| {
            out.push(ConfigIssue {
                path: path.into(),
                message,
            })
        };
        if self.n_neighbors < 2 {
            push(
                "n_neighbors",
                format!("must be at least 2, got {}", self.n_neighbors),
            );
        }
        if self.output_dim != 2 {
            push(
                "output_dim",
                format!("only 2 is supported, got {}", self.output_dim),
            );
        }
        if !(self.spread > 0.0) {
            push("spread", "must be positive".into());
        }
        if !(self.min_dist >= 0.0 && self.min_dist < self.spread) {
            push("min_dist", "must lie in [0, spread)".into());
        }
        if self.n_epochs == Some(0) {
            push("n_epochs", "must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues: Vec<ConfigIssue> = self
            .issues()
            .into_iter()
            .map(|i| ConfigIssue {
                path: format!("projection.{}", i.path),
                message: i.message,
            })
            .collect();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn epochs_for(&self, n_items: usize) -> usize {
        self.n_epochs
            .unwrap_or(if n_items <= 10_000 { 500 } else { 200 })
    }
}

/// Everything needed to interpret or repeat a projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMetadata {
    pub algorithm: String,
    pub metric: String,
    pub n_items: usize,
    pub n_neighbors: usize,
    pub output_dim: usize,
    pub seed: u64,
    pub min_dist: f64,
    pub spread: f64,
    pub n_epochs: usize,
    pub negative_sample_rate: usize,
    pub init: String,
}

impl ProjectionMetadata {
    pub fn new(config: &ProjectionConfig, n_items: usize) -> Self {
        ProjectionMetadata {
            algorithm: "umap".into(),
            metric: "euclidean".into(),
            n_items,
            n_neighbors: config.n_neighbors,
            output_dim: config.output_dim,
            seed: config.seed,
            min_dist: config.min_dist,
            spread: config.spread,
            n_epochs: config.epochs_for(n_items),
            negative_sample_rate: 5,
            init: "spectral".into(),
        }
    }
}

/// Projects the rows of `embeddings` to the plane. Deterministic per seed.
pub fn project_2d(embeddings: &EmbeddingMatrix, config: &ProjectionConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let n = embeddings.len();
    if n <= config.n_neighbors {
        return Err(Error::Config(vec![ConfigIssue {
            path: "projection.n_neighbors".into(),
            message: format!(
                "{n} items cannot have {} neighbours each",
                config.n_neighbors
            ),
        }]));
    }
    let coords = umap::umap(
        embeddings.to_f64().view(),
        config.n_neighbors,
        config.min_dist,
        config.spread,
        config.epochs_for(n),
        config.seed,
    );
    debug_assert!(coords.iter().all(|v| v.is_finite()));
    Ok(coords)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub scatter: ScatterFiles,
    pub metadata: PathBuf,
}

/// Projects, renders and writes `<out>`, `<stem>.csv` and `<stem>.json`.
pub fn plot_embeddings(
    embeddings: &EmbeddingMatrix,
    config: &ProjectionConfig,
    out: &Path,
) -> Result<PlotFiles> {
    let coords = project_2d(embeddings, config)?;
    let scatter = render_scatter(
        coords.view(),
        &embeddings.labels,
        &embeddings.item_ids,
        &Palette::default(),
        out,
    )?;
    let metadata = out.with_extension("json");
    let json = serde_json::to_string_pretty(&ProjectionMetadata::new(config, embeddings.len()))?;
    std::fs::write(&metadata, json + "\n").at(&metadata)?;
    Ok(PlotFiles { scatter, metadata })
}
