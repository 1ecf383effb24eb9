use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CropPolicy, TissueFilter, PATCH_SIZE, TARGET_MAGNIFICATION};
use crate::error::{ConfigIssue, Error, IoContext, Result};
use crate::eval::EvalConfig;
use crate::nn::{EncoderConfig, TripletLossConfig};
use crate::projector::ProjectionConfig;
use crate::sampler::{DistantType, SamplerConfig};
use crate::seed::derive_seed;
use crate::train::TrainConfig;

/// Sections whose `seed` field is filled from the global seed.
const SEEDED_SECTIONS: [&str; 3] = ["train", "eval", "projection"];

/// Names fed to [`derive_seed`] together with the global seed.
pub const SEED_MODULES: [&str; 7] = [
    "corpus",
    "split",
    "sampler",
    "encoder",
    "train",
    "eval",
    "projection",
];

/// Procedural grating patches standing in for a labeled dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFixture {
    pub classes: usize,
    pub per_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    #[default]
    Center,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// One subdirectory per tissue class.
    pub labeled_root: Option<PathBuf>,
    pub synthetic: Option<SyntheticFixture>,
    /// JSONL slide manifest for spatial triplets.
    pub slide_manifest: Option<PathBuf>,
    /// Where slide paths resolve; the manifest's directory when unset.
    pub slide_root: Option<PathBuf>,
    /// Source and target fractions of the labeled set.
    pub split: (f64, f64),
    pub crop: CropMode,
    pub patch_size: u32,
    pub magnification: f64,
    /// Grid stride at the target magnification; the patch size when unset.
    pub stride: Option<u32>,
    pub tissue_filter: TissueFilter,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            labeled_root: None,
            synthetic: None,
            slide_manifest: None,
            slide_root: None,
            split: (0.6, 0.4),
            crop: CropMode::Center,
            patch_size: PATCH_SIZE,
            magnification: TARGET_MAGNIFICATION,
            stride: None,
            tissue_filter: TissueFilter::default(),
        }
    }
}

impl CorpusConfig {
    pub fn stride(&self) -> u32 {
        self.stride.unwrap_or(self.patch_size)
    }

    pub fn crop_policy(&self, seed: u64) -> CropPolicy {
        match self.crop {
            CropMode::Center => CropPolicy::Center,
            CropMode::Random => CropPolicy::Random { seed },
        }
    }

    pub fn has_labeled_set(&self) -> bool {
        self.labeled_root.is_some() || self.synthetic.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub triplets: usize,
    /// Empty: the four spatial types with a slide manifest, label-driven
    /// triplets otherwise.
    pub distant_types: Vec<DistantType>,
    /// Base pixels; twice the largest tile footprint when unset.
    pub neighbor_max_dist: Option<f64>,
    /// Base pixels; eight times the largest tile footprint when unset.
    pub distant_min_dist: Option<f64>,
    pub max_rejections: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            triplets: 22_528,
            distant_types: Vec::new(),
            neighbor_max_dist: None,
            distant_min_dist: None,
            max_rejections: SamplerConfig::DEFAULT_MAX_REJECTIONS,
        }
    }
}

impl SamplerSection {
    pub fn types(&self, have_slides: bool) -> Vec<DistantType> {
        if !self.distant_types.is_empty() {
            self.distant_types.clone()
        } else if have_slides {
            DistantType::SPATIAL.to_vec()
        } else {
            vec![DistantType::DifferentClassLabel]
        }
    }

    /// Sampler settings for tiles whose largest footprint is `footprint`
    /// base pixels.
    pub fn sampler_config(&self, footprint: u32, have_slides: bool, seed: u64) -> SamplerConfig {
        let mut c = SamplerConfig::for_footprint(footprint, seed).with_counts(
            SamplerConfig::uniform_counts(&self.types(have_slides), self.triplets),
        );
        if let Some(d) = self.neighbor_max_dist {
            c.neighbor_max_dist = d;
        }
        if let Some(d) = self.distant_min_dist {
            c.distant_min_dist = d;
        }
        c.max_rejections = self.max_rejections;
        c
    }
}

/// A whole run. An empty file yields the published training setup at full
/// scale; only a data source has to be added.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every module seed.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; all cores when unset.
    pub workers: Option<usize>,
    pub corpus: CorpusConfig,
    pub sampler: SamplerSection,
    pub encoder: EncoderConfig,
    pub loss: TripletLossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub projection: ProjectionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("histotriplet-run"),
            workers: None,
            corpus: CorpusConfig::default(),
            sampler: SamplerSection::default(),
            encoder: EncoderConfig::default(),
            loss: TripletLossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            projection: ProjectionConfig::default(),
        }
    }
}

pub(super) fn issue(path: &str, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        path: path.into(),
        message: message.into(),
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl RunConfig {
    pub fn module_seed(&self, module: &str) -> u64 {
        derive_seed(self.seed, module)
    }

    /// Training settings with the derived seed. The section's own seed
    /// field is ignored, as are those of `eval` and `projection`.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.module_seed("train"),
            ..self.train
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.module_seed("eval"),
            ..self.eval.clone()
        }
    }

    pub fn projection_config(&self) -> ProjectionConfig {
        ProjectionConfig {
            seed: self.module_seed("projection"),
            ..self.projection.clone()
        }
    }

    /// Parses TOML text. Paths are taken relative to `base`.
    pub fn from_toml(text: &str, origin: &Path, base: &Path) -> Result<RunConfig> {
        let parse_err = |e: toml::de::Error| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                path: origin.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        };
        let table: toml::Table = toml::from_str(text).map_err(parse_err)?;
        let mut config: RunConfig = toml::from_str(text).map_err(parse_err)?;
        let mut issues = Vec::new();
        for section in SEEDED_SECTIONS {
            let explicit = table
                .get(section)
                .and_then(|v| v.as_table())
                .is_some_and(|t| t.contains_key("seed"));
            if explicit {
                issues.push(issue(
                    &format!("{section}.seed"),
                    "derived from the top-level seed; set that instead",
                ));
            }
        }
        config.resolve_paths(base);
        issues.extend(config.issues());
        if issues.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(issues))
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.out_dir);
        for p in [
            &mut self.corpus.labeled_root,
            &mut self.corpus.slide_manifest,
            &mut self.corpus.slide_root,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }

    /// Every violated invariant, with dotted paths.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if self.workers == Some(0) {
            out.push(issue("workers", "must be at least 1"));
        }
        if self.out_dir.as_os_str().is_empty() {
            out.push(issue("out_dir", "must not be empty"));
        }

        let c = &self.corpus;
        if c.labeled_root.is_some() && c.synthetic.is_some() {
            out.push(issue(
                "corpus.synthetic",
                "conflicts with corpus.labeled_root",
            ));
        }
        if let Some(s) = c.synthetic {
            if !(1..=8).contains(&s.classes) {
                out.push(issue(
                    "corpus.synthetic.classes",
                    format!("must be 1..=8, got {}", s.classes),
                ));
            }
            if s.per_class < 2 {
                out.push(issue("corpus.synthetic.per_class", "must be at least 2"));
            }
        }
        if c.slide_root.is_some() && c.slide_manifest.is_none() {
            out.push(issue(
                "corpus.slide_root",
                "set without corpus.slide_manifest",
            ));
        }
        let (src, tgt) = c.split;
        if !((0.0..=1.0).contains(&src)
            && (0.0..=1.0).contains(&tgt)
            && (src + tgt - 1.0).abs() < 1e-9)
        {
            out.push(issue(
                "corpus.split",
                format!("fractions {:?} must lie in [0, 1] and sum to 1", c.split),
            ));
        }
        if c.patch_size == 0 {
            out.push(issue("corpus.patch_size", "must be positive"));
        }
        if !positive(c.magnification) {
            out.push(issue("corpus.magnification", "must be positive"));
        }
        if c.stride == Some(0) {
            out.push(issue("corpus.stride", "must be positive"));
        }
        if !(0.0..=1.0).contains(&c.tissue_filter.min_saturation) {
            out.push(issue(
                "corpus.tissue_filter.min_saturation",
                "must lie in [0, 1]",
            ));
        }

        let s = &self.sampler;
        if s.triplets == 0 {
            out.push(issue("sampler.triplets", "must be positive"));
        }
        if s.max_rejections == 0 {
            out.push(issue("sampler.max_rejections", "must be positive"));
        }
        for (path, v) in [
            ("sampler.neighbor_max_dist", s.neighbor_max_dist),
            ("sampler.distant_min_dist", s.distant_min_dist),
        ] {
            if v.is_some_and(|v| !positive(v)) {
                out.push(issue(path, "must be positive"));
            }
        }
        if let (Some(n), Some(d)) = (s.neighbor_max_dist, s.distant_min_dist) {
            if n >= d {
                out.push(issue(
                    "sampler.distant_min_dist",
                    "must exceed sampler.neighbor_max_dist",
                ));
            }
        }
        let have_slides = c.slide_manifest.is_some();
        let types = s.types(have_slides);
        if types.iter().any(|t| t.is_spatial()) && types.iter().any(|t| !t.is_spatial()) {
            out.push(issue(
                "sampler.distant_types",
                "cannot mix spatial and label-driven types",
            ));
        } else if types.iter().any(|t| t.is_spatial()) && !have_slides {
            out.push(issue(
                "sampler.distant_types",
                "spatial types need corpus.slide_manifest",
            ));
        }

        let e = &self.encoder;
        if e.embedding_dim == 0 {
            out.push(issue("encoder.embedding_dim", "must be positive"));
        }
        let side = c.patch_size as usize;
        if e.input_shape != (side, side, 3) {
            out.push(issue(
                "encoder.input_shape",
                format!(
                    "{:?} does not match {side}×{side} RGB patches",
                    e.input_shape
                ),
            ));
        }

        if !(self.loss.margin.is_finite() && self.loss.margin >= 0.0) {
            out.push(issue(
                "loss.margin",
                format!("must be finite and non-negative, got {}", self.loss.margin),
            ));
        }

        let t = &self.train;
        if !positive(t.learning_rate) {
            out.push(issue(
                "train.learning_rate",
                format!("must be positive, got {}", t.learning_rate),
            ));
        }
        for (path, b) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(issue(path, format!("must lie in [0, 1), got {b}")));
            }
        }
        if t.batch_size == 0 {
            out.push(issue("train.batch_size", "must be positive"));
        }
        if t.epochs == 0 {
            out.push(issue("train.epochs", "must be positive"));
        }

        let ev = &self.eval;
        if ev.portions.is_empty() {
            out.push(issue("eval.portions", "must not be empty"));
        }
        for (i, &p) in ev.portions.iter().enumerate() {
            if !(p > 0.0 && p <= 1.0) {
                out.push(issue("eval.portions", format!("{p} lies outside (0, 1]")));
            } else if ev.portions[..i].contains(&p) {
                out.push(issue("eval.portions", format!("{p} is listed twice")));
            }
        }
        if ev.folds < 2 {
            out.push(issue("eval.folds", "must be at least 2"));
        }
        if ev.inner_folds < 2 {
            out.push(issue("eval.inner_folds", "must be at least 2"));
        }
        if let Err(err) = ev.grid.validate() {
            let message = match err {
                Error::Validation(m) => m,
                other => other.to_string(),
            };
            out.push(issue("eval.grid", message));
        }

        out.extend(self.projection.issues().into_iter().map(|i| ConfigIssue {
            path: format!("projection.{}", i.path),
            message: i.message,
        }));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    /// Normalized form, accepted back by [`RunConfig::from_toml`]. Section
    /// seeds are left out since they are derived.
    pub fn to_toml(&self) -> Result<String> {
        let fail = |e: &dyn std::fmt::Display| {
            Error::Validation(format!("config does not serialize: {e}"))
        };
        let mut table = toml::Table::try_from(self).map_err(|e| fail(&e))?;
        for section in SEEDED_SECTIONS {
            if let Some(t) = table.get_mut(section).and_then(|v| v.as_table_mut()) {
                t.remove("seed");
            }
        }
        toml::to_string(&table).map_err(|e| fail(&e))
    }
}

/// Reads, defaults and checks a run configuration file, reporting every
/// violation at once. Relative paths resolve against the file's directory.
pub fn validate_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).at(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    RunConfig::from_toml(&text, path, base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml(text, Path::new("run.toml"), Path::new("/base"))
    }

    fn issue_paths(text: &str) -> Vec<String> {
        match parse(text) {
            Err(Error::Config(issues)) => issues.into_iter().map(|i| i.path).collect(),
            other => panic!("expected config issues, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_fully_defaulted() {
        let c = parse("").unwrap();
        assert_eq!(c.loss.margin, 0.25);
        assert_eq!(c.train.learning_rate, 1e-5);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.encoder.embedding_dim, 128);
        assert_eq!(c.projection.n_neighbors, 40);
        assert_eq!(c.encoder.architecture, Architecture::Residual18);
        assert_eq!(c.sampler.triplets, 22_528);
        assert_eq!(c.eval.portions, vec![0.05, 0.10, 0.25, 0.50, 1.00]);
        assert_eq!(c.out_dir, Path::new("/base/histotriplet-run"));
        let mut expected = RunConfig::default();
        expected.out_dir = c.out_dir.clone();
        assert_eq!(c, expected);
    }

    #[test]
    fn negative_margin_points_at_loss_margin() {
        assert_eq!(issue_paths("[loss]\nmargin = -1.0\n"), vec!["loss.margin"]);
    }

    #[test]
    fn violations_are_reported_together() {
        let paths = issue_paths("[loss]\nmargin = -1.0\n[train]\nbatch_size = 0\n");
        assert_eq!(paths, vec!["loss.margin", "train.batch_size"]);
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        match parse("seed = 1\n[train]\nepochs = \"many\"\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse("[loss]\nmargn = 1.0\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn module_seeds_follow_the_global_seed() {
        let a = parse("seed = 7\n").unwrap();
        assert_eq!(a.train_config().seed, derive_seed(7, "train"));
        assert_eq!(a.eval_config().seed, derive_seed(7, "eval"));
        assert_eq!(a.projection_config().seed, derive_seed(7, "projection"));
        assert_ne!(
            a.train_config().seed,
            parse("seed = 8\n").unwrap().train_config().seed
        );
        assert_eq!(issue_paths("[eval]\nseed = 3\n"), vec!["eval.seed"]);
    }

    #[test]
    fn spatial_types_need_slides() {
        assert_eq!(
            issue_paths("[sampler]\ndistant_types = [\"other_organ\"]\n"),
            vec!["sampler.distant_types"]
        );
        let c = parse("[corpus]\nslide_manifest = \"slides.jsonl\"\n").unwrap();
        assert_eq!(c.sampler.types(true), DistantType::SPATIAL.to_vec());
        assert_eq!(
            c.corpus.slide_manifest.unwrap(),
            Path::new("/base/slides.jsonl")
        );
    }

    #[test]
    fn toml_round_trip() {
        let c = parse("seed = 3\n[corpus]\nsynthetic = { classes = 3, per_class = 10 }\n").unwrap();
        let back = parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
