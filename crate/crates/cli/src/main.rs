use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use histotriplet::corpus::TissueFilter;
use histotriplet::embedding::{EmbeddingMatrix, LabelRecord};
use histotriplet::error::Error;
use histotriplet::eval::build_report;
use histotriplet::jsonl;
use histotriplet::pipeline::{
    embed_target, run_pipeline, sample_triplets_seeded, train_model, validate_config,
    PreparedCorpus, RunConfig, Stage, MANIFEST_FILE,
};
use histotriplet::projector::plot_embeddings;
use histotriplet::sampler::{read_triplets, write_triplets, DistantType};
use histotriplet::train::TrainMode;

#[derive(Parser)]
#[command(
    name = "histotriplet",
    version,
    about = "Triplet-network embeddings for histopathology patches"
)]
struct Cli {
    /// Worker threads (all cores by default).
    #[arg(long, global = true, env = "HISTOTRIPLET_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tile slides and/or index a labeled patch set.
    Ingest(IngestArgs),
    /// Generate a triplet manifest.
    Sample(SampleArgs),
    /// Train an encoder.
    Train(TrainArgs),
    /// Embed a labeled split with a trained encoder.
    Embed(EmbedArgs),
    /// Few-shot SVM evaluation of one or more embedding files.
    Eval(EvalArgs),
    /// 2-D projection scatter plot of an embedding file.
    Plot(PlotArgs),
    /// Run the whole pipeline, or selected stages, from a config file.
    Run(RunArgs),
    /// Check a config file and print it with defaults filled in.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Slide manifest, one JSON object per line.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory slide paths resolve against; the manifest's by default.
    #[arg(long)]
    slide_root: Option<PathBuf>,
    /// Labeled patch root with one directory per class.
    #[arg(long)]
    labeled: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    patch_size: u32,
    #[arg(long, default_value_t = 20.0)]
    magnification: f64,
    /// Grid stride in target-magnification pixels; the patch size by default.
    #[arg(long)]
    stride: Option<u32>,
    #[arg(long)]
    no_tissue_filter: bool,
    /// Source fraction of the labeled split.
    #[arg(long, default_value_t = 0.6)]
    source_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Distant type (1-4 or "labeled"); repeatable.
    #[arg(long = "type", value_parser = parse_distant_type)]
    types: Vec<DistantType>,
    /// Total triplets, spread evenly over the types.
    #[arg(long)]
    count: Option<usize>,
    /// Sampler seed, instead of the one derived from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Triplet,
    Xent,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "triplet")]
    mode: ModeArg,
    /// Triplet manifest (triplet mode).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Source,
    Target,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "target")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Embedding files; each becomes one table row named after its stem.
    #[arg(long, num_args = 1.., required = true)]
    embeddings: Vec<PathBuf>,
    /// Label file (`item_id`, `label` per line); the embedding sidecar by default.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Portions in percent.
    #[arg(long, value_delimiter = ',', default_value = "5,10,25,50,100")]
    portions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fold counts and SVM grid from the `[eval]` section of a run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV report; the table goes to stdout and JSON next to the CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    n_neighbors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    min_dist: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Stages to run; all by default.
    #[arg(long, value_delimiter = ',')]
    stages: Vec<Stage>,
    /// Overrides `out_dir` from the config.
    #[arg(long, env = "HISTOTRIPLET_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

fn parse_distant_type(s: &str) -> Result<DistantType, String> {
    s.parse()
}

fn load_config(path: &Path) -> Result<RunConfig> {
    validate_config(path).map_err(|e| config_error(path, e))
}

fn config_error(path: &Path, e: Error) -> anyhow::Error {
    match e {
        Error::Config(issues) => {
            let lines: Vec<String> = issues.iter().map(|i| format!("  {i}")).collect();
            anyhow::anyhow!("{} is invalid:\n{}", path.display(), lines.join("\n"))
        }
        other => other.into(),
    }
}

/// Replaces the labels of `m` with those in `path`, which must list the same
/// items in the same order.
fn relabel(m: EmbeddingMatrix, path: &Path) -> Result<EmbeddingMatrix> {
    let records: Vec<LabelRecord> = jsonl::read(path)?;
    if records.len() != m.len()
        || records
            .iter()
            .zip(&m.item_ids)
            .any(|(r, id)| &r.item_id != id)
    {
        bail!(
            "{} does not list the embedded items in order",
            path.display()
        );
    }
    let labels = records.into_iter().map(|r| r.label).collect();
    Ok(EmbeddingMatrix::new(m.values, m.item_ids, labels)?)
}

fn read_embeddings(path: &Path, labels: Option<&Path>) -> Result<EmbeddingMatrix> {
    let m = EmbeddingMatrix::read(path).with_context(|| format!("reading {}", path.display()))?;
    match labels {
        Some(l) => relabel(m, l),
        None => Ok(m),
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    if a.manifest.is_none() && a.labeled.is_none() {
        bail!("nothing to ingest: pass --manifest and/or --labeled");
    }
    let mut config = RunConfig {
        seed: a.seed,
        ..Default::default()
    };
    let c = &mut config.corpus;
    c.slide_manifest = a.manifest;
    c.slide_root = a.slide_root;
    c.labeled_root = a.labeled;
    c.patch_size = a.patch_size;
    c.magnification = a.magnification;
    c.stride = a.stride;
    c.split = (a.source_fraction, 1.0 - a.source_fraction);
    if a.no_tissue_filter {
        c.tissue_filter = TissueFilter::DISABLED;
    }
    config.encoder.input_shape = (a.patch_size as usize, a.patch_size as usize, 3);
    config
        .validate()
        .map_err(|e| config_error(Path::new("arguments"), e))?;
    let corpus = PreparedCorpus::prepare(&config)?;
    corpus.write(&a.out)?;
    if let Some(s) = &corpus.slides {
        println!("{} slides, {} tiles", s.slides.len(), s.tile_count());
    }
    if let Some(split) = &corpus.split {
        println!(
            "{} source / {} target items",
            split.source_ids.len(),
            split.target_ids.len()
        );
    }
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let mut config = load_config(&a.config)?;
    if !a.types.is_empty() {
        config.sampler.distant_types = a.types;
    }
    if let Some(n) = a.count {
        config.sampler.triplets = n;
    }
    config.validate().map_err(|e| config_error(&a.config, e))?;
    let corpus = PreparedCorpus::prepare(&config)?;
    let seed = a.seed.unwrap_or_else(|| config.module_seed("sampler"));
    let triplets = sample_triplets_seeded(&config, &corpus, seed)?;
    write_triplets(&a.out, &triplets)?;
    println!("{} triplets written to {}", triplets.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = load_config(&a.config)?;
    config.train.mode = match a.mode {
        ModeArg::Triplet => TrainMode::Triplet,
        ModeArg::Xent => TrainMode::CrossEntropy,
    };
    let triplets = match (config.train.mode, &a.manifest) {
        (TrainMode::Triplet, Some(m)) => Some(read_triplets(m)?),
        (TrainMode::Triplet, None) => bail!("--mode triplet needs --manifest"),
        _ => None,
    };
    let corpus = PreparedCorpus::prepare(&config)?;
    let log = train_model(&config, &corpus, triplets.as_deref(), &a.out)?;
    if let (Some(first), Some(last)) = (log.epochs.first(), log.epochs.last()) {
        println!(
            "{} epochs, mean loss {:.5} -> {:.5}; checkpoint in {}",
            log.epochs.len(),
            first.mean_loss,
            last.mean_loss,
            a.out.display()
        );
    }
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let corpus = PreparedCorpus::prepare(&config)?;
    let m = match a.split {
        SplitArg::Target => embed_target(&config, &corpus, &a.checkpoint)?,
        SplitArg::Source => {
            let (encoder, _) = histotriplet::nn::load_checkpoint(&a.checkpoint)?;
            histotriplet::embedding::extract_embeddings(
                &corpus.source_set("embed")?,
                &encoder,
                config.train.batch_size,
            )?
        }
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    m.write(&a.out)?;
    println!(
        "{}×{} embeddings written to {}",
        m.len(),
        m.dim(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut eval = match &a.config {
        Some(p) => load_config(p)?.eval,
        None => Default::default(),
    };
    eval.portions = a.portions.iter().map(|p| p / 100.0).collect();
    eval.seed = a.seed;
    let mut models = Vec::new();
    for path in &a.embeddings {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model")
            .to_string();
        models.push((name, read_embeddings(path, a.labels.as_deref())?));
    }
    let report = build_report(&models, &eval)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, report.to_csv())?;
    std::fs::write(
        a.out.with_extension("json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    print!("{}", report.to_table());
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let m = read_embeddings(&a.embeddings, a.labels.as_deref())?;
    let mut config = histotriplet::projector::ProjectionConfig {
        n_neighbors: a.n_neighbors,
        seed: a.seed,
        ..Default::default()
    };
    if let Some(d) = a.min_dist {
        config.min_dist = d;
    }
    let files = plot_embeddings(&m, &config, &a.out)?;
    println!(
        "wrote {}, {} and {}",
        files.scatter.image.display(),
        files.scatter.coordinates.display(),
        files.metadata.display()
    );
    Ok(())
}

fn run(a: RunArgs, workers: Option<usize>) -> Result<()> {
    let mut config = load_config(&a.config)?;
    if let Some(dir) = a.out_dir {
        config.out_dir = dir;
    }
    if workers.is_some() {
        config.workers = workers;
    }
    let stages = if a.stages.is_empty() {
        Stage::ALL.to_vec()
    } else {
        a.stages
    };
    let outcome = run_pipeline(&config, &stages).map_err(|e| config_error(&a.config, e))?;
    for s in &outcome.executed {
        println!("ran      {s}");
    }
    for s in &outcome.skipped {
        println!("current  {s}");
    }
    for s in &outcome.invalidated {
        println!("removed  {} (built from an older input)", s.artifact());
    }
    println!("manifest {}", config.out_dir.join(MANIFEST_FILE).display());
    if outcome.executed.contains(&Stage::Eval) || outcome.skipped.contains(&Stage::Eval) {
        let table = config
            .out_dir
            .join(Stage::Eval.artifact())
            .join("report.txt");
        print!("{}", std::fs::read_to_string(table)?);
    }
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<ExitCode> {
    match validate_config(&a.config) {
        Ok(config) => {
            print!("{}", config.to_toml()?);
            Ok(ExitCode::SUCCESS)
        }
        Err(Error::Config(issues)) => {
            for i in issues {
                eprintln!("{}: {}", i.path, i.message);
            }
            Ok(ExitCode::from(2))
        }
        Err(e) => Err(e.into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Ingest(a) => ingest(a).map(|_| ExitCode::SUCCESS),
        Command::Sample(a) => sample(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => train(a).map(|_| ExitCode::SUCCESS),
        Command::Embed(a) => embed(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval(a).map(|_| ExitCode::SUCCESS),
        Command::Plot(a) => plot(a).map(|_| ExitCode::SUCCESS),
        Command::Run(a) => run(a, cli.workers).map(|_| ExitCode::SUCCESS),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
