//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS / FAIL line per criterion; exits non-zero on an unexpected
//! failure.
//!
//! `cargo test --test acceptance -- 3 6` runs a subset. The paper-scale
//! criterion runs only when `HISTOTRIPLET_CRC_ROOT` points at a labeled
//! patch directory.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use histotriplet::corpus::{
    grid_tile_slide, split_source_target, LabeledPatch, LabeledPatchSet, Provenance, SlideCorpus,
    SlideRecord, TissueClass,
};
use histotriplet::embedding::extract_embeddings;
use histotriplet::eval::{
    build_report, confidence_interval, stratified_folds, stratified_portion, EvalConfig, EvalReport,
};
use histotriplet::nn::{
    cross_entropy_grad, triplet_loss, triplet_loss_grad, Encoder, EncoderConfig, Reduction, Tensor,
    TripletLossConfig,
};
use histotriplet::pipeline::{run_pipeline, RunConfig, Stage};
use histotriplet::projector::{project_2d, ProjectionConfig};
use histotriplet::sampler::{
    generate_manifest, validate_triplet, write_triplets, DistantType, LabeledSampler,
    ManifestSource, SamplerConfig, Triplet, TripletMetadata,
};
use histotriplet::seed::{derive_seed, rng, Rng};
use histotriplet::synthetic::{gaussian_clusters, grating_dataset, synthetic_slides, GratingNoise};
use histotriplet::train::{
    train_triplet, triplet_accuracy, LabeledSource, TrainConfig, TrainMode, TrainOptions,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    budget: Option<Duration>,
    run: fn() -> Vec<Outcome>,
    /// Failure is expected and analysed; it is reported but does not fail
    /// the suite.
    known_unattainable: Option<&'static str>,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        id: "1",
        title: "triplet loss matches a brute-force oracle",
        budget: Some(Duration::from_secs(10)),
        run: loss_oracle,
        known_unattainable: None,
    },
    Criterion {
        id: "2",
        title: "analytic gradients match central differences",
        budget: Some(Duration::from_secs(30)),
        run: gradient_check,
        known_unattainable: None,
    },
    Criterion {
        id: "3",
        title: "10,000 sampled triplets are valid for every distant type",
        budget: Some(Duration::from_secs(60)),
        run: sampler_soundness,
        known_unattainable: None,
    },
    Criterion {
        id: "4",
        title: "manifests, portions, folds and reports are byte-identical across runs",
        budget: None,
        run: determinism,
        known_unattainable: None,
    },
    Criterion {
        id: "5",
        title: "portion and split arithmetic on 8×250",
        budget: None,
        run: split_arithmetic,
        known_unattainable: None,
    },
    Criterion {
        id: "6",
        title: "synthetic grating end-to-end run (3-seed median)",
        budget: Some(Duration::from_secs(600)),
        run: synthetic_end_to_end,
        known_unattainable: None,
    },
    Criterion {
        id: "7",
        title: "evaluation harness on ideal 8-cluster embeddings",
        budget: Some(Duration::from_secs(300)),
        run: eval_oracle,
        known_unattainable: None,
    },
    Criterion {
        id: "8",
        title: "confidence interval: hand example and coverage",
        budget: None,
        run: ci_formula,
        known_unattainable: Some(
            "1.96·s/√k with s from 10 folds covers at P(|t₉| < 1.96) ≈ 91.8%, below the 93–97% band",
        ),
    },
    Criterion {
        id: "9",
        title: "projection keeps 3 Gaussian clusters apart",
        budget: None,
        run: projection_sanity,
        known_unattainable: None,
    },
    Criterion {
        id: "10",
        title: "paper-scale CRC run (optional)",
        budget: None,
        run: paper_scale,
        known_unattainable: None,
    },
];

fn main() {
    let selected: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut unexpected = 0;
    let start = Instant::now();
    for c in CRITERIA {
        if !selected.is_empty() && !selected.iter().any(|s| s == c.id) {
            continue;
        }
        if c.id == "10" && std::env::var_os("HISTOTRIPLET_CRC_ROOT").is_none() {
            println!(
                "SKIP criterion 10: {} (set HISTOTRIPLET_CRC_ROOT to run)",
                c.title
            );
            continue;
        }
        let t = Instant::now();
        let outcomes = (c.run)();
        let elapsed = t.elapsed();
        let mut pass = outcomes.iter().all(|o| o.pass);
        let mut details: Vec<String> = outcomes
            .iter()
            .map(|o| format!("{}{}", if o.pass { "" } else { "✗ " }, o.detail))
            .collect();
        if let Some(budget) = c.budget {
            let within = elapsed <= budget;
            pass &= within;
            details.push(format!(
                "{}{:.1}s of {}s",
                if within { "" } else { "✗ " },
                elapsed.as_secs_f64(),
                budget.as_secs()
            ));
        } else {
            details.push(format!("{:.1}s", elapsed.as_secs_f64()));
        }
        let status = match (pass, c.known_unattainable) {
            (true, _) => "PASS",
            (false, Some(_)) => "FAIL (known)",
            (false, None) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!(
            "{status} criterion {}: {} [{}]",
            c.id,
            c.title,
            details.join("; ")
        );
        if let (false, Some(why)) = (pass, c.known_unattainable) {
            println!("     {why}");
        }
    }
    println!(
        "acceptance finished in {:.1}s",
        start.elapsed().as_secs_f64()
    );
    if unexpected > 0 {
        std::process::exit(1);
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn normal_matrix(r: &mut Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * r.sample::<f64, _>(StandardNormal))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// 1 ---------------------------------------------------------------------

fn brute_force_terms(
    a: ArrayView2<f64>,
    n: ArrayView2<f64>,
    d: ArrayView2<f64>,
    margin: f64,
) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..a.nrows() {
        let mut dan = 0.0;
        let mut dad = 0.0;
        for k in 0..a.ncols() {
            dan += (a[[i, k]] - n[[i, k]]) * (a[[i, k]] - n[[i, k]]);
            dad += (a[[i, k]] - d[[i, k]]) * (a[[i, k]] - d[[i, k]]);
        }
        let z = dan - dad + margin;
        out.push(if z > 0.0 { z } else { 0.0 });
    }
    out
}

fn loss_oracle() -> Vec<Outcome> {
    let mut r = rng(1);
    let (mut mismatches, mut zero_cases, mut nonzero_zero) = (0, 0, 0);
    for batch in 0..1000 {
        let b = r.random_range(1..=32);
        let dim = r.random_range(1..=16);
        let a = normal_matrix(&mut r, b, dim, 1.0);
        let n = &a + &normal_matrix(&mut r, b, dim, 0.3);
        let mut d = normal_matrix(&mut r, b, dim, 1.0);
        // Push some distants far away so their hinge is inactive.
        for i in 0..b {
            if r.random_bool(0.3) {
                d.row_mut(i).mapv_inplace(|v| v + 10.0);
            }
        }
        let margin = r.random_range(0.0..1.0);
        let reduction = if batch % 2 == 0 {
            Reduction::Sum
        } else {
            Reduction::Mean
        };
        let config = TripletLossConfig { margin, reduction };
        let got = triplet_loss(a.view(), n.view(), d.view(), &config).unwrap();
        let want = brute_force_terms(a.view(), n.view(), d.view(), margin);
        let sum: f64 = want.iter().sum();
        let value = match reduction {
            Reduction::Sum => sum,
            Reduction::Mean => sum / b as f64,
        };
        if !close(got.value, value, 1e-6) {
            mismatches += 1;
        }
        for (g, w) in got.terms.iter().zip(&want) {
            if !close(*g, *w, 1e-6) {
                mismatches += 1;
            }
            if *w == 0.0 {
                zero_cases += 1;
                if *g != 0.0 {
                    nonzero_zero += 1;
                }
            }
        }
    }
    vec![
        Outcome::new(
            mismatches == 0,
            format!("{mismatches} mismatches over 1000 batches"),
        ),
        Outcome::new(
            zero_cases > 0 && nonzero_zero == 0,
            format!("{zero_cases} hinge-zero terms, {nonzero_zero} not exactly 0"),
        ),
    ]
}

// 2 ---------------------------------------------------------------------

fn rel_err(numeric: f64, analytic: f64, floor: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(floor)
}

fn triplet_gradient_points(r: &mut Rng) -> (usize, f64) {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut points = 0;
    while points < 100 {
        let b = r.random_range(1..=6);
        let dim = r.random_range(1..=8);
        let margin = r.random_range(0.0..1.0);
        let a = normal_matrix(r, b, dim, 1.0);
        let n = &a + &normal_matrix(r, b, dim, 0.5);
        let d = normal_matrix(r, b, dim, 1.0);
        let terms_z: Vec<f64> = (0..b)
            .map(|i| {
                let dan: f64 = (&a.row(i) - &n.row(i)).mapv(|v| v * v).sum();
                let dad: f64 = (&a.row(i) - &d.row(i)).mapv(|v| v * v).sum();
                dan - dad + margin
            })
            .collect();
        if terms_z.iter().any(|z| z.abs() < 1e-3) {
            continue;
        }
        let reduction = if points % 2 == 0 {
            Reduction::Sum
        } else {
            Reduction::Mean
        };
        let config = TripletLossConfig { margin, reduction };
        let (_, grads) = triplet_loss_grad(a.view(), n.view(), d.view(), &config).unwrap();
        let f = |a: &Array2<f64>, n: &Array2<f64>, d: &Array2<f64>| {
            triplet_loss(a.view(), n.view(), d.view(), &config)
                .unwrap()
                .value
        };
        for which in 0..3 {
            for i in 0..b {
                for k in 0..dim {
                    let (mut p, mut m) = (
                        [a.clone(), n.clone(), d.clone()],
                        [a.clone(), n.clone(), d.clone()],
                    );
                    p[which][[i, k]] += h;
                    m[which][[i, k]] -= h;
                    let num = (f(&p[0], &p[1], &p[2]) - f(&m[0], &m[1], &m[2])) / (2.0 * h);
                    let ana = [&grads.anchor, &grads.neighbor, &grads.distant][which][[i, k]];
                    worst = worst.max(rel_err(num, ana, 1e-6));
                }
            }
        }
        points += 1;
    }
    (points, worst)
}

/// The head is linear in its parameters given the body's features, so the
/// analytic gradient is `∂CE/∂logits` pushed through the head by hand. The
/// network runs in f32; a Richardson-extrapolated step keeps truncation error
/// well below that rounding.
fn head_gradient_points(r: &mut Rng) -> (usize, f64) {
    let config = EncoderConfig {
        input_shape: (16, 16, 3),
        embedding_dim: 8,
        ..EncoderConfig::small_conv()
    };
    let mut worst: f64 = 0.0;
    let mut points = 0;
    let mut net = 0;
    while points < 100 {
        let mut enc = Encoder::with_classifier(config.clone(), net).unwrap();
        net += 1;
        let batch = 4;
        let data: Vec<f32> = (0..batch * 3 * 16 * 16)
            .map(|_| r.random_range(0.0..1.0))
            .collect();
        let x = Tensor::from_vec([batch, 3, 16, 16], data);
        let labels: Vec<TissueClass> = (0..batch)
            .map(|_| TissueClass::from_index(r.random_range(0..8)).unwrap())
            .collect();
        let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        let feats = enc.embed_batch(&x).unwrap().mapv(f64::from);
        let logits = enc.logits(&x).unwrap().mapv(f64::from);
        let (_, g) = cross_entropy_grad(logits.view(), &idx).unwrap();
        let grad_w = g.t().dot(&feats);
        let grad_b = g.sum_axis(ndarray::Axis(0));

        let np = enc.store().params.len();
        for _ in 0..10 {
            let (param, coord, ana) = if r.random_bool(0.8) {
                let j = r.random_range(0..8);
                let k = r.random_range(0..config.embedding_dim);
                (np - 2, j * config.embedding_dim + k, grad_w[[j, k]])
            } else {
                let j = r.random_range(0..8);
                (np - 1, j, grad_b[j])
            };
            let base = enc.store().params[param].value[coord];
            let mut eval_at = |delta: f32| {
                enc.store_mut().params[param].value[coord] = base + delta;
                let v = enc.cross_entropy_head(&x, &labels).unwrap();
                enc.store_mut().params[param].value[coord] = base;
                v
            };
            let central =
                |h: f32, e: &mut dyn FnMut(f32) -> f64| (e(h) - e(-h)) / (2.0 * f64::from(h));
            let d1 = central(0.05, &mut eval_at);
            let d2 = central(0.025, &mut eval_at);
            let num = (4.0 * d2 - d1) / 3.0;
            worst = worst.max(rel_err(num, ana, 1e-2));
            points += 1;
        }
    }
    (points, worst)
}

fn gradient_check() -> Vec<Outcome> {
    let mut r = rng(2);
    let (tp, tw) = triplet_gradient_points(&mut r);
    let (hp, hw) = head_gradient_points(&mut r);
    vec![
        Outcome::new(
            tw < 1e-3,
            format!("triplet_loss: {tp} points, max rel err {tw:.2e}"),
        ),
        Outcome::new(
            hw < 1e-3,
            format!("cross_entropy_head: {hp} points, max rel err {hw:.2e}"),
        ),
    ]
}

// 3 ---------------------------------------------------------------------

fn slide_fixture(seed: u64) -> SlideCorpus {
    let (slides, _) = synthetic_slides(2, 1536, seed);
    let tiles = slides
        .iter()
        .map(|s| grid_tile_slide(s, 128, 20.0, 128).unwrap())
        .collect();
    SlideCorpus::new(slides, tiles).unwrap()
}

fn label_fixture(per_class: usize) -> (Vec<String>, Vec<TissueClass>) {
    TissueClass::ALL
        .iter()
        .flat_map(|&c| (0..per_class).map(move |i| (format!("{}/{i:04}", c.as_str()), c)))
        .unzip()
}

fn sample_all_types(
    slides: &SlideCorpus,
    per_type: usize,
    seed: u64,
) -> (Vec<Triplet>, Vec<Triplet>, SamplerConfig) {
    let spatial: Vec<_> = DistantType::ALL
        .into_iter()
        .filter(|t| t.is_spatial())
        .collect();
    let config =
        SamplerConfig::for_footprint(128, seed).with_counts(spatial.iter().map(|&t| (t, per_type)));
    let spatial_triplets = generate_manifest(ManifestSource::Slides(slides), &config).unwrap();
    let (ids, labels) = label_fixture(50);
    let sampler = LabeledSampler::from_labels(ids, labels);
    let lconfig = SamplerConfig::for_footprint(128, seed)
        .with_counts([(DistantType::DifferentClassLabel, per_type)]);
    let labeled = generate_manifest(ManifestSource::Labeled(&sampler), &lconfig).unwrap();
    (spatial_triplets, labeled, config)
}

fn direct_check(
    t: &Triplet,
    slides: &HashMap<&str, &SlideRecord>,
    labels: &HashMap<String, TissueClass>,
    config: &SamplerConfig,
) -> bool {
    if t.distant_type == DistantType::DifferentClassLabel {
        let (Some(a), Some(n), Some(d)) = (
            t.anchor.as_item(),
            t.neighbor.as_item(),
            t.distant.as_item(),
        ) else {
            return false;
        };
        return a != n && a != d && n != d && labels[a] == labels[n] && labels[a] != labels[d];
    }
    let (Some(a), Some(n), Some(d)) = (
        t.anchor.as_tile(),
        t.neighbor.as_tile(),
        t.distant.as_tile(),
    ) else {
        return false;
    };
    let dist = |p: &histotriplet::corpus::TileRef, q: &histotriplet::corpus::TileRef| {
        let dx = f64::from(p.center_x) - f64::from(q.center_x);
        let dy = f64::from(p.center_y) - f64::from(q.center_y);
        (dx * dx + dy * dy).sqrt()
    };
    let neighbor_ok = a.slide_id == n.slide_id
        && (a.center_x, a.center_y) != (n.center_x, n.center_y)
        && dist(a, n) <= config.neighbor_max_dist;
    let (sa, sd) = (slides[a.slide_id.as_str()], slides[d.slide_id.as_str()]);
    let distant_ok = match t.distant_type {
        DistantType::SameSlideRemote => {
            a.slide_id == d.slide_id && dist(a, d) >= config.distant_min_dist
        }
        DistantType::SameSubtypeOtherSlide => {
            sa.slide_id != sd.slide_id && sa.subtype == sd.subtype
        }
        DistantType::SameOrganOtherSubtype => {
            sa.organ_site == sd.organ_site && sa.subtype != sd.subtype
        }
        DistantType::OtherOrgan => sa.organ_site != sd.organ_site,
        DistantType::DifferentClassLabel => unreachable!(),
    };
    neighbor_ok && distant_ok
}

fn sampler_soundness() -> Vec<Outcome> {
    let corpus = slide_fixture(3);
    let (spatial, labeled, config) = sample_all_types(&corpus, 2000, 3);
    let slide_meta = TripletMetadata::from_slides(&corpus.slides);
    let (ids, classes) = label_fixture(50);
    let label_meta =
        TripletMetadata::from_labels(ids.iter().map(String::as_str).zip(classes.iter().copied()));
    let label_map: HashMap<String, TissueClass> =
        ids.iter().cloned().zip(classes.iter().copied()).collect();
    let slide_map: HashMap<&str, &SlideRecord> = corpus
        .slides
        .iter()
        .map(|s| (s.slide_id.as_str(), s))
        .collect();

    let mut per_type: BTreeMap<DistantType, (usize, usize, usize)> = BTreeMap::new();
    for t in spatial.iter().chain(&labeled) {
        let meta = if t.distant_type.is_spatial() {
            &slide_meta
        } else {
            &label_meta
        };
        let e = per_type.entry(t.distant_type).or_default();
        e.0 += 1;
        e.1 += usize::from(validate_triplet(t, meta, &config).unwrap().valid);
        e.2 += usize::from(direct_check(t, &slide_map, &label_map, &config));
    }
    let total = spatial.len() + labeled.len();
    let mut out = vec![Outcome::new(
        total == 10_000 && per_type.len() == 5,
        format!("{total} triplets over {} types", per_type.len()),
    )];
    for (ty, (n, valid, direct)) in per_type {
        out.push(Outcome::new(
            n == valid && n == direct,
            format!("{ty:?}: {valid}/{n} validator, {direct}/{n} direct"),
        ));
    }
    out
}

// 4 ---------------------------------------------------------------------

fn manifest_bytes(triplets: &[Triplet]) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    write_triplets(&path, triplets).unwrap();
    std::fs::read(path).unwrap()
}

fn small_report(seed: u64) -> (String, String) {
    let m = gaussian_clusters(8, 20, 8, 4.0, seed);
    let config = EvalConfig {
        portions: vec![0.25, 1.0],
        seed,
        ..Default::default()
    };
    let report = build_report(&[("ideal".into(), m)], &config).unwrap();
    (serde_json::to_string(&report).unwrap(), report.to_csv())
}

fn determinism() -> Vec<Outcome> {
    let corpus = slide_fixture(4);
    let run = |seed| {
        let (s, l, _) = sample_all_types(&corpus, 100, seed);
        (manifest_bytes(&s), manifest_bytes(&l))
    };
    let (first, second, other) = (run(11), run(11), run(12));
    let (_, labels) = label_fixture(250);
    let portions = |seed| stratified_portion(&labels, 0.05, seed).unwrap();
    let folds = |seed| stratified_folds(&labels, 10, seed).unwrap();
    vec![
        Outcome::new(
            first == second && first != other,
            format!("manifests {} + {} bytes", first.0.len(), first.1.len()),
        ),
        Outcome::new(
            portions(5) == portions(5) && portions(5) != portions(6),
            "portions",
        ),
        Outcome::new(folds(5) == folds(5) && folds(5) != folds(6), "folds"),
        Outcome::new(small_report(7) == small_report(7), "reports (JSON and CSV)"),
    ]
}

// 5 ---------------------------------------------------------------------

fn split_arithmetic() -> Vec<Outcome> {
    let (ids, labels) = label_fixture(250);
    let mut portion_ok = true;
    for seed in 0..20 {
        let picked = stratified_portion(&labels, 0.05, seed).unwrap();
        let mut counts = [0usize; 8];
        for &i in &picked {
            counts[labels[i].index()] += 1;
        }
        let thirteens = counts.iter().filter(|&&c| c == 13).count();
        portion_ok &=
            picked.len() == 100 && counts.iter().all(|&c| c == 12 || c == 13) && thirteens == 4;
    }

    let pixel = image::RgbImage::new(1, 1);
    let items = ids
        .iter()
        .zip(&labels)
        .map(|(id, &label)| LabeledPatch {
            image: pixel.clone(),
            label,
            item_id: id.clone(),
        })
        .collect();
    let set = LabeledPatchSet::new(items, Provenance::default()).unwrap();
    let mut split_ok = true;
    for seed in 0..5 {
        let split = split_source_target(&set, (0.6, 0.4), seed).unwrap();
        let class_of: HashMap<&str, TissueClass> = ids
            .iter()
            .map(String::as_str)
            .zip(labels.iter().copied())
            .collect();
        let count = |ids: &[String]| {
            let mut c = [0usize; 8];
            for id in ids {
                c[class_of[id.as_str()].index()] += 1;
            }
            c
        };
        let mut all: Vec<&String> = split.source_ids.iter().chain(&split.target_ids).collect();
        all.sort();
        all.dedup();
        split_ok &= count(&split.source_ids) == [150; 8]
            && count(&split.target_ids) == [100; 8]
            && all.len() == 2000;
    }
    vec![
        Outcome::new(
            portion_ok,
            "5% portion: 100 items, four classes at 13 and four at 12 (20 seeds)",
        ),
        Outcome::new(
            split_ok,
            "60/40 split: 150/100 per class, disjoint and covering (5 seeds)",
        ),
    ]
}

// 6 ---------------------------------------------------------------------

struct SmokeRun {
    first_loss: f64,
    last_loss: f64,
    satisfaction: Vec<f64>,
    held_out: f64,
    svm_10: f64,
}

fn smoke_run(seed: u64) -> SmokeRun {
    let set = grating_dataset(3, 200, &GratingNoise::default(), seed);
    let split = split_source_target(&set, (0.6, 0.4), seed).unwrap();
    let source = set.subset(&split.source_ids, "source").unwrap();
    let target = set.subset(&split.target_ids, "target").unwrap();
    let sample = |data: &LabeledPatchSet, name: &str, n: usize| {
        let config = SamplerConfig::for_footprint(128, derive_seed(seed, name))
            .with_counts([(DistantType::DifferentClassLabel, n)]);
        generate_manifest(ManifestSource::Labeled(&LabeledSampler::new(data)), &config).unwrap()
    };
    let train = sample(&source, "train", 256);
    let held = sample(&target, "held-out", 256);
    let config = TrainConfig {
        epochs: 20,
        learning_rate: 1e-3,
        seed,
        ..Default::default()
    };
    let encoder = Encoder::new(EncoderConfig::small_conv(), seed).unwrap();
    let (encoder, log) = train_triplet(
        encoder,
        &train,
        &LabeledSource::new(&source),
        &config,
        &TripletLossConfig::default(),
        &TrainOptions::default(),
    )
    .unwrap();
    let held_out = triplet_accuracy(&encoder, &held, &LabeledSource::new(&target), 32).unwrap();
    let embeddings = extract_embeddings(&target, &encoder, 32).unwrap();
    let eval = EvalConfig {
        portions: vec![0.10],
        seed,
        ..Default::default()
    };
    let report = build_report(&[("triplet".into(), embeddings)], &eval).unwrap();
    SmokeRun {
        first_loss: log.epochs[0].mean_loss,
        last_loss: log.epochs.last().unwrap().mean_loss,
        satisfaction: log
            .epochs
            .iter()
            .map(|e| e.satisfaction_rate.unwrap())
            .collect(),
        held_out,
        svm_10: report.cells[0].mean_accuracy,
    }
}

fn synthetic_end_to_end() -> Vec<Outcome> {
    let runs: Vec<SmokeRun> = (0..3).map(smoke_run).collect();
    let first = median(runs.iter().map(|r| r.first_loss).collect());
    let last = median(runs.iter().map(|r| r.last_loss).collect());
    let held = median(runs.iter().map(|r| r.held_out).collect());
    let svm = median(runs.iter().map(|r| r.svm_10).collect());
    let sat: Vec<f64> = (0..5)
        .map(|e| median(runs.iter().map(|r| r.satisfaction[e]).collect()))
        .collect();
    let sat_ok = sat.windows(2).all(|w| w[1] >= w[0]);
    vec![
        Outcome::new(
            last < first,
            format!("(a) mean loss {first:.4} -> {last:.4}"),
        ),
        Outcome::new(
            held >= 0.95,
            format!("(b) held-out triplets satisfied {:.1}%", 100.0 * held),
        ),
        Outcome::new(svm >= 90.0, format!("(c) SVM at 10%: {svm:.2}%")),
        Outcome::new(
            sat_ok,
            format!(
                "satisfaction over epochs 1-5 [{}]",
                sat.iter()
                    .map(|s| format!("{s:.3}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        ),
    ]
}

// 7 ---------------------------------------------------------------------

fn eval_oracle() -> Vec<Outcome> {
    let mut worst: f64 = 100.0;
    let (mut ci_5, mut ci_100) = (0.0, 0.0);
    let seeds = 10;
    for seed in 0..seeds {
        let m = gaussian_clusters(8, 60, 8, 10.0, seed);
        let config = EvalConfig {
            seed,
            ..Default::default()
        };
        let report = build_report(&[("ideal".into(), m)], &config).unwrap();
        for c in &report.cells {
            worst = worst.min(c.mean_accuracy);
        }
        ci_5 += report.cell("ideal", 0.05).unwrap().ci_half_width / seeds as f64;
        ci_100 += report.cell("ideal", 1.0).unwrap().ci_half_width / seeds as f64;
    }
    vec![
        Outcome::new(
            worst >= 99.0,
            format!("lowest cell {worst:.2}% over {seeds} seeds"),
        ),
        Outcome::new(
            ci_100 <= ci_5,
            format!("mean CI half-width {ci_100:.3} at 100% vs {ci_5:.3} at 5%"),
        ),
    ]
}

// 8 ---------------------------------------------------------------------

fn ci_formula() -> Vec<Outcome> {
    let hand = confidence_interval(&[90.0, 92.0]).unwrap();
    let mut r = rng(8);
    let (mu, sigma) = (80.0, 5.0);
    let normal = Normal::new(mu, sigma).unwrap();
    let sims = 1000;
    let mut covered = 0;
    for _ in 0..sims {
        let folds: Vec<f64> = (0..10).map(|_| normal.sample(&mut r)).collect();
        let mean = folds.iter().sum::<f64>() / 10.0;
        let hw = confidence_interval(&folds).unwrap();
        covered += usize::from((mean - mu).abs() <= hw);
    }
    let coverage = 100.0 * covered as f64 / sims as f64;
    vec![
        Outcome::new(hand == 1.96, format!("{{90, 92}} -> {hand}")),
        Outcome::new(
            (coverage - 95.0).abs() <= 2.0,
            format!(
                "coverage {coverage:.1}% over {sims} simulations of 10 folds (exact value 91.8%)"
            ),
        ),
    ]
}

// 9 ---------------------------------------------------------------------

/// Lloyd's algorithm from k-means++ seeds; best of `restarts` by inertia.
fn kmeans(x: ArrayView2<f64>, k: usize, restarts: usize, seed: u64) -> Vec<usize> {
    let n = x.nrows();
    let sq = |i: usize, c: &[f64]| {
        x.row(i)
            .iter()
            .zip(c)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    let mut r = rng(seed);
    let mut best = (f64::INFINITY, vec![0; n]);
    for _ in 0..restarts {
        let mut centres: Vec<Vec<f64>> = vec![x.row(r.random_range(0..n)).to_vec()];
        while centres.len() < k {
            let d: Vec<f64> = (0..n)
                .map(|i| {
                    centres
                        .iter()
                        .map(|c| sq(i, c))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = d.iter().sum();
            let mut pick = r.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, di) in d.iter().enumerate() {
                if pick < *di {
                    chosen = i;
                    break;
                }
                pick -= di;
            }
            centres.push(x.row(chosen).to_vec());
        }
        let mut assign = vec![0; n];
        for _ in 0..100 {
            let next: Vec<usize> = (0..n)
                .map(|i| {
                    (0..k)
                        .min_by(|&a, &b| sq(i, &centres[a]).total_cmp(&sq(i, &centres[b])))
                        .unwrap()
                })
                .collect();
            let done = next == assign;
            assign = next;
            for (c, centre) in centres.iter_mut().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
                if members.is_empty() {
                    continue;
                }
                for (j, v) in centre.iter_mut().enumerate() {
                    *v = members.iter().map(|&i| x[[i, j]]).sum::<f64>() / members.len() as f64;
                }
            }
            if done {
                break;
            }
        }
        let inertia: f64 = (0..n).map(|i| sq(i, &centres[assign[i]])).sum();
        if inertia < best.0 {
            best = (inertia, assign);
        }
    }
    best.1
}

fn projection_sanity() -> Vec<Outcome> {
    let m = gaussian_clusters(3, 100, 128, 10.0, 9);
    let config = ProjectionConfig {
        n_neighbors: 40,
        seed: 9,
        ..Default::default()
    };
    let coords = project_2d(&m, &config).unwrap();
    let assign = kmeans(coords.view(), 3, 10, 9);
    let mut table = [[0usize; 8]; 3];
    for (a, l) in assign.iter().zip(&m.labels) {
        table[*a][l.index()] += 1;
    }
    let purity = table
        .iter()
        .map(|row| *row.iter().max().unwrap())
        .sum::<usize>() as f64
        / m.len() as f64;
    vec![Outcome::new(
        purity >= 0.95,
        format!("3-means purity {purity:.3}"),
    )]
}

// 10 --------------------------------------------------------------------

fn paper_scale() -> Vec<Outcome> {
    let root = PathBuf::from(std::env::var_os("HISTOTRIPLET_CRC_ROOT").unwrap());
    let out = std::env::var_os("HISTOTRIPLET_CRC_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("histotriplet-crc"));
    let run = |mode: TrainMode, dir: &str| -> EvalReport {
        let mut config = RunConfig::default();
        config.corpus.labeled_root = Some(root.clone());
        config.out_dir = out.join(dir);
        config.train.mode = mode;
        run_pipeline(&config, &Stage::ALL).unwrap();
        let text = std::fs::read_to_string(config.out_dir.join("report/report.json")).unwrap();
        serde_json::from_str(&text).unwrap()
    };
    let triplet = run(TrainMode::Triplet, "triplet");
    let xent = run(TrainMode::CrossEntropy, "cross_entropy");
    let at = |r: &EvalReport, p: f64| {
        r.cells
            .iter()
            .find(|c| (c.portion - p).abs() < 1e-9)
            .unwrap()
            .mean_accuracy
    };
    let full = at(&triplet, 1.0);
    let trails = [0.25, 0.5, 1.0]
        .iter()
        .all(|&p| at(&xent, p) < at(&triplet, p));
    vec![
        Outcome::new(
            (full - 95.90).abs() <= 3.0,
            format!("triplet at 100%: {full:.2}%"),
        ),
        Outcome::new(trails, "cross-entropy trails triplet at 25-100%"),
    ]
}
