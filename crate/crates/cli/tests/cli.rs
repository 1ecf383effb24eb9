use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use histotriplet::corpus::{write_slide_manifest, OrganSite, SlideRecord, Subtype};
use histotriplet::synthetic::synthetic_slide_image;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_histotriplet"));
    c.env("RUST_LOG", "warn").env_remove("HISTOTRIPLET_OUT_DIR");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
seed = 7
out_dir = "run"
[corpus]
synthetic = { classes = 3, per_class = 30 }
[sampler]
triplets = 24
[encoder]
architecture = "small-conv"
embedding_dim = 16
[train]
learning_rate = 0.001
epochs = 1
batch_size = 8
[eval]
portions = [0.5, 1.0]
folds = 3
inner_folds = 2
grid = { kernels = ["linear"], c_values = [1.0], gamma_values = [1.0], gamma_modes = ["scale"] }
[projection]
n_neighbors = 10
n_epochs = 20
"#;

#[test]
fn validate_prints_a_normalized_config_that_validates_again() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.toml"), "").unwrap();
    let out = run(dir.path(), &["validate", "--config", "empty.toml"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let normalized = stdout(&out);
    assert!(normalized.contains("margin = 0.25"));
    assert!(normalized.contains("embedding_dim = 128"));

    fs::write(dir.path().join("norm.toml"), &normalized).unwrap();
    let again = run(dir.path(), &["validate", "--config", "norm.toml"]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(stdout(&again), normalized);
}

#[test]
fn validate_reports_every_violation_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        "[loss]\nmargin = -1\n[train]\nepochs = 0\n",
    )
    .unwrap();
    let out = run(dir.path(), &["validate", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("loss.margin"), "{err}");
    assert!(err.contains("train.epochs"), "{err}");
    assert!(stdout(&out).is_empty());

    fs::write(dir.path().join("typo.toml"), "[train]\nepoch = 3\n").unwrap();
    let out = run(dir.path(), &["validate", "--config", "typo.toml"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("typo.toml:2"), "{}", stderr(&out));
}

#[test]
fn run_builds_everything_then_reports_it_current() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let first = run(dir.path(), &["run", "--config", "tiny.toml"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let text = stdout(&first);
    for stage in ["ingest", "sample", "train", "embed", "eval", "plot"] {
        assert!(text.contains(&format!("ran      {stage}")), "{text}");
    }
    let out = dir.path().join("run");
    for f in [
        "run_manifest.json",
        "triplets.jsonl",
        "report/report.csv",
        "plot/embeddings.png",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let manifest = fs::read_to_string(out.join("run_manifest.json")).unwrap();

    let second = run(dir.path(), &["run", "--config", "tiny.toml"]);
    assert!(second.status.success(), "{}", stderr(&second));
    assert!(!stdout(&second).contains("ran "), "{}", stdout(&second));
    let strip = |s: &str| {
        s.lines()
            .filter(|l| !l.contains("started_at") && !l.contains("finished_at"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(
        strip(&fs::read_to_string(out.join("run_manifest.json")).unwrap()),
        strip(&manifest)
    );

    let ev = run(
        dir.path(),
        &[
            "eval",
            "--embeddings",
            "run/embeddings/embeddings.bin",
            "--portions",
            "50,100",
            "--config",
            "tiny.toml",
            "--out",
            "ev.csv",
        ],
    );
    assert!(ev.status.success(), "{}", stderr(&ev));
    let csv = fs::read_to_string(dir.path().join("ev.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("model,portion,mean_acc,ci_half_width"));
    assert!(dir.path().join("ev.json").exists());
}

#[test]
fn run_refuses_a_locked_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    fs::create_dir_all(dir.path().join("run")).unwrap();
    fs::write(dir.path().join("run/.lock"), "1").unwrap();
    let out = run(dir.path(), &["run", "--config", "tiny.toml"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("lock"), "{}", stderr(&out));
}

#[test]
fn ingest_sample_and_train_on_slides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir_all(d.join("slides")).unwrap();
    let mut slides = Vec::new();
    for (k, subtype) in [Subtype::Luad, Subtype::Lusc, Subtype::Luad]
        .into_iter()
        .enumerate()
    {
        let id = format!("s{k}");
        synthetic_slide_image(1024, subtype, k as u64)
            .save(d.join(format!("slides/{id}.png")))
            .unwrap();
        slides.push(SlideRecord {
            slide_id: id.clone(),
            organ_site: OrganSite::Lung,
            subtype,
            base_width: 1024,
            base_height: 1024,
            base_magnification: 20.0,
            path: format!("{id}.png"),
        });
    }
    write_slide_manifest(&d.join("slides/manifest.jsonl"), &slides).unwrap();

    let out = run(
        d,
        &[
            "ingest",
            "--manifest",
            "slides/manifest.jsonl",
            "--patch-size",
            "64",
            "--out",
            "corpus",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("3 slides, "), "{}", stdout(&out));
    assert!(d.join("corpus/tiles.jsonl").exists());

    fs::write(
        d.join("slides.toml"),
        r#"
[corpus]
slide_manifest = "slides/manifest.jsonl"
patch_size = 64
[sampler]
distant_types = ["same_slide_remote", "same_subtype_other_slide"]
[encoder]
architecture = "small-conv"
embedding_dim = 8
input_shape = [64, 64, 3]
[train]
epochs = 1
batch_size = 4
learning_rate = 0.001
"#,
    )
    .unwrap();
    let out = run(
        d,
        &[
            "sample",
            "--config",
            "slides.toml",
            "--count",
            "12",
            "--out",
            "t.jsonl",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = fs::read_to_string(d.join("t.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 12);

    let out = run(
        d,
        &[
            "train",
            "--config",
            "slides.toml",
            "--manifest",
            "t.jsonl",
            "--out",
            "ck",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(d.join("ck/weights.bin").exists());

    let out = run(d, &["train", "--config", "slides.toml", "--out", "ck2"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--manifest"));
}
