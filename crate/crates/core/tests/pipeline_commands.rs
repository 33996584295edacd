//! Command-level behaviour: the CLI binary's exit codes and error JSON, and
//! the files each command writes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::Rng;
use slabseg::geometry::{CalibrationSidecar, Homography};
use slabseg::metrics::SummaryStats;
use slabseg::pipeline::{
    evaluate_dirs, segment_path, train_dataset, EvaluateOptions, PipelineError, RunManifest, Segmenter, TrainOptions,
};
use slabseg::raster::io::{
    read_image_calibrated, read_mask, sidecar_path, write_image, write_mask, write_spacing, BitDepth,
};
use slabseg::raster::{BinaryMask, RasterImage};
use slabseg::synth::{render_fiducial_photo, FiducialLayout, SynthConfig};
use slabseg::unet::{save_model, ModelMetadata, TrainConfig, UNetConfig, UNetParams};

mod common;

fn slabseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slabseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Parses the single JSON error line the CLI writes to stderr.
fn error_kind(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    let v: serde_json::Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"));
    assert!(v["detail"].is_string(), "{v}");
    v["kind"].as_str().unwrap().to_string()
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn gradient_image(h: usize, w: usize, spacing: Option<f64>) -> RasterImage {
    RasterImage::from_fn(h, w, 3, spacing, |c, r, col| ((r + 2 * col + 5 * c) % 97) as f64 / 96.0).unwrap()
}

/// Bright ellipse on a dark table, written with a spacing sidecar.
fn write_slab_photo(path: &Path, h: usize, w: usize, spacing: f64) -> BinaryMask {
    let inside = |r: usize, c: usize| {
        let y = (r as f64 - h as f64 / 2.0) / (h as f64 * 0.3);
        let x = (c as f64 - w as f64 / 2.0) / (w as f64 * 0.35);
        x * x + y * y <= 1.0
    };
    let img = RasterImage::from_fn(h, w, 3, Some(spacing), |ch, r, c| {
        if inside(r, c) {
            0.8 - 0.1 * ch as f64
        } else {
            0.1
        }
    })
    .unwrap();
    write_image(path, &img, BitDepth::Eight).unwrap();
    write_spacing(&sidecar_path(path), spacing).unwrap();
    BinaryMask::from_fn(h, w, Some(spacing), inside)
}

fn write_tiny_model(path: &Path) {
    let p = UNetParams::<f32>::init(&UNetConfig::tiny(), 3).unwrap();
    save_model(path, &p, ModelMetadata::now(3, serde_json::Value::Null)).unwrap();
}

#[test]
fn calibrate_ruler_writes_spacing_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.png");
    write_image(&raw, &gradient_image(1000, 800, None), BitDepth::Eight).unwrap();
    let calib = dir.path().join("ruler.json");
    fs::write(
        &calib,
        r#"{"mode":"ruler","p1":[100,50],"p2":[300,50],"distance_mm":20}"#,
    )
    .unwrap();

    let out = dir.path().join("rect.png");
    let res = slabseg(&[
        "calibrate",
        "--image",
        s(&raw),
        "--calibration",
        s(&calib),
        "--out",
        s(&out),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let sidecar: CalibrationSidecar = read_json(&sidecar_path(&out));
    assert_eq!(sidecar.spacing_mm, 0.1);
    assert_eq!(sidecar.source_spacing_mm, 0.1);
    assert_eq!(sidecar.mode, "ruler");
    assert_eq!(read_image_calibrated(&out).unwrap().dims(), (1000, 800));

    let coarse = dir.path().join("coarse.png");
    let res = slabseg(&[
        "calibrate",
        "--image",
        s(&raw),
        "--calibration",
        s(&calib),
        "--out",
        s(&coarse),
        "--target-mm",
        "0.5",
    ]);
    assert!(res.status.success());
    let img = read_image_calibrated(&coarse).unwrap();
    assert_eq!((img.dims(), img.spacing()), ((200, 160), Some(0.5)));
}

#[test]
fn calibrate_fiducials_recovers_planted_homography() {
    let dir = tempfile::tempdir().unwrap();
    let tpl = dir.path().join("templates");
    let res = slabseg(&[
        "templates",
        "--out",
        s(&tpl),
        "--rect-mm",
        "120",
        "90",
        "--cell-px",
        "8",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let layout = FiducialLayout {
        rect_mm: [120.0, 90.0],
        cell_mm: 2.0,
    };
    let mut r = common::rng(77);
    let to_photo = Homography::from_rows([
        [4.0 + r.random_range(-0.2..0.2), r.random_range(-0.2..0.2), 60.0],
        [r.random_range(-0.2..0.2), 4.0 + r.random_range(-0.2..0.2), 50.0],
        [r.random_range(-3e-4..3e-4), r.random_range(-3e-4..3e-4), 1.0],
    ])
    .unwrap();
    let planted = to_photo.inverse().unwrap();
    let photo = render_fiducial_photo(&planted, 500, 620, &layout, 0.01, 1);
    let raw = dir.path().join("raw.png");
    write_image(&raw, &photo, BitDepth::Sixteen).unwrap();
    let calib = dir.path().join("fiducial.json");
    fs::write(
        &calib,
        r#"{"mode":"fiducial","templates":"templates","rect_mm":[120,90]}"#,
    )
    .unwrap();

    let out = dir.path().join("rect.png");
    let res = slabseg(&[
        "calibrate",
        "--image",
        s(&raw),
        "--calibration",
        s(&calib),
        "--out",
        s(&out),
        "--target-mm",
        "0.5",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let sidecar: CalibrationSidecar = read_json(&sidecar_path(&out));
    let err = sidecar.homography.relative_frobenius_error(&planted);
    assert!(err < 1e-3, "relative Frobenius error {err}");
    assert_eq!((sidecar.inliers, sidecar.mode.as_str()), (4, "fiducial"));
    // 120 x 90 mm plus a 10 mm margin on each side at 0.5 mm/px.
    assert_eq!(read_image_calibrated(&out).unwrap().dims(), (220, 280));
}

#[test]
fn missing_calibration_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.png");
    write_image(&raw, &gradient_image(20, 20, None), BitDepth::Eight).unwrap();
    let res = slabseg(&[
        "calibrate",
        "--image",
        s(&raw),
        "--calibration",
        s(&dir.path().join("absent.json")),
        "--out",
        s(&dir.path().join("o.png")),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_kind(&res), "CalibrationMissing");
}

#[test]
fn usage_errors_exit_2_with_json() {
    let res = slabseg(&["segment", "--input", "x"]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_kind(&res), "UsageError");
}

#[test]
fn segment_single_image_matches_input_dims() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("tiny.slabseg");
    write_tiny_model(&model);
    // At the model's 0.5 mm/px and at 0.3 mm/px, which is resampled.
    for (name, spacing) in [("native", 0.5), ("fine", 0.3)] {
        let img = dir.path().join(format!("{name}.png"));
        write_slab_photo(&img, 45, 61, spacing);
        let out = dir.path().join(format!("out_{name}"));
        let res = slabseg(&["segment", "--input", s(&img), "--out", s(&out), "--model", s(&model)]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let mask = read_mask(&out.join(format!("{name}.png")), None).unwrap();
        assert_eq!(mask.dims(), (45, 61));
        assert!(sidecar_path(&out.join(format!("{name}.png"))).is_file());
    }
}

#[test]
fn segment_batch_is_sorted_complete_and_job_independent() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fs::create_dir_all(&input).unwrap();
    let mut truth = Vec::new();
    for i in 0..50 {
        truth.push(write_slab_photo(
            &input.join(format!("img{i:03}.png")),
            40 + i % 7,
            48,
            0.5,
        ));
    }
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let outcome = segment_path(&Segmenter::Baseline, &input, &a, 3).unwrap();
    assert_eq!(outcome.written.len(), 50);
    assert!(outcome.failures.is_empty());
    let mut sorted = outcome.written.clone();
    sorted.sort();
    assert_eq!(outcome.written, sorted);
    for (i, t) in truth.iter().enumerate() {
        let m = read_mask(&a.join(format!("img{i:03}.png")), None).unwrap();
        assert_eq!(m.bits(), t.bits(), "image {i}");
    }
    let manifest: RunManifest = read_json(&a.join("segment_manifest.json"));
    assert_eq!((manifest.inputs.len(), manifest.outputs.len()), (50, 50));

    let res = slabseg(&["segment", "--input", s(&input), "--out", s(&b), "--baseline"]);
    assert!(res.status.success());
    assert_eq!(
        fs::read(a.join("segment_manifest.json")).unwrap(),
        fs::read(b.join("segment_manifest.json")).unwrap()
    );
}

#[test]
fn segment_partial_failure_exits_1_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fs::create_dir_all(&input).unwrap();
    write_slab_photo(&input.join("a.png"), 30, 30, 0.5);
    write_image(&input.join("b.png"), &gradient_image(30, 30, None), BitDepth::Eight).unwrap();
    write_slab_photo(&input.join("c.png"), 30, 30, 0.5);
    let out = dir.path().join("out");
    let res = slabseg(&["segment", "--input", s(&input), "--out", s(&out), "--baseline"]);
    assert_eq!(res.status.code(), Some(1));
    let summary: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(summary["written"], serde_json::json!(["a.png", "c.png"]));
    assert_eq!(summary["failures"][0][0], "b.png");
    assert_eq!(summary["failures"][0][1]["kind"], "CalibrationMissing");
}

#[test]
fn corrupted_model_header_is_model_load_failure() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.slabseg");
    write_tiny_model(&model);
    let mut bytes = fs::read(&model).unwrap();
    bytes[20] ^= 0x5a;
    fs::write(&model, bytes).unwrap();
    let img = dir.path().join("x.png");
    write_slab_photo(&img, 30, 30, 0.5);
    let res = slabseg(&[
        "segment",
        "--input",
        s(&img),
        "--out",
        s(&dir.path().join("o")),
        "--model",
        s(&model),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_kind(&res), "ModelLoadFailure");
}

fn write_mask_with_spacing(path: &Path, m: &BinaryMask) {
    write_mask(path, m).unwrap();
    write_spacing(&sidecar_path(path), m.spacing().unwrap()).unwrap();
}

fn square(side: usize, margin: usize, spacing: f64) -> BinaryMask {
    let n = side + 2 * margin;
    BinaryMask::from_fn(n, n, Some(spacing), |r, c| {
        (margin..margin + side).contains(&r) && (margin..margin + side).contains(&c)
    })
}

#[test]
fn evaluate_identical_sets_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, refs) = (dir.path().join("pred"), dir.path().join("ref"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&refs).unwrap();
    let mut r = common::rng(4);
    for i in 0..6 {
        let m = common::random_mask(&mut r, 32, 32, 0.5);
        write_mask_with_spacing(&pred.join(format!("{i}.png")), &m);
        write_mask_with_spacing(&refs.join(format!("{i}.png")), &m);
    }
    let out = evaluate_dirs(&pred, &refs, &dir.path().join("eval"), EvaluateOptions::default()).unwrap();
    assert!(out.reports.iter().all(|r| r.dice == 1.0));
    assert_eq!(out.summary.outlier_rate, 0.0);
}

#[test]
fn evaluate_crafted_set_reports_two_percent_outliers() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, refs, out) = (dir.path().join("pred"), dir.path().join("ref"), dir.path().join("eval"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&refs).unwrap();
    // 20 mm square reference; the outlier prediction is 2.5 mm larger on every side.
    let reference = square(40, 10, 0.5);
    let outlier = square(50, 5, 0.5);
    for i in 0..50 {
        write_mask_with_spacing(&refs.join(format!("case{i:02}.png")), &reference);
        let p = if i == 17 { &outlier } else { &reference };
        write_mask_with_spacing(&pred.join(format!("case{i:02}.png")), p);
    }
    let res = slabseg(&["evaluate", "--pred", s(&pred), "--ref", s(&refs), "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary: SummaryStats = read_json(&out.join("summary.json"));
    assert_eq!((summary.n, summary.outliers, summary.outlier_rate), (50, 1, 0.02));
    let lines: Vec<serde_json::Value> = fs::read_to_string(out.join("reports.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 50);
    let flagged: Vec<_> = lines.iter().filter(|l| l["outlier"] == true).collect();
    assert_eq!(flagged.len(), 1);
    assert_eq!(flagged[0]["image_id"], "case17");
    assert!(flagged[0]["assd"].as_f64().unwrap() > 2.0);
    assert_eq!(fs::read_to_string(out.join("reports.csv")).unwrap().lines().count(), 51);
    let boxplot: serde_json::Value = read_json(&out.join("boxplot.json"));
    assert!(boxplot.is_object() || boxplot.is_array());

    // Thresholds are flags.
    let strict = dir.path().join("strict");
    let res = slabseg(&[
        "evaluate",
        "--pred",
        s(&pred),
        "--ref",
        s(&refs),
        "--out",
        s(&strict),
        "--threshold-mm",
        "5",
    ]);
    assert!(res.status.success());
    let summary: SummaryStats = read_json(&strict.join("summary.json"));
    assert_eq!(summary.outliers, 0);
}

#[test]
fn evaluate_unpaired_lists_orphans() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, refs) = (dir.path().join("pred"), dir.path().join("ref"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&refs).unwrap();
    let m = square(8, 4, 0.5);
    write_mask_with_spacing(&pred.join("a.png"), &m);
    write_mask_with_spacing(&pred.join("b.png"), &m);
    write_mask_with_spacing(&refs.join("a.png"), &m);
    write_mask_with_spacing(&refs.join("c.png"), &m);
    match evaluate_dirs(&pred, &refs, &dir.path().join("e"), EvaluateOptions::default()) {
        Err(PipelineError::UnpairedFiles(orphans)) => {
            assert_eq!(orphans.len(), 2);
            assert!(
                orphans[0].ends_with("b.png") && orphans[1].ends_with("c.png"),
                "{orphans:?}"
            );
        }
        other => panic!("{other:?}"),
    }
    let res = slabseg(&[
        "evaluate",
        "--pred",
        s(&pred),
        "--ref",
        s(&refs),
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_kind(&res), "UnpairedFiles");
}

fn small_train_options(folds: usize) -> TrainOptions {
    TrainOptions {
        train: TrainConfig {
            epochs: 2,
            folds,
            ..TrainConfig::desk()
        },
        unet: UNetConfig::tiny(),
        val_count: 2,
        f64: true,
    }
}

fn run_synth(out: &Path, config: &Path) -> Output {
    slabseg(&[
        "synth",
        "--out",
        s(out),
        "--n",
        "6",
        "--config",
        s(config),
        "--seed",
        "11",
    ])
}

#[test]
fn synth_then_train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        height: 64,
        width: 64,
        slabs_per_image: [1, 1],
        slab_size_mm: [8.0, 12.0],
        ..SynthConfig::default()
    };
    let config = dir.path().join("synth.toml");
    fs::write(&config, toml::to_string(&cfg).unwrap()).unwrap();

    let mut runs: Vec<PathBuf> = Vec::new();
    for k in 0..2 {
        let data = dir.path().join(format!("data{k}"));
        let res = run_synth(&data, &config);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let models = dir.path().join(format!("models{k}"));
        let run = train_dataset(&data, &models, &small_train_options(1)).unwrap();
        assert_eq!(run.models, vec!["model.slabseg".to_string()]);
        assert!(models.join("model.slabseg").is_file());
        assert_eq!(
            fs::read_to_string(models.join("history.jsonl"))
                .unwrap()
                .lines()
                .count(),
            2
        );
        runs.push(data);
        runs.push(models);
    }
    for name in [
        "data{}/manifest.json",
        "models{}/train_manifest.json",
        "models{}/history.jsonl",
    ] {
        let a = dir.path().join(name.replace("{}", "0"));
        let b = dir.path().join(name.replace("{}", "1"));
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{name}");
    }
    let manifest: RunManifest = read_json(&runs[1].join("train_manifest.json"));
    assert_eq!(manifest.parameters["val_ids"].as_array().unwrap().len(), 2);
    assert!(manifest.parameters["dataset_manifest_sha256"].is_string());

    // Cross-validation writes one container per fold.
    let cv = dir.path().join("cv");
    let run = train_dataset(&runs[0], &cv, &small_train_options(3)).unwrap();
    assert_eq!(run.models.len(), 3);
    for m in &run.models {
        assert!(cv.join(m).is_file());
    }
}

#[test]
fn train_on_empty_dir_is_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir_all(empty.join("images")).unwrap();
    fs::create_dir_all(empty.join("masks")).unwrap();
    assert!(matches!(
        train_dataset(&empty, &dir.path().join("m"), &small_train_options(1)),
        Err(PipelineError::EmptyDataset(_))
    ));
    let res = slabseg(&["train", "--data", s(&empty), "--out", s(&dir.path().join("m"))]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_kind(&res), "EmptyDataset");
}
