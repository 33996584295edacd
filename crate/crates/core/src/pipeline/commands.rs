use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    file_err, list_pngs, sha256_file, sha256_hex, stem, write_atomic, write_json, ErrorJson, PipelineError, RunManifest,
};
use crate::geometry::{resample_isotropic, Homography};
use crate::metrics::{box_plot, evaluate_pair, summarize, write_csv, EvalReport, SummaryStats};
use crate::raster::io::{find_spacing, read_image, read_mask, sidecar_path, write_mask, write_spacing};
use crate::raster::{warp, BinaryMask, RasterImage};
use crate::synth::{make_dataset, DatasetManifest, SynthConfig};
use crate::unet::{
    classical_baseline, cross_validate, load_model, parameter_count, save_model, train, AnyModel, EpochRecord,
    ModelMetadata, TrainConfig, TrainOutcome, TrainSample, UNetConfig, UNetParams,
};

/// What produces masks: one or more model containers (softmax-averaged) or
/// the classical Otsu baseline.
#[derive(Debug, Clone)]
pub enum Segmenter {
    Models(Vec<(AnyModel, String)>),
    Baseline,
}

impl Segmenter {
    /// Loads every container; the string kept with each model is its file hash.
    pub fn load(paths: &[PathBuf]) -> Result<Self, PipelineError> {
        if paths.is_empty() {
            return Ok(Segmenter::Baseline);
        }
        let mut models = Vec::with_capacity(paths.len());
        for p in paths {
            let (model, _) = load_model(p)?;
            models.push((model, sha256_file(p)?));
        }
        let first = models[0].0.config().spacing_mm;
        if models.iter().any(|(m, _)| m.config().spacing_mm != first) {
            return Err(PipelineError::InvalidInput(
                "ensemble members were trained at different resolutions".into(),
            ));
        }
        Ok(Segmenter::Models(models))
    }

    fn describe(&self) -> serde_json::Value {
        match self {
            Segmenter::Baseline => json!({"kind": "otsu_baseline"}),
            Segmenter::Models(ms) => json!({
                "kind": "unet",
                "ensemble": "mean_softmax",
                "model_sha256": ms.iter().map(|(_, h)| h.clone()).collect::<Vec<_>>(),
            }),
        }
    }
}

fn probability_at_model_resolution(
    models: &[(AnyModel, String)],
    img: &RasterImage,
) -> Result<Vec<f64>, PipelineError> {
    let mut mean = vec![0.0; img.height() * img.width()];
    for (m, _) in models {
        for (a, b) in mean.iter_mut().zip(m.foreground_probability(img)?) {
            *a += b;
        }
    }
    let k = models.len() as f64;
    mean.iter_mut().for_each(|v| *v /= k);
    Ok(mean)
}

/// Mask at the image's own grid. Images at another spacing than the model's
/// are resampled for inference and the probability map is resampled back.
pub fn segment_image(seg: &Segmenter, img: &RasterImage) -> Result<BinaryMask, PipelineError> {
    let Some(spacing) = img.spacing() else {
        return Err(PipelineError::CalibrationMissing("image has no spacing sidecar".into()));
    };
    let models = match seg {
        Segmenter::Baseline => return Ok(classical_baseline(img)),
        Segmenter::Models(m) => m,
    };
    let target = models[0].0.config().spacing_mm;
    let (h, w) = img.dims();
    if (spacing - target).abs() <= 1e-9 * target {
        let prob = probability_at_model_resolution(models, img)?;
        return Ok(BinaryMask::new(
            h,
            w,
            prob.iter().map(|&p| p > 0.5).collect(),
            Some(spacing),
        )?);
    }
    log::info!("resampling from {spacing} mm/px to the model resolution {target} mm/px");
    let small = resample_isotropic(img, spacing, target)?;
    let prob = probability_at_model_resolution(models, &small)?;
    let prob_img = RasterImage::new(small.height(), small.width(), 1, prob, Some(target))?;
    let back = warp(&prob_img, &Homography::scale(target / spacing), h, w, Some(spacing))?;
    Ok(BinaryMask::new(
        h,
        w,
        back.plane(0).iter().map(|&p| p > 0.5).collect(),
        Some(spacing),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentOutcome {
    /// Mask file names written, in processing order.
    pub written: Vec<String>,
    /// Input name with the error that stopped it.
    pub failures: Vec<(String, ErrorJson)>,
}

/// Input and output hashes of one segmented image.
type ItemResult = Result<(String, String), PipelineError>;

fn segment_one(seg: &Segmenter, path: &Path, out_dir: &Path) -> ItemResult {
    let spacing = find_spacing(path)?;
    let img = read_image(path, spacing)?;
    let mask = segment_image(seg, &img)?;
    let out = out_dir.join(format!("{}.png", stem(path)));
    write_mask(&out, &mask)?;
    write_spacing(&sidecar_path(&out), mask.spacing().expect("calibrated input"))?;
    Ok((sha256_file(path)?, sha256_file(&out)?))
}

/// Segments one image or every PNG of a directory, writing `<stem>.png`
/// masks with spacing sidecars and `segment_manifest.json`. Up to `jobs`
/// images run concurrently; outputs and the manifest do not depend on it.
/// Per-image failures are collected and the batch continues.
pub fn segment_path(
    seg: &Segmenter,
    input: &Path,
    out_dir: &Path,
    jobs: usize,
) -> Result<SegmentOutcome, PipelineError> {
    let inputs = list_pngs(input)?;
    fs::create_dir_all(out_dir).map_err(file_err(out_dir))?;
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<ItemResult>>> = inputs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, inputs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(path) = inputs.get(i) else { break };
                *results[i].lock().expect("result slot") = Some(segment_one(seg, path, out_dir));
            });
        }
    });
    let mut manifest = RunManifest::new("segment", json!({"segmenter": seg.describe()}));
    let mut outcome = SegmentOutcome {
        written: Vec::new(),
        failures: Vec::new(),
    };
    for (path, slot) in inputs.iter().zip(results) {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match slot.into_inner().expect("result slot").expect("every input processed") {
            Ok((input_hash, output_hash)) => {
                let out_name = format!("{}.png", stem(path));
                manifest.inputs.insert(name, input_hash);
                manifest.outputs.insert(out_name.clone(), output_hash);
                outcome.written.push(out_name);
            }
            Err(e) => {
                log::warn!("{name}: {e}");
                outcome.failures.push((name, e.to_json()));
            }
        }
    }
    write_json(&out_dir.join("segment_manifest.json"), &manifest)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluateOptions {
    pub band_mm: f64,
    pub threshold_mm: f64,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self {
            band_mm: 10.0,
            threshold_mm: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOutcome {
    pub reports: Vec<EvalReport>,
    pub summary: SummaryStats,
}

fn pngs_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>, PipelineError> {
    Ok(list_pngs(dir)?.into_iter().map(|p| (stem(&p), p)).collect())
}

fn read_calibrated_mask(path: &Path) -> Result<BinaryMask, PipelineError> {
    match find_spacing(path)? {
        Some(s) => Ok(read_mask(path, Some(s))?),
        None => Err(PipelineError::CalibrationMissing(format!(
            "{} has no spacing sidecar",
            path.display()
        ))),
    }
}

/// Pairs predictions and references by file stem and writes
/// `reports.jsonl`, `reports.csv`, `summary.json`, `boxplot.json` and
/// `evaluate_manifest.json` to `out_dir`.
pub fn evaluate_dirs(
    pred_dir: &Path,
    ref_dir: &Path,
    out_dir: &Path,
    opts: EvaluateOptions,
) -> Result<EvaluateOutcome, PipelineError> {
    let preds = pngs_by_stem(pred_dir)?;
    let refs = pngs_by_stem(ref_dir)?;
    let mut orphans: Vec<String> = preds
        .iter()
        .filter(|(k, _)| !refs.contains_key(*k))
        .chain(refs.iter().filter(|(k, _)| !preds.contains_key(*k)))
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !orphans.is_empty() {
        orphans.sort();
        return Err(PipelineError::UnpairedFiles(orphans));
    }
    if preds.is_empty() {
        return Err(PipelineError::EmptyDataset(format!(
            "no PNG files in {}",
            pred_dir.display()
        )));
    }
    let mut manifest = RunManifest::new("evaluate", serde_json::to_value(opts).expect("options serialize"));
    let mut reports = Vec::with_capacity(preds.len());
    for (id, pred_path) in &preds {
        let ref_path = &refs[id];
        let pred = read_calibrated_mask(pred_path)?;
        let reference = read_calibrated_mask(ref_path)?;
        reports.push(evaluate_pair(id, &pred, &reference, opts.band_mm, opts.threshold_mm)?);
        manifest
            .inputs
            .insert(format!("pred/{id}.png"), sha256_file(pred_path)?);
        manifest.inputs.insert(format!("ref/{id}.png"), sha256_file(ref_path)?);
    }
    let summary = summarize(&reports)?;

    fs::create_dir_all(out_dir).map_err(file_err(out_dir))?;
    let mut jsonl = String::new();
    for r in &reports {
        jsonl.push_str(&serde_json::to_string(r).expect("report serializes"));
        jsonl.push('\n');
    }
    let mut csv = Vec::new();
    write_csv(&mut csv, &reports).map_err(file_err(out_dir))?;
    let outputs: [(&str, Vec<u8>); 4] = [
        ("reports.jsonl", jsonl.into_bytes()),
        ("reports.csv", csv),
        (
            "summary.json",
            (serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n").into_bytes(),
        ),
        (
            "boxplot.json",
            (serde_json::to_string_pretty(&box_plot(&reports)).expect("box plot serializes") + "\n").into_bytes(),
        ),
    ];
    for (name, bytes) in outputs {
        write_atomic(&out_dir.join(name), &bytes)?;
        manifest.outputs.insert(name.to_string(), sha256_hex(&bytes));
    }
    write_json(&out_dir.join("evaluate_manifest.json"), &manifest)?;
    Ok(EvaluateOutcome { reports, summary })
}

/// Thin wrapper over [`make_dataset`].
pub fn synth_dataset(cfg: &SynthConfig, n: usize, out_dir: &Path) -> Result<DatasetManifest, PipelineError> {
    Ok(make_dataset(cfg, n, out_dir)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub train: TrainConfig,
    pub unet: UNetConfig,
    /// Trailing dataset items held out for validation when `folds == 1`.
    pub val_count: usize,
    /// Train in 64-bit floating point.
    pub f64: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub models: Vec<String>,
    pub best_epochs: Vec<usize>,
    pub parameter_count: usize,
}

#[derive(Debug, Clone, Serialize)]
struct HistoryLine<'a> {
    fold: usize,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

struct LoadedDataset {
    ids: Vec<String>,
    samples: Vec<TrainSample>,
    manifest_sha256: Option<String>,
}

fn load_dataset(dir: &Path) -> Result<LoadedDataset, PipelineError> {
    let manifest_path = dir.join("manifest.json");
    let (pairs, manifest_sha256): (Vec<(String, PathBuf, PathBuf)>, _) = if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path).map_err(file_err(&manifest_path))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| PipelineError::InvalidInput(format!("{}: {e}", manifest_path.display())))?;
        let pairs = m
            .entries
            .iter()
            .map(|e| (e.id.clone(), dir.join(&e.image), dir.join(&e.mask)))
            .collect();
        (pairs, Some(sha256_hex(text.as_bytes())))
    } else {
        let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
        if !img_dir.is_dir() || !mask_dir.is_dir() {
            return Err(PipelineError::EmptyDataset(format!(
                "{} has neither manifest.json nor images/ and masks/",
                dir.display()
            )));
        }
        let images = pngs_by_stem(&img_dir)?;
        let masks = pngs_by_stem(&mask_dir)?;
        let orphans: Vec<String> = images
            .iter()
            .filter(|(k, _)| !masks.contains_key(*k))
            .chain(masks.iter().filter(|(k, _)| !images.contains_key(*k)))
            .map(|(_, p)| p.display().to_string())
            .collect();
        if !orphans.is_empty() {
            return Err(PipelineError::UnpairedFiles(orphans));
        }
        let pairs = images
            .into_iter()
            .map(|(k, p)| (k.clone(), p, masks[&k].clone()))
            .collect();
        (pairs, None)
    };
    if pairs.is_empty() {
        return Err(PipelineError::EmptyDataset(format!("no images in {}", dir.display())));
    }
    let mut ids = Vec::with_capacity(pairs.len());
    let mut samples = Vec::with_capacity(pairs.len());
    for (id, image, mask) in pairs {
        let spacing = find_spacing(&image)?
            .ok_or_else(|| PipelineError::CalibrationMissing(format!("{} has no spacing sidecar", image.display())))?;
        samples.push(TrainSample {
            image: read_image(&image, Some(spacing))?,
            mask: read_mask(&mask, Some(spacing))?,
        });
        ids.push(id);
    }
    Ok(LoadedDataset {
        ids,
        samples,
        manifest_sha256,
    })
}

fn save_outcomes<T: crate::unet::Real>(
    outcomes: &[TrainOutcome<T>],
    names: &[String],
    out_dir: &Path,
    opts: &TrainOptions,
    manifest: &mut RunManifest,
) -> Result<Vec<usize>, PipelineError> {
    let mut history = String::new();
    let mut best = Vec::with_capacity(outcomes.len());
    for (fold, (o, name)) in outcomes.iter().zip(names).enumerate() {
        let meta = ModelMetadata::now(
            opts.train.seed.wrapping_add(fold as u64),
            json!({"fold": fold, "train": opts.train, "best_epoch": o.best_epoch}),
        );
        let path = out_dir.join(name);
        save_model(&path, &o.params, meta)?;
        manifest.outputs.insert(name.clone(), payload_digest(&o.params));
        for r in &o.history {
            history.push_str(&serde_json::to_string(&HistoryLine { fold, record: r }).expect("history serializes"));
            history.push('\n');
        }
        best.push(o.best_epoch);
    }
    write_atomic(&out_dir.join("history.jsonl"), history.as_bytes())?;
    manifest
        .outputs
        .insert("history.jsonl".into(), sha256_hex(history.as_bytes()));
    Ok(best)
}

/// Hash of the parameter values alone, independent of container metadata.
fn payload_digest<T: crate::unet::Real>(p: &UNetParams<T>) -> String {
    let mut bytes = Vec::new();
    for t in &p.tensors {
        for &v in &t.data {
            v.write_le(&mut bytes);
        }
    }
    format!("params:{}", sha256_hex(&bytes))
}

fn run_training<T: crate::unet::Real>(
    data: &LoadedDataset,
    opts: &TrainOptions,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<TrainRun, PipelineError> {
    let n = data.samples.len();
    let (outcomes, names) = if opts.train.folds > 1 {
        let outs = cross_validate::<T>(&data.samples, &opts.train, &opts.unet)?;
        let names = (0..outs.len()).map(|f| format!("model_fold{f}.slabseg")).collect();
        (outs, names)
    } else {
        if opts.val_count == 0 || opts.val_count >= n {
            return Err(PipelineError::InvalidInput(format!(
                "val_count {} must be in 1..{n}",
                opts.val_count
            )));
        }
        let split = n - opts.val_count;
        manifest.parameters["train_ids"] = json!(&data.ids[..split]);
        manifest.parameters["val_ids"] = json!(&data.ids[split..]);
        let out = train::<T>(&data.samples[..split], &data.samples[split..], &opts.train, &opts.unet)?;
        (vec![out], vec!["model.slabseg".to_string()])
    };
    let best_epochs = save_outcomes(&outcomes, &names, out_dir, opts, manifest)?;
    Ok(TrainRun {
        models: names,
        best_epochs,
        parameter_count: parameter_count(&opts.unet),
    })
}

/// Trains on a dataset directory (a synthesized dataset or `images/` plus
/// `masks/`), writing model containers, `history.jsonl` and
/// `train_manifest.json` to `out_dir`.
pub fn train_dataset(data_dir: &Path, out_dir: &Path, opts: &TrainOptions) -> Result<TrainRun, PipelineError> {
    opts.train.validate()?;
    opts.unet.validate()?;
    let data = load_dataset(data_dir)?;
    fs::create_dir_all(out_dir).map_err(file_err(out_dir))?;
    let mut manifest = RunManifest::new(
        "train",
        json!({
            "options": opts,
            "dataset_manifest_sha256": data.manifest_sha256,
            "parameter_count": parameter_count(&opts.unet),
            "design": {
                "loss": "ce * cross_entropy + dice * (1 - soft_dice), soft Dice smoothing 1",
                "initialization": "He normal with leaky-ReLU gain, zero biases, unit norm scales",
                "normalization": "instance",
                "activation": format!("leaky_relu({})", opts.unet.negative_slope),
                "upsampling": "nearest x2 + 3x3 conv",
                "preprocessing": "per-channel z-score, zero padding to the stage divisor",
                "model_selection": "best validation soft Dice over epochs",
                "ensembling": "mean softmax when several fold models are supplied",
            },
        }),
    );
    let run = if opts.f64 {
        run_training::<f64>(&data, opts, out_dir, &mut manifest)?
    } else {
        run_training::<f32>(&data, opts, out_dir, &mut manifest)?
    };
    write_json(&out_dir.join("train_manifest.json"), &manifest)?;
    Ok(run)
}
