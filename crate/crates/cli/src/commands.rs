use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use iriskit::dataset::{filter_subjects, load_manifest, make_folds, read_mask, Manifest, Record};
use iriskit::imageio::{load_rgb, write_atomic, write_mask_png, write_rgb_png};
use iriskit::metrics::{aggregate, evaluate_image, rank_sum, BinaryMask, LocalizationPair, ScoreGrid};
use iriskit::mobile_unet::{import_pretrained_encoder, load_model, Model, ModelConfig, Task};
use iriskit::pipeline::{
    crop_mask, crop_to_tensor, crop_window_sized, preprocess_to, render_overlay, segment, CropWindow, DEFAULT_MARGIN,
    DEFAULT_THRESHOLD,
};
use iriskit::recognition::{run_protocol, MaskSource, MaskedIntensity};
use iriskit::training::{
    default_grid, split_dataset, sweep_threshold, train as run_training, AugmentationConfig, SplitSpec, SweepItem,
    TrainConfig, TrainItem,
};

use crate::{EvalArgs, Failure, InferSegArgs, LocalizeArgs, MatchArgs, OverlayArgs, RankArgs, SweepArgs, TrainArgs};

type Outcome = Result<(), Failure>;

/// Fraction of the manifest held out for validation (and again for test).
const HOLDOUT: f64 = 0.05;
/// Images per subject in the matching protocol.
const FOLDS: usize = 5;

fn input_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn input_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn output_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        return Err(Failure::Usage(format!("{what} {} is a directory", path.display())));
    }
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(Failure::Usage(format!(
            "{what} {}: directory {} does not exist",
            path.display(),
            parent.display()
        )));
    }
    Ok(())
}

fn distinct(paths: &[&Path]) -> Result<(), Failure> {
    let set: BTreeSet<_> = paths.iter().collect();
    if set.len() != paths.len() {
        return Err(Failure::Usage("output paths must differ".into()));
    }
    Ok(())
}

fn model_of(path: &Path, task: Task) -> anyhow::Result<Model<f32>> {
    let m = load_model(path).with_context(|| format!("loading {}", path.display()))?;
    if m.task() != task {
        bail!("{} holds a {:?} model, expected {:?}", path.display(), m.task(), task);
    }
    Ok(m)
}

fn mask_path<'a>(rec: &'a Record, path: &'a Option<PathBuf>, what: &str) -> anyhow::Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| anyhow!("record {} has no {what}", rec.id))
}

/// Model inputs and per-channel targets for one record. Localization crops
/// are centred on `seg`'s prediction when given, else on the ground truth.
fn train_item(rec: &Record, task: Task, model: &Model<f32>, seg: Option<&Model<f32>>) -> anyhow::Result<TrainItem> {
    let image = load_rgb(&rec.image)?;
    let dims = (image.height() as usize, image.width() as usize);
    let s = model.config().input_size;
    let norm = model.normalization.as_ref();
    let load = |p: &Path| -> anyhow::Result<BinaryMask> {
        let m = read_mask(p)?;
        if m.dims() != dims {
            bail!("mask {} is {:?}, image is {dims:?}", p.display(), m.dims());
        }
        Ok(m)
    };
    match task {
        Task::Segmentation => {
            let m = load(mask_path(rec, &rec.seg_mask, "seg_mask")?)?;
            Ok(TrainItem {
                image: preprocess_to(&image, s, norm)?,
                masks: vec![m.resize_nearest(s, s)],
            })
        }
        Task::Localization => {
            let inner = load(mask_path(rec, &rec.inner_mask, "inner_mask")?)?;
            let outer = load(mask_path(rec, &rec.outer_mask, "outer_mask")?)?;
            let around = match (seg, &rec.seg_mask) {
                (Some(m), _) => segment(&image, m, DEFAULT_THRESHOLD)?,
                (None, Some(p)) => load(p)?,
                (None, None) => outer.clone(),
            };
            let window = if around.has_foreground() {
                crop_window_sized(&around, dims, DEFAULT_MARGIN, s)?
            } else {
                CropWindow::full_image(dims, s)
            };
            Ok(TrainItem {
                image: crop_to_tensor(&image, &window, norm)?,
                masks: vec![crop_mask(&inner, &window)?, crop_mask(&outer, &window)?],
            })
        }
    }
}

fn items(
    records: &[&Record],
    task: Task,
    model: &Model<f32>,
    seg: Option<&Model<f32>>,
) -> anyhow::Result<Vec<TrainItem>> {
    records
        .iter()
        .map(|r| train_item(r, task, model, seg).with_context(|| format!("record {}", r.id)))
        .collect()
}

pub fn train(a: TrainArgs) -> Outcome {
    input_file(&a.manifest, "manifest")?;
    output_file(&a.out, "output")?;
    if let Some(p) = &a.pretrained {
        input_file(p, "pretrained container")?;
    }
    let task = Task::parse(&a.task).map_err(|e| Failure::Usage(e.to_string()))?;
    let predicted = task == Task::Localization && a.crop_source == "predicted";
    match &a.seg_model {
        Some(p) if predicted => input_file(p, "segmentation model")?,
        Some(_) => return Err(Failure::Usage("--seg-model only applies to --task loc --crop-source predicted".into())),
        None if predicted => {
            return Err(Failure::Usage(
                "--task loc needs --seg-model (or --crop-source ground-truth)".into(),
            ))
        }
        None => {}
    }
    let config = ModelConfig::with_input_size(task, a.input_size as usize);
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let manifest = load_manifest(&a.manifest)?;
    let mut model = Model::<f32>::build(config, a.seed)?;
    if let Some(p) = &a.pretrained {
        let report = import_pretrained_encoder(p, &mut model)?;
        eprintln!("loaded {} encoder tensors, skipped {}", report.loaded.len(), report.skipped.len());
    }
    let split = split_dataset(
        manifest.records.len(),
        &SplitSpec {
            ratios: (1.0 - 2.0 * HOLDOUT, HOLDOUT, HOLDOUT),
            seed: a.seed,
        },
    )?;
    let pick = |idx: &[usize]| -> Vec<&Record> { idx.iter().map(|&i| &manifest.records[i]).collect() };
    let seg = a.seg_model.as_deref().map(|p| model_of(p, Task::Segmentation)).transpose()?;
    let train_items = items(&pick(&split.train), task, &model, seg.as_ref())?;
    let val_items = items(&pick(&split.val), task, &model, seg.as_ref())?;

    let steps = a.steps as usize;
    let cfg = TrainConfig {
        lr: a.lr,
        max_steps: steps,
        eval_every: 50.min(steps),
        batch_size: a.batch_size as usize,
        seed: a.seed,
        augment: !a.no_augment,
        bce_weight: a.bce_weight,
        checkpoint: Some(a.out.clone()),
        ..TrainConfig::default()
    };
    let aug = AugmentationConfig {
        seed: a.seed,
        ..AugmentationConfig::default()
    };
    let outcome = run_training(&mut model, &train_items, &val_items, &cfg, &aug)?;
    if let Some(last) = outcome.history.last() {
        let dice = last.val_dice.map(|d| format!(", validation soft dice {d:.4}")).unwrap_or_default();
        println!("step {}: loss {:.4}{dice}", last.step, last.loss);
    }
    Ok(())
}

pub fn infer_seg(a: InferSegArgs) -> Outcome {
    input_file(&a.model, "model")?;
    input_file(&a.image, "image")?;
    output_file(&a.out, "output")?;
    let model = model_of(&a.model, Task::Segmentation)?;
    let image = load_rgb(&a.image)?;
    let mask = iriskit::pipeline::segment(&image, &model, a.threshold)?;
    write_mask_png(&a.out, &mask)?;
    Ok(())
}

pub fn localize(a: LocalizeArgs) -> Outcome {
    input_file(&a.seg_model, "segmentation model")?;
    input_file(&a.loc_model, "localization model")?;
    input_file(&a.image, "image")?;
    output_file(&a.out_inner, "inner output")?;
    output_file(&a.out_outer, "outer output")?;
    distinct(&[&a.out_inner, &a.out_outer])?;
    let seg = model_of(&a.seg_model, Task::Segmentation)?;
    let loc = model_of(&a.loc_model, Task::Localization)?;
    let image = load_rgb(&a.image)?;
    let res = iriskit::pipeline::localize(&image, &seg, &loc, a.threshold, a.margin)?;
    if res.flags.empty_segmentation_fallback {
        eprintln!("warning: empty segmentation, localized over the whole image");
    }
    write_mask_png(&a.out_inner, &res.inner_mask)?;
    write_mask_png(&a.out_outer, &res.outer_mask)?;
    Ok(())
}

fn is_mask_file(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "bmp"))
}

/// Mask file names in `dir`, sorted.
fn mask_names(dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if is_mask_file(&path) {
            names.push(path.file_name().expect("file").to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// File names present in `pred` and required in `gt`.
fn paired(pred: &Path, gt: &Path) -> anyhow::Result<Vec<String>> {
    let names = mask_names(pred)?;
    if names.is_empty() {
        bail!("no mask files in {}", pred.display());
    }
    let gt_names: BTreeSet<String> = mask_names(gt)?.into_iter().collect();
    if let Some(n) = names.iter().find(|n| !gt_names.contains(*n)) {
        bail!("{} has no counterpart in {}", n, gt.display());
    }
    if let Some(n) = gt_names.iter().find(|n| names.binary_search(n).is_err()) {
        bail!("{} has no counterpart in {}", n, pred.display());
    }
    Ok(names)
}

pub fn eval(a: EvalArgs) -> Outcome {
    input_dir(&a.pred_dir, "prediction directory")?;
    input_dir(&a.gt_dir, "ground-truth directory")?;
    let loc_dirs = match (&a.inner_dir, &a.outer_dir) {
        (Some(i), Some(o)) => {
            for d in i.iter().chain(o) {
                input_dir(d, "boundary mask directory")?;
            }
            Some((i.clone(), o.clone()))
        }
        _ => None,
    };
    output_file(&a.report, "report")?;

    let names = paired(&a.pred_dir, &a.gt_dir)?;
    if let Some((i, o)) = &loc_dirs {
        for (p, g) in [(&i[0], &i[1]), (&o[0], &o[1])] {
            if paired(p, g)? != names {
                return Err(anyhow!(
                    "{} and {} do not hold the same files as the segmentation directories",
                    p.display(),
                    g.display()
                )
                .into());
            }
        }
    }
    let mut records = Vec::with_capacity(names.len());
    for name in &names {
        let read = |dir: &Path| read_mask(dir.join(name)).with_context(|| format!("mask {name}"));
        let (pred, gt) = (read(&a.pred_dir)?, read(&a.gt_dir)?);
        let rec = match &loc_dirs {
            Some((i, o)) => {
                let (pi, gi, po, go) = (read(&i[0])?, read(&i[1])?, read(&o[0])?, read(&o[1])?);
                let pair = LocalizationPair {
                    pred_inner: &pi,
                    gt_inner: &gi,
                    pred_outer: &po,
                    gt_outer: &go,
                };
                evaluate_image(name.clone(), &pred, &gt, Some(pair))
            }
            None => evaluate_image(name.clone(), &pred, &gt, None),
        }
        .with_context(|| format!("mask {name}"))?;
        records.push(rec);
    }
    let report = aggregate(records)?;
    write_atomic(&a.report, (report.to_json()? + "\n").as_bytes())?;
    println!("n {} E1 {:.6} E2 {:.6}", report.n, report.e1, report.e2);
    if let (Some(d), Some(h)) = (report.mdice, report.mhdis) {
        println!("mDice {d:.6} mHdis {h:.6}");
    }
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Outcome {
    input_file(&a.model, "model")?;
    input_file(&a.manifest, "manifest")?;
    output_file(&a.out, "output")?;
    let model = model_of(&a.model, Task::Segmentation)?;
    let manifest = load_manifest(&a.manifest)?;
    let s = model.config().input_size;
    let mut items = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let load = || -> anyhow::Result<SweepItem> {
            let image = load_rgb(&rec.image)?;
            Ok(SweepItem {
                input: preprocess_to(&image, s, model.normalization.as_ref())?,
                gt: read_mask(mask_path(rec, &rec.seg_mask, "seg_mask")?)?,
            })
        };
        items.push(load().with_context(|| format!("record {}", rec.id))?);
    }
    let result = sweep_threshold(&model, &items, &default_grid())?;
    write_atomic(&a.out, &result.to_csv()?)?;
    println!("best threshold {} (mean E1 {:.6})", result.best_threshold, result.best_e1);
    Ok(())
}

fn protocol(manifest: &Manifest, a: &MatchArgs) -> anyhow::Result<String> {
    let branches = filter_subjects(manifest, FOLDS);
    if branches.is_empty() {
        bail!("no subject has {FOLDS} images of one eye");
    }
    let plan = make_folds(&branches, FOLDS, a.seed)?;
    let model = a.seg_model.as_deref().map(|p| model_of(p, Task::Segmentation)).transpose()?;
    let source = match &model {
        Some(m) => MaskSource::Model(m, a.threshold),
        None => MaskSource::GroundTruth,
    };
    let report = run_protocol(manifest, &plan, source, &MaskedIntensity)?;
    println!("{} subjects, mean rank-1 accuracy {:.4}", branches.len(), report.mean_accuracy);
    Ok(report.to_json()? + "\n")
}

pub fn matching(a: MatchArgs) -> Outcome {
    input_file(&a.manifest, "manifest")?;
    if let Some(p) = &a.seg_model {
        input_file(p, "segmentation model")?;
    }
    output_file(&a.report, "report")?;
    let manifest = load_manifest(&a.manifest)?;
    let json = protocol(&manifest, &a)?;
    write_atomic(&a.report, json.as_bytes())?;
    Ok(())
}

pub fn rank(a: RankArgs) -> Outcome {
    input_file(&a.scores, "scores CSV")?;
    output_file(&a.out, "output")?;
    let file = fs::File::open(&a.scores).with_context(|| format!("opening {}", a.scores.display()))?;
    let table = rank_sum(&ScoreGrid::read_csv(file)?)?;
    let mut bytes = Vec::new();
    table.write_csv(&mut bytes)?;
    write_atomic(&a.out, &bytes)?;
    for d in &table.discrepancies {
        eprintln!(
            "warning: {} {}: component ranks sum to {}, reported {}",
            d.method,
            d.kind.name(),
            d.computed,
            d.reported
        );
    }
    Ok(())
}

pub fn overlay(a: OverlayArgs) -> Outcome {
    input_file(&a.image, "image")?;
    input_file(&a.mask, "mask")?;
    for p in a.inner.iter().chain(&a.outer) {
        input_file(p, "boundary mask")?;
    }
    output_file(&a.out, "output")?;
    let image = load_rgb(&a.image)?;
    let seg = read_mask(&a.mask)?;
    let loc = match (&a.inner, &a.outer) {
        (Some(i), Some(o)) => Some((read_mask(i)?, read_mask(o)?)),
        _ => None,
    };
    let out = render_overlay(&image, &seg, loc.as_ref().map(|(i, o)| (i, o)))?;
    write_rgb_png(&a.out, &out)?;
    Ok(())
}
