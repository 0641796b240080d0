//! Dice loss, augmentation, dataset splits, the Adam training loop and the
//! binarization-threshold sweep.

mod augment;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{apply as apply_augmentation, augment, flip_image, AugmentParams, AugmentationConfig};

use crate::error::{Error, Result};
use crate::metrics::{e1, BinaryMask};
use crate::mobile_unet::{save_checkpoint, HistoryEntry, Model, ProbabilityModel, Sidecar};
use crate::nn::{adam_step, AdamConfig, AdamState, BnMode, Forward, Graph, Tensor, DEFAULT_LR};
use crate::pipeline::resize_probs_nearest;

/// Smoothing term of the soft dice coefficient.
pub const DICE_SMOOTH: f64 = 1.0;

fn soft_dice_plane(p: &[f32], g: &[bool]) -> f64 {
    let (mut inter, mut total) = (0.0f64, 0.0f64);
    for (&pv, &gv) in p.iter().zip(g) {
        let (pv, gv) = (pv as f64, gv as u8 as f64);
        inter += pv * gv;
        total += pv + gv;
    }
    (2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH)
}

fn check_plane(pred: &Tensor<f32>, channels: usize, gt: &BinaryMask) -> Result<()> {
    let (h, w) = gt.dims();
    let ok = match pred.shape() {
        [ph, pw] => channels == 1 && (*ph, *pw) == (h, w),
        [c, ph, pw] => *c == channels && (*ph, *pw) == (h, w),
        _ => false,
    };
    if !ok {
        return Err(Error::dim(format!(
            "prediction {:?} does not match {channels} mask(s) of {h}×{w}",
            pred.shape()
        )));
    }
    Ok(())
}

/// `1 - (2 Σ p·g + ε) / (Σ p + Σ g + ε)` with `ε = 1`.
pub fn dice_loss(pred: &Tensor<f32>, gt: &BinaryMask) -> Result<f64> {
    Ok(1.0 - soft_dice(pred, std::slice::from_ref(gt))?)
}

/// Soft dice averaged over channels, one mask per channel.
pub fn soft_dice(pred: &Tensor<f32>, masks: &[BinaryMask]) -> Result<f64> {
    let first = masks.first().ok_or_else(|| Error::EmptyInput("soft dice without masks".into()))?;
    check_plane(pred, masks.len(), first)?;
    if masks.iter().any(|m| m.dims() != first.dims()) {
        return Err(Error::dim("soft dice: masks differ in size"));
    }
    let plane = first.len();
    let total: f64 = masks
        .iter()
        .enumerate()
        .map(|(c, m)| soft_dice_plane(&pred.data()[c * plane..(c + 1) * plane], m.as_slice()))
        .sum();
    Ok(total / masks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with the seed; validation and test take
/// `floor(ratio · n)` items each and training keeps the remainder.
pub fn split_dataset(n_items: usize, spec: &SplitSpec) -> Result<Split> {
    let (tr, va, te) = spec.ratios;
    if [tr, va, te].iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ((tr + va + te) - 1.0).abs() > 1e-6 {
        return Err(Error::config(format!(
            "split ratios {:?} must be non-negative and sum to 1",
            spec.ratios
        )));
    }
    if n_items < 3 {
        return Err(Error::config(format!("cannot split {n_items} items three ways")));
    }
    // The epsilon keeps products such as 0.1 · 10 from landing just below an integer.
    let count = |r: f64| (r * n_items as f64 + 1e-9).floor() as usize;
    let (n_val, n_test) = (count(va), count(te));
    if n_val + n_test >= n_items || n_val == 0 || n_test == 0 {
        return Err(Error::config(format!(
            "ratios {:?} on {n_items} items leave an empty split (train {}, val {n_val}, test {n_test})",
            spec.ratios,
            n_items.saturating_sub(n_val + n_test)
        )));
    }
    let mut idx: Vec<usize> = (0..n_items).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = n_items - n_val - n_test;
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_steps: usize,
    /// Validation dice is computed every `eval_every` steps and at the last step.
    pub eval_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    /// `Train` normalizes with the statistics of each step's batch and updates
    /// the running averages; `Infer` keeps batchnorm frozen at the stored
    /// statistics.
    pub bn_mode: BnMode,
    /// Weight of a binary cross-entropy term added to the dice loss (0 for
    /// pure dice). Dice alone gives almost no gradient to pixels whose
    /// sigmoid has saturated on the wrong side; the cross-entropy term does.
    #[serde(default)]
    pub bce_weight: f64,
    /// Where to write the final checkpoint, if anywhere.
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
    /// Intermediate checkpoints every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            max_steps: 1000,
            eval_every: 50,
            batch_size: 1,
            seed: 0,
            augment: true,
            bn_mode: BnMode::Train,
            bce_weight: 0.0,
            checkpoint: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be at least 1"));
        }
        if !(self.bce_weight >= 0.0 && self.bce_weight.is_finite()) {
            return Err(Error::config(format!(
                "cross-entropy weight must be finite and non-negative, got {}",
                self.bce_weight
            )));
        }
        if self.eval_every == 0 || self.batch_size == 0 {
            return Err(Error::config("eval_every and batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// A preprocessed `(3, S, S)` image with one mask per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub image: Tensor<f32>,
    pub masks: Vec<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<HistoryEntry>,
}

fn check_items(model: &Model<f32>, items: &[TrainItem], what: &str) -> Result<()> {
    let want = model.config().input_shape();
    let channels = model.config().out_channels();
    for (i, it) in items.iter().enumerate() {
        if it.image.shape() != want {
            return Err(Error::config(format!(
                "{what} item {i}: image {:?} does not match model input {want:?}",
                it.image.shape()
            )));
        }
        if it.masks.len() != channels {
            return Err(Error::config(format!(
                "{what} item {i}: {} mask(s) for a {channels}-channel head",
                it.masks.len()
            )));
        }
        if let Some(m) = it.masks.iter().find(|m| m.dims() != (want[1], want[2])) {
            return Err(Error::config(format!(
                "{what} item {i}: mask {:?} does not match model input {}×{}",
                m.dims(),
                want[1],
                want[2]
            )));
        }
    }
    Ok(())
}

fn stack_masks(masks: &[BinaryMask]) -> Tensor<f32> {
    let (h, w) = masks[0].dims();
    let data = masks.iter().flat_map(|m| m.to_f32()).collect();
    Tensor::new(vec![masks.len(), h, w], data).expect("masks share dims")
}

/// `[C, H, W]` tensors of one shape become `[C, N, H, W]`; a single tensor
/// is returned as is.
fn stack_batch(items: &[Tensor<f32>]) -> Tensor<f32> {
    if items.len() == 1 {
        return items[0].clone();
    }
    let shape = items[0].shape();
    let (c, plane) = (shape[0], shape[1] * shape[2]);
    let mut data = Vec::with_capacity(c * items.len() * plane);
    for ch in 0..c {
        for t in items {
            data.extend_from_slice(&t.data()[ch * plane..(ch + 1) * plane]);
        }
    }
    Tensor::new(vec![c, items.len(), shape[1], shape[2]], data).expect("items share a shape")
}

/// Mean soft dice of the model over `items`, with running batchnorm statistics.
pub fn evaluate_soft_dice(model: &Model<f32>, items: &[TrainItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyInput("soft dice over no items".into()));
    }
    let mut total = 0.0;
    for it in items {
        total += soft_dice(&model.forward(&it.image)?, &it.masks)?;
    }
    Ok(total / items.len() as f64)
}

/// Trains with Adam on the dice loss. Each step draws `batch_size` items
/// from a per-epoch shuffle and runs them as one batch, so batchnorm sees
/// batch statistics; every item gets its own augmentation stream
/// keyed by its position in the run, so results depend only on the seeds.
pub fn train(
    model: &mut Model<f32>,
    train_items: &[TrainItem],
    val_items: &[TrainItem],
    config: &TrainConfig,
    aug: &AugmentationConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    aug.validate()?;
    if train_items.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    check_items(model, train_items, "training")?;
    check_items(model, val_items, "validation")?;

    let mut sampler = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut adam = AdamState::new(model.store.params(), AdamConfig::default());
    let mut history = Vec::with_capacity(config.max_steps);
    let mut draws: u64 = 0;

    for step in 1..=config.max_steps {
        let mut images = Vec::with_capacity(config.batch_size);
        let mut targets = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order = (0..train_items.len()).collect();
                order.shuffle(&mut sampler);
                cursor = 0;
            }
            let item = &train_items[order[cursor]];
            cursor += 1;
            draws += 1;
            let (image, masks) = if config.augment {
                let mut rng = ChaCha8Rng::seed_from_u64(aug.seed);
                rng.set_stream(draws);
                augment(&item.image, &item.masks, aug, &mut rng)?
            } else {
                (item.image.clone(), item.masks.clone())
            };
            images.push(image);
            targets.push(stack_masks(&masks));
        }
        let image = stack_batch(&images);
        let target = stack_batch(&targets);

        let mut g = Graph::new();
        let vars = model.store.bind(&mut g);
        let x = g.leaf(image);
        let mut f = Forward::new(&mut g, &vars, &model.store, config.bn_mode);
        let out = model.forward_graph(&mut f, x)?;
        let updates = std::mem::take(&mut f.bn_updates);
        let mut loss = g.dice_loss(out.output, &target, DICE_SMOOTH as f32)?;
        if config.bce_weight > 0.0 {
            let bce = g.bce_with_logits(out.logits, &target)?;
            let w = g.leaf(Tensor::scalar(config.bce_weight as f32));
            let weighted = g.mul(bce, w)?;
            loss = g.add(loss, weighted)?;
        }
        let loss_value = g.value(loss).data()[0] as f64;
        let mut gr = g.backward(loss)?;
        let grads: Vec<Tensor<f32>> = vars.iter().map(|&v| gr.take(v)).collect();
        model.store.apply_bn_updates(&updates);
        adam_step(model.store.params_mut(), &grads, &mut adam, config.lr)?;

        let val_dice = if !val_items.is_empty() && (step % config.eval_every == 0 || step == config.max_steps) {
            Some(evaluate_soft_dice(model, val_items)?)
        } else {
            None
        };
        history.push(HistoryEntry {
            step,
            loss: loss_value,
            val_dice,
        });

        if let Some(path) = &config.checkpoint {
            let last = step == config.max_steps;
            if last || (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
                let sidecar = Sidecar {
                    seed: Some(config.seed),
                    step: Some(step),
                    history: history.clone(),
                    config: serde_json::json!({ "train": config, "augmentation": aug }),
                    ..Default::default()
                };
                save_checkpoint(model, path, &sidecar)?;
            }
        }
    }
    Ok(TrainOutcome { history })
}

/// Thresholds `0.05, 0.10, ..., 0.95`.
pub fn default_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_threshold: f64,
    pub best_e1: f64,
    /// `(threshold, mean E1)` in grid order.
    pub table: Vec<(f64, f64)>,
}

impl SweepResult {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["threshold", "mean_e1"])?;
        for (t, e) in &self.table {
            w.write_record([t.to_string(), e.to_string()])?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config("threshold grid is empty"));
    }
    if let Some(t) = grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::config(format!("threshold {t} is outside (0, 1)")));
    }
    Ok(())
}

/// Picks the grid threshold with the lowest mean E1 over `(probabilities,
/// ground truth)` pairs; foreground is `p >= t`, ties go to the smallest threshold.
pub fn sweep_threshold_probs(samples: &[(&[f32], &BinaryMask)], grid: &[f64]) -> Result<SweepResult> {
    validate_grid(grid)?;
    if samples.is_empty() {
        return Err(Error::config("threshold sweep needs at least one validation item"));
    }
    for (p, g) in samples {
        if p.len() != g.len() {
            return Err(Error::dim(format!(
                "probability map of {} values for a {:?} mask",
                p.len(),
                g.dims()
            )));
        }
    }
    let mut table = Vec::with_capacity(grid.len());
    for &t in grid {
        let mut total = 0.0;
        for (p, g) in samples {
            let pred = BinaryMask::new(g.height(), g.width(), p.iter().map(|&v| v as f64 >= t).collect())?;
            total += e1(&pred, g)?;
        }
        table.push((t, total / samples.len() as f64));
    }
    let (best_threshold, best_e1) = table
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .expect("grid non-empty");
    Ok(SweepResult {
        best_threshold,
        best_e1,
        table,
    })
}

/// A preprocessed model input and its ground-truth mask at any resolution;
/// probabilities are resampled to the mask by nearest neighbour.
pub struct SweepItem {
    pub input: Tensor<f32>,
    pub gt: BinaryMask,
}

pub fn sweep_threshold<M: ProbabilityModel + ?Sized>(
    model: &M,
    items: &[SweepItem],
    grid: &[f64],
) -> Result<SweepResult> {
    validate_grid(grid)?;
    if items.is_empty() {
        return Err(Error::config("threshold sweep needs at least one validation item"));
    }
    let s = model.input_size();
    let mut probs = Vec::with_capacity(items.len());
    for it in items {
        let out = model.predict(&it.input)?;
        let plane = &out.data()[..s * s];
        probs.push(resize_probs_nearest(plane, s, s, it.gt.height(), it.gt.width()));
    }
    let samples: Vec<(&[f32], &BinaryMask)> = probs.iter().map(|p| p.as_slice()).zip(items.iter().map(|i| &i.gt)).collect();
    sweep_threshold_probs(&samples, grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_loss_examples() {
        let gt = BinaryMask::from_fn(20, 20, |r, c| r < 10 && c < 10);
        let perfect = Tensor::new(vec![1, 20, 20], gt.to_f32()).unwrap();
        assert_eq!(dice_loss(&perfect, &gt).unwrap(), 0.0);
        let zero = Tensor::zeros(vec![20, 20]);
        let l = dice_loss(&zero, &gt).unwrap();
        assert!((l - (1.0 - 1.0 / 101.0)).abs() < 1e-15);
        assert!((l - 0.990099).abs() < 1e-6);
        assert!(dice_loss(&Tensor::zeros(vec![1, 20, 19]), &gt).is_err());
    }

    #[test]
    fn split_examples() {
        let s = split_dataset(3530, &SplitSpec { ratios: (0.90, 0.05, 0.05), seed: 1 }).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (3178, 176, 176));
        let s = split_dataset(10, &SplitSpec { ratios: (0.8, 0.1, 0.1), seed: 1 }).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let again = split_dataset(10, &SplitSpec { ratios: (0.8, 0.1, 0.1), seed: 1 }).unwrap();
        assert_eq!(s, again);
        assert!(split_dataset(10, &SplitSpec { ratios: (1.0, 0.0, 0.0), seed: 1 }).is_err());
        assert!(split_dataset(10, &SplitSpec { ratios: (0.5, 0.5, 0.5), seed: 1 }).is_err());
    }

    #[test]
    fn train_rejects_bad_configs() {
        let mut m = Model::<f32>::zeros(crate::mobile_unet::ModelConfig::with_input_size(
            crate::mobile_unet::Task::Localization,
            32,
        ))
        .unwrap();
        let item = TrainItem {
            image: Tensor::zeros(vec![3, 32, 32]),
            masks: vec![BinaryMask::empty(32, 32)],
        };
        let aug = AugmentationConfig::identity();
        let cfg = TrainConfig {
            max_steps: 0,
            ..Default::default()
        };
        assert!(matches!(train(&mut m, &[item.clone()], &[], &cfg, &aug), Err(Error::Config(_))));
        let cfg = TrainConfig::default();
        let err = train(&mut m, &[item], &[], &cfg, &aug).unwrap_err();
        assert!(err.to_string().contains("2-channel head"), "{err}");
    }

    #[test]
    fn sweep_examples() {
        let gt = BinaryMask::from_fn(4, 4, |r, _| r < 2);
        let probs = gt.to_f32();
        let r = sweep_threshold_probs(&[(&probs, &gt)], &default_grid()).unwrap();
        assert_eq!(r.best_threshold, 0.05);
        assert_eq!(r.table.len(), 19);

        let bg = BinaryMask::empty(4, 4);
        let flat = vec![0.6f32; 16];
        let r = sweep_threshold_probs(&[(&flat, &bg)], &default_grid()).unwrap();
        for &(t, e) in &r.table {
            assert_eq!(e, if t > 0.6 { 0.0 } else { 1.0 }, "t = {t}");
        }
        assert!(r.best_threshold > 0.6);
        assert!(sweep_threshold_probs(&[], &default_grid()).is_err());
        assert!(sweep_threshold_probs(&[(&flat, &bg)], &[]).is_err());
        assert!(sweep_threshold_probs(&[(&flat, &bg)], &[1.0]).is_err());
    }
}
