//! Evaluation metrics for segmentation and localization masks.
//!
//! Segmentation is scored with the NICE-I pair: E1, the mean fraction of
//! disagreeing pixels, and E2, the mean of false-positive and
//! false-negative rates. Localization is scored with Dice overlap of the
//! filled inner/outer regions and normalized Hausdorff distance between
//! their boundaries.

mod hausdorff;
mod mask;
pub mod rank;
mod report;

pub use hausdorff::{boundary_points, directed_hausdorff, hausdorff, normalized_hausdorff, BoundarySet};
pub use mask::BinaryMask;
pub use rank::{rank_sum, Direction, RankTable, ScoreCell, ScoreGrid, TaskGroup};
pub use report::{aggregate, evaluate_image, EvalReport, ImageRecord, LocalizationPair};

use crate::error::{Error, Result};

fn same_dims(a: &BinaryMask, b: &BinaryMask, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dim(format!(
            "{what}: mask dims {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Fraction of pixels where `pred` and `gt` disagree.
pub fn e1(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_dims(pred, gt, "e1")?;
    let disagree = pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .filter(|(a, b)| a != b)
        .count();
    Ok(disagree as f64 / pred.len() as f64)
}

/// E1 over a batch: the per-image disagreement fractions averaged over `n` images.
pub fn e1_batch(pairs: &[(&BinaryMask, &BinaryMask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("e1 over an empty batch".into()));
    }
    let mut total = 0.0;
    for (p, g) in pairs {
        total += e1(p, g)?;
    }
    Ok(total / pairs.len() as f64)
}

/// `(fp, fn)`: false positives over ground-truth background pixels and
/// false negatives over ground-truth foreground pixels. A rate whose
/// denominator is zero is defined as 0.
pub fn fp_fn_rates(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    same_dims(pred, gt, "fp/fn rates")?;
    let (mut fp, mut fnn, mut bg, mut fg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        if g {
            fg += 1;
            if !p {
                fnn += 1;
            }
        } else {
            bg += 1;
            if p {
                fp += 1;
            }
        }
    }
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok((rate(fp, bg), rate(fnn, fg)))
}

/// E2 from per-image rates: `Σ (fp + fn) / (2 n)`.
pub fn e2_from_rates(rates: &[(f64, f64)]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::EmptyInput("e2 over an empty batch".into()));
    }
    let sum: f64 = rates.iter().map(|(a, b)| a + b).sum();
    Ok(sum / (2.0 * rates.len() as f64))
}

pub fn e2_batch(pairs: &[(&BinaryMask, &BinaryMask)]) -> Result<f64> {
    let rates = pairs
        .iter()
        .map(|(p, g)| fp_fn_rates(p, g))
        .collect::<Result<Vec<_>>>()?;
    e2_from_rates(&rates)
}

/// Dice overlap `2|a∩b| / (|a|+|b|)`; two empty masks agree perfectly (1).
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    same_dims(a, b, "dice")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}
