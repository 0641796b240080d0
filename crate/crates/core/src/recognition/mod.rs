//! Cosine nearest-neighbour identification and the fold protocol.

use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::dataset::{FoldPlan, Manifest};
use crate::error::{Error, Result};
use crate::imageio::{load_rgb, read_mask};
use crate::metrics::BinaryMask;
use crate::mobile_unet::ProbabilityModel;
use crate::pipeline::segment;

pub const FEATURE_SIDE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub id: String,
    pub values: Vec<f64>,
}

/// Turns an image and its iris mask into a feature vector.
pub trait FeatureExtractor {
    fn extract(&self, image: &RgbImage, mask: &BinaryMask) -> Result<Vec<f64>>;
}

/// Masked grayscale, cropped to the mask bounding box, bilinearly resized
/// to 64×64 and L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaskedIntensity;

impl FeatureExtractor for MaskedIntensity {
    fn extract(&self, image: &RgbImage, mask: &BinaryMask) -> Result<Vec<f64>> {
        extract_feature(image, mask)
    }
}

pub fn extract_feature(image: &RgbImage, mask: &BinaryMask) -> Result<Vec<f64>> {
    let (h, w) = (image.height() as usize, image.width() as usize);
    if mask.dims() != (h, w) {
        return Err(Error::dim(format!("mask {:?} does not match image {h}×{w}", mask.dims())));
    }
    let (top, left, bottom, right) = mask
        .bbox()
        .ok_or_else(|| Error::EmptyMask("feature extraction needs a non-empty mask".into()))?;
    let (bh, bw) = (bottom - top + 1, right - left + 1);
    let gray = |r: usize, c: usize| -> f64 {
        if !mask.get(r, c) {
            return 0.0;
        }
        let p = image.get_pixel(c as u32, r as u32).0;
        (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0
    };
    let n = FEATURE_SIDE;
    let mut v = Vec::with_capacity(n * n);
    for j in 0..n {
        let y = (top as f64 + (j as f64 + 0.5) * bh as f64 / n as f64 - 0.5).clamp(top as f64, bottom as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(bottom);
        let fy = y - y0 as f64;
        for i in 0..n {
            let x = (left as f64 + (i as f64 + 0.5) * bw as f64 / n as f64 - 0.5).clamp(left as f64, right as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(right);
            let fx = x - x0 as f64;
            let t = gray(y0, x0) * (1.0 - fx) + gray(y0, x1) * fx;
            let b = gray(y1, x0) * (1.0 - fx) + gray(y1, x1) * fx;
            v.push(t * (1.0 - fy) + b * fy);
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::EmptyInput("masked iris region is entirely black".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// `a·b / (‖a‖ ‖b‖)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("feature lengths {} and {} differ", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::EmptyInput("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Subject of the most similar gallery entry; exact ties go to the
/// lexicographically smallest subject id.
pub fn classify_nn<'a>(probe: &[f64], gallery: &'a [(Vec<f64>, String)]) -> Result<&'a str> {
    let mut best: Option<(f64, &str)> = None;
    for (v, subject) in gallery {
        let s = cosine_similarity(probe, v)?;
        best = match best {
            Some((bs, bsub)) if bs > s || (bs == s && bsub <= subject.as_str()) => Some((bs, bsub)),
            _ => Some((s, subject.as_str())),
        };
    }
    best.map(|(_, s)| s)
        .ok_or_else(|| Error::EmptyInput("nearest-neighbour gallery is empty".into()))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectCounts {
    pub correct: usize,
    pub incorrect: usize,
    /// Predicted subject → count over all folds.
    pub predicted: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub confusion: BTreeMap<String, SubjectCounts>,
}

impl MatchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs every fold on precomputed features keyed by record id.
pub fn run_protocol_features(plan: &FoldPlan, features: &BTreeMap<String, Vec<f64>>) -> Result<MatchReport> {
    if plan.folds.is_empty() {
        return Err(Error::config("fold plan has no folds"));
    }
    let get = |id: &str| {
        features
            .get(id)
            .ok_or_else(|| Error::config(format!("no feature for record {id}")))
    };
    let mut fold_accuracies = Vec::with_capacity(plan.folds.len());
    let mut confusion: BTreeMap<String, SubjectCounts> = BTreeMap::new();
    for fold in &plan.folds {
        if fold.test.is_empty() {
            return Err(Error::config(format!("fold {} has no test items", fold.index)));
        }
        let gallery = fold
            .train
            .iter()
            .map(|(s, id)| Ok((get(id)?.clone(), s.clone())))
            .collect::<Result<Vec<_>>>()?;
        let mut correct = 0usize;
        for (subject, id) in &fold.test {
            let predicted = classify_nn(get(id)?, &gallery).map_err(|e| Error::Record {
                id: id.clone(),
                source: Box::new(e),
            })?;
            let entry = confusion.entry(subject.clone()).or_default();
            *entry.predicted.entry(predicted.to_string()).or_default() += 1;
            if predicted == subject {
                correct += 1;
                entry.correct += 1;
            } else {
                entry.incorrect += 1;
            }
        }
        fold_accuracies.push(correct as f64 / fold.test.len() as f64);
    }
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / fold_accuracies.len() as f64;
    Ok(MatchReport {
        fold_accuracies,
        mean_accuracy,
        confusion,
    })
}

/// Where iris masks come from during the protocol.
pub enum MaskSource<'a> {
    /// Each record's `seg_mask` file.
    GroundTruth,
    /// Predicted by a segmentation model at a threshold.
    Model(&'a dyn ProbabilityModel, f64),
}

/// Extracts features for every planned record and runs the folds. Any
/// extraction failure aborts with an error naming the record.
pub fn run_protocol(
    manifest: &Manifest,
    plan: &FoldPlan,
    masks: MaskSource<'_>,
    extractor: &dyn FeatureExtractor,
) -> Result<MatchReport> {
    let mut features = BTreeMap::new();
    for s in &plan.subjects {
        for id in &s.ids {
            let wrap = |e: Error| Error::Record {
                id: id.clone(),
                source: Box::new(e),
            };
            let rec = manifest
                .record(id)
                .ok_or_else(|| wrap(Error::config("not in manifest")))?;
            let image = load_rgb(&rec.image).map_err(wrap)?;
            let mask = match &masks {
                MaskSource::GroundTruth => {
                    let p = rec
                        .seg_mask
                        .as_ref()
                        .ok_or_else(|| wrap(Error::config("no seg_mask and no segmentation model")))?;
                    read_mask(p).map_err(wrap)?
                }
                MaskSource::Model(model, t) => segment(&image, *model, *t).map_err(wrap)?,
            };
            let v = extractor.extract(&image, &mask).map_err(wrap)?;
            features.insert(id.clone(), v);
        }
    }
    run_protocol_features(plan, &features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 4.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn classify_examples() {
        let g = vec![(vec![1.0, 0.0], "x".to_string()), (vec![0.0, 1.0], "y".to_string())];
        assert_eq!(classify_nn(&[0.0, 1.0], &g).unwrap(), "y");
        let g = vec![(vec![0.9, 0.435889894], "first".to_string()), (vec![0.3, 0.953939201], "second".to_string())];
        assert_eq!(classify_nn(&[1.0, 0.0], &g).unwrap(), "first");
        let tie = vec![(vec![1.0, 1.0], "b".to_string()), (vec![1.0, 1.0], "a".to_string())];
        assert_eq!(classify_nn(&[1.0, 0.0], &tie).unwrap(), "a");
        assert!(classify_nn(&[1.0], &[]).is_err());
    }

    #[test]
    fn feature_contract() {
        let img = RgbImage::from_fn(40, 30, |x, y| Rgb([(x * 3) as u8, (y * 4) as u8, 50]));
        let mask = BinaryMask::from_fn(30, 40, |r, c| (r as i32 - 15).pow(2) + (c as i32 - 20).pow(2) < 100);
        let v = extract_feature(&img, &mask).unwrap();
        assert_eq!(v.len(), 4096);
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(v, extract_feature(&img, &mask).unwrap());
        let bright = RgbImage::from_fn(40, 30, |x, y| {
            let p = img.get_pixel(x, y).0;
            Rgb([p[0] * 2, p[1] * 2, p[2] * 2])
        });
        assert_eq!(extract_feature(&bright, &mask).unwrap(), v);
        assert!(matches!(extract_feature(&img, &BinaryMask::empty(30, 40)), Err(Error::EmptyMask(_))));
    }
}
