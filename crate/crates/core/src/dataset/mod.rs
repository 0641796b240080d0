//! Dataset manifests, subject filtering and cross-validation folds.
//!
//! A manifest is JSON:
//!
//! ```json
//! {"dataset": "name",
//!  "records": [{"id": "s1_L_0", "subject": "s1", "eye": "L", "session": 1,
//!               "device": "phone", "image": "img/s1_L_0.png",
//!               "seg_mask": "seg/s1_L_0.png", "inner_mask": null, "outer_mask": null}]}
//! ```
//!
//! Paths are relative to the manifest file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ManifestError, Result};

pub use crate::imageio::read_mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Eye {
    L,
    R,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub subject: String,
    pub eye: Eye,
    pub session: i64,
    #[serde(default)]
    pub device: Option<String>,
    pub image: PathBuf,
    #[serde(default)]
    pub seg_mask: Option<PathBuf>,
    #[serde(default)]
    pub inner_mask: Option<PathBuf>,
    #[serde(default)]
    pub outer_mask: Option<PathBuf>,
}

impl Record {
    fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        std::iter::once(&self.image)
            .chain(&self.seg_mask)
            .chain(&self.inner_mask)
            .chain(&self.outer_mask)
    }
}

/// A loaded manifest; every record path is already resolved against the
/// manifest directory and known to exist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn record(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }
}

fn schema(msg: impl Into<String>) -> Error {
    ManifestError::Schema(msg.into()).into()
}

/// Parses and validates manifest JSON; relative paths are resolved against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Manifest> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(ManifestError::Malformed)?;
    let obj = value.as_object().ok_or_else(|| schema("top level must be an object"))?;
    if let Some(k) = obj.keys().find(|k| *k != "dataset" && *k != "records") {
        return Err(schema(format!("unknown top-level field `{k}`")));
    }
    let dataset = obj
        .get("dataset")
        .ok_or_else(|| schema("missing field `dataset`"))?
        .as_str()
        .ok_or_else(|| schema("`dataset` must be a string"))?
        .to_string();
    let raw = obj
        .get("records")
        .ok_or_else(|| schema("missing field `records`"))?
        .as_array()
        .ok_or_else(|| schema("`records` must be an array"))?;

    let mut records = Vec::with_capacity(raw.len());
    let mut ids = HashSet::new();
    for (i, r) in raw.iter().enumerate() {
        let label = r
            .get("id")
            .and_then(|v| v.as_str())
            .map(|id| format!("record {i} (`{id}`)"))
            .unwrap_or_else(|| format!("record {i}"));
        let mut rec: Record =
            serde_json::from_value(r.clone()).map_err(|e| schema(format!("{label}: {e}")))?;
        if !ids.insert(rec.id.clone()) {
            return Err(ManifestError::DuplicateId(rec.id).into());
        }
        for p in [
            Some(&mut rec.image),
            rec.seg_mask.as_mut(),
            rec.inner_mask.as_mut(),
            rec.outer_mask.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = rec.paths().find(|p| !p.exists()) {
            return Err(ManifestError::MissingFile {
                id: rec.id.clone(),
                path: p.clone(),
            }
            .into());
        }
        records.push(rec);
    }
    Ok(Manifest { dataset, records })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

/// One qualifying eye of one subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub subject: String,
    pub eye: Eye,
    /// Record ids, sorted.
    pub ids: Vec<String>,
}

/// Keeps the `(subject, eye)` branches with at least `min_images` images,
/// preferring the left eye when both qualify; sorted by subject.
pub fn filter_subjects(manifest: &Manifest, min_images: usize) -> Vec<Branch> {
    let mut groups: BTreeMap<(&str, Eye), Vec<String>> = BTreeMap::new();
    for r in &manifest.records {
        groups.entry((r.subject.as_str(), r.eye)).or_default().push(r.id.clone());
    }
    let mut out: Vec<Branch> = Vec::new();
    // BTreeMap order visits L before R for each subject.
    for ((subject, eye), mut ids) in groups {
        if ids.len() < min_images || out.last().is_some_and(|b| b.subject == subject) {
            continue;
        }
        ids.sort();
        out.push(Branch {
            subject: subject.to_string(),
            eye,
            ids,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectImages {
    pub subject: String,
    pub eye: Eye,
    /// The sampled ids; fold `f` tests on `ids[f]`.
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    /// `(subject, id)` pairs.
    pub test: Vec<(String, String)>,
    pub train: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub subjects: Vec<SubjectImages>,
    pub folds: Vec<Fold>,
}

/// Samples `images_per_subject` ids per branch and builds one fold per
/// sampled position: that image is the test item, the rest train.
pub fn make_folds(selected: &[Branch], images_per_subject: usize, seed: u64) -> Result<FoldPlan> {
    if images_per_subject < 2 {
        return Err(Error::config("folds need at least 2 images per subject"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects = Vec::with_capacity(selected.len());
    for b in selected {
        if b.ids.len() < images_per_subject {
            return Err(Error::config(format!(
                "subject {} ({:?} eye) has {} images, needs {images_per_subject}",
                b.subject,
                b.eye,
                b.ids.len()
            )));
        }
        let mut ids = b.ids.clone();
        ids.sort();
        let ids: Vec<String> = ids.choose_multiple(&mut rng, images_per_subject).cloned().collect();
        subjects.push(SubjectImages {
            subject: b.subject.clone(),
            eye: b.eye,
            ids,
        });
    }
    let folds = (0..images_per_subject)
        .map(|f| {
            let mut test = Vec::new();
            let mut train = Vec::new();
            for s in &subjects {
                for (k, id) in s.ids.iter().enumerate() {
                    let pair = (s.subject.clone(), id.clone());
                    if k == f {
                        test.push(pair);
                    } else {
                        train.push(pair);
                    }
                }
            }
            Fold { index: f, test, train }
        })
        .collect();
    Ok(FoldPlan { subjects, folds })
}
