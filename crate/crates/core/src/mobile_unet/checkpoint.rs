use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Task};
use super::container::{self, Container};
use super::model::{is_encoder_name, Model, Normalization};
use crate::error::{ContainerError, Error, Result};
use crate::imageio::write_atomic;

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub loss: f64,
    pub val_dice: Option<f64>,
}

/// JSON written next to a weight container as `<container>.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<HistoryEntry>,
    /// Free-form echo of the run configuration.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

pub fn sidecar_path(container: &Path) -> PathBuf {
    let mut s = container.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn history_path(container: &Path) -> PathBuf {
    let mut s = container.as_os_str().to_owned();
    s.push(".history.csv");
    PathBuf::from(s)
}

impl Sidecar {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sc: Sidecar = serde_json::from_str(&text)?;
        if let Some(n) = &sc.normalization {
            n.validate()?;
        }
        Ok(sc)
    }

    /// The sidecar of `container`, if one exists.
    pub fn read_for(container: &Path) -> Result<Option<Self>> {
        let p = sidecar_path(container);
        if p.exists() {
            Self::read(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

pub fn write_history_csv(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss", "val_dice"])?;
    for h in history {
        w.write_record([
            h.step.to_string(),
            h.loss.to_string(),
            h.val_dice.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

impl Model<f32> {
    pub fn to_container_bytes(&self) -> Result<Vec<u8>> {
        container::encode(self.task(), self.store.named_tensors())
    }

    /// Replaces every tensor from a decoded container whose names and shapes
    /// match this model exactly, in order.
    pub fn load_container(&mut self, c: &Container) -> Result<()> {
        let expected = self.tensor_names();
        let provided: HashMap<&str, usize> = c.tensors.iter().enumerate().map(|(i, (n, _))| (n.as_str(), i)).collect();
        for name in &expected {
            let Some(&i) = provided.get(name.as_str()) else {
                return Err(ContainerError::MissingTensor(name.clone()).into());
            };
            let have = self.store.tensor_by_name(name).expect("own name").shape();
            let found = c.tensors[i].1.shape();
            if have != found {
                return Err(ContainerError::ShapeMismatch {
                    name: name.clone(),
                    expected: have.to_vec(),
                    found: found.to_vec(),
                }
                .into());
            }
        }
        if let Some((name, _)) = c.tensors.iter().find(|(n, _)| !expected.contains(n)) {
            return Err(ContainerError::UnexpectedTensor(name.clone()).into());
        }
        if c.task != self.task() {
            return Err(Error::config(format!(
                "container holds a {:?} model, expected {:?}",
                c.task,
                self.task()
            )));
        }
        for (name, t) in &c.tensors {
            *self.store.tensor_by_name_mut(name).expect("checked") = t.clone();
        }
        Ok(())
    }
}

/// Writes the weight container atomically.
pub fn save_weights(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &model.to_container_bytes()?)
}

fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    container::decode(&bytes)
}

pub fn load_weights(path: impl AsRef<Path>, config: ModelConfig) -> Result<Model<f32>> {
    let c = read_container(path.as_ref())?;
    let mut model = Model::zeros(config)?;
    model.load_container(&c)?;
    Ok(model)
}

/// Loads a container using its sidecar (when present) for the input size
/// and normalization; the task comes from the container itself.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let c = read_container(path)?;
    let sidecar = Sidecar::read_for(path)?.unwrap_or_default();
    let size = sidecar.input_size.unwrap_or(super::config::DEFAULT_INPUT_SIZE);
    let mut model = Model::zeros(ModelConfig::with_input_size(c.task, size))?;
    model.load_container(&c)?;
    model.normalization = sidecar.normalization;
    Ok(model)
}

/// Container plus sidecar (and history CSV when the sidecar carries history).
pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>, sidecar: &Sidecar) -> Result<()> {
    let path = path.as_ref();
    save_weights(model, path)?;
    let mut sc = sidecar.clone();
    sc.task = Some(model.task());
    sc.input_size = Some(model.config().input_size);
    if sc.normalization.is_none() {
        sc.normalization = model.normalization.clone();
    }
    sc.write(&sidecar_path(path))?;
    if !sc.history.is_empty() {
        write_history_csv(&history_path(path), &sc.history)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
}

/// Copies encoder tensors from a container into `model`. Names outside the
/// model's encoder are skipped; any shape mismatch aborts before anything
/// is modified. Normalization constants in the container's sidecar are
/// adopted.
pub fn import_pretrained_encoder(path: impl AsRef<Path>, model: &mut Model<f32>) -> Result<ImportReport> {
    let path = path.as_ref();
    let c = read_container(path)?;
    let sidecar = Sidecar::read_for(path)?;
    let report = import_encoder_tensors(&c, model)?;
    if let Some(n) = sidecar.and_then(|s| s.normalization) {
        model.normalization = Some(n);
    }
    Ok(report)
}

pub fn import_encoder_tensors(c: &Container, model: &mut Model<f32>) -> Result<ImportReport> {
    let encoder = model.encoder_names();
    let mut report = ImportReport::default();
    for (name, t) in &c.tensors {
        if !is_encoder_name(name) || !encoder.contains(name) {
            report.skipped.push(name.clone());
            continue;
        }
        let have = model.store.tensor_by_name(name).expect("encoder name").shape();
        if have != t.shape() {
            return Err(ContainerError::ShapeMismatch {
                name: name.clone(),
                expected: have.to_vec(),
                found: t.shape().to_vec(),
            }
            .into());
        }
        report.loaded.push(name.clone());
    }
    for name in &report.loaded {
        let t = &c.tensors.iter().find(|(n, _)| n == name).expect("listed").1;
        *model.store.tensor_by_name_mut(name).expect("encoder name") = t.clone();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn cfg(task: Task) -> ModelConfig {
        ModelConfig::with_input_size(task, 32)
    }

    #[test]
    fn save_load_forward_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.irkw");
        let m = Model::<f32>::build(cfg(Task::Segmentation), 3).unwrap();
        save_weights(&m, &p).unwrap();
        let back = load_weights(&p, cfg(Task::Segmentation)).unwrap();
        let x = Tensor::from_fn(vec![3, 32, 32], |i| (i % 11) as f32 / 11.0);
        assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
        assert_eq!(std::fs::read(&p).unwrap(), back.to_container_bytes().unwrap());
    }

    #[test]
    fn renamed_tensor_is_named_in_the_error() {
        let m = Model::<f32>::build(cfg(Task::Segmentation), 3).unwrap();
        let mut tensors: Vec<(String, Tensor<f32>)> =
            m.store.named_tensors().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let old = tensors[5].0.clone();
        tensors[5].0 = "renamed".into();
        let c = Container {
            task: Task::Segmentation,
            tensors,
        };
        let mut fresh = Model::<f32>::zeros(cfg(Task::Segmentation)).unwrap();
        let err = fresh.load_container(&c).unwrap_err().to_string();
        assert!(err.contains(&old), "{err}");
    }

    #[test]
    fn segmentation_weights_under_localization_fail_at_the_head() {
        let m = Model::<f32>::build(cfg(Task::Segmentation), 3).unwrap();
        let c = container::decode(&m.to_container_bytes().unwrap()).unwrap();
        let mut loc = Model::<f32>::zeros(cfg(Task::Localization)).unwrap();
        match loc.load_container(&c) {
            Err(Error::Container(ContainerError::ShapeMismatch { name, .. })) => {
                assert!(name.starts_with("decoder.up5"), "{name}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn import_rules() {
        let src = Model::<f32>::build(cfg(Task::Segmentation), 5).unwrap();
        let mut dst = Model::<f32>::build(cfg(Task::Localization), 6).unwrap();
        let before = dst.store.clone();

        let empty = Container {
            task: Task::Segmentation,
            tensors: vec![],
        };
        let r = import_encoder_tensors(&empty, &mut dst).unwrap();
        assert!(r.loaded.is_empty());
        assert_eq!(dst.store.params(), before.params());

        let full = container::decode(&src.to_container_bytes().unwrap()).unwrap();
        let r = import_encoder_tensors(&full, &mut dst).unwrap();
        assert_eq!(r.loaded, dst.encoder_names());
        assert!(r.skipped.iter().any(|n| n.starts_with("decoder.")));
        assert!(r.skipped.iter().all(|n| !n.starts_with("encoder.")));
        for name in dst.tensor_names() {
            let now = dst.store.tensor_by_name(&name).unwrap();
            if name.starts_with("encoder.") {
                assert_eq!(now, src.store.tensor_by_name(&name).unwrap());
            } else {
                assert_eq!(now, before.tensor_by_name(&name).unwrap());
            }
        }
    }

    #[test]
    fn import_shape_mismatch_changes_nothing() {
        let mut dst = Model::<f32>::build(cfg(Task::Segmentation), 6).unwrap();
        let before = dst.store.clone();
        let names = dst.encoder_names();
        let good = dst.store.tensor_by_name(&names[0]).unwrap().clone();
        let c = Container {
            task: Task::Segmentation,
            tensors: vec![
                (names[0].clone(), good.map(|v| v + 1.0)),
                (names[1].clone(), Tensor::zeros(vec![1, 2, 3])),
            ],
        };
        assert!(import_encoder_tensors(&c, &mut dst).is_err());
        assert_eq!(dst.store.params(), before.params());
    }

    #[test]
    fn checkpoint_writes_sidecar_and_history() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.irkw");
        let m = Model::<f32>::zeros(cfg(Task::Localization)).unwrap();
        let sc = Sidecar {
            seed: Some(1),
            step: Some(2),
            history: vec![HistoryEntry { step: 1, loss: 0.5, val_dice: None }],
            ..Default::default()
        };
        save_checkpoint(&m, &p, &sc).unwrap();
        let loaded = load_model(&p).unwrap();
        assert_eq!(loaded.config(), m.config());
        let csv = std::fs::read_to_string(history_path(&p)).unwrap();
        assert_eq!(csv, "step,loss,val_dice\n1,0.5,\n");
    }
}
