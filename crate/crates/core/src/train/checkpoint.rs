//! Checkpoints: one `HRT1` file per parameter plus `manifest.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelSpec};
use crate::autograd::ParamKind;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub trainable: bool,
    pub shape: [usize; 4],
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model: ModelSpec,
    pub params: Vec<ParamEntry>,
    /// Free-form run information (epoch, provenance, metrics).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(model: &Model, dir: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for id in model.store.ids() {
        let t = model.store.get(id);
        let file = format!("{:04}.hrt", id.index());
        write_tensor(t, dir.join(&file))?;
        params.push(ParamEntry {
            name: model.store.name(id).to_string(),
            trainable: model.store.kind(id) == ParamKind::Trainable,
            shape: t.shape().dims(),
            file,
        });
    }
    let manifest = CheckpointManifest { version: CHECKPOINT_VERSION, model: model.spec.clone(), params, meta };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_slice(&bytes)?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!("checkpoint version {} is not {CHECKPOINT_VERSION}", m.version)));
    }
    Ok(m)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(&manifest.model, 0)?;
    if manifest.params.len() != model.store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, model {} expects {}",
            manifest.params.len(),
            manifest.model.kind,
            model.store.len()
        )));
    }
    for p in &manifest.params {
        let id = model
            .store
            .lookup(&p.name)
            .ok_or_else(|| Error::Config(format!("checkpoint tensor {} is not a model parameter", p.name)))?;
        let t = read_tensor(dir.join(&p.file))?;
        let want = model.store.get(id).shape();
        if t.shape() != want || t.shape().dims() != p.shape {
            return Err(Error::shape("checkpoint", t.shape(), want));
        }
        model.store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::train::model::ModelKind;

    #[test]
    fn save_load_forward_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::tiny(ModelKind::TrsNet, 3);
        let mut model = Model::new(&spec, 4).unwrap();
        // Perturb a running statistic so buffers are exercised too.
        let stat = model.store.ids().find(|&id| model.store.kind(id) == ParamKind::Buffer).unwrap();
        model.store.get_mut(stat).data_mut()[0] = 0.37;
        save_checkpoint(&model, dir.path(), serde_json::json!({"epoch": 3})).unwrap();
        let (back, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m.meta["epoch"], 3);
        let x = Tensor::from_fn([1, 3, 32, 32], |[_, c, y, x]| ((c + y * 3 + x * 7) % 13) as f32 / 13.0);
        assert_eq!(model.logits(&x).unwrap().data(), back.logits(&x).unwrap().data());
    }

    #[test]
    fn mismatched_tensor_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::tiny(ModelKind::BaselineUniform, 2);
        let model = Model::new(&spec, 0).unwrap();
        save_checkpoint(&model, dir.path(), serde_json::Value::Null).unwrap();
        write_tensor(&Tensor::zeros([1, 1, 1, 1]), dir.path().join("0000.hrt")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
