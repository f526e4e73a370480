//! Checkpoint container: a safetensors file holding every parameter (and
//! optionally optimizer moments) with a JSON manifest in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::config::json_diff;
use crate::error::{contract, Error, Result};
use crate::model::{Model, MODULE_VERSIONS};
use crate::nn::Adam;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";
const PARAM_PREFIX: &str = "param.";
const OPT_PREFIX: &str = "opt.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    /// Hash of the full pipeline configuration that produced the file.
    pub config_hash: String,
    /// Hash of the architecture and schedule; must match to load weights.
    pub model_hash: String,
    pub model_config: serde_json::Value,
    /// Last stage that ran (`vae`, `unet`, `dcm`, `joint`) or `init`.
    pub stage: String,
    /// Optimizer steps completed within `stage`.
    pub step: u64,
    /// Steps completed per stage so far.
    pub completed: BTreeMap<String, u64>,
    pub module_versions: BTreeMap<String, u32>,
    pub master_seed: u64,
    /// Seeds derived from the master seed, keyed by purpose.
    pub seeds: BTreeMap<String, u64>,
    /// Adam step counter when optimizer moments are stored.
    #[serde(default)]
    pub optimizer_step: Option<u64>,
}

impl CheckpointManifest {
    pub fn new(model: &Model, config_hash: String, master_seed: u64) -> Self {
        Self {
            format: FORMAT_VERSION,
            config_hash,
            model_hash: model.cfg.hash(),
            model_config: model.cfg.to_value(),
            stage: "init".into(),
            step: 0,
            completed: BTreeMap::new(),
            module_versions: MODULE_VERSIONS.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            master_seed,
            seeds: BTreeMap::new(),
            optimizer_step: None,
        }
    }
}

/// A checkpoint read back from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: BTreeMap<String, Tensor>,
    /// Adam moments keyed `m.<param>` / `v.<param>`, with the step counter.
    pub optimizer: Option<(u64, BTreeMap<String, Tensor>)>,
}

fn st_dtype(dtype: DType) -> Result<StDtype> {
    match dtype {
        DType::F32 => Ok(StDtype::F32),
        DType::F64 => Ok(StDtype::F64),
        other => Err(contract(format!("cannot checkpoint dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(contract(format!("cannot checkpoint dtype {other:?}"))),
    })
}

fn view_to_tensor(view: &safetensors::tensor::TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let dev = &Device::Cpu;
    Ok(match view.dtype() {
        StDtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, dev)?
        }
        StDtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, dev)?
        }
        other => return Err(contract(format!("unsupported tensor dtype {other:?} in checkpoint"))),
    })
}

/// Writes parameters, optional optimizer state and the manifest. The file is
/// written beside `path` first and renamed into place.
pub fn save(path: &Path, model: &Model, manifest: &CheckpointManifest, optimizer: Option<&Adam>) -> Result<()> {
    let mut named: Vec<(String, Tensor)> = model
        .ps
        .all()
        .into_iter()
        .map(|(k, v)| (format!("{PARAM_PREFIX}{k}"), v.as_tensor().clone()))
        .collect();
    let mut meta = manifest.clone();
    if let Some(opt) = optimizer {
        let (step, tensors) = opt.export();
        named.extend(tensors.into_iter().map(|(k, t)| (format!("{OPT_PREFIX}{k}"), t)));
        meta.optimizer_step = Some(step);
    } else {
        meta.optimizer_step = None;
    }
    let buffers = named
        .iter()
        .map(|(k, t)| Ok((k.clone(), st_dtype(t.dtype())?, t.dims().to_vec(), tensor_bytes(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let views = buffers
        .iter()
        .map(|(k, d, s, b)| Ok((k.clone(), TensorView::new(*d, s.clone(), b)?)))
        .collect::<Result<Vec<_>>>()?;
    let header = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(&meta)?)]);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = tmp_path(path);
    safetensors::serialize_to_file(views, Some(header), &tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} has no manifest", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(raw)?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format
        )));
    }
    let st = SafeTensors::deserialize(&bytes)?;
    let mut params = BTreeMap::new();
    let mut opt = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = view_to_tensor(&view)?;
        if let Some(p) = name.strip_prefix(PARAM_PREFIX) {
            params.insert(p.to_string(), t);
        } else if let Some(o) = name.strip_prefix(OPT_PREFIX) {
            opt.insert(o.to_string(), t);
        }
    }
    let optimizer = manifest.optimizer_step.map(|step| (step, opt));
    Ok(Checkpoint {
        manifest,
        params,
        optimizer,
    })
}

impl Checkpoint {
    /// Refuses checkpoints built for a different architecture, listing the
    /// differing keys.
    pub fn check_compatible(&self, model: &Model) -> Result<()> {
        if self.manifest.model_hash == model.cfg.hash() {
            return Ok(());
        }
        let diff = json_diff(&self.manifest.model_config, &model.cfg.to_value());
        Err(Error::Checkpoint(format!(
            "model hash {} differs from config {}; changed keys (checkpoint -> config): {}",
            &self.manifest.model_hash[..12.min(self.manifest.model_hash.len())],
            &model.cfg.hash()[..12],
            if diff.is_empty() { "<none>".to_string() } else { diff.join(", ") }
        )))
    }

    /// Copies every stored parameter into `model`.
    pub fn apply(&self, model: &Model) -> Result<()> {
        self.check_compatible(model)?;
        let vars = model.ps.all();
        for (name, var) in &vars {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing from checkpoint")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        if let Some(extra) = self.params.keys().find(|k| !vars.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(())
    }

    /// Restores optimizer moments if the checkpoint carries them.
    pub fn restore_optimizer(&self, opt: &mut Adam, dtype: DType) -> Result<bool> {
        let Some((step, tensors)) = &self.optimizer else {
            return Ok(false);
        };
        let converted = tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.to_dtype(dtype)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        opt.import(*step, &converted)?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::model::Stage;

    fn model(seed: u64) -> Model {
        Model::new(&PipelineConfig::tiny(), seed).unwrap()
    }

    #[test]
    fn round_trip_restores_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        let a = model(1);
        let mut man = CheckpointManifest::new(&a, "cfg".into(), 9);
        man.stage = "unet".into();
        man.step = 17;
        save(&path, &a, &man, None).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.manifest, man);
        assert!(ck.optimizer.is_none());
        let b = model(2);
        ck.apply(&b).unwrap();
        for (name, va) in a.ps.all() {
            let vb = b.ps.var(&name).unwrap();
            let x = va.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = vb.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y, "{name}");
        }
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.safetensors");
        let m = model(3);
        let mut opt = Adam::new(m.stage_params(Stage::Dcm), 1e-3).unwrap();
        let loss = m.ps.var("dcm.shallow.weight").unwrap().as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        save(&path, &m, &CheckpointManifest::new(&m, "c".into(), 0), Some(&opt)).unwrap();
        let ck = load(&path).unwrap();
        let mut fresh = Adam::new(m.stage_params(Stage::Dcm), 1e-3).unwrap();
        assert!(ck.restore_optimizer(&mut fresh, DType::F32).unwrap());
        assert_eq!(fresh.step_count(), 1);
        let (_, a) = opt.export();
        let (_, b) = fresh.export();
        for ((ka, ta), (kb, tb)) in a.iter().zip(&b) {
            assert_eq!(ka, kb);
            let x = ta.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = tb.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn architecture_mismatch_is_refused_with_a_diff() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let a = model(0);
        save(&path, &a, &CheckpointManifest::new(&a, "x".into(), 0), None).unwrap();
        let mut cfg = PipelineConfig::tiny();
        cfg.capm.k = 3;
        let b = Model::new(&cfg, 0).unwrap();
        let err = load(&path).unwrap().apply(&b).unwrap_err().to_string();
        assert!(err.contains("capm.k: 2 -> 3"), "{err}");
    }

    #[test]
    fn file_without_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.safetensors");
        let data = vec![0u8; 4];
        let view = TensorView::new(StDtype::F32, vec![1], &data).unwrap();
        safetensors::serialize_to_file(vec![("x", view)], None, &path).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
