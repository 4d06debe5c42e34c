//! Checkpoint directories: `checkpoint.json` plus one `.npy` per parameter
//! array and, after training, one per optimizer moment buffer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::CalibBounds;
use crate::data::npy::{read_npy, write_npy, Dtype};
use crate::error::{Error, Result};
use crate::heads::{EnvelopeHead, SelectorHead};
use crate::model::CalibModel;
use crate::neural::{AdamWState, DenseLayer, Mlp, Parameters};
use crate::scalar::Scalar;

use super::train::{Checkpoint, EpochLog, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "depthcal-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const META: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    version: u32,
    dtype: Dtype,
    dataset: String,
    text_dim: usize,
    feature_dim: usize,
    bounds: CalibBounds<f64>,
    config: TrainConfig,
    params: Vec<ParamEntry>,
    optimizer_step: u64,
    log: Vec<EpochLog>,
}

fn dense_entries(prefix: &str, l: &DenseLayer<impl Scalar>, out: &mut Vec<ParamEntry>) {
    out.push(ParamEntry { name: format!("{prefix}.weight"), shape: vec![l.out_dim(), l.in_dim()] });
    out.push(ParamEntry { name: format!("{prefix}.bias"), shape: vec![l.out_dim()] });
}

/// Names and shapes in [`Parameters`] order.
pub fn param_entries<T: Scalar>(model: &CalibModel<T>) -> Vec<ParamEntry> {
    let mut v = Vec::new();
    for (i, l) in model.envelope.trunk.layers().iter().enumerate() {
        dense_entries(&format!("layer{i}"), l, &mut v);
    }
    dense_entries("mu", &model.envelope.head_mu, &mut v);
    dense_entries("r", &model.envelope.head_r, &mut v);
    for (i, l) in model.selector.net.layers().iter().enumerate() {
        dense_entries(&format!("sel.layer{i}"), l, &mut v);
    }
    v
}

fn dtype_of<T>() -> Dtype {
    if std::mem::size_of::<T>() == 4 {
        Dtype::F4
    } else {
        Dtype::F8
    }
}

pub fn save_checkpoint<T: Scalar>(dir: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dtype = dtype_of::<T>();
    let entries = param_entries(&ckpt.model);
    let put = |name: String, shape: &[usize], data: &[T]| write_npy(dir.join(format!("{name}.npy")), shape, data, dtype);
    for (e, p) in entries.iter().zip(ckpt.model.param_slices()) {
        put(e.name.clone(), &e.shape, p)?;
    }
    if !ckpt.optimizer.m.is_empty() {
        if ckpt.optimizer.m.len() != entries.len() || ckpt.optimizer.v.len() != entries.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameter list".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            put(format!("adam.m.{}", e.name), &e.shape, &ckpt.optimizer.m[i])?;
            put(format!("adam.v.{}", e.name), &e.shape, &ckpt.optimizer.v[i])?;
        }
    }
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dtype,
        dataset: ckpt.dataset.clone(),
        text_dim: ckpt.text_dim,
        feature_dim: ckpt.feature_dim,
        bounds: ckpt.model.bounds.cast(),
        config: ckpt.config.clone(),
        params: entries,
        optimizer_step: ckpt.optimizer.t,
        log: ckpt.log.clone(),
    };
    let mut text = serde_json::to_vec_pretty(&meta)?;
    text.push(b'\n');
    let path = dir.join(META);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_param<T: Scalar>(dir: &Path, name: &str, shape: &[usize]) -> Result<Vec<T>> {
    let a = read_npy(dir.join(format!("{name}.npy")))?;
    if a.shape != shape {
        return Err(Error::Checkpoint(format!("{name}: stored shape {:?}, expected {shape:?}", a.shape)));
    }
    Ok(a.cast())
}

fn read_dense<T: Scalar>(dir: &Path, prefix: &str, entries: &[ParamEntry]) -> Result<DenseLayer<T>> {
    let find = |suffix: &str| {
        let name = format!("{prefix}.{suffix}");
        entries.iter().find(|e| e.name == name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    };
    let (w, b) = (find("weight")?, find("bias")?);
    if w.shape.len() != 2 || b.shape != [w.shape[0]] {
        return Err(Error::Checkpoint(format!("{prefix}: inconsistent shapes {:?} / {:?}", w.shape, b.shape)));
    }
    DenseLayer::new(w.shape[1], w.shape[0], read_param(dir, &w.name, &w.shape)?, read_param(dir, &b.name, &b.shape)?)
}

pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let dir = dir.as_ref();
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format '{}'", meta.format)));
    }
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("version {} is not supported (expected {CHECKPOINT_VERSION})", meta.version)));
    }
    let arch = meta.config.arch;
    let trunk = (0..arch.trunk_layers).map(|i| read_dense(dir, &format!("layer{i}"), &meta.params)).collect::<Result<Vec<_>>>()?;
    let sel = (0..arch.selector_layers).map(|i| read_dense(dir, &format!("sel.layer{i}"), &meta.params)).collect::<Result<Vec<_>>>()?;
    let bounds: CalibBounds<T> = meta.bounds.cast();
    bounds.validate()?;
    let envelope = EnvelopeHead::new(
        Mlp::from_layers(trunk)?,
        read_dense(dir, "mu", &meta.params)?,
        read_dense(dir, "r", &meta.params)?,
        bounds.r_max,
    )?;
    let selector = SelectorHead::new(Mlp::from_layers(sel)?)?;
    let model = CalibModel { envelope, selector, bounds };
    if model.text_dim() != meta.text_dim || model.feature_dim() != meta.feature_dim {
        return Err(Error::Checkpoint("stored dims disagree with the parameter shapes".into()));
    }
    let entries = param_entries(&model);
    if entries != meta.params {
        return Err(Error::Checkpoint("parameter list does not match the architecture".into()));
    }

    let optimizer = if meta.optimizer_step == 0 {
        AdamWState::new()
    } else {
        let mut st = AdamWState { m: Vec::new(), v: Vec::new(), t: meta.optimizer_step };
        for e in &entries {
            st.m.push(read_param(dir, &format!("adam.m.{}", e.name), &e.shape)?);
            st.v.push(read_param(dir, &format!("adam.v.{}", e.name), &e.shape)?);
        }
        st
    };
    Ok(Checkpoint {
        dataset: meta.dataset,
        text_dim: meta.text_dim,
        feature_dim: meta.feature_dim,
        config: meta.config,
        model,
        optimizer,
        log: meta.log,
    })
}
