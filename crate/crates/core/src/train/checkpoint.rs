use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ncof::{Ncof, NcofArray};
use super::TrainError;
use crate::env::{EnvId, InstanceBatch};
use crate::policy::ParamSet;
use crate::tensor::Tensor;

/// Checkpoint metadata stored in the container header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config_hash: String,
    /// Last completed epoch (0 before training).
    pub epoch: usize,
    pub global_step: u64,
    /// Everything else needed to resume: config, optimizer counters,
    /// baseline state, metrics so far.
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn params_to_arrays(prefix: &str, params: &ParamSet) -> Vec<(String, NcofArray)> {
    params.iter().map(|(n, t)| (format!("{prefix}{n}"), NcofArray::F32(t.clone()))).collect()
}

/// Writes every array of `params` (names unchanged) plus extra named arrays.
pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet,
    extra_arrays: Vec<(String, NcofArray)>,
    meta: &CheckpointMeta,
) -> Result<(), TrainError> {
    let mut arrays = params_to_arrays("", params);
    arrays.extend(extra_arrays);
    let meta = serde_json::to_value(meta).map_err(|e| TrainError::Format(e.to_string()))?;
    Ncof { arrays, meta }.write(path)
}

/// Reads a checkpoint: `(all f32 arrays as a ParamSet, meta, raw container)`.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, CheckpointMeta, Ncof), TrainError> {
    let file = Ncof::read(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(file.meta.clone()).map_err(|e| TrainError::Format(format!("checkpoint meta: {e}")))?;
    if meta.kind != "checkpoint" {
        return Err(TrainError::Format(format!("{} is a {} file, not a checkpoint", path.display(), meta.kind)));
    }
    let mut params = ParamSet::new();
    for (name, a) in &file.arrays {
        if let NcofArray::F32(t) = a {
            params.insert(name.clone(), t.clone());
        }
    }
    Ok((params, meta, file))
}

/// Takes from `stored` exactly the arrays of `expected` (same names and
/// shapes), failing on the first offending array in name order.
pub fn match_params(expected: &ParamSet, stored: &ParamSet) -> Result<ParamSet, TrainError> {
    let mut out = ParamSet::new();
    for (name, want) in expected.iter() {
        match stored.get(name) {
            Some(t) if t.shape() == want.shape() => out.insert(name, t.clone()),
            Some(t) => {
                return Err(TrainError::ShapeMismatchOnLoad {
                    name: name.to_string(),
                    expected: want.shape().to_vec(),
                    found: Some(t.shape().to_vec()),
                })
            }
            None => {
                return Err(TrainError::ShapeMismatchOnLoad {
                    name: name.to_string(),
                    expected: want.shape().to_vec(),
                    found: None,
                })
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    kind: String,
    env: EnvId,
    batch: usize,
    nodes: usize,
}

/// Dataset arrays: `locs [B, N, 2]`, per-node `demand`/`prize`/`penalty`
/// `[B, N]` and per-instance `max_length`/`required_prize` `[B]`, each only
/// when the environment uses it.
pub fn dataset_to_ncof(inst: &InstanceBatch) -> Ncof {
    let (b, n) = (inst.batch, inst.nodes);
    let mut arrays = vec![("locs".to_string(), NcofArray::F32(Tensor::new(vec![b, n, 2], inst.locs.clone())))];
    for (name, a) in inst.node_arrays() {
        arrays.push((name.to_string(), NcofArray::F32(Tensor::new(vec![b, n], a.to_vec()))));
    }
    for (name, a) in inst.scalar_arrays() {
        arrays.push((name.to_string(), NcofArray::F32(Tensor::new(vec![b], a.to_vec()))));
    }
    let meta = DatasetMeta { kind: "dataset".into(), env: inst.env, batch: b, nodes: n };
    Ncof { arrays, meta: serde_json::to_value(meta).expect("plain struct") }
}

/// Per-node and per-instance arrays an environment's instances carry.
fn fields(env: EnvId) -> (&'static [&'static str], &'static [&'static str]) {
    match env {
        EnvId::Tsp | EnvId::Pdp => (&[], &[]),
        EnvId::Cvrp => (&["demand"], &[]),
        EnvId::Op => (&["prize"], &["max_length"]),
        EnvId::Pctsp => (&["prize", "penalty"], &["required_prize"]),
    }
}

pub fn dataset_from_ncof(file: &Ncof) -> Result<InstanceBatch, TrainError> {
    let meta: DatasetMeta =
        serde_json::from_value(file.meta.clone()).map_err(|e| TrainError::Format(format!("dataset meta: {e}")))?;
    if meta.kind != "dataset" {
        return Err(TrainError::Format(format!("expected a dataset, found {}", meta.kind)));
    }
    let (b, n) = (meta.batch, meta.nodes);
    let take = |name: &str, shape: Vec<usize>| -> Result<Vec<f32>, TrainError> {
        let t = file.f32(name)?;
        if t.shape() != shape.as_slice() {
            return Err(TrainError::ShapeMismatchOnLoad {
                name: name.into(),
                expected: shape,
                found: Some(t.shape().to_vec()),
            });
        }
        Ok(t.data().to_vec())
    };
    let mut inst = InstanceBatch::from_locs(meta.env, b, n, take("locs", vec![b, n, 2])?);
    let (node_fields, scalar_fields) = fields(meta.env);
    for &name in node_fields {
        let v = take(name, vec![b, n])?;
        match name {
            "demand" => inst.demand = v,
            "prize" => inst.prize = v,
            _ => inst.penalty = v,
        }
    }
    for &name in scalar_fields {
        let v = take(name, vec![b])?;
        match name {
            "max_length" => inst.max_length = v,
            _ => inst.required_prize = v,
        }
    }
    let known: Vec<&str> =
        std::iter::once("locs").chain(node_fields.iter().copied()).chain(scalar_fields.iter().copied()).collect();
    if let Some((extra, _)) = file.arrays.iter().find(|(name, _)| !known.contains(&name.as_str())) {
        return Err(TrainError::Format(format!("unexpected array {extra:?} for {}", meta.env)));
    }
    inst.validate().map_err(|e| TrainError::Format(e.to_string()))?;
    Ok(inst)
}

pub fn write_dataset(inst: &InstanceBatch, path: &Path) -> Result<(), TrainError> {
    dataset_to_ncof(inst).write(path)
}

pub fn read_dataset(path: &Path) -> Result<InstanceBatch, TrainError> {
    dataset_from_ncof(&Ncof::read(path)?)
}
