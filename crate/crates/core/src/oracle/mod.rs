//! Exact reference solvers for small instances.
//!
//! [`held_karp`] is an independent dynamic program for TSP. [`brute_force`]
//! enumerates the environment's own masked action tree, so its feasibility
//! semantics are by construction those of the environment.

mod brute;
mod held_karp;

use std::path::{Path, PathBuf};

pub use brute::{brute_force, brute_force_limit};
pub use held_karp::{held_karp, HELD_KARP_MAX_NODES};

use crate::env::{generate, pad_actions, EnvError, EnvId, GenerateOptions, InstanceBatch};
use crate::par;
use crate::tensor::Tensor;
use crate::train::ncof::{Ncof, NcofArray};
use crate::train::{dataset_to_ncof, TrainError};

/// Optimum of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Optimal objective as reported in tables: tour cost, or prize for OP.
    pub value: f32,
    /// One optimal action sequence, as the environment expects it.
    pub actions: Vec<i32>,
    /// Search states (dynamic-programming entries or tree nodes) visited.
    pub explored: u64,
}

impl OracleResult {
    /// The environment reward of the optimum.
    pub fn reward(&self, env: EnvId) -> f32 {
        if env.maximize() {
            self.value
        } else {
            -self.value
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("{env} instance with {nodes} nodes is too large for {solver} (limit {limit})")]
    TooLarge { solver: &'static str, env: EnvId, nodes: usize, limit: usize },
    #[error("{solver} solves TSP only, got {env}")]
    WrongEnv { solver: &'static str, env: EnvId },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    HeldKarp,
    BruteForce,
}

impl Solver {
    /// Held-Karp for TSP, brute force otherwise.
    pub fn for_env(env: EnvId) -> Solver {
        if env == EnvId::Tsp {
            Solver::HeldKarp
        } else {
            Solver::BruteForce
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Solver::HeldKarp => "held_karp",
            Solver::BruteForce => "brute_force",
        }
    }
}

/// Solves every row of `inst`, in parallel over rows.
pub fn solve_batch(inst: &InstanceBatch, solver: Solver) -> Result<Vec<OracleResult>, OracleError> {
    par::try_map_range(inst.batch, |b| match solver {
        Solver::HeldKarp => held_karp(inst, b),
        Solver::BruteForce => brute_force(inst, b),
    })
}

pub fn results_to_ncof(inst: &InstanceBatch, results: &[OracleResult], solver: Solver) -> Ncof {
    let rows: Vec<Vec<i32>> = results.iter().map(|r| r.actions.clone()).collect();
    let mut file = dataset_to_ncof(inst);
    file.arrays.push((
        "value".into(),
        NcofArray::F32(Tensor::new(vec![results.len()], results.iter().map(|r| r.value).collect())),
    ));
    file.arrays.push(("actions".into(), NcofArray::I32(pad_actions(&rows))));
    file.meta["solver"] = solver.name().into();
    file
}

/// Reads optimal values and action sequences written by [`results_to_ncof`].
pub fn results_from_ncof(file: &Ncof) -> Result<Vec<OracleResult>, TrainError> {
    let value = file.f32("value")?;
    let Some(NcofArray::I32(actions)) = file.get("actions") else {
        return Err(TrainError::MissingArray("actions".into()));
    };
    let t = actions.shape().get(1).copied().unwrap_or(0);
    if actions.shape().first() != Some(&value.len()) {
        return Err(TrainError::Format("actions and value disagree on the batch size".into()));
    }
    Ok((0..value.len())
        .map(|b| OracleResult {
            value: value.data()[b],
            actions: actions.data()[b * t..(b + 1) * t].iter().copied().filter(|&a| a >= 0).collect(),
            explored: 0,
        })
        .collect())
}

pub fn cache_path(dir: &Path, env: EnvId, n: usize, count: usize, seed: u64) -> PathBuf {
    dir.join(format!("oracle_{}_n{n}_b{count}_s{seed}.ncof", env.name()))
}

/// Optima of `count` generated instances, cached per (env, seed, n) under
/// `dir`. Returns the instances together with their optima.
pub fn solve_cached(
    dir: &Path,
    env: EnvId,
    n: usize,
    count: usize,
    seed: u64,
    opts: &GenerateOptions,
) -> Result<(InstanceBatch, Vec<OracleResult>), OracleError> {
    let inst = generate(env, n, count, seed, opts)?;
    let path = cache_path(dir, env, n, count, seed);
    if let Ok(file) = Ncof::read(&path) {
        let stored = crate::train::dataset_from_ncof(&Ncof {
            arrays: file.arrays.iter().filter(|(name, _)| name != "value" && name != "actions").cloned().collect(),
            meta: file.meta.clone(),
        });
        if stored.is_ok_and(|s| s == inst) {
            if let Ok(results) = results_from_ncof(&file) {
                return Ok((inst, results));
            }
        }
    }
    let solver = Solver::for_env(env);
    let results = solve_batch(&inst, solver)?;
    std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    results_to_ncof(&inst, &results, solver).write(&path)?;
    Ok((inst, results))
}
