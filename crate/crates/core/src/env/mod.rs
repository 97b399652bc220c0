//! Batched, stateless routing environments: TSP, CVRP, OP, PCTSP and PDP.
//!
//! Every operation is a pure function. The mutable part of an episode lives
//! in a [`KeyedBatch`] that callers pass back in; stepping never touches its
//! input, so a state can be copied and replayed at will.

mod feasibility;
mod instance;
mod keyed;
mod state;
pub mod transform;
pub mod tsplib;

use std::fmt;
use std::str::FromStr;

pub use feasibility::{check_prefix, check_row, cost_row, Violation, ViolationKind};
pub use instance::{generate, GenerateOptions, InstanceBatch};
pub use keyed::{Array, KeyedBatch};
pub use state::RowState;

use crate::par;
use crate::tensor::Tensor;

/// Absolute slack for every numeric feasibility comparison.
pub const FEAS_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Tsp,
    Cvrp,
    Op,
    Pctsp,
    Pdp,
}

impl EnvId {
    pub const ALL: [EnvId; 5] = [EnvId::Tsp, EnvId::Cvrp, EnvId::Op, EnvId::Pctsp, EnvId::Pdp];

    pub fn name(self) -> &'static str {
        match self {
            EnvId::Tsp => "tsp",
            EnvId::Cvrp => "cvrp",
            EnvId::Op => "op",
            EnvId::Pctsp => "pctsp",
            EnvId::Pdp => "pdp",
        }
    }

    /// Node 0 is a depot.
    pub fn has_depot(self) -> bool {
        self != EnvId::Tsp
    }

    /// OP is the only maximization problem.
    pub fn maximize(self) -> bool {
        self == EnvId::Op
    }

    /// Total node count for a problem with `n` customers (TSP: `n` nodes).
    pub fn total_nodes(self, n: usize) -> usize {
        if self.has_depot() {
            n + 1
        } else {
            n
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvId {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnvId::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| EnvError::UnknownEnv(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("unknown environment {0:?}")]
    UnknownEnv(String),
    #[error("unsupported problem size {n} for {env}: {reason}")]
    UnsupportedSize { env: EnvId, n: usize, reason: String },
    #[error("row {row}: action {action} is infeasible")]
    InfeasibleAction { row: usize, action: i32 },
    #[error("row {row}: step on a finished episode")]
    StepOnDone { row: usize },
    #[error("row {row}: infeasible solution: {violation}")]
    InfeasibleSolution { row: usize, violation: Violation },
    #[error("unsupported edge weight type {0:?}")]
    UnsupportedEdgeWeightType(String),
    #[error("malformed section: {0}")]
    MalformedSection(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
}

/// Initial state for every instance in the batch.
pub fn reset(inst: &InstanceBatch) -> KeyedBatch {
    let rows: Vec<RowState> = (0..inst.batch).map(|b| RowState::reset(inst, b)).collect();
    state::to_keyed(inst, &rows)
}

/// Applies one action per row (`-1` for rows that are already done).
pub fn step(inst: &InstanceBatch, state: &KeyedBatch, actions: &[i32]) -> Result<KeyedBatch, EnvError> {
    if actions.len() != inst.batch || state.batch() != inst.batch {
        return Err(EnvError::ShapeMismatch(format!(
            "{} actions / state batch {} for {} instances",
            actions.len(),
            state.batch(),
            inst.batch
        )));
    }
    let rows = state::from_keyed(inst, state)?;
    let next = par::try_map_range(inst.batch, |b| {
        let mut row = rows[b].clone();
        row.apply(inst, b, actions[b])?;
        Ok::<_, EnvError>(row)
    })?;
    Ok(state::to_keyed(inst, &next))
}

/// Upper bound on the number of decoding steps of any episode.
pub fn max_steps(inst: &InstanceBatch) -> usize {
    let customers = inst.customers();
    match inst.env {
        EnvId::Tsp | EnvId::Pdp => customers,
        EnvId::Cvrp => 2 * customers,
        EnvId::Op | EnvId::Pctsp => customers + 1,
    }
}

/// Per-row feasibility report of complete action sequences `[B, T]`.
pub fn check_feasible(inst: &InstanceBatch, actions: &Tensor<i32>) -> Vec<Result<(), Violation>> {
    let t = actions_width(inst, actions);
    (0..inst.batch).map(|b| check_row(inst, b, &actions.data()[b * t..(b + 1) * t])).collect()
}

/// Terminal reward of complete sequences `[B, T]`: negative cost, or the
/// collected prize for OP.
pub fn reward(inst: &InstanceBatch, actions: &Tensor<i32>) -> Result<Vec<f32>, EnvError> {
    let t = actions_width(inst, actions);
    par::try_map_range(inst.batch, |b| {
        let seq = &actions.data()[b * t..(b + 1) * t];
        check_row(inst, b, seq).map_err(|violation| EnvError::InfeasibleSolution { row: b, violation })?;
        let c = cost_row(inst, b, seq);
        Ok(if inst.env.maximize() { c } else { -c })
    })
}

fn actions_width(inst: &InstanceBatch, actions: &Tensor<i32>) -> usize {
    assert_eq!(actions.ndim(), 2, "actions must be [B, T]");
    assert_eq!(actions.shape()[0], inst.batch, "actions batch");
    actions.shape()[1]
}

/// A finished episode: actions `[B, T]` padded with `-1`, per-step
/// log-probabilities `[B, T]` (0 on padding) and the terminal reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub actions: Tensor<i32>,
    pub logprobs: Tensor<f32>,
    pub reward: Vec<f32>,
}

impl Trajectory {
    pub fn batch(&self) -> usize {
        self.reward.len()
    }

    pub fn steps(&self) -> usize {
        self.actions.shape()[1]
    }

    pub fn row_actions(&self, b: usize) -> &[i32] {
        let t = self.steps();
        &self.actions.data()[b * t..(b + 1) * t]
    }

    pub fn logprob_sum(&self) -> Vec<f32> {
        let t = self.steps();
        (0..self.batch()).map(|b| self.logprobs.data()[b * t..(b + 1) * t].iter().sum()).collect()
    }

    /// The given rows, re-padded to their own longest sequence.
    pub fn select(&self, rows: &[usize]) -> Trajectory {
        let steps =
            rows.iter().map(|&b| self.row_actions(b).iter().take_while(|&&a| a != -1).count()).max().unwrap_or(0);
        let t = self.steps();
        let mut actions = Vec::with_capacity(rows.len() * steps);
        let mut logprobs = Vec::with_capacity(rows.len() * steps);
        for &b in rows {
            actions.extend_from_slice(&self.actions.data()[b * t..b * t + steps]);
            logprobs.extend_from_slice(&self.logprobs.data()[b * t..b * t + steps]);
        }
        Trajectory {
            actions: Tensor::new(vec![rows.len(), steps], actions),
            logprobs: Tensor::new(vec![rows.len(), steps], logprobs),
            reward: rows.iter().map(|&b| self.reward[b]).collect(),
        }
    }

    /// Cost as reported in tables: positive tour cost, or positive prize for OP.
    pub fn costs(&self, env: EnvId) -> Vec<f32> {
        self.reward.iter().map(|&r| if env.maximize() { r } else { -r }).collect()
    }
}

/// Pads row sequences of unequal length with `-1` into `[B, T]`.
pub fn pad_actions(rows: &[Vec<i32>]) -> Tensor<i32> {
    let t = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut data = Vec::with_capacity(rows.len() * t);
    for r in rows {
        data.extend_from_slice(r);
        data.extend(std::iter::repeat_n(-1, t - r.len()));
    }
    Tensor::new(vec![rows.len(), t], data)
}
