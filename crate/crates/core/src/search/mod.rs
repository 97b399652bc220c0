//! Test-time adaptation of a trained policy on the instances being solved.
//!
//! Both methods sample one rollout per augmented copy per iteration, use the
//! mean reward over an instance's copies as baseline, and keep the best
//! solution seen so far per instance.

mod eas;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

pub use eas::{eas_lay, EasLayer, EAS_PREFIX};

use crate::decode::DecodeError;
use crate::env::{self, pad_actions, transform, EnvError, EnvId, InstanceBatch, Trajectory};
use crate::par;
use crate::policy::{rollout, ActionChoice, Bound, Mode, ParamSet, Policy, PolicyError, RolloutOptions};
use crate::rl::{reinforce_loss, RlError};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::train::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMethod {
    ActiveSearch,
    EasLay,
}

impl SearchMethod {
    /// Method label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            SearchMethod::ActiveSearch => "AS",
            SearchMethod::EasLay => "EAS",
        }
    }
}

impl fmt::Display for SearchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SearchMethod::ActiveSearch => "as",
            SearchMethod::EasLay => "eas",
        })
    }
}

impl FromStr for SearchMethod {
    type Err = SearchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "as" | "active_search" => Ok(SearchMethod::ActiveSearch),
            "eas" | "eas_lay" | "eas-lay" => Ok(SearchMethod::EasLay),
            _ => Err(SearchError::InvalidConfig(format!("unknown search method {s:?} (expected as or eas)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SearchConfig {
    /// Gradient iterations; 0 returns the starting solutions.
    pub iterations: usize,
    /// Augmented copies per instance, dihedral maps first.
    pub augments: usize,
    /// Sampled rollouts per copy per iteration.
    pub samples_per_copy: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the imitation term (EAS only).
    pub imitation_weight: f64,
    /// Adapt a separate parameter copy for every instance (AS only).
    pub per_instance: bool,
    /// Refuse to start when the estimated working set exceeds this many bytes.
    pub memory_limit: Option<u64>,
    pub seed: u64,
}

/// Default memory budget of a search session.
pub const DEFAULT_MEMORY_LIMIT: u64 = 8 << 30;

impl SearchConfig {
    pub fn active_search() -> Self {
        SearchConfig {
            iterations: 200,
            augments: 8,
            samples_per_copy: 1,
            lr: 2.6e-4,
            weight_decay: 1e-6,
            imitation_weight: 0.0,
            per_instance: false,
            memory_limit: Some(DEFAULT_MEMORY_LIMIT),
            seed: 1234,
        }
    }

    pub fn eas() -> Self {
        SearchConfig { lr: 0.0041, imitation_weight: 0.013, ..Self::active_search() }
    }

    pub fn for_method(method: SearchMethod) -> Self {
        match method {
            SearchMethod::ActiveSearch => Self::active_search(),
            SearchMethod::EasLay => Self::eas(),
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidConfig(m.into()));
        if self.augments == 0 || self.samples_per_copy == 0 {
            return bad("augments and samples_per_copy must be positive");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative");
        }
        if !(self.imitation_weight >= 0.0) {
            return bad("imitation_weight must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("out of memory: search needs about {required} bytes, limit is {limit}")]
    OutOfMemory { required: u64, limit: u64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

pub struct SearchOutput {
    pub method: SearchMethod,
    /// Best solution per instance, rewards on the untransformed instance.
    pub best: Trajectory,
    /// Best-so-far reward per instance: entry 0 is the starting solution,
    /// entry `i` the state after iteration `i`.
    pub trace: Vec<Vec<f32>>,
    /// Adapted weights: the full policy for AS, the injected layer for EAS.
    pub params: ParamSet,
    pub seconds: f64,
}

impl SearchOutput {
    pub fn costs(&self, env: EnvId) -> Vec<f32> {
        self.best.costs(env)
    }

    /// Mean best-so-far cost after each iteration.
    pub fn mean_cost_trace(&self, env: EnvId) -> Vec<f64> {
        let sign = if env.maximize() { 1.0 } else { -1.0 };
        self.trace.iter().map(|r| sign * r.iter().map(|&x| x as f64).sum::<f64>() / r.len().max(1) as f64).collect()
    }
}

/// Best solution found so far for each instance.
pub(crate) struct Incumbent {
    pub actions: Vec<Vec<i32>>,
    pub reward: Vec<f32>,
}

impl Incumbent {
    /// From a trajectory over the instances themselves; rewards are
    /// recomputed on `inst`.
    pub fn from_trajectory(inst: &InstanceBatch, traj: &Trajectory) -> Result<Self, EnvError> {
        let actions: Vec<Vec<i32>> =
            (0..traj.batch()).map(|b| traj.row_actions(b).iter().copied().filter(|&a| a >= 0).collect()).collect();
        let reward = env::reward(inst, &pad_actions(&actions))?;
        Ok(Incumbent { actions, reward })
    }

    /// Takes strictly better rows; `row_inst[r]` is the instance of row `r`
    /// and `reward[r]` its reward on that instance.
    pub fn update(&mut self, row_inst: &[usize], traj: &Trajectory, reward: &[f32]) {
        for (r, &b) in row_inst.iter().enumerate() {
            if reward[r] > self.reward[b] {
                self.reward[b] = reward[r];
                self.actions[b] = traj.row_actions(r).iter().copied().filter(|&a| a >= 0).collect();
            }
        }
    }

    pub fn trajectory(&self) -> Trajectory {
        let actions = pad_actions(&self.actions);
        let shape = actions.shape().to_vec();
        Trajectory { actions, logprobs: Tensor::zeros(shape), reward: self.reward.clone() }
    }
}

/// Augmented and repeated copies of `inst`, laid out copy-major with the
/// samples of a copy adjacent: row `(a·B + b)·S + s`.
pub(crate) struct Copies {
    pub batch: InstanceBatch,
    /// Instance of each row.
    pub row_inst: Vec<usize>,
    /// The untransformed instance of each row, for rewards.
    pub original: InstanceBatch,
}

impl Copies {
    pub fn new(inst: &InstanceBatch, cfg: &SearchConfig) -> Self {
        let s = cfg.samples_per_copy;
        let batch = InstanceBatch::concat(&transform::augmentations(inst, cfg.augments, cfg.seed)).repeat_each(s);
        let row_inst: Vec<usize> = (0..batch.batch).map(|r| (r / s) % inst.batch).collect();
        let original = inst.select(&row_inst);
        Copies { batch, row_inst, original }
    }

    /// Mean reward of each row's instance over its copies.
    pub fn baseline(&self, reward: &[f32], instances: usize) -> Vec<f32> {
        let mut sum = vec![0.0f64; instances];
        let mut count = vec![0usize; instances];
        for (&b, &r) in self.row_inst.iter().zip(reward) {
            sum[b] += r as f64;
            count[b] += 1;
        }
        self.row_inst.iter().map(|&b| (sum[b] / count[b] as f64) as f32).collect()
    }
}

/// Rough working-set size in bytes: parameter copies with gradients and
/// optimizer moments, plus the activations the tape keeps for one iteration.
pub fn estimate_memory(method: SearchMethod, policy: &Policy, inst: &InstanceBatch, cfg: &SearchConfig) -> u64 {
    let c = &policy.config;
    let (d, n, layers, heads) = (c.embedding_dim as u64, inst.nodes as u64, c.num_layers as u64, c.num_heads as u64);
    let rows = (inst.batch * cfg.augments * cfg.samples_per_copy) as u64;
    let weights = match method {
        SearchMethod::ActiveSearch => {
            let copies = if cfg.per_instance { inst.batch as u64 } else { 1 };
            policy.params.num_weights() as u64 * copies
        }
        SearchMethod::EasLay => inst.batch as u64 * (2 * d * d + 2 * d),
    };
    let params = weights * 4 * 4;
    let encoder = rows * n * layers * (12 * d + c.hidden_dim as u64 + 2 * heads * n);
    let decoder = rows * n * (4 * n + 6 * d);
    params + 4 * (encoder + decoder)
}

fn check_memory(
    method: SearchMethod,
    policy: &Policy,
    inst: &InstanceBatch,
    cfg: &SearchConfig,
) -> Result<(), SearchError> {
    if let Some(limit) = cfg.memory_limit {
        let required = estimate_memory(method, policy, inst, cfg);
        if required > limit {
            return Err(SearchError::OutOfMemory { required, limit });
        }
    }
    Ok(())
}

/// Runs `method` with its own defaults replaced by `cfg`.
pub fn search(
    method: SearchMethod,
    policy: &Policy,
    inst: &InstanceBatch,
    cfg: &SearchConfig,
) -> Result<SearchOutput, SearchError> {
    match method {
        SearchMethod::ActiveSearch => active_search(policy, inst, cfg),
        SearchMethod::EasLay => eas_lay(policy, inst, cfg),
    }
}

/// Finetunes all policy parameters on `inst`, starting from the greedy
/// solutions.
pub fn active_search(policy: &Policy, inst: &InstanceBatch, cfg: &SearchConfig) -> Result<SearchOutput, SearchError> {
    cfg.validate()?;
    check_memory(SearchMethod::ActiveSearch, policy, inst, cfg)?;
    let start = Instant::now();
    if cfg.per_instance && inst.batch > 1 {
        let parts = par::try_map_range(inst.batch, |b| {
            let one = SearchConfig {
                per_instance: false,
                memory_limit: None,
                seed: rng::derive(cfg.seed, "instance", b as u64),
                ..cfg.clone()
            };
            active_search_shared(policy, &inst.select(&[b]), &one)
        })?;
        let incumbent = Incumbent {
            actions: parts
                .iter()
                .flat_map(|p| {
                    (0..p.best.batch())
                        .map(|r| p.best.row_actions(r).iter().copied().filter(|&a| a >= 0).collect::<Vec<_>>())
                })
                .collect(),
            reward: parts.iter().flat_map(|p| p.best.reward.clone()).collect(),
        };
        let trace = (0..=cfg.iterations).map(|i| parts.iter().map(|p| p.trace[i][0]).collect()).collect();
        let mut params = ParamSet::new();
        for (b, p) in parts.into_iter().enumerate() {
            for (name, t) in p.params.iter() {
                params.insert(format!("instance{b}.{name}"), t.clone());
            }
        }
        return Ok(SearchOutput {
            method: SearchMethod::ActiveSearch,
            best: incumbent.trajectory(),
            trace,
            params,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let mut out = active_search_shared(policy, inst, cfg)?;
    out.seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

fn active_search_shared(
    policy: &Policy,
    inst: &InstanceBatch,
    cfg: &SearchConfig,
) -> Result<SearchOutput, SearchError> {
    let mut incumbent = Incumbent::from_trajectory(inst, &policy.greedy(inst, None)?)?;
    let mut trace = vec![incumbent.reward.clone()];
    let mut params = policy.params.clone();
    let mut adam = Adam::new(cfg.lr, cfg.weight_decay);
    let copies = if cfg.iterations > 0 { Some(Copies::new(inst, cfg)) } else { None };
    for it in 0..cfg.iterations {
        let copies = copies.as_ref().expect("built when iterating");
        let tape = Tape::<f32>::new();
        let bound = Bound::new(&tape, &params, |_| true);
        let mut stream = rng::stream(rng::derive(cfg.seed, "active_search", it as u64), 0);
        let opts = RolloutOptions { mode: Mode::Eval, ..Default::default() };
        let out = rollout(&bound.scope(""), &policy.config, &copies.batch, ActionChoice::Sample(&mut stream), &opts)?;
        let reward = &out.trajectory.reward;
        let baseline = copies.baseline(reward, inst.batch);
        let loss = reinforce_loss(&out.logprob_sum, reward, &baseline)?;
        let grads = bound.gradients(&tape.backward(&loss)?);
        drop(bound);
        adam.step(&mut params, &grads);
        let on_original = env::reward(&copies.original, &out.trajectory.actions)?;
        incumbent.update(&copies.row_inst, &out.trajectory, &on_original);
        trace.push(incumbent.reward.clone());
    }
    Ok(SearchOutput { method: SearchMethod::ActiveSearch, best: incumbent.trajectory(), trace, params, seconds: 0.0 })
}
