use super::model::{
    context_embedding, declare_decoder, declare_embedding, decode_mask, decode_step, encode, init_embedding,
};
use super::params::{Bound, ParamSet, ParamSpecs, Scope};
use super::{DecodeHooks, Mode, NormStats, PolicyConfig, PolicyError};
use crate::env::{self, EnvError, InstanceBatch, Trajectory};
use crate::par;
use crate::rng::{self, StreamRng};
use crate::tensor::{Float, Tape, Tensor, Var};

/// How actions are picked at each step.
pub enum ActionChoice<'a> {
    /// Highest probability, ties to the lowest index.
    Greedy,
    /// Inverse-CDF draws from one stream, row by row.
    Sample(&'a mut StreamRng),
    /// Replays given actions `[B, T]` (teacher forcing).
    Teacher(&'a Tensor<i32>),
}

pub struct RolloutOptions<'a, 't, T: Float> {
    pub mode: Mode,
    /// Per-row first action (multistart). The forced step contributes
    /// log-probability 0; rows where it is infeasible decode normally.
    pub forced_first: Option<&'a [usize]>,
    pub hooks: DecodeHooks<'a, 't, T>,
    /// Also build the mean per-step entropy of the feasible distribution.
    pub entropy: bool,
}

impl<T: Float> Default for RolloutOptions<'_, '_, T> {
    fn default() -> Self {
        RolloutOptions { mode: Mode::Eval, forced_first: None, hooks: DecodeHooks::default(), entropy: false }
    }
}

pub struct RolloutOutput<'t, T: Float> {
    pub trajectory: Trajectory,
    /// `[B]` differentiable `Σ_t log p(a_t)`.
    pub logprob_sum: Var<'t, T>,
    /// `[B]` mean entropy over each row's decoding steps.
    pub entropy: Option<Var<'t, T>>,
    pub stats: Vec<NormStats<T>>,
}

fn argmax_feasible<T: Float>(row: &[T], mask: &[bool]) -> usize {
    let mut best = None;
    for (j, (&v, &m)) in row.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((j, v));
        }
    }
    best.expect("row without feasible action").0
}

/// Encodes once, then alternates decoder steps and environment steps until
/// every row is done.
pub fn rollout<'t, T: Float>(
    scope: &Scope<'_, 't, T>,
    cfg: &PolicyConfig,
    inst: &InstanceBatch,
    mut choice: ActionChoice<'_>,
    opts: &RolloutOptions<'_, 't, T>,
) -> Result<RolloutOutput<'t, T>, PolicyError> {
    let tape = scope.tape();
    let (bsz, n) = (inst.batch, inst.nodes);
    let emb = init_embedding(scope, cfg, inst)?;
    let enc = encode(scope, cfg, emb, opts.mode)?;
    let mut state = env::reset(inst);
    let mut rows: Vec<Vec<i32>> = vec![Vec::new(); bsz];
    let mut step_logps: Vec<Vec<f32>> = vec![Vec::new(); bsz];
    let mut total: Option<Var<'t, T>> = None;
    let mut entropy_sum: Option<Var<'t, T>> = None;
    let mut active_steps = vec![0usize; bsz];
    let limit = env::max_steps(inst);
    let mut t = 0;
    while !state.all_done() {
        if t >= limit {
            return Err(EnvError::InvalidInstance(format!("episode exceeded {limit} steps")).into());
        }
        let mask = decode_mask(&state);
        let query = context_embedding(scope, cfg, &enc, &state, inst)?;
        let logp = decode_step(scope, cfg, &enc, &query, &mask, &state, inst, opts.hooks)?;
        let done = state.done().to_vec();

        let mut actions = vec![-1i32; bsz];
        let mut forced = vec![false; bsz];
        let lp = logp.data();
        for b in 0..bsz {
            if done[b] {
                continue;
            }
            let (row, m) = (&lp[b * n..(b + 1) * n], &mask[b * n..(b + 1) * n]);
            if t == 0 {
                if let Some(first) = opts.forced_first {
                    if first[b] < n && m[first[b]] {
                        actions[b] = first[b] as i32;
                        forced[b] = true;
                        continue;
                    }
                }
            }
            actions[b] = match &mut choice {
                ActionChoice::Greedy => argmax_feasible(row, m) as i32,
                ActionChoice::Sample(r) => {
                    let probs: Vec<f64> = row.iter().map(|&x| x.as_f64().exp()).collect();
                    rng::sample_categorical(&probs, m, *r) as i32
                }
                ActionChoice::Teacher(acts) => {
                    let width = acts.shape()[1];
                    if t < width {
                        acts.data()[b * width + t]
                    } else {
                        -1
                    }
                }
            };
        }
        if let ActionChoice::Teacher(acts) = &choice {
            let width = acts.shape()[1];
            for b in 0..bsz {
                if done[b] && t < width && acts.data()[b * width + t] != -1 {
                    return Err(EnvError::StepOnDone { row: b }.into());
                }
            }
        }
        let index: Vec<usize> = actions.iter().map(|&a| a.max(0) as usize).collect();
        let mut chosen = logp.gather_last(&index);
        if forced.iter().any(|&f| f) {
            chosen = chosen.fill_where(&forced, T::zero());
        }
        for b in 0..bsz {
            if !done[b] {
                rows[b].push(actions[b]);
                step_logps[b].push(chosen.data()[b].as_f64() as f32);
                active_steps[b] += 1;
            }
        }
        if opts.entropy {
            let infeasible: Vec<bool> = mask.iter().map(|m| !m).collect();
            let safe = logp.fill_where(&infeasible, T::zero());
            let h = safe.exp().fill_where(&infeasible, T::zero()).mul(&safe).sum_axis(1).neg();
            entropy_sum = Some(match entropy_sum {
                Some(acc) => acc.add(&h),
                None => h,
            });
        }
        total = Some(match total {
            Some(acc) => acc.add(&chosen),
            None => chosen,
        });
        state = env::step(inst, &state, &actions)?;
        t += 1;
    }
    if let ActionChoice::Teacher(acts) = &choice {
        let width = acts.shape()[1];
        for b in 0..bsz {
            if acts.data()[b * width..(b + 1) * width].iter().skip(rows[b].len()).any(|&a| a != -1) {
                return Err(EnvError::StepOnDone { row: b }.into());
            }
        }
    }
    let actions = env::pad_actions(&rows);
    let steps = actions.shape()[1];
    let mut logprobs = Vec::with_capacity(bsz * steps);
    for r in &step_logps {
        logprobs.extend_from_slice(r);
        logprobs.extend(std::iter::repeat_n(0.0, steps - r.len()));
    }
    let reward = env::reward(inst, &actions)?;
    let logprob_sum = total.unwrap_or_else(|| tape.constant(Tensor::zeros(vec![bsz])));
    let entropy = entropy_sum.map(|e| {
        let inv = Tensor::from_fn(vec![bsz], |b| T::one() / T::from_usize_lossy(active_steps[b].max(1)));
        e.mul(&tape.constant(inv))
    });
    Ok(RolloutOutput {
        trajectory: Trajectory { actions, logprobs: Tensor::new(vec![bsz, steps], logprobs), reward },
        logprob_sum,
        entropy,
        stats: enc.stats,
    })
}

/// Teacher-forced `Σ_t log p(a_t)` of given complete sequences `[B, T]`.
/// With `skip_first`, the first action counts as forced (log-probability 0).
pub fn evaluate_actions<'t, T: Float>(
    scope: &Scope<'_, 't, T>,
    cfg: &PolicyConfig,
    inst: &InstanceBatch,
    actions: &Tensor<i32>,
    skip_first: bool,
    opts: &RolloutOptions<'_, 't, T>,
) -> Result<RolloutOutput<'t, T>, PolicyError> {
    let first: Vec<usize> = (0..inst.batch).map(|b| actions.data()[b * actions.shape()[1]].max(0) as usize).collect();
    let opts = RolloutOptions {
        mode: opts.mode,
        forced_first: if skip_first { Some(&first) } else { None },
        hooks: opts.hooks,
        entropy: opts.entropy,
    };
    rollout(scope, cfg, inst, ActionChoice::Teacher(actions), &opts)
}

/// A configured policy with its parameters (f32).
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub params: ParamSet,
}

/// Instances per independent chunk in batched inference.
const EVAL_CHUNK: usize = 256;

impl Policy {
    pub fn specs(config: &PolicyConfig) -> ParamSpecs {
        let mut specs = ParamSpecs::default();
        declare_embedding(config, "", &mut specs);
        declare_decoder(config, &mut specs);
        specs
    }

    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let params = Self::specs(&config).materialize(seed);
        Ok(Policy { config, params })
    }

    /// Inference rollout without gradients (eval-mode normalization).
    pub fn run(
        &self,
        inst: &InstanceBatch,
        choice: ActionChoice<'_>,
        forced_first: Option<&[usize]>,
    ) -> Result<Trajectory, PolicyError> {
        let tape = Tape::<f32>::no_grad();
        let bound = Bound::frozen(&tape, &self.params);
        let opts = RolloutOptions { forced_first, ..Default::default() };
        Ok(rollout(&bound.scope(""), &self.config, inst, choice, &opts)?.trajectory)
    }

    /// Greedy decoding, split into independent chunks that may run in
    /// parallel; the result does not depend on the split.
    pub fn greedy(&self, inst: &InstanceBatch, forced_first: Option<&[usize]>) -> Result<Trajectory, PolicyError> {
        let chunks = inst.batch.div_ceil(EVAL_CHUNK);
        if chunks <= 1 {
            return self.run(inst, ActionChoice::Greedy, forced_first);
        }
        let parts = par::try_map_range(chunks, |c| {
            let rows: Vec<usize> = (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(inst.batch)).collect();
            let forced: Option<Vec<usize>> = forced_first.map(|f| rows.iter().map(|&r| f[r]).collect());
            self.run(&inst.select(&rows), ActionChoice::Greedy, forced.as_deref())
        })?;
        Ok(concat_trajectories(&parts))
    }
}

/// Stacks trajectories along the batch axis, padding to the longest.
pub fn concat_trajectories(parts: &[Trajectory]) -> Trajectory {
    let steps = parts.iter().map(Trajectory::steps).max().unwrap_or(0);
    let batch: usize = parts.iter().map(Trajectory::batch).sum();
    let mut actions = Vec::with_capacity(batch * steps);
    let mut logprobs = Vec::with_capacity(batch * steps);
    let mut reward = Vec::with_capacity(batch);
    for p in parts {
        let t = p.steps();
        for b in 0..p.batch() {
            actions.extend_from_slice(&p.actions.data()[b * t..(b + 1) * t]);
            actions.extend(std::iter::repeat_n(-1, steps - t));
            logprobs.extend_from_slice(&p.logprobs.data()[b * t..(b + 1) * t]);
            logprobs.extend(std::iter::repeat_n(0.0, steps - t));
        }
        reward.extend_from_slice(&p.reward);
    }
    Trajectory {
        actions: Tensor::new(vec![batch, steps], actions),
        logprobs: Tensor::new(vec![batch, steps], logprobs),
        reward,
    }
}
