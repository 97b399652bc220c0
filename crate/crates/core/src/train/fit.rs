use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, match_params, params_to_arrays, save_checkpoint, CheckpointMeta};
use super::config::{resolve, Algorithm, TrainConfig};
use super::ncof::NcofArray;
use super::optim::{clip_grad_norm, update_running_stats, Adam, MultiStepLr};
use super::TrainError;
use crate::decode::start_nodes;
use crate::env::{generate, transform, InstanceBatch, Trajectory};
use crate::policy::{rollout, ActionChoice, Bound, Mode, NormStats, ParamSet, Policy, PolicyConfig, RolloutOptions};
use crate::rl::{
    a2c_losses, critic_value, declare_critic, ppo_update, reinforce_loss, BaselineKind, ExponentialBaseline, RlError,
    RolloutBaseline, CRITIC_PREFIX,
};
use crate::tensor::{Tape, Tensor};
use crate::{par, rng};

pub const METRICS_HEADER: [&str; 6] = ["epoch", "step", "train_reward", "val_cost", "lr", "seconds"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// 1-based epoch.
    pub epoch: usize,
    /// Gradient steps taken so far.
    pub step: u64,
    pub train_reward: f64,
    /// Mean greedy validation cost (prize for OP).
    pub val_cost: f64,
    pub lr: f64,
    /// Wall time of the epoch.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub run_dir: PathBuf,
    /// Continue from the latest checkpoint in `run_dir`.
    pub resume: bool,
    /// Stop after this many completed epochs (the schedule still spans
    /// `max_epochs`).
    pub stop_after: Option<usize>,
    pub verbose: bool,
}

pub struct FitResult {
    pub policy: Policy,
    /// Policy and critic parameters.
    pub params: ParamSet,
    pub metrics: Vec<MetricsRow>,
}

/// `NCO_DETERMINISTIC=1` (or any value but `0`).
pub fn deterministic_requested() -> bool {
    std::env::var("NCO_DETERMINISTIC").is_ok_and(|v| !v.is_empty() && v != "0")
}

enum BaselineState {
    Plain(BaselineKind),
    Exponential(ExponentialBaseline),
    Rollout(Box<RolloutBaseline>),
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    config: String,
    adam_step: u64,
    exp_baseline: Option<f64>,
    best_val_reward: Option<f64>,
    metrics: Vec<MetricsRow>,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    policy_cfg: PolicyConfig,
    kind: BaselineKind,
    params: ParamSet,
    adam: Adam,
    baseline: BaselineState,
    val_set: InstanceBatch,
    metrics: Vec<MetricsRow>,
    best_val_reward: Option<f64>,
    global_step: u64,
    epochs_done: usize,
}

fn policy_params(params: &ParamSet) -> ParamSet {
    ParamSet::from_iter(
        params.iter().filter(|(n, _)| !n.starts_with(CRITIC_PREFIX)).map(|(n, t)| (n.to_string(), t.clone())),
    )
}

fn mean(xs: &[f32]) -> f64 {
    xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len().max(1) as f64
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainConfig) -> Result<Self, TrainError> {
        let policy_cfg = cfg.policy_config();
        let kind = cfg.baseline_kind()?;
        let mut specs = Policy::specs(&policy_cfg);
        if kind == BaselineKind::Critic {
            declare_critic(&policy_cfg, &mut specs);
        }
        let params = specs.materialize(rng::derive(cfg.seed, "init", 0));
        let val_set =
            generate(cfg.env.name, cfg.env.num_loc, cfg.data.val_size, cfg.data.val_seed, &cfg.generate_options())
                .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        let baseline = match kind {
            BaselineKind::Exponential { beta } => BaselineState::Exponential(ExponentialBaseline::new(beta)),
            BaselineKind::Rollout => {
                let initial = Policy { config: policy_cfg.clone(), params: policy_params(&params) };
                BaselineState::Rollout(Box::new(RolloutBaseline::new(
                    initial,
                    val_set.clone(),
                    cfg.model.rollout_alpha,
                )?))
            }
            other => BaselineState::Plain(other),
        };
        let adam = Adam::new(cfg.train.optimizer.learning_rate, cfg.train.optimizer.weight_decay);
        Ok(Trainer {
            cfg,
            policy_cfg,
            kind,
            params,
            adam,
            baseline,
            val_set,
            metrics: Vec::new(),
            best_val_reward: None,
            global_step: 0,
            epochs_done: 0,
        })
    }

    fn schedule(&self) -> MultiStepLr {
        let s = &self.cfg.train.scheduler;
        MultiStepLr { base: self.cfg.train.optimizer.learning_rate, milestones: s.step_size.clone(), gamma: s.gamma }
    }

    fn policy(&self) -> Policy {
        Policy { config: self.policy_cfg.clone(), params: policy_params(&self.params) }
    }

    /// Instances of one step: `(rollout batch, forced first actions)`, with
    /// groups laid out instance-major.
    fn layout(&self, inst: &InstanceBatch, seed: u64) -> (InstanceBatch, Option<Vec<usize>>) {
        match self.kind {
            BaselineKind::Shared { num_starts } => {
                let starts = start_nodes(inst);
                let expanded = inst.repeat_each(num_starts);
                let forced = (0..expanded.batch).map(|r| starts[r % num_starts]).collect();
                (expanded, Some(forced))
            }
            BaselineKind::Symmetric { num_augments } => {
                let copies = InstanceBatch::concat(&transform::augmentations(inst, num_augments, seed));
                let b = inst.batch;
                let order: Vec<usize> =
                    (0..b * num_augments).map(|r| (r % num_augments) * b + r / num_augments).collect();
                (copies.select(&order), None)
            }
            _ => (inst.clone(), None),
        }
    }

    fn step_seed(&self, label: &str) -> u64 {
        rng::derive(self.cfg.seed, label, self.global_step)
    }

    fn apply(&mut self, mut grads: ParamSet, stats: &[NormStats<f32>], lr: f64) {
        clip_grad_norm(&mut grads, self.cfg.train.gradient_clip_val);
        self.adam.lr = lr;
        self.adam.step(&mut self.params, &grads);
        update_running_stats(&mut self.params, stats, self.cfg.train.bn_momentum as f32);
    }

    /// One gradient step of REINFORCE or A2C; returns the mean reward.
    fn reinforce_step(&mut self, inst: &InstanceBatch, epoch: usize, step: usize, lr: f64) -> Result<f64, TrainError> {
        let (batch, forced) = self.layout(inst, self.step_seed("augment"));
        let tape = Tape::<f32>::new();
        let bound = Bound::new(&tape, &self.params, |_| true);
        let mut stream = rng::stream(self.step_seed("sample"), 0);
        let opts = RolloutOptions { mode: Mode::Train, forced_first: forced.as_deref(), ..Default::default() };
        let out = rollout(&bound.scope(""), &self.policy_cfg, &batch, ActionChoice::Sample(&mut stream), &opts)?;
        let reward = out.trajectory.reward.clone();
        let mut stats = out.stats;
        let loss = match &mut self.baseline {
            BaselineState::Plain(BaselineKind::Critic) => {
                let (value, critic_stats) =
                    critic_value(&bound.scope(CRITIC_PREFIX), &self.policy_cfg, &batch, Mode::Train)?;
                stats.extend(critic_stats);
                let (p, v) = a2c_losses(&out.logprob_sum, &reward, &value)?;
                p.add(&v)
            }
            state => {
                let base = match state {
                    BaselineState::Exponential(b) => b.update(&reward),
                    BaselineState::Rollout(rb) => rb.eval(&batch)?,
                    BaselineState::Plain(kind) => match *kind {
                        BaselineKind::None => vec![0.0; reward.len()],
                        k => crate::rl::group_mean_baseline(&reward, k.group_size())?,
                    },
                };
                reinforce_loss(&out.logprob_sum, &reward, &base)?
            }
        };
        if !loss.item().is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, step });
        }
        let grads = bound.gradients(&tape.backward(&loss).map_err(RlError::from)?);
        drop(bound);
        self.apply(grads, &stats, lr);
        Ok(mean(&reward))
    }

    fn ppo_step(&mut self, inst: &InstanceBatch, epoch: usize, step: usize, lr: f64) -> Result<f64, TrainError> {
        let traj: Trajectory = {
            let tape = Tape::<f32>::no_grad();
            let bound = Bound::frozen(&tape, &self.params);
            let mut stream = rng::stream(self.step_seed("sample"), 0);
            let opts = RolloutOptions { mode: Mode::Train, ..Default::default() };
            rollout(&bound.scope(""), &self.policy_cfg, inst, ActionChoice::Sample(&mut stream), &opts)?.trajectory
        };
        let old = traj.logprob_sum();
        let seed = self.step_seed("ppo");
        let mut params = std::mem::take(&mut self.params);
        let mut adam = std::mem::replace(&mut self.adam, Adam::new(0.0, 0.0));
        let (clip, momentum) = (self.cfg.train.gradient_clip_val, self.cfg.train.bn_momentum as f32);
        let result = ppo_update(
            &mut params,
            &self.policy_cfg,
            inst,
            &traj.actions,
            &old,
            &traj.reward,
            &self.cfg.model.ppo,
            seed,
            |p, g, stats| {
                let mut g = g.clone();
                clip_grad_norm(&mut g, clip);
                adam.lr = lr;
                adam.step(p, &g);
                update_running_stats(p, stats, momentum);
            },
        );
        self.params = params;
        self.adam = adam;
        match result {
            Ok(_) => Ok(mean(&traj.reward)),
            Err(RlError::NonFiniteLoss(_)) => Err(TrainError::NonFiniteLoss { epoch, step }),
            Err(e) => Err(e.into()),
        }
    }

    fn run_epoch(&mut self, epoch: usize, verbose: bool) -> Result<MetricsRow, TrainError> {
        let start = Instant::now();
        let lr = self.schedule().lr(epoch);
        let (steps, bsz, size) = (self.cfg.steps_per_epoch(), self.cfg.batch_size(), self.cfg.epoch_size());
        let mut reward_sum = 0.0;
        for step in 0..steps {
            let count = bsz.min(size - step * bsz);
            let seed = rng::derive(self.cfg.data.train_seed, "train", self.global_step);
            let inst = generate(self.cfg.env.name, self.cfg.env.num_loc, count, seed, &self.cfg.generate_options())
                .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
            let r = match self.cfg.model.algorithm {
                Algorithm::Ppo => self.ppo_step(&inst, epoch, step, lr)?,
                _ => self.reinforce_step(&inst, epoch, step, lr)?,
            };
            reward_sum += r;
            self.global_step += 1;
        }
        let policy = self.policy();
        let val = policy.greedy(&self.val_set, None)?;
        let val_reward = mean(&val.reward);
        let val_cost = mean(&val.costs(self.cfg.env.name));
        if let BaselineState::Rollout(rb) = &mut self.baseline {
            let (replaced, test) = rb.update_with(&policy, val.reward);
            if verbose {
                eprintln!(
                    "epoch {}: baseline {} (p = {:.4})",
                    epoch + 1,
                    if replaced { "replaced" } else { "kept" },
                    test.p_value
                );
            }
        }
        let row = MetricsRow {
            epoch: epoch + 1,
            step: self.global_step,
            train_reward: reward_sum / steps as f64,
            val_cost,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        if verbose {
            eprintln!(
                "epoch {}: train reward {:.4}, val cost {:.4}, lr {:e}, {:.1}s",
                row.epoch, row.train_reward, row.val_cost, row.lr, row.seconds
            );
        }
        self.epochs_done = epoch + 1;
        let improved = self.best_val_reward.is_none_or(|b| val_reward > b);
        if improved {
            self.best_val_reward = Some(val_reward);
        }
        self.metrics.push(row.clone());
        Ok(row)
    }

    fn meta(&self) -> Result<CheckpointMeta, TrainError> {
        let state = ResumeState {
            config: self.cfg.to_toml(),
            adam_step: self.adam.step,
            exp_baseline: match &self.baseline {
                BaselineState::Exponential(b) => b.value,
                _ => None,
            },
            best_val_reward: self.best_val_reward,
            metrics: self.metrics.clone(),
        };
        Ok(CheckpointMeta {
            kind: "checkpoint".into(),
            config_hash: self.cfg.hash(),
            epoch: self.epochs_done,
            global_step: self.global_step,
            extra: serde_json::to_value(state).map_err(|e| TrainError::Format(e.to_string()))?,
        })
    }

    fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut extra = params_to_arrays("optim.m.", &self.adam.m);
        extra.extend(params_to_arrays("optim.v.", &self.adam.v));
        if let BaselineState::Rollout(rb) = &self.baseline {
            extra.extend(params_to_arrays("baseline.", &rb.policy.params));
            extra.push((
                "baseline_val_reward".into(),
                NcofArray::F32(Tensor::new(vec![rb.val_reward.len()], rb.val_reward.clone())),
            ));
        }
        save_checkpoint(path, &self.params, extra, &self.meta()?)
    }

    fn restore(&mut self, path: &Path) -> Result<(), TrainError> {
        let (stored, meta, file) = load_checkpoint(path)?;
        if meta.config_hash != self.cfg.hash() {
            return Err(TrainError::Resume(format!("{} was written with a different config", path.display())));
        }
        let state: ResumeState =
            serde_json::from_value(meta.extra).map_err(|e| TrainError::Resume(format!("checkpoint state: {e}")))?;
        self.params = match_params(&self.params, &stored)?;
        let sub = |prefix: &str| -> ParamSet {
            ParamSet::from_iter(
                stored.iter().filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), t.clone()))),
            )
        };
        self.adam.m = sub("optim.m.");
        self.adam.v = sub("optim.v.");
        self.adam.step = state.adam_step;
        match &mut self.baseline {
            BaselineState::Exponential(b) => b.value = state.exp_baseline,
            BaselineState::Rollout(rb) => {
                rb.policy.params = match_params(&rb.policy.params, &sub("baseline."))?;
                rb.val_reward = file.f32("baseline_val_reward")?.data().to_vec();
            }
            BaselineState::Plain(_) => {}
        }
        self.metrics = state.metrics;
        self.best_val_reward = state.best_val_reward;
        self.global_step = meta.global_step;
        self.epochs_done = meta.epoch;
        Ok(())
    }
}

impl FromIterator<(String, Tensor<f32>)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<f32>)>>(iter: I) -> Self {
        let mut p = ParamSet::new();
        for (n, t) in iter {
            p.insert(n, t);
        }
        p
    }
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            format!("{}", r.train_reward),
            format!("{}", r.val_cost),
            format!("{}", r.lr),
            format!("{:.3}", r.seconds),
        ])?;
    }
    w.flush().map_err(|e| TrainError::io(path, e))
}

fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| {
            let path = e.ok()?.path();
            let k = path.file_stem()?.to_str()?.strip_prefix("epoch_")?.parse().ok()?;
            (path.extension()? == "ncof").then_some((k, path))
        })
        .max_by_key(|(k, _)| *k)
}

/// Trains per `cfg`, writing the run directory:
/// `config.toml`, `metrics.csv`, `checkpoints/epoch_{k}.ncof`, `best.ncof`.
pub fn fit(cfg: &TrainConfig, opts: &FitOptions) -> Result<FitResult, TrainError> {
    if cfg.deterministic || deterministic_requested() {
        par::set_parallel(false);
    }
    let dir = &opts.run_dir;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| TrainError::io(&ckpt_dir, e))?;
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()).map_err(|e| TrainError::io(&config_path, e))?;

    let mut trainer = Trainer::new(cfg)?;
    if opts.resume {
        if let Some((_, path)) = latest_checkpoint(&ckpt_dir) {
            trainer.restore(&path)?;
        }
    }
    let end = opts.stop_after.map_or(cfg.train.max_epochs, |s| s.min(cfg.train.max_epochs));
    for epoch in trainer.epochs_done..end {
        let before = trainer.best_val_reward;
        trainer.run_epoch(epoch, opts.verbose)?;
        trainer.save(&ckpt_dir.join(format!("epoch_{}.ncof", epoch + 1)))?;
        if trainer.best_val_reward != before {
            trainer.save(&dir.join("best.ncof"))?;
        }
        write_metrics(&dir.join("metrics.csv"), &trainer.metrics)?;
    }
    Ok(FitResult { policy: trainer.policy(), params: trainer.params, metrics: trainer.metrics })
}

/// Policy stored in a checkpoint, with the configuration it was trained
/// with.
pub fn load_policy(path: &Path) -> Result<(Policy, TrainConfig), TrainError> {
    let (stored, meta, _) = load_checkpoint(path)?;
    let state: ResumeState =
        serde_json::from_value(meta.extra).map_err(|e| TrainError::Format(format!("checkpoint state: {e}")))?;
    let cfg = resolve(&[("checkpoint".into(), state.config)], &[])?;
    let policy_cfg = cfg.policy_config();
    let expected = Policy::new(policy_cfg.clone(), 0)?.params;
    let params = match_params(&expected, &stored)?;
    Ok((Policy { config: policy_cfg, params }, cfg))
}
