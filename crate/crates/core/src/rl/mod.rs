//! Policy-gradient loss construction: REINFORCE with several baselines,
//! advantage actor-critic and a single-stage PPO surrogate. Everything here
//! produces losses or gradients; parameter updates belong to the trainer.

mod baseline;
mod critic;
mod ppo;

pub use baseline::{
    group_mean_baseline, paired_t_test, shared_baseline, symmetric_baseline, ExponentialBaseline, RolloutBaseline,
    TTest,
};
pub use critic::{critic_value, declare_critic, CRITIC_HIDDEN, CRITIC_PREFIX};
pub use ppo::{ppo_loss, ppo_update, PpoConfig, PpoTerms};

use crate::env::EnvError;
use crate::policy::PolicyError;
use crate::tensor::{Float, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaselineKind {
    None,
    Exponential { beta: f64 },
    Critic,
    Rollout,
    Shared { num_starts: usize },
    Symmetric { num_augments: usize },
}

impl BaselineKind {
    /// Rollouts per instance in one training batch.
    pub fn group_size(&self) -> usize {
        match *self {
            BaselineKind::Shared { num_starts } => num_starts,
            BaselineKind::Symmetric { num_augments } => num_augments,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RlError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch of {len} cannot be split into groups of {group}")]
    GroupSizeMismatch { len: usize, group: usize },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<EnvError> for RlError {
    fn from(e: EnvError) -> Self {
        RlError::Policy(e.into())
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), RlError> {
    if got != want {
        return Err(RlError::ShapeMismatch(format!("{what} has {got} entries, expected {want}")));
    }
    Ok(())
}

fn constant<'t, T: Float>(like: &Var<'t, T>, values: &[f32]) -> Var<'t, T> {
    like.tape().constant(crate::tensor::Tensor::new(
        vec![values.len()],
        values.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
    ))
}

/// `−mean[(reward − baseline) · logprob_sum]`; the baseline is a constant.
pub fn reinforce_loss<'t, T: Float>(
    logprob_sum: &Var<'t, T>,
    reward: &[f32],
    baseline: &[f32],
) -> Result<Var<'t, T>, RlError> {
    let b = logprob_sum.shape().iter().product();
    if logprob_sum.shape().len() != 1 {
        return Err(RlError::ShapeMismatch(format!("logprob_sum shape {:?}", logprob_sum.shape())));
    }
    check_len("reward", reward.len(), b)?;
    check_len("baseline", baseline.len(), b)?;
    let adv: Vec<f32> = reward.iter().zip(baseline).map(|(r, b)| r - b).collect();
    Ok(constant(logprob_sum, &adv).mul(logprob_sum).mean().neg())
}

/// `(policy, value)` losses of advantage actor-critic. The policy term uses a
/// detached copy of the critic as its baseline.
pub fn a2c_losses<'t, T: Float>(
    logprob_sum: &Var<'t, T>,
    reward: &[f32],
    critic: &Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>), RlError> {
    if logprob_sum.shape() != critic.shape() || logprob_sum.shape().len() != 1 {
        return Err(RlError::ShapeMismatch(format!(
            "logprob_sum {:?} vs critic {:?}",
            logprob_sum.shape(),
            critic.shape()
        )));
    }
    check_len("reward", reward.len(), critic.shape()[0])?;
    let r = constant(logprob_sum, reward);
    let adv = r.sub(&critic.detach());
    let policy = adv.mul(logprob_sum).mean().neg();
    let value = critic.sub(&r).square().mean();
    Ok((policy, value))
}

pub(crate) fn ensure_finite<T: Float>(what: &str, v: &Var<'_, T>) -> Result<(), RlError> {
    if v.data().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(RlError::NonFiniteLoss(what.to_string()))
    }
}
