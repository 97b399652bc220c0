use statrs::distribution::{ContinuousCDF, StudentsT};

use super::RlError;
use crate::env::InstanceBatch;
use crate::policy::{Policy, PolicyError};

/// Mean reward of each group of `group` consecutive rows, repeated per row.
pub fn group_mean_baseline(reward: &[f32], group: usize) -> Result<Vec<f32>, RlError> {
    if group == 0 || !reward.len().is_multiple_of(group) {
        return Err(RlError::GroupSizeMismatch { len: reward.len(), group });
    }
    let mut out = Vec::with_capacity(reward.len());
    for g in reward.chunks(group) {
        let mean = (g.iter().map(|&r| r as f64).sum::<f64>() / group as f64) as f32;
        out.extend(std::iter::repeat_n(mean, group));
    }
    Ok(out)
}

/// Per-instance mean over `num_starts` multistart rollouts (instance-major).
pub fn shared_baseline(reward: &[f32], num_starts: usize) -> Result<Vec<f32>, RlError> {
    group_mean_baseline(reward, num_starts)
}

/// Per-instance mean over `num_augments` augmented copies (instance-major).
pub fn symmetric_baseline(reward: &[f32], num_augments: usize) -> Result<Vec<f32>, RlError> {
    group_mean_baseline(reward, num_augments)
}

/// Moving average of the batch-mean reward.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExponentialBaseline {
    pub beta: f64,
    pub value: Option<f64>,
}

impl ExponentialBaseline {
    pub fn new(beta: f64) -> Self {
        ExponentialBaseline { beta, value: None }
    }

    /// Folds in this batch and returns the updated value for every row.
    pub fn update(&mut self, reward: &[f32]) -> Vec<f32> {
        let mean = reward.iter().map(|&r| r as f64).sum::<f64>() / reward.len().max(1) as f64;
        let v = match self.value {
            None => mean,
            Some(v) => self.beta * v + (1.0 - self.beta) * mean,
        };
        self.value = Some(v);
        vec![v as f32; reward.len()]
    }
}

/// One-sided paired t-test of `H1: mean(candidate − baseline) > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
}

pub fn paired_t_test(candidate: &[f32], baseline: &[f32]) -> TTest {
    assert_eq!(candidate.len(), baseline.len());
    let n = candidate.len();
    let diffs: Vec<f64> = candidate.iter().zip(baseline).map(|(&c, &b)| c as f64 - b as f64).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return TTest { mean_diff: mean, t: f64::NAN, p_value: 1.0 };
    }
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    if se == 0.0 {
        let p_value = if mean > 0.0 { 0.0 } else { 1.0 };
        return TTest { mean_diff: mean, t: mean.signum() * f64::INFINITY, p_value };
    }
    let t = mean / se;
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid degrees of freedom");
    TTest { mean_diff: mean, t, p_value: 1.0 - dist.cdf(t) }
}

/// Greedy rewards of a frozen earlier policy, replaced when the learner is
/// significantly better on a fixed validation set.
#[derive(Debug, Clone)]
pub struct RolloutBaseline {
    pub policy: Policy,
    pub val_set: InstanceBatch,
    pub val_reward: Vec<f32>,
    pub alpha: f64,
}

impl RolloutBaseline {
    pub fn new(policy: Policy, val_set: InstanceBatch, alpha: f64) -> Result<Self, PolicyError> {
        let val_reward = policy.greedy(&val_set, None)?.reward;
        Ok(RolloutBaseline { policy, val_set, val_reward, alpha })
    }

    pub fn eval(&self, inst: &InstanceBatch) -> Result<Vec<f32>, PolicyError> {
        Ok(self.policy.greedy(inst, None)?.reward)
    }

    /// Replaces the frozen policy by `candidate` if its mean validation
    /// reward is higher and the one-sided test rejects at `alpha`.
    pub fn update(&mut self, candidate: &Policy) -> Result<(bool, TTest), PolicyError> {
        let reward = candidate.greedy(&self.val_set, None)?.reward;
        Ok(self.update_with(candidate, reward))
    }

    /// As [`RolloutBaseline::update`], with the candidate's greedy validation
    /// rewards already computed.
    pub fn update_with(&mut self, candidate: &Policy, reward: Vec<f32>) -> (bool, TTest) {
        assert_eq!(reward.len(), self.val_reward.len());
        let test = paired_t_test(&reward, &self.val_reward);
        let replace = test.mean_diff > 0.0 && test.p_value < self.alpha;
        if replace {
            self.policy = candidate.clone();
            self.val_reward = reward;
        }
        (replace, test)
    }
}
