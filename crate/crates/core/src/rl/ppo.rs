use rand::seq::SliceRandom;

use super::critic::{critic_value, CRITIC_PREFIX};
use super::{check_len, constant, ensure_finite, RlError};
use crate::env::InstanceBatch;
use crate::policy::{evaluate_actions, Bound, Mode, NormStats, ParamSet, PolicyConfig, RolloutOptions};
use crate::rng;
use crate::tensor::{Float, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig { clip_eps: 0.2, epochs: 2, minibatch: 512, entropy_coef: 0.01 }
    }
}

pub struct PpoTerms<'t, T: Float> {
    pub loss: Var<'t, T>,
    pub surrogate: Var<'t, T>,
    pub value: Var<'t, T>,
    pub entropy: Var<'t, T>,
}

/// `−mean[min(r·A, clip(r, 1−ε, 1+ε)·A)] + MSE(critic, reward) − c₂·entropy`
/// with `r = exp(new − old)` and `A = reward − detach(critic)`, one advantage
/// per trajectory and no normalization.
pub fn ppo_loss<'t, T: Float>(
    new_logprob: &Var<'t, T>,
    old_logprob: &[f32],
    reward: &[f32],
    critic: &Var<'t, T>,
    entropy: &Var<'t, T>,
    cfg: &PpoConfig,
) -> Result<PpoTerms<'t, T>, RlError> {
    let b = new_logprob.shape().iter().product();
    if new_logprob.shape().len() != 1 || critic.shape() != new_logprob.shape() || entropy.shape() != critic.shape() {
        return Err(RlError::ShapeMismatch(format!(
            "logprob {:?}, critic {:?}, entropy {:?}",
            new_logprob.shape(),
            critic.shape(),
            entropy.shape()
        )));
    }
    check_len("old_logprob", old_logprob.len(), b)?;
    check_len("reward", reward.len(), b)?;
    let r = constant(new_logprob, reward);
    let adv = r.sub(&critic.detach());
    let ratio = new_logprob.sub(&constant(new_logprob, old_logprob)).exp();
    let eps = T::from_f64_lossy(cfg.clip_eps);
    let clipped = ratio.clamp(T::one() - eps, T::one() + eps);
    let surrogate = ratio.mul(&adv).minimum(&clipped.mul(&adv)).mean();
    let value = critic.sub(&r).square().mean();
    let entropy = entropy.mean();
    let loss = surrogate.neg().add(&value).sub(&entropy.scale(T::from_f64_lossy(cfg.entropy_coef)));
    ensure_finite("ppo", &loss)?;
    Ok(PpoTerms { loss, surrogate, value, entropy })
}

/// Runs `cfg.epochs` passes of shuffled minibatches over one collected
/// batch. After each minibatch, `apply(params, gradients, batch-norm stats)`
/// is called; the caller performs the optimizer step. `params` must hold the
/// policy and the critic (`critic.` prefix). Returns the loss sequence.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<F>(
    params: &mut ParamSet,
    policy_cfg: &PolicyConfig,
    inst: &InstanceBatch,
    actions: &Tensor<i32>,
    old_logprob: &[f32],
    reward: &[f32],
    cfg: &PpoConfig,
    seed: u64,
    mut apply: F,
) -> Result<Vec<f32>, RlError>
where
    F: FnMut(&mut ParamSet, &ParamSet, &[NormStats<f32>]),
{
    check_len("old_logprob", old_logprob.len(), inst.batch)?;
    check_len("reward", reward.len(), inst.batch)?;
    if actions.shape()[0] != inst.batch {
        return Err(RlError::ShapeMismatch(format!("actions {:?} for batch {}", actions.shape(), inst.batch)));
    }
    let mb = cfg.minibatch.max(1);
    let width = actions.shape()[1];
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..inst.batch).collect();
        order.shuffle(&mut rng::stream(seed, epoch as u64));
        for rows in order.chunks(mb) {
            let sub = inst.select(rows);
            let acts = Tensor::new(
                vec![rows.len(), width],
                rows.iter().flat_map(|&r| actions.data()[r * width..(r + 1) * width].iter().copied()).collect(),
            );
            let old: Vec<f32> = rows.iter().map(|&r| old_logprob[r]).collect();
            let rew: Vec<f32> = rows.iter().map(|&r| reward[r]).collect();

            let tape = Tape::new();
            let bound = Bound::new(&tape, params, |_| true);
            let opts = RolloutOptions { mode: Mode::Train, entropy: true, ..Default::default() };
            let out = evaluate_actions(&bound.scope(""), policy_cfg, &sub, &acts, false, &opts)?;
            let (value, critic_stats) = critic_value(&bound.scope(CRITIC_PREFIX), policy_cfg, &sub, Mode::Train)?;
            let entropy = out.entropy.expect("entropy requested");
            let terms = ppo_loss(&out.logprob_sum, &old, &rew, &value, &entropy, cfg)?;
            let grads = bound.gradients(&tape.backward(&terms.loss)?);
            let mut stats = out.stats;
            stats.extend(critic_stats);
            losses.push(terms.loss.item());
            apply(params, &grads, &stats);
        }
    }
    Ok(losses)
}
