use std::time::Instant;

use rand::Rng;

use super::{check_memory, Copies, Incumbent, SearchConfig, SearchError, SearchMethod, SearchOutput};
use crate::decode::{decode, DecodeScheme};
use crate::env::{self, pad_actions, InstanceBatch};
use crate::policy::{
    evaluate_actions, rollout, ActionChoice, Bound, DecodeHooks, Mode, ParamSet, Policy, RolloutOptions,
};
use crate::rl::reinforce_loss;
use crate::rng;
use crate::tensor::{Float, Tape, Tensor, Var};

/// Name prefix of the injected layer's parameters.
pub const EAS_PREFIX: &str = "eas.";

/// Per-instance residual layer on the decoder glimpse:
/// `q ← q + relu(q·W1 + b1)·W2 + b2`, with `W2` and `b2` starting at zero so
/// the adapted policy starts out identical to the frozen one.
pub struct EasLayer;

impl EasLayer {
    /// Parameters for `instances` instances of width `d`: `eas.w1 [B, d, d]`,
    /// `eas.b1 [B, d]`, `eas.w2 [B, d, d]`, `eas.b2 [B, d]`.
    pub fn init(instances: usize, d: usize, seed: u64) -> ParamSet {
        let mut r = rng::stream(seed, 0);
        let bound = 1.0 / (d as f32).sqrt();
        let mut uniform = |shape: Vec<usize>| Tensor::from_fn(shape, |_| r.random_range(-bound..bound));
        let mut p = ParamSet::new();
        p.insert(format!("{EAS_PREFIX}w1"), uniform(vec![instances, d, d]));
        p.insert(format!("{EAS_PREFIX}b1"), uniform(vec![instances, d]));
        p.insert(format!("{EAS_PREFIX}w2"), Tensor::zeros(vec![instances, d, d]));
        p.insert(format!("{EAS_PREFIX}b2"), Tensor::zeros(vec![instances, d]));
        p
    }

    /// The layer's weights gathered for rows whose instances are `row_inst`.
    pub fn expand<'t, T: Float>(layer: &[Var<'t, T>; 4], row_inst: &[usize]) -> [Var<'t, T>; 4] {
        let [w1, b1, w2, b2] = layer;
        let d = w1.shape()[1];
        let rows = row_inst.len();
        [
            w1.index_select(row_inst),
            b1.index_select(row_inst).reshape(&[rows, 1, d]),
            w2.index_select(row_inst),
            b2.index_select(row_inst).reshape(&[rows, 1, d]),
        ]
    }

    /// Applies expanded weights to a glimpse `[R, 1, d]`.
    pub fn apply<'t, T: Float>(w: &[Var<'t, T>; 4], q: &Var<'t, T>) -> Var<'t, T> {
        let h = q.matmul(&w[0]).add(&w[1]).relu();
        q.add(&h.matmul(&w[2]).add(&w[3]))
    }

    pub fn hook<'a, 't, T: Float>(w: &'a [Var<'t, T>; 4]) -> impl Fn(&Var<'t, T>) -> Var<'t, T> + 'a {
        move |q| Self::apply(w, q)
    }

    /// Binds `params` as trainable leaves on `tape`.
    pub fn bind<'t, T: Float>(tape: &'t Tape<T>, params: &ParamSet<T>) -> [Var<'t, T>; 4] {
        ["w1", "b1", "w2", "b2"].map(|n| {
            tape.leaf(
                params.get(&format!("{EAS_PREFIX}{n}")).unwrap_or_else(|| panic!("missing {EAS_PREFIX}{n}")).clone(),
            )
        })
    }
}

/// Adapts only an injected per-instance layer, with an imitation term that
/// pulls the policy toward the best solution found so far. Starts from the
/// best greedy solution over the augmented copies.
pub fn eas_lay(policy: &Policy, inst: &InstanceBatch, cfg: &SearchConfig) -> Result<SearchOutput, SearchError> {
    cfg.validate()?;
    check_memory(SearchMethod::EasLay, policy, inst, cfg)?;
    let start = Instant::now();
    let zero_shot = decode(policy, inst, DecodeScheme::Augmentation(cfg.augments), cfg.seed)?;
    let mut incumbent = Incumbent::from_trajectory(inst, &zero_shot.best)?;
    let mut trace = vec![incumbent.reward.clone()];
    let mut layer = EasLayer::init(inst.batch, policy.config.embedding_dim, rng::derive(cfg.seed, "eas_init", 0));
    let mut adam = crate::train::Adam::new(cfg.lr, cfg.weight_decay);
    let copies = if cfg.iterations > 0 { Some(Copies::new(inst, cfg)) } else { None };
    let identity: Vec<usize> = (0..inst.batch).collect();
    for it in 0..cfg.iterations {
        let copies = copies.as_ref().expect("built when iterating");
        let tape = Tape::<f32>::new();
        let bound = Bound::frozen(&tape, &policy.params);
        let vars = EasLayer::bind(&tape, &layer);
        let (sample_w, own_w) = (EasLayer::expand(&vars, &copies.row_inst), EasLayer::expand(&vars, &identity));
        let sample_hook = EasLayer::hook(&sample_w);
        let own_hook = EasLayer::hook(&own_w);

        let mut stream = rng::stream(rng::derive(cfg.seed, "eas", it as u64), 0);
        let opts = RolloutOptions {
            mode: Mode::Eval,
            hooks: DecodeHooks { dynamic: None, glimpse: Some(&sample_hook) },
            ..Default::default()
        };
        let out = rollout(&bound.scope(""), &policy.config, &copies.batch, ActionChoice::Sample(&mut stream), &opts)?;
        let reward = &out.trajectory.reward;
        let baseline = copies.baseline(reward, inst.batch);
        let mut loss = reinforce_loss(&out.logprob_sum, reward, &baseline)?;
        if cfg.imitation_weight > 0.0 {
            let opts = RolloutOptions {
                mode: Mode::Eval,
                hooks: DecodeHooks { dynamic: None, glimpse: Some(&own_hook) },
                ..Default::default()
            };
            let teacher = evaluate_actions(
                &bound.scope(""),
                &policy.config,
                inst,
                &pad_actions(&incumbent.actions),
                false,
                &opts,
            )?;
            let imitation = teacher.logprob_sum.mean().neg();
            loss = loss.add(&imitation.scale(cfg.imitation_weight as f32));
        }
        let grads = tape.backward(&loss)?;
        let mut step = ParamSet::new();
        for (n, v) in ["w1", "b1", "w2", "b2"].iter().zip(&vars) {
            step.insert(format!("{EAS_PREFIX}{n}"), grads.wrt(v));
        }
        adam.step(&mut layer, &step);
        let on_original = env::reward(&copies.original, &out.trajectory.actions)?;
        incumbent.update(&copies.row_inst, &out.trajectory, &on_original);
        trace.push(incumbent.reward.clone());
    }
    Ok(SearchOutput {
        method: SearchMethod::EasLay,
        best: incumbent.trajectory(),
        trace,
        params: layer,
        seconds: start.elapsed().as_secs_f64(),
    })
}
