use serde::{Deserialize, Serialize};

use crate::policy::{NormStats, ParamSet};
use crate::tensor::Tensor;

/// Adam with L2 weight decay added to the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: ParamSet::new(), v: ParamSet::new() }
    }

    /// Updates every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).unwrap_or_else(|| panic!("gradient for unknown parameter {name:?}"));
            assert_eq!(p.shape(), g.shape(), "gradient shape for {name}");
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros(g.shape().to_vec()));
                self.v.insert(name, Tensor::zeros(g.shape().to_vec()));
            }
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            for (i, (p, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g = g as f64 + self.weight_decay * *p as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *p = (*p as f64 - update) as f32;
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let total: f64 =
        grads.iter().flat_map(|(_, g)| g.data().iter()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if total > max_norm {
        let scale = (max_norm / (total + 1e-6)) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    total
}

/// Learning rate multiplied by `gamma` at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStepLr {
    /// Rate used during (0-based) `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count() as i32;
        self.base * self.gamma.powi(passed)
    }
}

/// `running ← (1 − momentum)·running + momentum·batch` for every recorded
/// batch-norm layer.
pub fn update_running_stats(params: &mut ParamSet, stats: &[NormStats<f32>], momentum: f32) {
    for s in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{}{suffix}", s.prefix);
            let run = params.get_mut(&name).unwrap_or_else(|| panic!("missing buffer {name:?}"));
            for (r, &b) in run.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}
