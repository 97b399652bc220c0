use nco_core::env::{generate, EnvId, GenerateOptions, InstanceBatch};
use nco_core::policy::{
    evaluate_actions, ActionChoice, Bound, DecodeHooks, Mode, Normalization, ParamSet, Policy, PolicyConfig,
    RolloutOptions, VisitedProjection,
};
use nco_core::rng;
use nco_core::tensor::gradcheck::{check, GradCheckOptions};
use nco_core::tensor::Tensor;

pub fn small(env: EnvId, norm: Normalization) -> PolicyConfig {
    PolicyConfig {
        embedding_dim: 8,
        hidden_dim: 16,
        num_heads: 2,
        num_layers: 2,
        normalization: norm,
        ..PolicyConfig::am(env)
    }
}

fn gen(env: EnvId, n: usize, count: usize, seed: u64) -> InstanceBatch {
    generate(env, n, count, seed, &GenerateOptions::default()).unwrap()
}

/// Running statistics away from their (0, 1) defaults.
pub fn perturb_buffers(params: &mut ParamSet, seed: u64) {
    use rand::Rng;
    let mut r = rng::stream(seed, 77);
    for (name, t) in params.iter_mut() {
        if name.ends_with("running_mean") {
            t.data_mut().iter_mut().for_each(|x| *x = r.random_range(-0.5..0.5));
        } else if name.ends_with("running_var") {
            t.data_mut().iter_mut().for_each(|x| *x = r.random_range(0.5..2.0));
        }
    }
}

/// Finite-difference check of the teacher-forced log-likelihood w.r.t. every
/// parameter tensor.
pub fn policy_logprob_check(env: EnvId, norm: Normalization, seed: u64) -> f64 {
    let cfg = small(env, norm);
    let mut specs = Policy::specs(&cfg);
    if seed % 2 == 1 {
        VisitedProjection::declare(&cfg, &mut specs);
    }
    let mut params = specs.materialize(seed);
    perturb_buffers(&mut params, seed);
    // non-trivial norm affine parameters
    for (name, t) in params.iter_mut() {
        if name.contains(".norm") && !name.contains("running") {
            t.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x += 0.1 * ((i + seed as usize) % 3) as f32);
        }
    }
    let n = if matches!(env, EnvId::Pdp | EnvId::Tsp) { 6 } else { 5 };
    let inst = gen(env, n, 4, seed);
    let policy = Policy { config: cfg.clone(), params: params.clone() };
    let mut r = rng::stream(seed, 2);
    let actions = policy.run(&inst, ActionChoice::Sample(&mut r), None).unwrap().actions;
    let params64: ParamSet<f64> = params.cast();
    let names: Vec<String> = params64.names().filter(|n| !nco_core::policy::is_buffer(n)).map(String::from).collect();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| params64.get(n).unwrap().clone()).collect();
    let mode = if seed.is_multiple_of(3) { Mode::Eval } else { Mode::Train };
    let dynamic = seed % 2 == 1;
    let report = check(
        &inputs,
        |tape, vars| {
            let mut bound = Bound::frozen(tape, &params64);
            for (name, v) in names.iter().zip(vars) {
                bound.insert(name.clone(), v.clone());
            }
            let dy = VisitedProjection;
            let opts = RolloutOptions {
                mode,
                hooks: DecodeHooks { dynamic: if dynamic { Some(&dy) } else { None }, glimpse: None },
                ..Default::default()
            };
            evaluate_actions(&bound.scope(""), &cfg, &inst, &actions, false, &opts).unwrap().logprob_sum
        },
        &GradCheckOptions { seed, max_coords: 6, ..Default::default() },
    );
    report.max_rel_err
}
