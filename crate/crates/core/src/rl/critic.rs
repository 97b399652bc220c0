use crate::policy::{encode_nodes, init_embedding, Mode, NormStats, ParamSpecs, PolicyConfig, PolicyError, Scope};
use crate::tensor::{Float, Var};

/// Critic parameters live under this prefix, beside the policy's.
pub const CRITIC_PREFIX: &str = "critic.";
pub const CRITIC_HIDDEN: usize = 512;

/// Declares an encoder of its own plus the value head `d → 512 → 1`.
pub fn declare_critic(cfg: &PolicyConfig, specs: &mut ParamSpecs) {
    crate::policy::declare_embedding(cfg, CRITIC_PREFIX, specs);
    let d = cfg.embedding_dim;
    specs.weight(format!("{CRITIC_PREFIX}value.w1"), d, CRITIC_HIDDEN);
    specs.bias(format!("{CRITIC_PREFIX}value.b1"), d, CRITIC_HIDDEN);
    specs.weight(format!("{CRITIC_PREFIX}value.w2"), CRITIC_HIDDEN, 1);
    specs.bias(format!("{CRITIC_PREFIX}value.b2"), CRITIC_HIDDEN, 1);
}

/// Predicted reward per instance, `[B]`. `scope` is the critic scope.
pub fn critic_value<'t, T: Float>(
    scope: &Scope<'_, 't, T>,
    cfg: &PolicyConfig,
    inst: &crate::env::InstanceBatch,
    mode: Mode,
) -> Result<(Var<'t, T>, Vec<NormStats<T>>), PolicyError> {
    let emb = init_embedding(scope, cfg, inst)?;
    let (h, stats) = encode_nodes(scope, cfg, emb, mode)?;
    let v = h
        .mean_axis(1)
        .linear(scope.get("value.w1"), Some(scope.get("value.b1")))
        .relu()
        .linear(scope.get("value.w2"), Some(scope.get("value.b2")));
    Ok((v.reshape(&[inst.batch]), stats))
}
