//! Autoregressive attention policy: per-environment init embedding, MHA
//! encoder, per-environment context embedding and a glimpse decoder with
//! tanh-clipped masked softmax.

mod model;
mod params;
mod rollout;

pub use model::{
    context_embedding, declare_embedding, decode_mask, decode_step, encode, encode_nodes, init_embedding, DecodeHooks,
    DynamicEmbedding, EncoderOutput, GlimpseHook, Mode, NormStats, VisitedProjection,
};
pub use params::{is_buffer, Bound, Init, ParamSet, ParamSpecs, Scope};
pub use rollout::{
    concat_trajectories, evaluate_actions, rollout, ActionChoice, Policy, RolloutOptions, RolloutOutput,
};

use crate::env::{EnvError, EnvId};
use crate::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Batch,
    Instance,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub env: EnvId,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub normalization: Normalization,
    pub tanh_clipping: f64,
    pub use_graph_context: bool,
    pub softmax_temp: f64,
}

impl PolicyConfig {
    /// Attention Model defaults.
    pub fn am(env: EnvId) -> Self {
        PolicyConfig {
            env,
            embedding_dim: 128,
            hidden_dim: 512,
            num_heads: 8,
            num_layers: 3,
            normalization: Normalization::Batch,
            tanh_clipping: 10.0,
            use_graph_context: true,
            softmax_temp: 1.0,
        }
    }

    /// POMO: six layers, instance norm, no graph context.
    pub fn pomo(env: EnvId) -> Self {
        PolicyConfig {
            num_layers: 6,
            normalization: Normalization::Instance,
            use_graph_context: false,
            ..Self::am(env)
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let d = self.embedding_dim;
        if d == 0 || self.num_heads == 0 || !d.is_multiple_of(self.num_heads) {
            return Err(TensorError::HeadDivisibility { dim: d, heads: self.num_heads }.into());
        }
        if self.hidden_dim == 0 {
            return Err(PolicyError::Config("hidden_dim must be positive".into()));
        }
        if !(self.tanh_clipping > 0.0) {
            return Err(PolicyError::Config("tanh_clipping must be positive".into()));
        }
        if !(self.softmax_temp > 0.0) {
            return Err(TensorError::NonPositiveTemperature.into());
        }
        Ok(())
    }

    /// Width of the concatenated context vector.
    pub fn context_dim(&self) -> usize {
        let d = self.embedding_dim;
        let graph = if self.use_graph_context { d } else { 0 };
        graph
            + match self.env {
                EnvId::Tsp => 2 * d,
                EnvId::Cvrp | EnvId::Op | EnvId::Pctsp => d + 1,
                EnvId::Pdp => d,
            }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("policy built for {policy} cannot run {instances} instances")]
    UnknownEnv { policy: EnvId, instances: EnvId },
    #[error("invalid policy config: {0}")]
    Config(String),
}
