use super::params::{ParamSpecs, Scope};
use super::{Normalization, PolicyConfig, PolicyError};
use crate::env::{EnvId, InstanceBatch, KeyedBatch};
use crate::tensor::nn::{attention, mha, MhaWeights};
use crate::tensor::{Float, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses (and reports) batch statistics.
    Train,
    /// Batch norm uses the running statistics.
    Eval,
}

/// Batch statistics of one batch-norm layer, for running-average updates.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    /// Parameter prefix, e.g. `encoder.block0.norm1.`.
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Node embeddings plus the per-instance decoder caches.
pub struct EncoderOutput<'t, T: Float> {
    /// `[B, N, d]`
    pub h: Var<'t, T>,
    /// `[B, d]` mean over nodes.
    pub graph: Var<'t, T>,
    /// Glimpse keys / values and logit keys, each `[B, N, d]`.
    pub glimpse_k: Var<'t, T>,
    pub glimpse_v: Var<'t, T>,
    pub logit_k: Var<'t, T>,
    pub stats: Vec<NormStats<T>>,
}

/// Node feature widths of the init embedding: (depot map, per-kind maps).
fn feature_maps(env: EnvId) -> &'static [(&'static str, usize)] {
    match env {
        EnvId::Tsp => &[("node", 2)],
        EnvId::Cvrp | EnvId::Op => &[("depot", 2), ("node", 3)],
        EnvId::Pctsp => &[("depot", 2), ("node", 4)],
        EnvId::Pdp => &[("depot", 2), ("pickup", 4), ("delivery", 2)],
    }
}

pub fn declare_embedding(cfg: &PolicyConfig, prefix: &str, specs: &mut ParamSpecs) {
    let d = cfg.embedding_dim;
    for &(kind, width) in feature_maps(cfg.env) {
        specs.weight(format!("{prefix}init.{kind}.weight"), width, d);
        specs.bias(format!("{prefix}init.{kind}.bias"), width, d);
    }
    for l in 0..cfg.num_layers {
        let p = format!("{prefix}encoder.block{l}.");
        for w in ["wq", "wk", "wv", "wo"] {
            specs.weight(format!("{p}mha.{w}"), d, d);
        }
        specs.weight(format!("{p}ff.w1"), d, cfg.hidden_dim);
        specs.bias(format!("{p}ff.b1"), d, cfg.hidden_dim);
        specs.weight(format!("{p}ff.w2"), cfg.hidden_dim, d);
        specs.bias(format!("{p}ff.b2"), cfg.hidden_dim, d);
        for norm in ["norm1", "norm2"] {
            specs.constant(format!("{p}{norm}.weight"), vec![d], 1.0);
            specs.constant(format!("{p}{norm}.bias"), vec![d], 0.0);
            if cfg.normalization == Normalization::Batch {
                specs.constant(format!("{p}{norm}.running_mean"), vec![d], 0.0);
                specs.constant(format!("{p}{norm}.running_var"), vec![d], 1.0);
            }
        }
    }
}

pub(crate) fn declare_decoder(cfg: &PolicyConfig, specs: &mut ParamSpecs) {
    let d = cfg.embedding_dim;
    specs.weight("decoder.context.weight".into(), cfg.context_dim(), d);
    for w in ["glimpse.wk", "glimpse.wv", "glimpse.wo", "logit.wk"] {
        specs.weight(format!("decoder.{w}"), d, d);
    }
    if cfg.env == EnvId::Tsp {
        specs.uniform("decoder.placeholder.first".into(), vec![d], 1);
        specs.uniform("decoder.placeholder.current".into(), vec![d], 1);
    }
}

fn node_features<T: Float>(
    inst: &InstanceBatch,
    nodes: std::ops::Range<usize>,
    width: usize,
    f: impl Fn(usize, usize, &mut Vec<f32>),
) -> Tensor<T> {
    let mut data = Vec::with_capacity(inst.batch * nodes.len() * width);
    let mut row = Vec::with_capacity(width);
    for b in 0..inst.batch {
        for i in nodes.clone() {
            row.clear();
            f(b, i, &mut row);
            debug_assert_eq!(row.len(), width);
            data.extend(row.iter().map(|&x| T::from_f64_lossy(x as f64)));
        }
    }
    Tensor::new(vec![inst.batch, nodes.len(), width], data)
}

fn check_env(cfg: &PolicyConfig, inst: &InstanceBatch) -> Result<(), PolicyError> {
    if cfg.env != inst.env {
        return Err(PolicyError::UnknownEnv { policy: cfg.env, instances: inst.env });
    }
    Ok(())
}

/// Per-environment affine node featurization, `[B, N, d]`.
pub fn init_embedding<'t, T: Float>(
    scope: &Scope<'_, 't, T>,
    cfg: &PolicyConfig,
    inst: &InstanceBatch,
) -> Result<Var<'t, T>, PolicyError> {
    check_env(cfg, inst)?;
    let tape = scope.tape();
    let n = inst.nodes;
    let embed = |kind: &str, feats: Tensor<T>| {
        tape.constant(feats)
            .linear(scope.get(&format!("init.{kind}.weight")), Some(scope.get(&format!("init.{kind}.bias"))))
    };
    let xy = |b: usize, i: usize, out: &mut Vec<f32>| out.extend(inst.loc(b, i));
    let depot = || embed("depot", node_features(inst, 0..1, 2, xy));
    let out = match inst.env {
        EnvId::Tsp => embed("node", node_features(inst, 0..n, 2, xy)),
        EnvId::Cvrp => Var::concat(
            &[
                depot(),
                embed(
                    "node",
                    node_features(inst, 1..n, 3, |b, i, out| {
                        xy(b, i, out);
                        out.push(inst.demand_at(b, i));
                    }),
                ),
            ],
            1,
        ),
        EnvId::Op => Var::concat(
            &[
                depot(),
                embed(
                    "node",
                    node_features(inst, 1..n, 3, |b, i, out| {
                        xy(b, i, out);
                        out.push(inst.prize_at(b, i));
                    }),
                ),
            ],
            1,
        ),
        EnvId::Pctsp => Var::concat(
            &[
                depot(),
                embed(
                    "node",
                    node_features(inst, 1..n, 4, |b, i, out| {
                        xy(b, i, out);
                        out.push(inst.prize_at(b, i));
                        out.push(inst.penalty_at(b, i));
                    }),
                ),
            ],
            1,
        ),
        EnvId::Pdp => {
            let p = inst.num_pairs();
            let pickups = node_features(inst, 1..p + 1, 4, |b, i, out| {
                xy(b, i, out);
                out.extend(inst.loc(b, i + p));
            });
            let deliveries = node_features(inst, p + 1..n, 2, xy);
            Var::concat(&[depot(), embed("pickup", pickups), embed("delivery", deliveries)], 1)
        }
    };
    Ok(out)
}

fn normalize<'t, T: Float>(
    scope: &Scope<'_, 't, T>,
    cfg: &PolicyConfig,
    prefix: &str,
    x: Var<'t, T>,
    mode: Mode,
    stats: &mut Vec<NormStats<T>>,
) -> Var<'t, T> {
    let gamma = scope.get(&format!("{prefix}weight"));
    let beta = scope.get(&format!("{prefix}bias"));
    let eps = T::from_f64_lossy(NORM_EPS);
    match (cfg.normalization, mode) {
        (Normalization::Instance, _) => x.instance_norm(gamma, beta, eps),
        (Normalization::Batch, Mode::Train) => {
            let (y, batch) = x.batch_norm(gamma, beta, eps, None);
            let (mean, var) = batch.expect("batch statistics in train mode");
            stats.push(NormStats { prefix: format!("{}{prefix}", scope.prefix), mean, var });
            y
        }
        (Normalization::Batch, Mode::Eval) => {
            let mean = scope.get(&format!("{prefix}running_mean"));
            let var = scope.get(&format!("{prefix}running_var"));
            x.batch_norm(gamma, beta, eps, Some((mean.data(), var.data()))).0
        }
    }
}

/// Encoder blocks only: `(h, batch-norm statistics)`.
pub fn encode_nodes<'t, T: Float>(
    scope: &Scope<'_, 't, T>,
    cfg: &PolicyConfig,
    embeddings: Var<'t, T>,
    mode: Mode,
) -> Result<(Var<'t, T>, Vec<NormStats<T>>), PolicyError> {
    let shape = embeddings.shape();
    if shape.len() != 3 || shape[2] != cfg.embedding_dim {
        return Err(crate::tensor::TensorError::ShapeMismatch(format!(
            "encoder input {shape:?}, embedding_dim {}",
            cfg.embedding_dim
        ))
        .into());
    }
    let mut h = embeddings;
    let mut stats = Vec::new();
    for l in 0..cfg.num_layers {
        let p = format!("encoder.block{l}.");
        let w = MhaWeights {
            wq: scope.get(&format!("{p}mha.wq")),
            wk: scope.get(&format!("{p}mha.wk")),
            wv: scope.get(&format!("{p}mha.wv")),
            wo: scope.get(&format!("{p}mha.wo")),
        };
        let attended = mha(&h, &h, &h, &w, cfg.num_heads, None)?;
        h = normalize(scope, cfg, &format!("{p}norm1."), h.add(&attended), mode, &mut stats);
        let ff = h
            .linear(scope.get(&format!("{p}ff.w1")), Some(scope.get(&format!("{p}ff.b1"))))
            .relu()
            .linear(scope.get(&format!("{p}ff.w2")), Some(scope.get(&format!("{p}ff.b2"))));
        h = normalize(scope, cfg, &format!("{p}norm2."), h.add(&ff), mode, &mut stats);
    }
    Ok((h, stats))
}

/// Encoder blocks, graph embedding and decoder caches.
pub fn encode<'t, T: Float>(
    scope: &Scope<'_, 't, T>,
    cfg: &PolicyConfig,
    embeddings: Var<'t, T>,
    mode: Mode,
) -> Result<EncoderOutput<'t, T>, PolicyError> {
    let (h, stats) = encode_nodes(scope, cfg, embeddings, mode)?;
    Ok(EncoderOutput {
        graph: h.mean_axis(1),
        glimpse_k: h.matmul(scope.get("decoder.glimpse.wk")),
        glimpse_v: h.matmul(scope.get("decoder.glimpse.wv")),
        logit_k: h.matmul(scope.get("decoder.logit.wk")),
        h,
        stats,
    })
}

/// Step query `q_t = W_q · [graph?, env-specific parts]`, `[B, d]`.
pub fn context_embedding<'t, T: Float>(
    scope: &Scope<'_, 't, T>,
    cfg: &PolicyConfig,
    enc: &EncoderOutput<'t, T>,
    state: &KeyedBatch,
    inst: &InstanceBatch,
) -> Result<Var<'t, T>, PolicyError> {
    check_env(cfg, inst)?;
    let tape = scope.tape();
    let (b, d) = (state.batch(), cfg.embedding_dim);
    let index = |key: &str| -> Vec<usize> {
        state.i32(key).expect("state key").data().iter().map(|&c| c.max(0) as usize).collect()
    };
    let mut parts = Vec::with_capacity(3);
    if cfg.use_graph_context {
        parts.push(enc.graph.clone());
    }
    let scalar =
        |f: &dyn Fn(usize) -> f32| tape.constant(Tensor::from_fn(vec![b, 1], |r| T::from_f64_lossy(f(r) as f64)));
    let h_cur = enc.h.gather_nodes(&index("current_node"));
    match cfg.env {
        EnvId::Tsp => {
            let defined: Vec<bool> = state.i32("current_node").unwrap().data().iter().map(|&c| c >= 0).collect();
            let placeholder = |name: &str| scope.get(name).reshape(&[1, d]).broadcast_to(&[b, d]);
            let h_first = enc.h.gather_nodes(&index("first_node"));
            parts.push(h_first.select_rows(&defined, &placeholder("decoder.placeholder.first")));
            parts.push(h_cur.select_rows(&defined, &placeholder("decoder.placeholder.current")));
        }
        EnvId::Cvrp => {
            let used = state.f32("used_capacity").unwrap().data();
            parts.push(h_cur);
            parts.push(scalar(&|r| 1.0 - used[r]));
        }
        EnvId::Op => {
            let length = state.f32("tour_length").unwrap().data();
            parts.push(h_cur);
            parts.push(scalar(&|r| inst.max_length[r] - length[r]));
        }
        EnvId::Pctsp => {
            let prize = state.f32("collected_prize").unwrap().data();
            parts.push(h_cur);
            parts.push(scalar(&|r| (inst.required_prize[r] - prize[r]).max(0.0)));
        }
        EnvId::Pdp => parts.push(h_cur),
    }
    Ok(Var::concat(&parts, 1).matmul(scope.get("decoder.context.weight")))
}

/// The environment mask with finished rows reduced to action 0, so every
/// row has a feasible entry and finished rows get log-probability 0.
pub fn decode_mask(state: &KeyedBatch) -> Vec<bool> {
    let mask = state.action_mask();
    let a = mask.shape()[1];
    let mut out = mask.data().to_vec();
    for (r, &done) in state.done().iter().enumerate() {
        if done {
            out[r * a..(r + 1) * a].fill(false);
            out[r * a] = true;
        }
    }
    out
}

/// Per-step modulation of the decoder's keys and values.
pub trait DynamicEmbedding<T: Float>: Sync {
    /// Returns `(K^g_t, V^g_t, V_t)`, each `[B, N, d]`.
    #[allow(clippy::type_complexity)]
    fn apply<'t>(
        &self,
        scope: &Scope<'_, 't, T>,
        enc: &EncoderOutput<'t, T>,
        state: &KeyedBatch,
        inst: &InstanceBatch,
    ) -> (Var<'t, T>, Var<'t, T>, Var<'t, T>);
}

/// Additive update from a per-node dynamic feature (the visited flag):
/// each cache gets `visited · w` added, with `w` a learned `[1, d]` row.
pub struct VisitedProjection;

impl VisitedProjection {
    pub fn declare(cfg: &PolicyConfig, specs: &mut ParamSpecs) {
        for w in ["wk", "wv", "wl"] {
            specs.weight(format!("decoder.dynamic.{w}"), 1, cfg.embedding_dim);
        }
    }
}

impl<T: Float> DynamicEmbedding<T> for VisitedProjection {
    fn apply<'t>(
        &self,
        scope: &Scope<'_, 't, T>,
        enc: &EncoderOutput<'t, T>,
        state: &KeyedBatch,
        _inst: &InstanceBatch,
    ) -> (Var<'t, T>, Var<'t, T>, Var<'t, T>) {
        let visited = state.bool("visited").expect("state without visited");
        let (b, n) = (visited.shape()[0], visited.shape()[1]);
        let feat = scope.tape().constant(Tensor::new(
            vec![b, n, 1],
            visited.data().iter().map(|&v| if v { T::one() } else { T::zero() }).collect(),
        ));
        let delta = |w: &str| feat.matmul(scope.get(&format!("decoder.dynamic.{w}")));
        (enc.glimpse_k.add(&delta("wk")), enc.glimpse_v.add(&delta("wv")), enc.logit_k.add(&delta("wl")))
    }
}

/// Optional decoder plug-ins.
/// Transform of the glimpse `[B, 1, d]` right before the logit product.
pub type GlimpseHook<'a, 't, T> = &'a dyn Fn(&Var<'t, T>) -> Var<'t, T>;

#[derive(Clone, Copy)]
pub struct DecodeHooks<'a, 't, T: Float> {
    pub dynamic: Option<&'a dyn DynamicEmbedding<T>>,
    pub glimpse: Option<GlimpseHook<'a, 't, T>>,
}

impl<T: Float> Default for DecodeHooks<'_, '_, T> {
    fn default() -> Self {
        DecodeHooks { dynamic: None, glimpse: None }
    }
}

/// Log-probabilities `[B, N]` of the next action (`-inf` where masked).
#[allow(clippy::too_many_arguments)]
pub fn decode_step<'t, T: Float>(
    scope: &Scope<'_, 't, T>,
    cfg: &PolicyConfig,
    enc: &EncoderOutput<'t, T>,
    query: &Var<'t, T>,
    mask: &[bool],
    state: &KeyedBatch,
    inst: &InstanceBatch,
    hooks: DecodeHooks<'_, 't, T>,
) -> Result<Var<'t, T>, PolicyError> {
    let (b, n, d) = (enc.h.shape()[0], enc.h.shape()[1], cfg.embedding_dim);
    let dynamic;
    let (kg, vg, lk) = match hooks.dynamic {
        Some(dy) => {
            dynamic = dy.apply(scope, enc, state, inst);
            (&dynamic.0, &dynamic.1, &dynamic.2)
        }
        None => (&enc.glimpse_k, &enc.glimpse_v, &enc.logit_k),
    };
    let q = query.reshape(&[b, 1, d]);
    let mut glimpse = attention(&q, kg, vg, cfg.num_heads, Some(mask))?.matmul(scope.get("decoder.glimpse.wo"));
    if let Some(f) = hooks.glimpse {
        glimpse = f(&glimpse);
    }
    let scale = T::one() / T::from_usize_lossy(d).sqrt();
    let logits = glimpse.matmul_t(lk).reshape(&[b, n]).scale(scale).tanh_clip(T::from_f64_lossy(cfg.tanh_clipping));
    Ok(logits.masked_log_softmax(mask, T::from_f64_lossy(cfg.softmax_temp))?)
}
