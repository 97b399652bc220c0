//! Hierarchical training configuration.
//!
//! Resolution order: built-in defaults, then the preset named by
//! `model.type`, then each config file in order, then `key=value`
//! overrides. The defaults double as the schema: a key that is not in them
//! is rejected, and so is a value whose type differs from the default's.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use super::TrainError;
use crate::decode::start_nodes;
use crate::env::{generate, EnvId, GenerateOptions};
use crate::policy::{Normalization, PolicyConfig};
use crate::rl::{BaselineKind, PpoConfig};

const DEFAULTS: &str = r#"
seed = 1234
deterministic = false

[env]
capacity = 0.0
max_length = 0.0

[model]
type = "am"
algorithm = "reinforce"
baseline = "rollout"
exp_beta = 0.8
num_starts = 0
num_augments = 10
rollout_alpha = 0.05

[model.policy.encoder]
type = "GraphAttentionEncoder"
num_heads = 8
num_layers = 3
normalization = "batch"
hidden_dim = 512
embedding_dim = 128

[model.policy.decoder]
num_heads = 8
embedding_dim = 128
use_graph_context = true
tanh_clipping = 10.0
mask_inner = true
mask_logits = true
normalize = true
softmax_temp = 1.0

[model.ppo]
clip_eps = 0.2
epochs = 2
minibatch = 512
entropy_coef = 0.01

[train]
gradient_clip_val = 1.0
max_epochs = 100
total_steps = 250000
samples_per_step = 512
batch_size = 0
epoch_size = 0
bn_momentum = 0.1

[train.optimizer]
type = "Adam"
learning_rate = 1e-4
weight_decay = 0.0

[train.scheduler]
type = "MultiStepLR"
step_size = [80, 95]
gamma = 0.1
scheduler_interval = "epoch"

[data]
train_seed = 1234
val_seed = 4321
val_size = 10000
test_seed = 1234
"#;

/// Keys with no default that every config must set.
const REQUIRED: &[(&str, &str)] = &[("env.name", "string"), ("env.num_loc", "integer")];

/// Preset overlays keyed by `model.type`.
pub const PRESETS: &[&str] = &["am", "pomo", "symnco", "am_xl", "a2c", "am_ppo", "am_lr1e-3"];

fn preset(name: &str) -> Option<&'static str> {
    Some(match name {
        "am" => "",
        "pomo" => {
            r#"
            [model]
            baseline = "shared"
            [model.policy.encoder]
            num_layers = 6
            normalization = "instance"
            [model.policy.decoder]
            use_graph_context = false
            [train.optimizer]
            weight_decay = 1e-6
            "#
        }
        "symnco" => {
            r#"
            [model]
            baseline = "symmetric"
            "#
        }
        "am_xl" => {
            r#"
            [model.policy.encoder]
            num_layers = 6
            normalization = "instance"
            [train]
            max_epochs = 500
            [train.scheduler]
            step_size = [480, 495]
            "#
        }
        "a2c" => {
            r#"
            [model]
            algorithm = "a2c"
            baseline = "critic"
            "#
        }
        "am_ppo" => {
            r#"
            [model]
            algorithm = "ppo"
            baseline = "critic"
            "#
        }
        // the main-text learning rate, as an alternative to the default
        "am_lr1e-3" => {
            r#"
            [train.optimizer]
            learning_rate = 1e-3
            "#
        }
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub env: EnvSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub name: EnvId,
    pub num_loc: usize,
    /// 0 selects the size table.
    pub capacity: f64,
    pub max_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(rename = "type")]
    pub kind: String,
    pub algorithm: Algorithm,
    pub baseline: String,
    pub exp_beta: f64,
    /// 0 uses every admissible start.
    pub num_starts: usize,
    pub num_augments: usize,
    pub rollout_alpha: f64,
    pub policy: PolicySection,
    pub ppo: PpoConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Reinforce,
    A2c,
    Ppo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub encoder: EncoderSection,
    pub decoder: DecoderSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    #[serde(rename = "type")]
    pub kind: String,
    pub num_heads: usize,
    pub num_layers: usize,
    pub normalization: Normalization,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    pub num_heads: usize,
    pub embedding_dim: usize,
    pub use_graph_context: bool,
    pub tanh_clipping: f64,
    pub mask_inner: bool,
    pub mask_logits: bool,
    pub normalize: bool,
    pub softmax_temp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub gradient_clip_val: f64,
    pub max_epochs: usize,
    pub total_steps: u64,
    /// Rollouts per gradient step when `batch_size` is 0.
    pub samples_per_step: usize,
    /// Instances per gradient step; 0 derives it from `samples_per_step`.
    pub batch_size: usize,
    /// Instances per epoch; 0 derives it from `total_steps`.
    pub epoch_size: usize,
    pub bn_momentum: f64,
    pub optimizer: OptimizerSection,
    pub scheduler: SchedulerSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(rename = "type")]
    pub kind: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    #[serde(rename = "type")]
    pub kind: String,
    pub step_size: Vec<usize>,
    pub gamma: f64,
    pub scheduler_interval: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_seed: u64,
    pub val_seed: u64,
    pub val_size: usize,
    pub test_seed: u64,
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

fn parse_table(text: &str, origin: &str) -> Result<Table, TrainError> {
    text.parse::<Table>().map_err(|e| TrainError::ConfigParse(format!("{origin}: {}", e.message())))
}

fn defaults() -> Table {
    parse_table(DEFAULTS, "defaults").expect("built-in defaults parse")
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: &Table) {
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Checks `user` keys and value types against the schema.
fn check_schema(user: &Table, schema: &Table, path: &str) -> Result<(), TrainError> {
    for (k, v) in user {
        let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        let expected = match schema.get(k) {
            Some(s) => type_name(s),
            None => match REQUIRED.iter().find(|(name, _)| *name == key) {
                Some((_, ty)) => ty,
                None => return Err(TrainError::UnknownKey(key)),
            },
        };
        let found = type_name(v);
        match (schema.get(k), v) {
            (Some(Value::Table(s)), Value::Table(t)) => check_schema(t, s, &key)?,
            (Some(Value::Array(s)), Value::Array(a)) => {
                if let Some(elem) = s.first() {
                    if let Some(bad) = a.iter().find(|x| type_name(x) != type_name(elem)) {
                        return Err(TrainError::TypeError {
                            key,
                            expected: format!("array of {}", type_name(elem)),
                            found: format!("array containing {}", type_name(bad)),
                        });
                    }
                }
            }
            _ if found == expected || (expected == "float" && found == "integer") => {}
            _ => return Err(TrainError::TypeError { key, expected: expected.into(), found: found.into() }),
        }
    }
    Ok(())
}

/// Integers given where the schema wants floats become floats.
fn coerce(user: &mut Table, schema: &Table) {
    for (k, v) in user.iter_mut() {
        match (schema.get(k), v) {
            (Some(Value::Table(s)), Value::Table(t)) => coerce(t, s),
            (Some(Value::Float(_)), v @ Value::Integer(_)) => {
                let i = v.as_integer().unwrap();
                *v = Value::Float(i as f64);
            }
            _ => {}
        }
    }
}

/// `a.b.c=value`; the value is read as TOML, or as a bare string if that
/// fails.
pub fn parse_override(text: &str) -> Result<Table, TrainError> {
    let (key, raw) =
        text.split_once('=').ok_or_else(|| TrainError::ConfigParse(format!("override {text:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(TrainError::ConfigParse(format!("override {text:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.to_string()),
    };
    let mut table = Table::new();
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = &mut table;
    for p in &parts[..parts.len() - 1] {
        cur = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())).as_table_mut().unwrap();
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(table)
}

fn lookup<'a>(t: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = t.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

/// Resolves config texts (in order) and overrides into a validated config.
pub fn resolve(texts: &[(String, String)], overrides: &[String]) -> Result<TrainConfig, TrainError> {
    let schema = defaults();
    let mut user = Table::new();
    for (origin, text) in texts {
        let t = parse_table(text, origin)?;
        check_schema(&t, &schema, "")?;
        merge(&mut user, &t);
    }
    for o in overrides {
        let t = parse_override(o)?;
        check_schema(&t, &schema, "")?;
        merge(&mut user, &t);
    }
    coerce(&mut user, &schema);
    for (key, _) in REQUIRED {
        if lookup(&user, key).is_none() {
            return Err(TrainError::MissingRequired(key.to_string()));
        }
    }
    let kind = lookup(&user, "model.type").and_then(Value::as_str).unwrap_or("am").to_string();
    let overlay = preset(&kind).ok_or_else(|| TrainError::InvalidConfig(format!("unknown model.type {kind:?}")))?;
    let mut full = schema;
    merge(&mut full, &parse_table(overlay, "preset").expect("built-in presets parse"));
    merge(&mut full, &user);
    let cfg: TrainConfig = Value::Table(full).try_into().map_err(|e: toml::de::Error| TrainError::TypeError {
        key: String::new(),
        expected: "valid value".into(),
        found: e.message().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads config files and applies overrides.
pub fn load_config(paths: &[&Path], overrides: &[String]) -> Result<TrainConfig, TrainError> {
    let texts = paths
        .iter()
        .map(|p| std::fs::read_to_string(p).map(|t| (p.display().to_string(), t)).map_err(|e| TrainError::io(p, e)))
        .collect::<Result<Vec<_>, _>>()?;
    resolve(&texts, overrides)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        let (enc, dec) = (&self.model.policy.encoder, &self.model.policy.decoder);
        if enc.embedding_dim != dec.embedding_dim || enc.num_heads != dec.num_heads {
            return bad("encoder and decoder must share embedding_dim and num_heads".into());
        }
        if !(dec.mask_inner && dec.mask_logits && dec.normalize) {
            return bad("mask_inner, mask_logits and normalize can only be true".into());
        }
        if enc.kind != "GraphAttentionEncoder" {
            return bad(format!("unsupported encoder type {:?}", enc.kind));
        }
        let t = &self.train;
        if t.optimizer.kind != "Adam" || t.scheduler.kind != "MultiStepLR" || t.scheduler.scheduler_interval != "epoch"
        {
            return bad("only Adam with an epoch-wise MultiStepLR is supported".into());
        }
        if !(t.gradient_clip_val > 0.0) {
            return bad("gradient_clip_val must be positive".into());
        }
        if !(t.optimizer.learning_rate > 0.0) || t.optimizer.weight_decay < 0.0 {
            return bad("learning_rate must be positive and weight_decay non-negative".into());
        }
        if t.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if let Some(m) = t.scheduler.step_size.iter().find(|&&m| m >= t.max_epochs) {
            return bad(format!("milestone {m} is not below max_epochs {}", t.max_epochs));
        }
        if t.epoch_size == 0 && !t.total_steps.is_multiple_of(t.max_epochs as u64) {
            return bad(format!("total_steps {} is not divisible by max_epochs {}", t.total_steps, t.max_epochs));
        }
        if !(0.0..=1.0).contains(&t.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]".into());
        }
        if self.data.val_size == 0 {
            return bad("val_size must be positive".into());
        }
        let critic = self.model.baseline == "critic";
        match self.model.algorithm {
            Algorithm::Reinforce if critic => return bad("the critic baseline needs algorithm a2c or ppo".into()),
            Algorithm::A2c | Algorithm::Ppo if !critic => return bad("a2c and ppo need baseline = \"critic\"".into()),
            _ => {}
        }
        self.baseline_kind()?;
        self.policy_config().validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        // size checks of the generator
        generate(self.env.name, self.env.num_loc, 1, 0, &self.generate_options())
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let (enc, dec) = (&self.model.policy.encoder, &self.model.policy.decoder);
        PolicyConfig {
            env: self.env.name,
            embedding_dim: enc.embedding_dim,
            hidden_dim: enc.hidden_dim,
            num_heads: enc.num_heads,
            num_layers: enc.num_layers,
            normalization: enc.normalization,
            tanh_clipping: dec.tanh_clipping,
            use_graph_context: dec.use_graph_context,
            softmax_temp: dec.softmax_temp,
        }
    }

    pub fn generate_options(&self) -> GenerateOptions {
        let pick = |v: f64| (v > 0.0).then_some(v as f32);
        GenerateOptions { capacity: pick(self.env.capacity), max_length: pick(self.env.max_length), pctsp_length: None }
    }

    /// Admissible multistart count for this environment and size.
    pub fn available_starts(&self) -> usize {
        let one = generate(self.env.name, self.env.num_loc, 1, 0, &self.generate_options()).expect("validated size");
        start_nodes(&one).len()
    }

    pub fn baseline_kind(&self) -> Result<BaselineKind, TrainError> {
        Ok(match self.model.baseline.as_str() {
            "none" => BaselineKind::None,
            "exponential" => BaselineKind::Exponential { beta: self.model.exp_beta },
            "critic" => BaselineKind::Critic,
            "rollout" => BaselineKind::Rollout,
            "shared" => {
                let all = self.available_starts();
                let s = if self.model.num_starts == 0 { all } else { self.model.num_starts };
                if s > all {
                    return Err(TrainError::InvalidConfig(format!("{s} starts requested, {all} admissible")));
                }
                BaselineKind::Shared { num_starts: s }
            }
            "symmetric" if self.model.num_augments >= 1 => {
                BaselineKind::Symmetric { num_augments: self.model.num_augments }
            }
            other => return Err(TrainError::InvalidConfig(format!("unknown baseline {other:?}"))),
        })
    }

    /// Instances per gradient step. The rollout baseline costs a second
    /// rollout per instance, so it gets half the instances.
    pub fn batch_size(&self) -> usize {
        if self.train.batch_size > 0 {
            return self.train.batch_size;
        }
        let kind = self.baseline_kind().expect("validated baseline");
        let per_instance = kind.group_size() * if kind == BaselineKind::Rollout { 2 } else { 1 };
        (self.train.samples_per_step / per_instance).max(1)
    }

    pub fn steps_per_epoch(&self) -> usize {
        if self.train.epoch_size > 0 {
            self.train.epoch_size.div_ceil(self.batch_size())
        } else {
            (self.train.total_steps / self.train.max_epochs as u64) as usize
        }
    }

    pub fn epoch_size(&self) -> usize {
        if self.train.epoch_size > 0 {
            self.train.epoch_size
        } else {
            self.steps_per_epoch() * self.batch_size()
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() as u64 * self.train.max_epochs as u64
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
