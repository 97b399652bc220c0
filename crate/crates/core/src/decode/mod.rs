//! Evaluation decoding schemes and result reporting.

mod report;

pub use report::{gap, two_places, write_csv, EvalReport, EvalRow};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::env::{transform, EnvId, InstanceBatch, Trajectory};
use crate::par;
use crate::policy::{concat_trajectories, ActionChoice, Policy, PolicyError};
use crate::rng;

/// Augmented copies in the combined multistart + augmentation scheme.
pub const MS_AUG_COPIES: usize = 16;

/// Instances per independent sampling chunk (fixed so results do not depend
/// on the thread count).
const SAMPLE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DecodeScheme {
    Greedy,
    /// Best of `M` sampled rollouts.
    Sampling(usize),
    /// One greedy rollout per admissible first action; `Some(n)` keeps the
    /// first `n` starts.
    Multistart(Option<usize>),
    /// Greedy on `K` transformed copies, dihedral group first.
    Augmentation(usize),
    /// Multistart on each of `K` augmented copies.
    MultistartAugmentation(usize),
}

impl fmt::Display for DecodeScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeScheme::Greedy => write!(f, "greedy"),
            DecodeScheme::Sampling(m) => write!(f, "sampling:{m}"),
            DecodeScheme::Multistart(None) => write!(f, "multistart"),
            DecodeScheme::Multistart(Some(n)) => write!(f, "multistart:{n}"),
            DecodeScheme::Augmentation(k) => write!(f, "augmentation:{k}"),
            DecodeScheme::MultistartAugmentation(MS_AUG_COPIES) => write!(f, "ms_aug"),
            DecodeScheme::MultistartAugmentation(k) => write!(f, "ms_aug:{k}"),
        }
    }
}

impl FromStr for DecodeScheme {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let count = |a: Option<&str>| -> Result<Option<usize>, DecodeError> {
            a.map(|a| a.parse::<usize>().map_err(|_| DecodeError::InvalidScheme(s.to_string()))).transpose()
        };
        let required = |a| count(a)?.ok_or_else(|| DecodeError::InvalidScheme(format!("{s}: missing count")));
        let scheme = match name {
            "greedy" if arg.is_none() => DecodeScheme::Greedy,
            "sampling" => DecodeScheme::Sampling(required(arg)?),
            "multistart" => DecodeScheme::Multistart(count(arg)?),
            "augmentation" => DecodeScheme::Augmentation(required(arg)?),
            "ms_aug" => DecodeScheme::MultistartAugmentation(count(arg)?.unwrap_or(MS_AUG_COPIES)),
            _ => return Err(DecodeError::InvalidScheme(s.to_string())),
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl DecodeScheme {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let ok = match *self {
            DecodeScheme::Greedy | DecodeScheme::Multistart(None) => true,
            DecodeScheme::Sampling(k)
            | DecodeScheme::Multistart(Some(k))
            | DecodeScheme::Augmentation(k)
            | DecodeScheme::MultistartAugmentation(k) => k >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(DecodeError::InvalidScheme(self.to_string()))
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid decoding scheme {0:?}")]
    InvalidScheme(String),
    #[error("multistart decoding is not supported for {env}: {reason}")]
    SchemeUnsupported { env: EnvId, reason: String },
    #[error("best-known value is zero")]
    ZeroReference,
    #[error("{0} best-known values for {1} instances")]
    ReferenceLength(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// First actions a multistart rollout forces: every node for TSP, pickups for
/// PDP, customers otherwise.
pub fn start_nodes(inst: &InstanceBatch) -> Vec<usize> {
    match inst.env {
        EnvId::Tsp => (0..inst.nodes).collect(),
        EnvId::Pdp => (1..=inst.num_pairs()).collect(),
        EnvId::Cvrp | EnvId::Op | EnvId::Pctsp => (1..inst.nodes).collect(),
    }
}

/// Best solution per instance, plus accounting.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub scheme: DecodeScheme,
    /// Best rollout per instance; rewards of augmented schemes are those of
    /// the transformed copy the solution came from.
    pub best: Trajectory,
    /// Rollouts per instance.
    pub samples: usize,
    pub seconds: f64,
}

impl DecodeOutput {
    pub fn costs(&self, env: EnvId) -> Vec<f32> {
        self.best.costs(env)
    }
}

/// Index of the best of `group` consecutive rows for each instance; the
/// lowest index wins ties.
fn best_rows(reward: &[f32], batch: usize, group: usize, row_of: impl Fn(usize, usize) -> usize) -> Vec<usize> {
    (0..batch)
        .map(|b| {
            let mut best = row_of(b, 0);
            for g in 1..group {
                let r = row_of(b, g);
                if reward[r] > reward[best] {
                    best = r;
                }
            }
            best
        })
        .collect()
}

fn multistart_batch(inst: &InstanceBatch, starts: Option<usize>) -> Result<(InstanceBatch, Vec<usize>), DecodeError> {
    let mut nodes = start_nodes(inst);
    if let Some(k) = starts {
        if k > nodes.len() {
            return Err(DecodeError::SchemeUnsupported {
                env: inst.env,
                reason: format!("{k} starts requested, {} admissible", nodes.len()),
            });
        }
        nodes.truncate(k);
    }
    if nodes.is_empty() {
        return Err(DecodeError::SchemeUnsupported { env: inst.env, reason: "no admissible first action".into() });
    }
    let expanded = inst.repeat_each(nodes.len());
    let forced = (0..expanded.batch).map(|r| nodes[r % nodes.len()]).collect();
    Ok((expanded, forced))
}

/// Decodes every instance with `scheme`; `seed` drives sampling and random
/// augmentations.
pub fn decode(
    policy: &Policy,
    inst: &InstanceBatch,
    scheme: DecodeScheme,
    seed: u64,
) -> Result<DecodeOutput, DecodeError> {
    scheme.validate()?;
    let start = Instant::now();
    let bsz = inst.batch;
    let (best, samples) = match scheme {
        DecodeScheme::Greedy => (policy.greedy(inst, None)?, 1),
        DecodeScheme::Sampling(m) => {
            let chunks = bsz.div_ceil(SAMPLE_CHUNK);
            let runs = par::try_map_range(m * chunks, |job| {
                let (s, c) = (job / chunks, job % chunks);
                let rows: Vec<usize> = (c * SAMPLE_CHUNK..((c + 1) * SAMPLE_CHUNK).min(bsz)).collect();
                let mut stream = rng::stream(rng::derive(seed, "sampling", s as u64), c as u64);
                policy.run(&inst.select(&rows), ActionChoice::Sample(&mut stream), None)
            })?;
            // sample-major: row s * B + b
            let all = concat_trajectories(&runs);
            let rows = best_rows(&all.reward, bsz, m, |b, s| s * bsz + b);
            (all.select(&rows), m)
        }
        DecodeScheme::Multistart(starts) => {
            let (expanded, forced) = multistart_batch(inst, starts)?;
            let s = expanded.batch / bsz;
            let all = policy.greedy(&expanded, Some(&forced))?;
            let rows = best_rows(&all.reward, bsz, s, |b, k| b * s + k);
            (all.select(&rows), s)
        }
        DecodeScheme::Augmentation(k) => {
            let copies = InstanceBatch::concat(&transform::augmentations(inst, k, seed));
            let all = policy.greedy(&copies, None)?;
            let rows = best_rows(&all.reward, bsz, k, |b, a| a * bsz + b);
            (all.select(&rows), k)
        }
        DecodeScheme::MultistartAugmentation(k) => {
            let copies = InstanceBatch::concat(&transform::augmentations(inst, k, seed));
            let (expanded, forced) = multistart_batch(&copies, None)?;
            let s = expanded.batch / copies.batch;
            let all = policy.greedy(&expanded, Some(&forced))?;
            // row (a * B + b) * S + start
            let rows = best_rows(&all.reward, bsz, k * s, |b, g| ((g / s) * bsz + b) * s + g % s);
            (all.select(&rows), k * s)
        }
    };
    Ok(DecodeOutput { scheme, best, samples, seconds: start.elapsed().as_secs_f64() })
}
