use rand::Rng;

use super::{EnvError, EnvId};
use crate::rng;

/// Static problem data for a batch of instances of one environment.
///
/// Per-node arrays are `[B, N]` flattened (depot entries are 0); per-instance
/// scalars are `[B]`. Arrays an environment does not use are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBatch {
    pub env: EnvId,
    pub batch: usize,
    /// Total node count N, including the depot.
    pub nodes: usize,
    /// `[B, N, 2]`
    pub locs: Vec<f32>,
    /// CVRP demands divided by vehicle capacity.
    pub demand: Vec<f32>,
    /// OP and PCTSP.
    pub prize: Vec<f32>,
    /// PCTSP.
    pub penalty: Vec<f32>,
    /// OP, `[B]`.
    pub max_length: Vec<f32>,
    /// PCTSP, `[B]`.
    pub required_prize: Vec<f32>,
}

impl InstanceBatch {
    /// An instance batch with only coordinates filled in.
    pub fn from_locs(env: EnvId, batch: usize, nodes: usize, locs: Vec<f32>) -> Self {
        assert_eq!(locs.len(), batch * nodes * 2, "locs must be [B, N, 2]");
        InstanceBatch {
            env,
            batch,
            nodes,
            locs,
            demand: Vec::new(),
            prize: Vec::new(),
            penalty: Vec::new(),
            max_length: Vec::new(),
            required_prize: Vec::new(),
        }
    }

    /// Nodes the tour must (or may) visit, excluding the depot.
    pub fn customers(&self) -> usize {
        if self.env.has_depot() {
            self.nodes - 1
        } else {
            self.nodes
        }
    }

    /// PDP pickup/delivery pairs: pickup `i` pairs with delivery `i + pairs`.
    pub fn num_pairs(&self) -> usize {
        if self.env == EnvId::Pdp {
            (self.nodes - 1) / 2
        } else {
            0
        }
    }

    #[inline]
    pub fn loc(&self, b: usize, i: usize) -> [f32; 2] {
        let k = (b * self.nodes + i) * 2;
        [self.locs[k], self.locs[k + 1]]
    }

    #[inline]
    pub fn dist(&self, b: usize, i: usize, j: usize) -> f32 {
        let (p, q) = (self.loc(b, i), self.loc(b, j));
        let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
        (dx * dx + dy * dy).sqrt()
    }

    pub fn demand_at(&self, b: usize, i: usize) -> f32 {
        self.demand[b * self.nodes + i]
    }

    pub fn prize_at(&self, b: usize, i: usize) -> f32 {
        self.prize[b * self.nodes + i]
    }

    pub fn penalty_at(&self, b: usize, i: usize) -> f32 {
        self.penalty[b * self.nodes + i]
    }

    /// Named per-node arrays `[B, N]` present for this environment.
    pub fn node_arrays(&self) -> Vec<(&'static str, &[f32])> {
        [("demand", &self.demand), ("prize", &self.prize), ("penalty", &self.penalty)]
            .into_iter()
            .filter(|(_, a)| !a.is_empty())
            .map(|(n, a)| (n, a.as_slice()))
            .collect()
    }

    /// Named per-instance scalars `[B]` present for this environment.
    pub fn scalar_arrays(&self) -> Vec<(&'static str, &[f32])> {
        [("max_length", &self.max_length), ("required_prize", &self.required_prize)]
            .into_iter()
            .filter(|(_, a)| !a.is_empty())
            .map(|(n, a)| (n, a.as_slice()))
            .collect()
    }

    /// Rows in the given order; indices may repeat.
    pub fn select(&self, rows: &[usize]) -> InstanceBatch {
        let pick = |arr: &Vec<f32>, width: usize| -> Vec<f32> {
            if arr.is_empty() {
                return Vec::new();
            }
            rows.iter().flat_map(|&r| arr[r * width..(r + 1) * width].iter().copied()).collect()
        };
        InstanceBatch {
            env: self.env,
            batch: rows.len(),
            nodes: self.nodes,
            locs: pick(&self.locs, self.nodes * 2),
            demand: pick(&self.demand, self.nodes),
            prize: pick(&self.prize, self.nodes),
            penalty: pick(&self.penalty, self.nodes),
            max_length: pick(&self.max_length, 1),
            required_prize: pick(&self.required_prize, 1),
        }
    }

    /// Each instance repeated `k` times consecutively (instance-major groups).
    pub fn repeat_each(&self, k: usize) -> InstanceBatch {
        let rows: Vec<usize> = (0..self.batch).flat_map(|b| std::iter::repeat_n(b, k)).collect();
        self.select(&rows)
    }

    /// Concatenates batches of the same environment and size.
    pub fn concat(parts: &[InstanceBatch]) -> InstanceBatch {
        let first = parts.first().expect("concat of zero batches");
        let mut out = first.clone();
        for p in &parts[1..] {
            assert_eq!((p.env, p.nodes), (first.env, first.nodes), "concat of mismatched batches");
            out.batch += p.batch;
            out.locs.extend_from_slice(&p.locs);
            out.demand.extend_from_slice(&p.demand);
            out.prize.extend_from_slice(&p.prize);
            out.penalty.extend_from_slice(&p.penalty);
            out.max_length.extend_from_slice(&p.max_length);
            out.required_prize.extend_from_slice(&p.required_prize);
        }
        out
    }

    /// Checks array shapes and value ranges required by the environment.
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidInstance(m));
        let (b, n) = (self.batch, self.nodes);
        if self.locs.len() != b * n * 2 {
            return bad(format!("locs has {} values, expected {}", self.locs.len(), b * n * 2));
        }
        let need = |name: &str, arr: &[f32], len: usize| -> Result<(), EnvError> {
            if arr.len() != len {
                return Err(EnvError::InvalidInstance(format!("{name} has {} values, expected {len}", arr.len())));
            }
            Ok(())
        };
        match self.env {
            EnvId::Tsp => {}
            EnvId::Cvrp => {
                need("demand", &self.demand, b * n)?;
                for r in 0..b {
                    if self.demand_at(r, 0) != 0.0 {
                        return bad(format!("row {r}: depot demand must be 0"));
                    }
                    if (1..n).any(|i| !(self.demand_at(r, i) > 0.0 && self.demand_at(r, i) <= 1.0)) {
                        return bad(format!("row {r}: demands must lie in (0, 1]"));
                    }
                }
            }
            EnvId::Op => {
                need("prize", &self.prize, b * n)?;
                need("max_length", &self.max_length, b)?;
                if self.max_length.iter().any(|&l| !(l > 0.0)) {
                    return bad("max_length must be positive".into());
                }
            }
            EnvId::Pctsp => {
                need("prize", &self.prize, b * n)?;
                need("penalty", &self.penalty, b * n)?;
                need("required_prize", &self.required_prize, b)?;
                if self.required_prize.iter().any(|&p| !(p > 0.0)) {
                    return bad("required_prize must be positive".into());
                }
                if self.penalty.iter().any(|&p| p < 0.0) {
                    return bad("penalties must be non-negative".into());
                }
            }
            EnvId::Pdp => {
                if n < 3 || (n - 1) % 2 != 0 {
                    return bad(format!("PDP needs an even number of customers, got {}", n.saturating_sub(1)));
                }
            }
        }
        Ok(())
    }
}

/// Size-dependent constants; `None` picks the entry of the nearest tabulated size.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerateOptions {
    pub capacity: Option<f32>,
    pub max_length: Option<f32>,
    pub pctsp_length: Option<f32>,
}

fn nearest(table: &[(usize, f32)], n: usize) -> f32 {
    // ties resolve to the smaller size
    table.iter().min_by_key(|(size, _)| (size.abs_diff(n), *size)).map(|&(_, v)| v).unwrap()
}

const CVRP_CAPACITY: [(usize, f32); 3] = [(20, 30.0), (50, 40.0), (100, 50.0)];
const OP_MAX_LENGTH: [(usize, f32); 3] = [(20, 2.0), (50, 3.0), (100, 4.0)];
const PCTSP_LENGTH: [(usize, f32); 3] = [(20, 2.0), (50, 3.0), (100, 4.0)];

/// Vehicle capacity used to normalize CVRP demands at size `n`.
pub fn cvrp_capacity(n: usize) -> f32 {
    nearest(&CVRP_CAPACITY, n)
}

/// OP tour length budget at size `n`.
pub fn op_max_length(n: usize) -> f32 {
    nearest(&OP_MAX_LENGTH, n)
}

/// Random instances. `n` counts customers for depot problems and nodes for
/// TSP. Instance `i` depends only on `(env, n, seed, i)`, so a larger batch
/// extends a smaller one.
pub fn generate(
    env: EnvId,
    n: usize,
    count: usize,
    seed: u64,
    opts: &GenerateOptions,
) -> Result<InstanceBatch, EnvError> {
    if n < 2 {
        return Err(EnvError::UnsupportedSize { env, n, reason: "need at least 2 nodes".into() });
    }
    if env == EnvId::Pdp && !n.is_multiple_of(2) {
        return Err(EnvError::UnsupportedSize { env, n, reason: "PDP needs an even customer count".into() });
    }
    let nodes = env.total_nodes(n);
    let parts: Vec<InstanceBatch> =
        crate::par::map_range(count, |i| generate_one(env, n, nodes, rng::derive(seed, env.name(), i as u64), opts));
    if parts.is_empty() {
        return Ok(InstanceBatch::from_locs(env, 0, nodes, Vec::new()));
    }
    Ok(InstanceBatch::concat(&parts))
}

fn generate_one(env: EnvId, n: usize, nodes: usize, seed: u64, opts: &GenerateOptions) -> InstanceBatch {
    let mut r = rng::stream(seed, 0);
    let locs: Vec<f32> = (0..nodes * 2).map(|_| r.random::<f32>()).collect();
    let mut inst = InstanceBatch::from_locs(env, 1, nodes, locs);
    match env {
        EnvId::Tsp | EnvId::Pdp => {}
        EnvId::Cvrp => {
            let q = opts.capacity.unwrap_or_else(|| cvrp_capacity(n));
            inst.demand = std::iter::once(0.0).chain((0..n).map(|_| r.random_range(1..=10) as f32 / q)).collect();
        }
        EnvId::Op => {
            let d: Vec<f64> = (0..nodes).map(|i| inst.dist(0, 0, i) as f64).collect();
            let dmax = d[1..].iter().cloned().fold(0.0, f64::max);
            inst.prize = std::iter::once(0.0)
                .chain(d[1..].iter().map(|&di| {
                    let scaled = if dmax > 0.0 { (99.0 * di / dmax).floor() } else { 0.0 };
                    ((1.0 + scaled) / 100.0) as f32
                }))
                .collect();
            inst.max_length = vec![opts.max_length.unwrap_or_else(|| op_max_length(n))];
        }
        EnvId::Pctsp => {
            let len = opts.pctsp_length.unwrap_or_else(|| nearest(&PCTSP_LENGTH, n));
            loop {
                let prize: Vec<f32> = (0..n).map(|_| r.random::<f32>() * 4.0 / n as f32).collect();
                let penalty: Vec<f32> = (0..n).map(|_| r.random::<f32>() * 3.0 * len / n as f32).collect();
                if prize.iter().sum::<f32>() >= 1.0 {
                    inst.prize = std::iter::once(0.0).chain(prize).collect();
                    inst.penalty = std::iter::once(0.0).chain(penalty).collect();
                    break;
                }
            }
            inst.required_prize = vec![1.0];
        }
    }
    inst
}
