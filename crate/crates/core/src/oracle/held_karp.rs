use super::{OracleError, OracleResult};
use crate::env::{EnvId, InstanceBatch};

pub const HELD_KARP_MAX_NODES: usize = 20;

/// Minimum closed tour of TSP row `b` by bitmask dynamic programming,
/// accumulated in f64. The returned tour starts at node 0.
pub fn held_karp(inst: &InstanceBatch, b: usize) -> Result<OracleResult, OracleError> {
    if inst.env != EnvId::Tsp {
        return Err(OracleError::WrongEnv { solver: "held_karp", env: inst.env });
    }
    let n = inst.nodes;
    if n > HELD_KARP_MAX_NODES {
        return Err(OracleError::TooLarge { solver: "held_karp", env: inst.env, nodes: n, limit: HELD_KARP_MAX_NODES });
    }
    if n == 1 {
        return Ok(OracleResult { value: 0.0, actions: vec![0], explored: 1 });
    }
    let d = |i: usize, j: usize| {
        let (p, q) = (inst.loc(b, i), inst.loc(b, j));
        let (dx, dy) = (p[0] as f64 - q[0] as f64, p[1] as f64 - q[1] as f64);
        (dx * dx + dy * dy).sqrt()
    };
    // node 0 is fixed as the start; `m` ranges over subsets of 1..n, with
    // node j stored at bit j - 1
    let k = n - 1;
    let full = 1usize << k;
    let mut cost = vec![f64::INFINITY; full * k];
    let mut parent = vec![u8::MAX; full * k];
    for j in 0..k {
        cost[(1 << j) * k + j] = d(0, j + 1);
    }
    let mut explored = 0u64;
    for m in 1..full {
        for j in 0..k {
            if m & (1 << j) == 0 {
                continue;
            }
            let here = cost[m * k + j];
            if !here.is_finite() {
                continue;
            }
            explored += 1;
            let mut free = !m & (full - 1);
            while free != 0 {
                let next = free.trailing_zeros() as usize;
                free &= free - 1;
                let slot = (m | 1 << next) * k + next;
                let c = here + d(j + 1, next + 1);
                if c < cost[slot] {
                    cost[slot] = c;
                    parent[slot] = j as u8;
                }
            }
        }
    }
    let last = full - 1;
    let (mut j, best) = (0..k).map(|j| (j, cost[last * k + j] + d(j + 1, 0))).fold((0, f64::INFINITY), |acc, x| {
        if x.1 < acc.1 {
            x
        } else {
            acc
        }
    });
    let mut tour = Vec::with_capacity(n);
    let mut m = last;
    loop {
        tour.push(j as i32 + 1);
        let p = parent[m * k + j];
        m &= !(1 << j);
        if p == u8::MAX {
            break;
        }
        j = p as usize;
    }
    tour.push(0);
    tour.reverse();
    Ok(OracleResult { value: best as f32, actions: tour, explored })
}
