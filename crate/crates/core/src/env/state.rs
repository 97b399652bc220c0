use super::{Array, EnvError, EnvId, InstanceBatch, KeyedBatch, FEAS_EPS};
use crate::tensor::Tensor;

/// Episode state of one batch row.
///
/// This is the single source of transition and mask rules; the batched
/// [`step`](super::step) and the brute-force oracle both go through it.
#[derive(Debug, Clone, PartialEq)]
pub struct RowState {
    /// Actions taken so far.
    pub i: usize,
    /// `None` only for TSP before the first action.
    pub current: Option<usize>,
    pub first: Option<usize>,
    pub visited: Vec<bool>,
    pub used_capacity: f32,
    pub tour_length: f32,
    pub collected_prize: f32,
    pub done: bool,
}

impl RowState {
    pub fn reset(inst: &InstanceBatch, _b: usize) -> RowState {
        RowState {
            i: 0,
            current: inst.env.has_depot().then_some(0),
            first: None,
            visited: vec![false; inst.nodes],
            used_capacity: 0.0,
            tour_length: 0.0,
            collected_prize: 0.0,
            done: false,
        }
    }

    fn customers_visited(&self, inst: &InstanceBatch) -> bool {
        let start = usize::from(inst.env.has_depot());
        self.visited[start..].iter().all(|&v| v)
    }

    /// Feasibility of every action; all false once done.
    pub fn mask(&self, inst: &InstanceBatch, b: usize, out: &mut [bool]) {
        let n = inst.nodes;
        debug_assert_eq!(out.len(), n);
        out.fill(false);
        if self.done {
            return;
        }
        match inst.env {
            EnvId::Tsp => {
                for j in 0..n {
                    out[j] = !self.visited[j];
                }
            }
            EnvId::Cvrp => {
                let cur = self.current.unwrap();
                for j in 1..n {
                    out[j] = !self.visited[j] && self.used_capacity + inst.demand_at(b, j) <= 1.0 + FEAS_EPS;
                }
                out[0] = cur != 0;
            }
            EnvId::Op => {
                let cur = self.current.unwrap();
                let budget = inst.max_length[b] + FEAS_EPS;
                let mut any = false;
                for j in 1..n {
                    out[j] = !self.visited[j] && self.tour_length + inst.dist(b, cur, j) + inst.dist(b, j, 0) <= budget;
                    any |= out[j];
                }
                out[0] = self.i >= 1 || !any;
            }
            EnvId::Pctsp => {
                for j in 1..n {
                    out[j] = !self.visited[j];
                }
                out[0] = self.i >= 1
                    && (self.collected_prize + FEAS_EPS >= inst.required_prize[b] || self.customers_visited(inst));
            }
            EnvId::Pdp => {
                let p = inst.num_pairs();
                for j in 1..=p {
                    out[j] = !self.visited[j];
                    out[j + p] = !self.visited[j + p] && self.visited[j];
                }
            }
        }
    }

    pub fn is_feasible(&self, inst: &InstanceBatch, b: usize, action: usize) -> bool {
        let mut m = vec![false; inst.nodes];
        self.mask(inst, b, &mut m);
        action < inst.nodes && m[action]
    }

    /// Advances by one action; `-1` is the no-op for finished rows.
    pub fn apply(&mut self, inst: &InstanceBatch, b: usize, action: i32) -> Result<(), EnvError> {
        if self.done {
            return if action == -1 { Ok(()) } else { Err(EnvError::StepOnDone { row: b }) };
        }
        if action < 0 || !self.is_feasible(inst, b, action as usize) {
            return Err(EnvError::InfeasibleAction { row: b, action });
        }
        let a = action as usize;
        if let Some(cur) = self.current {
            self.tour_length += inst.dist(b, cur, a);
        }
        if self.first.is_none() {
            self.first = Some(a);
        }
        match inst.env {
            EnvId::Tsp | EnvId::Pdp => {
                self.visited[a] = true;
                self.done = self.customers_visited(inst);
            }
            EnvId::Cvrp => {
                if a == 0 {
                    self.used_capacity = 0.0;
                    self.done = self.customers_visited(inst);
                } else {
                    self.used_capacity += inst.demand_at(b, a);
                    self.visited[a] = true;
                }
            }
            EnvId::Op | EnvId::Pctsp => {
                if a == 0 {
                    self.done = true;
                } else {
                    self.visited[a] = true;
                    self.collected_prize += inst.prize_at(b, a);
                }
            }
        }
        self.current = Some(a);
        self.i += 1;
        Ok(())
    }
}

fn opt_index(x: Option<usize>) -> i32 {
    x.map_or(-1, |v| v as i32)
}

pub(crate) fn to_keyed(inst: &InstanceBatch, rows: &[RowState]) -> KeyedBatch {
    let (bsz, n) = (rows.len(), inst.nodes);
    let mut kb = KeyedBatch::new(bsz);
    let mut mask = vec![false; bsz * n];
    for (b, r) in rows.iter().enumerate() {
        r.mask(inst, b, &mut mask[b * n..(b + 1) * n]);
    }
    let ints = |f: &dyn Fn(&RowState) -> i32| Array::I32(Tensor::new(vec![bsz], rows.iter().map(f).collect()));
    let floats = |f: &dyn Fn(&RowState) -> f32| Array::F32(Tensor::new(vec![bsz], rows.iter().map(f).collect()));
    kb.insert("action_mask", Array::Bool(Tensor::new(vec![bsz, n], mask)));
    kb.insert("done", Array::Bool(Tensor::new(vec![bsz], rows.iter().map(|r| r.done).collect())));
    kb.insert("i", ints(&|r| r.i as i32));
    kb.insert("current_node", ints(&|r| opt_index(r.current)));
    kb.insert("first_node", ints(&|r| opt_index(r.first)));
    kb.insert(
        "visited",
        Array::Bool(Tensor::new(vec![bsz, n], rows.iter().flat_map(|r| r.visited.iter().copied()).collect())),
    );
    kb.insert("tour_length", floats(&|r| r.tour_length));
    match inst.env {
        EnvId::Cvrp => kb.insert("used_capacity", floats(&|r| r.used_capacity)),
        EnvId::Op | EnvId::Pctsp => kb.insert("collected_prize", floats(&|r| r.collected_prize)),
        EnvId::Pdp => {
            let p = inst.num_pairs();
            let data = rows.iter().flat_map(|r| (1..=p).map(move |j| r.visited[j] && !r.visited[j + p])).collect();
            kb.insert("to_deliver", Array::Bool(Tensor::new(vec![bsz, p], data)));
        }
        EnvId::Tsp => {}
    }
    kb
}

pub(crate) fn from_keyed(inst: &InstanceBatch, kb: &KeyedBatch) -> Result<Vec<RowState>, EnvError> {
    let missing = |k: &str| EnvError::ShapeMismatch(format!("state lacks {k:?}"));
    let n = inst.nodes;
    let i = kb.i32("i").ok_or_else(|| missing("i"))?.data();
    let cur = kb.i32("current_node").ok_or_else(|| missing("current_node"))?.data();
    let first = kb.i32("first_node").ok_or_else(|| missing("first_node"))?.data();
    let done = kb.bool("done").ok_or_else(|| missing("done"))?.data();
    let visited = kb.bool("visited").ok_or_else(|| missing("visited"))?;
    if visited.shape() != [kb.batch(), n] {
        return Err(EnvError::ShapeMismatch(format!("visited {:?} for {n} nodes", visited.shape())));
    }
    let length = kb.f32("tour_length").ok_or_else(|| missing("tour_length"))?.data();
    let zeros = vec![0.0f32; kb.batch()];
    let used = kb.f32("used_capacity").map_or(&zeros[..], |t| t.data());
    let prize = kb.f32("collected_prize").map_or(&zeros[..], |t| t.data());
    let idx = |v: i32| (v >= 0).then_some(v as usize);
    Ok((0..kb.batch())
        .map(|b| RowState {
            i: i[b] as usize,
            current: idx(cur[b]),
            first: idx(first[b]),
            visited: visited.data()[b * n..(b + 1) * n].to_vec(),
            used_capacity: used[b],
            tour_length: length[b],
            collected_prize: prize[b],
            done: done[b],
        })
        .collect())
}
