use super::{OracleError, OracleResult};
use crate::env::{cost_row, EnvId, InstanceBatch, RowState};

/// Largest total node count (depot included) [`brute_force`] accepts.
pub fn brute_force_limit(env: EnvId) -> usize {
    match env {
        EnvId::Tsp | EnvId::Pdp | EnvId::Cvrp => 9,
        EnvId::Op | EnvId::Pctsp => 10,
    }
}

struct Search<'a> {
    inst: &'a InstanceBatch,
    b: usize,
    seq: Vec<i32>,
    best: Option<(f32, Vec<i32>)>,
    explored: u64,
    /// Route length only grows along a branch, and for these objectives it
    /// is the whole cost, so a branch already as long as the incumbent
    /// cannot win.
    prune: bool,
}

impl Search<'_> {
    fn better(&self, value: f32) -> bool {
        match &self.best {
            None => true,
            Some((b, _)) if self.inst.env.maximize() => value > *b,
            Some((b, _)) => value < *b,
        }
    }

    fn visit(&mut self, state: &RowState) {
        self.explored += 1;
        if state.done {
            let value = cost_row(self.inst, self.b, &self.seq);
            if self.better(value) {
                self.best = Some((value, self.seq.clone()));
            }
            return;
        }
        if self.prune {
            if let Some((b, _)) = &self.best {
                if state.tour_length >= *b {
                    return;
                }
            }
        }
        let mut mask = vec![false; self.inst.nodes];
        state.mask(self.inst, self.b, &mut mask);
        for (a, _) in mask.iter().enumerate().filter(|(_, &ok)| ok) {
            let mut next = state.clone();
            next.apply(self.inst, self.b, a as i32).expect("masked actions are feasible");
            self.seq.push(a as i32);
            self.visit(&next);
            self.seq.pop();
        }
    }
}

/// Best terminal objective over every masked action sequence of row `b`.
pub fn brute_force(inst: &InstanceBatch, b: usize) -> Result<OracleResult, OracleError> {
    let limit = brute_force_limit(inst.env);
    if inst.nodes > limit {
        return Err(OracleError::TooLarge { solver: "brute_force", env: inst.env, nodes: inst.nodes, limit });
    }
    let mut search = Search {
        inst,
        b,
        seq: Vec::new(),
        best: None,
        explored: 0,
        prune: matches!(inst.env, EnvId::Tsp | EnvId::Cvrp | EnvId::Pdp),
    };
    search.visit(&RowState::reset(inst, b));
    let (value, actions) = search.best.expect("every environment admits a complete solution");
    Ok(OracleResult { value, actions, explored: search.explored })
}
