//! Constraint checking written directly from the problem definitions.
//!
//! Deliberately independent of [`RowState`](super::RowState): the mask tests
//! compare the two. Float accumulations follow the same left-to-right order
//! as the environment so both sides see identical values at the boundary.

use std::fmt;

use super::{EnvId, InstanceBatch, FEAS_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    OutOfRange,
    Revisit,
    Capacity,
    Length,
    Prize,
    Precedence,
    Depot,
    AfterEnd,
    Padding,
    Incomplete,
}

impl ViolationKind {
    pub fn name(self) -> &'static str {
        match self {
            ViolationKind::OutOfRange => "out_of_range",
            ViolationKind::Revisit => "revisit",
            ViolationKind::Capacity => "capacity",
            ViolationKind::Length => "length",
            ViolationKind::Prize => "prize",
            ViolationKind::Precedence => "precedence",
            ViolationKind::Depot => "depot",
            ViolationKind::AfterEnd => "after_end",
            ViolationKind::Padding => "padding",
            ViolationKind::Incomplete => "incomplete",
        }
    }
}

/// The first violated constraint of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Position in the sequence (the length for `Incomplete`).
    pub step: usize,
    pub action: i32,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at step {} (action {})", self.kind.name(), self.step, self.action)
    }
}

/// Complete-solution check of one row; trailing `-1` padding is allowed.
pub fn check_row(inst: &InstanceBatch, b: usize, seq: &[i32]) -> Result<(), Violation> {
    check(inst, b, seq, true)
}

/// Like [`check_row`] but accepts sequences that have not finished yet.
pub fn check_prefix(inst: &InstanceBatch, b: usize, seq: &[i32]) -> Result<(), Violation> {
    check(inst, b, seq, false)
}

fn check(inst: &InstanceBatch, b: usize, seq: &[i32], complete: bool) -> Result<(), Violation> {
    let n = inst.nodes;
    let end = seq.iter().rposition(|&a| a != -1).map_or(0, |p| p + 1);
    let seq = &seq[..end];
    let fail = |kind, step, action| Err(Violation { kind, step, action });

    let env = inst.env;
    let pairs = inst.num_pairs();
    let mut seen = vec![false; n];
    let mut prev: Option<usize> = env.has_depot().then_some(0);
    let mut used = 0.0f32;
    let mut length = 0.0f32;
    let mut prize = 0.0f32;
    let mut ended = false;
    let customers_done = |seen: &[bool]| seen[usize::from(env.has_depot())..].iter().all(|&s| s);

    for (t, &action) in seq.iter().enumerate() {
        if ended {
            return fail(ViolationKind::AfterEnd, t, action);
        }
        if action == -1 {
            return fail(ViolationKind::Padding, t, action);
        }
        if action < 0 || action as usize >= n {
            return fail(ViolationKind::OutOfRange, t, action);
        }
        let a = action as usize;
        let is_depot = env.has_depot() && a == 0;
        if !is_depot && seen[a] {
            return fail(ViolationKind::Revisit, t, action);
        }
        match env {
            EnvId::Tsp => {}
            EnvId::Cvrp => {
                if is_depot {
                    if prev == Some(0) {
                        return fail(ViolationKind::Depot, t, action);
                    }
                } else if used + inst.demand_at(b, a) > 1.0 + FEAS_EPS {
                    return fail(ViolationKind::Capacity, t, action);
                }
            }
            EnvId::Op => {
                let budget = inst.max_length[b] + FEAS_EPS;
                if is_depot {
                    let stuck = (1..n).all(|j| 0.0 + inst.dist(b, 0, j) + inst.dist(b, j, 0) > budget);
                    if t == 0 && !stuck {
                        return fail(ViolationKind::Depot, t, action);
                    }
                } else if length + inst.dist(b, prev.unwrap(), a) + inst.dist(b, a, 0) > budget {
                    return fail(ViolationKind::Length, t, action);
                }
            }
            EnvId::Pctsp => {
                if is_depot {
                    if t == 0 {
                        return fail(ViolationKind::Depot, t, action);
                    }
                    if !(prize + FEAS_EPS >= inst.required_prize[b] || customers_done(&seen)) {
                        return fail(ViolationKind::Prize, t, action);
                    }
                }
            }
            EnvId::Pdp => {
                if is_depot {
                    return fail(ViolationKind::Depot, t, action);
                }
                if a > pairs && !seen[a - pairs] {
                    return fail(ViolationKind::Precedence, t, action);
                }
            }
        }

        if let Some(p) = prev {
            length += inst.dist(b, p, a);
        }
        if is_depot {
            used = 0.0;
        } else {
            seen[a] = true;
            match env {
                EnvId::Cvrp => used += inst.demand_at(b, a),
                EnvId::Op | EnvId::Pctsp => prize += inst.prize_at(b, a),
                _ => {}
            }
        }
        prev = Some(a);
        ended = match env {
            EnvId::Tsp | EnvId::Pdp => customers_done(&seen),
            EnvId::Cvrp => is_depot && customers_done(&seen),
            EnvId::Op | EnvId::Pctsp => is_depot,
        };
    }
    if complete && !ended {
        return fail(ViolationKind::Incomplete, seq.len(), -1);
    }
    Ok(())
}

/// Objective of a feasible row: tour cost (positive), or collected prize for OP.
pub fn cost_row(inst: &InstanceBatch, b: usize, seq: &[i32]) -> f32 {
    let visits: Vec<usize> = seq.iter().filter(|&&a| a >= 0).map(|&a| a as usize).collect();
    let route_length = |start: Option<usize>| -> f32 {
        let mut total = 0.0f32;
        let mut prev = start;
        for &a in &visits {
            if let Some(p) = prev {
                total += inst.dist(b, p, a);
            }
            prev = Some(a);
        }
        if let (Some(last), Some(home)) = (prev, start.or(visits.first().copied())) {
            total += inst.dist(b, last, home);
        }
        total
    };
    match inst.env {
        EnvId::Tsp => route_length(None),
        EnvId::Cvrp | EnvId::Pdp => route_length(Some(0)),
        EnvId::Op => visits.iter().filter(|&&a| a != 0).map(|&a| inst.prize_at(b, a)).sum(),
        EnvId::Pctsp => {
            let mut seen = vec![false; inst.nodes];
            for &a in &visits {
                seen[a] = true;
            }
            let unvisited: f32 = (1..inst.nodes).filter(|&j| !seen[j]).map(|j| inst.penalty_at(b, j)).sum();
            route_length(Some(0)) + unvisited
        }
    }
}
