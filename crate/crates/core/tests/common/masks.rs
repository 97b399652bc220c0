use std::collections::BTreeSet;

use nco_core::env::{self, check_prefix, check_row, generate, EnvId, GenerateOptions, InstanceBatch, ViolationKind};

/// Instances covering tight constraints as well as the generator defaults.
pub fn small_instances(e: EnvId, seed: u64) -> InstanceBatch {
    let n = match e {
        EnvId::Tsp => 6,
        EnvId::Pdp => 4,
        _ => 5,
    };
    let opts = match seed % 3 {
        0 => GenerateOptions::default(),
        1 => GenerateOptions { capacity: Some(14.0), max_length: Some(1.2), pctsp_length: None },
        _ => GenerateOptions { capacity: Some(11.0), max_length: Some(0.6), pctsp_length: None },
    };
    generate(e, n, 1, seed, &opts).unwrap()
}

/// Walks the whole masked action tree; at every node compares each action's
/// mask bit with the independent prefix check. Returns the complete sequences.
pub fn walk_masks(inst: &InstanceBatch) -> BTreeSet<Vec<i32>> {
    fn rec(inst: &InstanceBatch, state: &env::KeyedBatch, prefix: &mut Vec<i32>, out: &mut BTreeSet<Vec<i32>>) {
        let mask = state.action_mask().data().to_vec();
        if state.all_done() {
            assert!(mask.iter().all(|&m| !m));
            assert!(check_row(inst, 0, prefix).is_ok(), "{prefix:?}");
            out.insert(prefix.clone());
            return;
        }
        assert!(mask.iter().any(|&m| m), "dead end at {prefix:?}");
        assert_eq!(check_row(inst, 0, prefix).unwrap_err().kind, ViolationKind::Incomplete);
        for a in 0..inst.nodes as i32 {
            prefix.push(a);
            let accepted = check_prefix(inst, 0, prefix).is_ok();
            assert_eq!(mask[a as usize], accepted, "{} prefix {prefix:?}", inst.env);
            if accepted {
                let next = env::step(inst, state, &[a]).unwrap();
                rec(inst, &next, prefix, out);
            } else {
                assert!(env::step(inst, state, &[a]).is_err());
            }
            prefix.pop();
        }
    }
    let mut out = BTreeSet::new();
    rec(inst, &env::reset(inst), &mut Vec::new(), &mut out);
    out
}

/// Complete sequences found from the constraint checker alone.
pub fn enumerate_by_checker(inst: &InstanceBatch) -> BTreeSet<Vec<i32>> {
    fn rec(inst: &InstanceBatch, prefix: &mut Vec<i32>, out: &mut BTreeSet<Vec<i32>>) {
        if check_row(inst, 0, prefix).is_ok() {
            out.insert(prefix.clone());
        }
        for a in 0..inst.nodes as i32 {
            prefix.push(a);
            if check_prefix(inst, 0, prefix).is_ok() {
                rec(inst, prefix, out);
            }
            prefix.pop();
        }
    }
    let mut out = BTreeSet::new();
    rec(inst, &mut Vec::new(), &mut out);
    out
}
