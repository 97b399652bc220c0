//! Coordinate isometries used for augmentation.
//!
//! Node attributes (demands, prizes, penalties) stay attached to their
//! nodes, so every objective is invariant under these maps.

use rand::Rng;

use super::InstanceBatch;
use crate::rng;

/// One of the 8 symmetries of the unit square: bit 0 flips x, bit 1 flips
/// y, bit 2 swaps the axes (applied last). Index 0 is the identity.
pub fn dihedral_point(k: usize, [x, y]: [f32; 2]) -> [f32; 2] {
    assert!(k < 8, "dihedral index {k}");
    let x = if k & 1 != 0 { 1.0 - x } else { x };
    let y = if k & 2 != 0 { 1.0 - y } else { y };
    if k & 4 != 0 {
        [y, x]
    } else {
        [x, y]
    }
}

pub fn dihedral(inst: &InstanceBatch, k: usize) -> InstanceBatch {
    map_locs(inst, |_, p| dihedral_point(k, p))
}

/// The 8 dihedral copies, identity first.
pub fn dihedral8(inst: &InstanceBatch) -> Vec<InstanceBatch> {
    (0..8).map(|k| dihedral(inst, k)).collect()
}

/// Rotation by `theta` about the square's centre, optionally preceded by the
/// reflection x → 1 − x. Results may leave the unit square.
pub fn rotate_reflect(inst: &InstanceBatch, theta: f32, reflect: bool) -> InstanceBatch {
    let (s, c) = theta.sin_cos();
    map_locs(inst, |_, [x, y]| {
        let x = if reflect { 1.0 - x } else { x };
        let (dx, dy) = (x - 0.5, y - 0.5);
        [0.5 + c * dx - s * dy, 0.5 + s * dx + c * dy]
    })
}

/// `count` augmented copies: the dihedral group first (identity included),
/// then seeded random rotation+reflection maps.
pub fn augmentations(inst: &InstanceBatch, count: usize, seed: u64) -> Vec<InstanceBatch> {
    let mut r = rng::stream(seed, 0x6175_6776);
    (0..count)
        .map(|k| {
            if k < 8 {
                dihedral(inst, k)
            } else {
                let theta = r.random_range(0.0..std::f32::consts::TAU);
                let reflect = r.random_bool(0.5);
                rotate_reflect(inst, theta, reflect)
            }
        })
        .collect()
}

fn map_locs(inst: &InstanceBatch, f: impl Fn(usize, [f32; 2]) -> [f32; 2]) -> InstanceBatch {
    let mut out = inst.clone();
    for (i, p) in out.locs.chunks_mut(2).enumerate() {
        let q = f(i, [p[0], p[1]]);
        p[0] = q[0];
        p[1] = q[1];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_structure() {
        assert_eq!(dihedral_point(1, [0.2, 0.3]), [0.8, 0.3]);
        let p = [0.25, 0.625];
        let images: std::collections::HashSet<_> = (0..8).map(|k| dihedral_point(k, p).map(f32::to_bits)).collect();
        assert_eq!(images.len(), 8);
        // involutions: flips, their product, and the swaps composed with a
        // matching pair of flips
        for k in [1, 2, 3, 4, 7] {
            assert_eq!(dihedral_point(k, dihedral_point(k, p)), p, "k={k}");
        }
    }
}
