mod common;

use common::{rand_tensor, run_op_cases, REL_TOL};
use nco_core::tensor::gradcheck::{check, GradCheckOptions};
use nco_core::tensor::nn::{mha, MhaWeights};

#[test]
fn every_op_matches_finite_differences() {
    let results = run_op_cases(0..20);
    let failing: Vec<_> = results.iter().filter(|(_, e, _)| !(*e < REL_TOL)).collect();
    assert!(failing.is_empty(), "ops over tolerance: {failing:?}");
}

#[test]
fn mha_query_gradient_reference_config() {
    // B=2, Lq=3, Lk=4, d=8, heads=2; only q is perturbed
    for seed in 0..20 {
        let q = rand_tensor(&[2, 3, 8], seed, -1.0, 1.0);
        let kv = rand_tensor(&[2, 4, 8], seed + 100, -1.0, 1.0);
        let ws: Vec<_> = (0..4).map(|i| rand_tensor(&[8, 8], seed + 200 + i, -0.5, 0.5)).collect();
        let report = check(
            &[q],
            |tape, v| {
                let kv = tape.constant(kv.clone());
                let w: Vec<_> = ws.iter().map(|t| tape.constant(t.clone())).collect();
                let weights = MhaWeights { wq: &w[0], wk: &w[1], wv: &w[2], wo: &w[3] };
                mha(&v[0], &kv, &kv, &weights, 2, None).unwrap().sum()
            },
            &GradCheckOptions { seed, max_coords: 48, ..Default::default() },
        );
        assert_eq!(report.checked, 48);
        assert!(report.max_rel_err < REL_TOL, "seed {seed}: {}", report.max_rel_err);
    }
}

#[test]
fn checker_flags_a_wrong_gradient() {
    // the detach hides d/dx of the second factor, so analytic = x instead of 2x
    let x = rand_tensor(&[5], 3, 0.5, 1.5);
    let report = check(&[x], |_, v| v[0].mul(&v[0].detach()), &GradCheckOptions::default());
    assert!(report.max_rel_err > 0.4);
}
