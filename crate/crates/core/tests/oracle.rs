use nco_core::decode::{decode, DecodeScheme};
use nco_core::env::{generate, pad_actions, reward, EnvId, GenerateOptions, InstanceBatch};
use nco_core::oracle::{
    brute_force, brute_force_limit, held_karp, solve_batch, solve_cached, OracleError, Solver, HELD_KARP_MAX_NODES,
};
use nco_core::policy::{Policy, PolicyConfig};
use nco_core::rng;
use rand::Rng;

fn tsp(points: &[[f32; 2]]) -> InstanceBatch {
    InstanceBatch::from_locs(EnvId::Tsp, 1, points.len(), points.iter().flatten().copied().collect())
}

/// Shortest closed tour by trying every order of nodes 1..n after node 0.
fn permutation_optimum(inst: &InstanceBatch, b: usize) -> f64 {
    fn go(inst: &InstanceBatch, b: usize, rest: &mut Vec<usize>, last: usize, acc: f64, best: &mut f64) {
        let d = |i: usize, j: usize| {
            let (p, q) = (inst.loc(b, i), inst.loc(b, j));
            ((p[0] as f64 - q[0] as f64).powi(2) + (p[1] as f64 - q[1] as f64).powi(2)).sqrt()
        };
        if rest.is_empty() {
            *best = best.min(acc + d(last, 0));
            return;
        }
        for i in 0..rest.len() {
            let next = rest.remove(i);
            go(inst, b, rest, next, acc + d(last, next), best);
            rest.insert(i, next);
        }
    }
    let mut best = f64::INFINITY;
    go(inst, b, &mut (1..inst.nodes).collect(), 0, 0.0, &mut best);
    best
}

fn env_reward(inst: &InstanceBatch, b: usize, actions: &[i32]) -> f32 {
    let one = inst.select(&[b]);
    reward(&one, &pad_actions(&[actions.to_vec()])).unwrap()[0]
}

#[test]
fn held_karp_small_examples() {
    let square = held_karp(&tsp(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]), 0).unwrap();
    assert!((square.value - 4.0).abs() < 1e-6);
    let mut sorted = square.actions.clone();
    sorted.sort();
    assert_eq!(sorted, vec![0, 1, 2, 3]);
    let tri = held_karp(&tsp(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), 0).unwrap();
    assert!((tri.value as f64 - (2.0 + 2f64.sqrt())).abs() < 1e-6);
    assert!((held_karp(&tsp(&[[0.5, 0.5]]), 0).unwrap().value).abs() < 1e-12);
    let two = held_karp(&tsp(&[[0.0, 0.0], [0.3, 0.4]]), 0).unwrap();
    assert!((two.value - 1.0).abs() < 1e-6);
}

#[test]
fn held_karp_matches_permutation_search() {
    for seed in 0..10 {
        let inst = generate(EnvId::Tsp, 9, 1, seed, &GenerateOptions::default()).unwrap();
        let hk = held_karp(&inst, 0).unwrap();
        let exact = permutation_optimum(&inst, 0);
        assert!((hk.value as f64 - exact).abs() <= 1e-5 * exact, "seed {seed}: {} vs {exact}", hk.value);
        assert!((env_reward(&inst, 0, &hk.actions) + hk.value).abs() <= 1e-5);
    }
}

#[test]
fn held_karp_agrees_with_brute_force_on_50_instances() {
    let mut r = rng::stream(2024, 0);
    for i in 0..50 {
        let n = r.random_range(3..=9);
        let inst = generate(EnvId::Tsp, n, 1, 500 + i, &GenerateOptions::default()).unwrap();
        let (hk, bf) = (held_karp(&inst, 0).unwrap(), brute_force(&inst, 0).unwrap());
        assert!((hk.value - bf.value).abs() <= 1e-5, "instance {i} (n = {n}): {} vs {}", hk.value, bf.value);
    }
}

#[test]
fn brute_force_value_is_the_env_reward_of_its_sequence() {
    for env in EnvId::ALL {
        let n = if env == EnvId::Tsp { 7 } else { 6 };
        let inst = generate(env, n, 6, 77, &GenerateOptions::default()).unwrap();
        for (b, res) in solve_batch(&inst, Solver::BruteForce).unwrap().iter().enumerate() {
            let r = env_reward(&inst, b, &res.actions);
            assert!((r - res.reward(env)).abs() <= 1e-5, "{env:?} row {b}: {r} vs {}", res.reward(env));
            assert!(res.explored > 0);
        }
    }
}

#[test]
fn pdp_single_pair_has_one_order() {
    let inst = generate(EnvId::Pdp, 2, 1, 3, &GenerateOptions::default()).unwrap();
    let res = brute_force(&inst, 0).unwrap();
    assert_eq!(res.actions, vec![1, 2]);
    let expected = inst.dist(0, 0, 1) + inst.dist(0, 1, 2) + inst.dist(0, 2, 0);
    assert!((res.value - expected).abs() < 1e-6);
}

#[test]
fn op_without_budget_returns_to_the_depot() {
    let mut inst = generate(EnvId::Op, 5, 1, 9, &GenerateOptions::default()).unwrap();
    inst.max_length[0] = 1e-4;
    let res = brute_force(&inst, 0).unwrap();
    assert_eq!(res.actions, vec![0]);
    assert_eq!(res.value, 0.0);
}

#[test]
fn size_limits() {
    let big = generate(EnvId::Tsp, HELD_KARP_MAX_NODES + 1, 1, 0, &GenerateOptions::default()).unwrap();
    assert!(matches!(held_karp(&big, 0), Err(OracleError::TooLarge { nodes: 21, limit: 20, .. })));
    let cvrp = generate(EnvId::Cvrp, 9, 1, 0, &GenerateOptions::default()).unwrap();
    assert!(matches!(brute_force(&cvrp, 0), Err(OracleError::TooLarge { .. })));
    assert!(matches!(held_karp(&cvrp, 0), Err(OracleError::WrongEnv { .. })));
    assert_eq!(brute_force_limit(EnvId::Op), 10);
    for (env, n) in [(EnvId::Tsp, 9), (EnvId::Cvrp, 8), (EnvId::Pdp, 8), (EnvId::Op, 9), (EnvId::Pctsp, 9)] {
        let inst = generate(env, n, 1, 1, &GenerateOptions::default()).unwrap();
        assert!(brute_force(&inst, 0).is_ok(), "{env:?}");
    }
}

#[test]
fn no_decoding_scheme_beats_the_optimum() {
    for env in EnvId::ALL {
        let inst = generate(env, 6, 16, 5, &GenerateOptions::default()).unwrap();
        let opt = solve_batch(&inst, Solver::BruteForce).unwrap();
        let policy = Policy::new(PolicyConfig::am(env), 1).unwrap();
        for scheme in [DecodeScheme::Greedy, DecodeScheme::Sampling(8), DecodeScheme::MultistartAugmentation(4)] {
            let out = decode(&policy, &inst, scheme, 3).unwrap();
            for (b, c) in out.costs(env).iter().enumerate() {
                if env.maximize() {
                    assert!(*c <= opt[b].value + 1e-5, "{env:?} {scheme}");
                } else {
                    assert!(*c >= opt[b].value - 1e-5, "{env:?} {scheme}");
                }
            }
        }
    }
}

#[test]
fn cached_results_are_reused() {
    let dir = tempfile::tempdir().unwrap();
    let (inst, first) = solve_cached(dir.path(), EnvId::Tsp, 8, 4, 1234, &GenerateOptions::default()).unwrap();
    let (again, second) = solve_cached(dir.path(), EnvId::Tsp, 8, 4, 1234, &GenerateOptions::default()).unwrap();
    assert_eq!(inst, again);
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.actions, b.actions);
    }
    assert_eq!(second[0].explored, 0, "second call reads the cache");
}
