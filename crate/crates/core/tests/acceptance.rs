//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! `cargo test -p nco-core --test acceptance -- <name>...` runs a subset.
//! The TSP20 training run is cached under the cargo target directory, keyed
//! by the configuration hash; set `NCO_ACCEPTANCE_RETRAIN=1` to start over.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::masks::{enumerate_by_checker, small_instances, walk_masks};
use common::policy_check::policy_logprob_check;
use nco_core::decode::{decode, gap, two_places, DecodeScheme};
use nco_core::env::tsplib::parse_tsplib;
use nco_core::env::{self, generate, transform, EnvId, GenerateOptions, InstanceBatch};
use nco_core::oracle::{brute_force, held_karp, solve_cached};
use nco_core::policy::{Normalization, ParamSet, Policy, PolicyConfig};
use nco_core::rl::{ppo_loss, reinforce_loss, shared_baseline, symmetric_baseline, PpoConfig};
use nco_core::rng;
use nco_core::search::{search, SearchConfig, SearchMethod};
use nco_core::tensor::{Tape, Tensor};
use nco_core::train::ncof::Ncof;
use nco_core::train::{
    dataset_to_ncof, fit, load_checkpoint, load_policy, read_dataset, resolve, save_checkpoint, write_dataset,
    CheckpointMeta, FitOptions, MetricsRow, TrainConfig,
};
use rand::Rng;

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

const fn minutes(m: u64) -> Duration {
    Duration::from_secs(m * 60)
}

const CRITERIA: &[Criterion] = &[
    Criterion { name: "gradients", limit: minutes(5), run: gradients },
    Criterion { name: "masks", limit: minutes(10), run: masks },
    Criterion { name: "oracle", limit: minutes(2), run: oracle },
    Criterion { name: "decoding", limit: minutes(10), run: decoding },
    Criterion { name: "isometry", limit: minutes(2), run: isometry },
    Criterion { name: "baselines", limit: minutes(5), run: baselines },
    Criterion { name: "training", limit: minutes(90), run: training },
    Criterion { name: "search", limit: minutes(30), run: search_criterion },
    Criterion { name: "persistence", limit: minutes(2), run: persistence },
    Criterion { name: "tsplib", limit: minutes(1), run: tsplib },
];

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.iter().any(|w| c.name.contains(w.as_str()))) {
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(c.run)) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        // training reports its own wall time when the run was cached
        let elapsed = TRAIN_SECONDS.with(|t| t.take()).map_or(start.elapsed(), Duration::from_secs_f64);
        let timing = format!("{:.1}s / {}s", elapsed.as_secs_f64(), c.limit.as_secs());
        let outcome = match outcome {
            Ok(d) if elapsed > c.limit => Err(format!("{d}; over the time limit")),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {:<12} {detail} ({timing})", c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:<12} {detail} ({timing})", c.name);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

thread_local! {
    static TRAIN_SECONDS: std::cell::Cell<Option<f64>> = const { std::cell::Cell::new(None) };
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gen(env: EnvId, n: usize, count: usize, seed: u64) -> InstanceBatch {
    generate(env, n, count, seed, &GenerateOptions::default()).unwrap()
}

fn gradients() -> Outcome {
    let ops = common::run_op_cases(0..20);
    let mut worst = 0.0f64;
    for (name, err, checked) in &ops {
        ensure(*checked > 0, || format!("{name}: nothing checked"))?;
        ensure(*err < common::REL_TOL, || format!("{name}: rel err {err:e}"))?;
        worst = worst.max(*err);
    }
    for seed in 0..20u64 {
        let env = EnvId::ALL[seed as usize % 5];
        let norm = if seed % 4 < 2 { Normalization::Batch } else { Normalization::Instance };
        let e = policy_logprob_check(env, norm, seed);
        ensure(e < common::REL_TOL, || format!("policy log-prob {env} seed {seed}: rel err {e:e}"))?;
        worst = worst.max(e);
    }
    Ok(format!("{} ops and policy log-prob over 20 seeds, worst rel err {worst:.1e}", ops.len()))
}

fn masks() -> Outcome {
    let mut trees = 0;
    for e in EnvId::ALL {
        for seed in 0..12 {
            let inst = small_instances(e, seed);
            let by_mask = walk_masks(&inst);
            ensure(!by_mask.is_empty(), || format!("{e} seed {seed}: no complete sequence"))?;
            if matches!(e, EnvId::Tsp | EnvId::Cvrp | EnvId::Pdp) {
                ensure(by_mask == enumerate_by_checker(&inst), || format!("{e} seed {seed}: action trees differ"))?;
            }
            trees += 1;
        }
        let inst = gen(e, 20, 10_000, 77);
        let actions = common::random_rollout(&inst, 3);
        let bad = env::check_feasible(&inst, &actions).iter().filter(|r| r.is_err()).count();
        ensure(bad == 0, || format!("{e}: {bad} infeasible random rollouts"))?;
    }
    Ok(format!("{trees} exhaustive trees at N<=6, 5 x 10000 random rollouts feasible"))
}

fn oracle() -> Outcome {
    let mut worst = 0.0f64;
    for k in 0..50u64 {
        let n = 4 + (k as usize % 6);
        let inst = gen(EnvId::Tsp, n, 1, 500 + k);
        let (hk, bf) = (held_karp(&inst, 0).unwrap(), brute_force(&inst, 0).unwrap());
        let d = (hk.value - bf.value).abs();
        ensure(d <= 1e-5, || format!("instance {k} (n={n}): {} vs {}", hk.value, bf.value))?;
        worst = worst.max(d as f64);
    }
    Ok(format!("50 TSP instances N<=9, max |HK - BF| {worst:.1e}"))
}

const DOMINANCE_NODES: usize = 10;

fn decoding() -> Outcome {
    for e in EnvId::ALL {
        let policy = Policy::new(PolicyConfig::am(e), 7).unwrap();
        let inst = gen(e, DOMINANCE_NODES, 256, 2024);
        let run = |s: DecodeScheme| decode(&policy, &inst, s, 9).unwrap();
        let reward = |s: DecodeScheme| run(s).best.reward;
        let greedy = reward(DecodeScheme::Greedy);
        let ms = reward(DecodeScheme::Multistart(None));
        let aug = reward(DecodeScheme::Augmentation(8));
        let both = reward(DecodeScheme::MultistartAugmentation(16));
        // lower cost is higher reward in every environment
        let violations = (0..inst.batch)
            .filter(|&b| !(ms[b] >= greedy[b] && aug[b] >= greedy[b] && both[b] >= ms[b] && both[b] >= aug[b]))
            .count();
        ensure(violations == 0, || format!("{e}: {violations} instance-wise violations"))?;
    }
    Ok(format!("256 instances per environment at N={DOMINANCE_NODES}, zero violations"))
}

fn isometry() -> Outcome {
    let mut worst = 0.0f32;
    for e in EnvId::ALL {
        let inst = gen(e, 20, 1000, 31);
        let actions = common::random_rollout(&inst, 4);
        let base = env::reward(&inst, &actions).unwrap();
        for copy in transform::dihedral8(&inst) {
            let r = env::reward(&copy, &actions).unwrap();
            for (a, b) in base.iter().zip(&r) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= 1e-5, || format!("max reward change {worst:e}"))?;
    Ok(format!("1000 instances x 5 envs x 8 maps, max reward change {worst:.1e}"))
}

fn baselines() -> Outcome {
    let mut r = rng::stream(5, 0);
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let group = r.random_range(1..=20usize);
        let groups = r.random_range(1..=16usize);
        let rewards: Vec<f32> = (0..group * groups).map(|_| -r.random_range(0.0f32..30.0)).collect();
        for b in [shared_baseline(&rewards, group).unwrap(), symmetric_baseline(&rewards, group).unwrap()] {
            for g in 0..groups {
                let mean: f64 =
                    (g * group..(g + 1) * group).map(|i| (rewards[i] - b[i]) as f64).sum::<f64>() / group as f64;
                worst = worst.max(mean.abs());
            }
        }
    }
    ensure(worst < 1e-5, || format!("group advantage mean {worst:e}"))?;

    let cfg = PpoConfig { entropy_coef: 0.0, ..Default::default() };
    let tape = Tape::<f64>::new();
    let zero = tape.constant(Tensor::zeros(vec![1]));
    for (ratio, adv, expected) in [(1.5f64, 1.0f32, 1.2), (0.5, -1.0, -0.8)] {
        let lp = tape.leaf(Tensor::new(vec![1], vec![ratio.ln()]));
        let got = ppo_loss(&lp, &[0.0], &[adv], &zero, &zero, &cfg).unwrap().surrogate.item();
        ensure(got == expected, || format!("ppo clip: ratio {ratio}, advantage {adv}: {got} != {expected}"))?;
    }

    let tape = Tape::<f64>::new();
    let lp = tape.leaf(Tensor::new(vec![2], vec![-1.0, -2.0]));
    let loss = reinforce_loss(&lp, &[-5.0, -3.0], &[-4.0, -4.0]).unwrap().item();
    ensure(loss == 0.5, || format!("reinforce example loss {loss}"))?;

    let (estimate, exact, se) = bandit_gradient(100_000);
    ensure((estimate - exact).abs() < 3.0 * se, || format!("bandit gradient {estimate} vs {exact} (se {se})"))?;
    Ok(format!(
        "advantage means {worst:.1e}, clip examples exact, bandit gradient {:.2} SE from closed form",
        (estimate - exact).abs() / se
    ))
}

/// REINFORCE gradient on a two-armed bandit with p(a=1) = sigmoid(theta),
/// returned with the closed form and the Monte Carlo standard error.
fn bandit_gradient(n: usize) -> (f64, f64, f64) {
    let (theta, r0, r1) = (0.4f64, -1.0f32, -0.25f32);
    let p1 = 1.0 / (1.0 + (-theta).exp());
    let exact = p1 * (1.0 - p1) * (r1 - r0) as f64;
    let mut r = rng::stream(11, 0);
    let actions: Vec<usize> = (0..n).map(|_| usize::from(r.random::<f64>() < p1)).collect();
    let reward: Vec<f32> = actions.iter().map(|&a| if a == 1 { r1 } else { r0 }).collect();
    let tape = Tape::<f64>::new();
    let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, theta]));
    let lp = logits.broadcast_to(&[n, 2]).masked_log_softmax(&vec![true; 2 * n], 1.0).unwrap().gather_last(&actions);
    let loss = reinforce_loss(&lp, &reward, &vec![0.0; n]).unwrap();
    let estimate = -tape.backward(&loss).unwrap().wrt(&logits).data()[1];
    let terms: Vec<f64> = actions.iter().zip(&reward).map(|(&a, &rw)| rw as f64 * (a as f64 - p1)).collect();
    let mean = terms.iter().sum::<f64>() / n as f64;
    let sd = (terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    (estimate, exact, sd / (n as f64).sqrt())
}

/// Attention model with rollout baseline on TSP20: 10 epochs of 10,000
/// instances in batches of 512.
const TSP20_RUN: &str = include_str!("../../../configs/tsp20.toml");

const TEST_SIZE: usize = 256;

fn scratch() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn tsp20_config() -> TrainConfig {
    resolve(&[("tsp20.toml".into(), TSP20_RUN.into())], &[]).unwrap()
}

/// Trains (or resumes) the cached TSP20 run and returns the final
/// checkpoint path with the summed per-epoch wall time.
fn tsp20_checkpoint() -> Result<(PathBuf, f64), String> {
    let cfg = tsp20_config();
    let dir = scratch().join(format!("tsp20_{}", &cfg.hash()[..12]));
    if std::env::var_os("NCO_ACCEPTANCE_RETRAIN").is_some_and(|v| v != "0") {
        let _ = std::fs::remove_dir_all(&dir);
    }
    let result = fit(&cfg, &FitOptions { run_dir: dir.clone(), resume: true, stop_after: None, verbose: true })
        .map_err(|e| format!("training failed: {e}"))?;
    let seconds = result.metrics.iter().map(|m| m.seconds).sum();
    Ok((dir.join(format!("checkpoints/epoch_{}.ncof", cfg.train.max_epochs)), seconds))
}

fn training() -> Outcome {
    let (ckpt, seconds) = tsp20_checkpoint()?;
    TRAIN_SECONDS.with(|t| t.set(Some(seconds)));
    let (policy, cfg) = load_policy(&ckpt).map_err(|e| e.to_string())?;
    let (inst, optima) =
        solve_cached(&scratch(), EnvId::Tsp, 20, TEST_SIZE, cfg.data.test_seed, &GenerateOptions::default())
            .map_err(|e| e.to_string())?;
    let costs = decode(&policy, &inst, DecodeScheme::Greedy, 0).map_err(|e| e.to_string())?.costs(EnvId::Tsp);
    let gaps: Vec<f64> =
        costs.iter().zip(&optima).map(|(&c, o)| gap(c as f64, o.value as f64, false).unwrap()).collect();
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let mean_cost = costs.iter().map(|&c| c as f64).sum::<f64>() / costs.len() as f64;
    let mean_opt = optima.iter().map(|o| o.value as f64).sum::<f64>() / optima.len() as f64;
    let detail = format!(
        "seed {}, greedy {mean_cost:.4} vs optimum {mean_opt:.4} on {TEST_SIZE} instances, mean gap {mean_gap:.2}% (limit 5.00%)",
        cfg.seed
    );
    ensure(mean_gap <= 5.0, || detail.clone())?;
    Ok(detail)
}

/// Fraction of the 32 TSP8 instances on which active search from the
/// TSP20 checkpoint must reach the optimum, fixed from a pilot run.
const AS_OPTIMUM_FRACTION: f64 = 0.9;

fn search_criterion() -> Outcome {
    let (ckpt, _) = tsp20_checkpoint()?;
    let (policy, _) = load_policy(&ckpt).map_err(|e| e.to_string())?;
    let (inst, optima) =
        solve_cached(&scratch(), EnvId::Tsp, 8, 32, 1234, &GenerateOptions::default()).map_err(|e| e.to_string())?;
    let before = policy.params.checksum();
    let mut detail = Vec::new();
    for method in [SearchMethod::ActiveSearch, SearchMethod::EasLay] {
        let cfg = SearchConfig::for_method(method);
        let out = search(method, &policy, &inst, &cfg).map_err(|e| e.to_string())?;
        ensure(out.trace.len() == cfg.iterations + 1, || format!("{method}: trace length {}", out.trace.len()))?;
        for (i, w) in out.trace.windows(2).enumerate() {
            let dropped = w[0].iter().zip(&w[1]).any(|(a, b)| b < a);
            ensure(!dropped, || format!("{method}: best-so-far cost rose at iteration {}", i + 1))?;
        }
        let costs = out.costs(EnvId::Tsp);
        let hits =
            costs.iter().zip(&optima).filter(|(&c, o)| (c as f64 - o.value as f64) <= 1e-5 * o.value as f64).count();
        if method == SearchMethod::ActiveSearch {
            let frac = hits as f64 / inst.batch as f64;
            ensure(frac >= AS_OPTIMUM_FRACTION, || {
                format!("AS reached the optimum on {hits}/32, threshold {AS_OPTIMUM_FRACTION}")
            })?;
        } else {
            ensure(policy.params.checksum() == before, || "EAS modified the frozen parameters".into())?;
        }
        detail.push(format!("{}: optimum on {hits}/32", method.label()));
    }
    Ok(format!("monotone over 200 iterations; {}; frozen parameters byte-identical", detail.join(", ")))
}

fn bits(p: &ParamSet) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    p.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().iter().map(|x| x.to_bits()).collect())).collect()
}

fn without_time(rows: &[MetricsRow]) -> Vec<(usize, u64, u64, u64, u64)> {
    rows.iter().map(|r| (r.epoch, r.step, r.train_reward.to_bits(), r.val_cost.to_bits(), r.lr.to_bits())).collect()
}

fn persistence() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = |name: &str| tmp.path().join(name);

    let policy = Policy::new(PolicyConfig::am(EnvId::Cvrp), 3).unwrap();
    let meta = CheckpointMeta {
        kind: "checkpoint".into(),
        config_hash: "acceptance".into(),
        epoch: 1,
        global_step: 2,
        extra: serde_json::json!({}),
    };
    save_checkpoint(&path("a.ncof"), &policy.params, Vec::new(), &meta).map_err(|e| e.to_string())?;
    let (loaded, _, _) = load_checkpoint(&path("a.ncof")).map_err(|e| e.to_string())?;
    ensure(bits(&loaded) == bits(&policy.params), || "checkpoint parameters changed".into())?;
    save_checkpoint(&path("b.ncof"), &loaded, Vec::new(), &meta).map_err(|e| e.to_string())?;
    let same = std::fs::read(path("a.ncof")).unwrap() == std::fs::read(path("b.ncof")).unwrap();
    ensure(same, || "checkpoint bytes differ after a second save".into())?;

    for e in EnvId::ALL {
        let inst = gen(e, 10, 20, 1234);
        write_dataset(&inst, &path("d.ncof")).map_err(|e| e.to_string())?;
        let back = read_dataset(&path("d.ncof")).map_err(|e| e.to_string())?;
        let exact = dataset_to_ncof(&back) == dataset_to_ncof(&inst)
            && back.locs.iter().zip(&inst.locs).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(exact, || format!("{e} dataset changed on round trip"))?;
        ensure(Ncof::read(&path("d.ncof")).is_ok(), || "dataset unreadable".into())?;
    }

    let cfg = resolve(
        &[("tiny.toml".into(), "[env]\nname = \"tsp\"\nnum_loc = 6\n".into())],
        &[
            "deterministic=true",
            "model.policy.encoder.embedding_dim=16",
            "model.policy.decoder.embedding_dim=16",
            "model.policy.encoder.num_heads=2",
            "model.policy.decoder.num_heads=2",
            "model.policy.encoder.num_layers=1",
            "model.policy.encoder.hidden_dim=32",
            "train.max_epochs=3",
            "train.epoch_size=64",
            "train.batch_size=16",
            "train.scheduler.step_size=[2]",
            "data.val_size=32",
        ]
        .map(String::from),
    )
    .map_err(|e| e.to_string())?;
    let run = |dir: &Path, resume: bool, stop: Option<usize>| {
        fit(&cfg, &FitOptions { run_dir: dir.to_path_buf(), resume, stop_after: stop, verbose: false })
    };
    let full = run(&path("full"), false, None).map_err(|e| e.to_string())?;
    run(&path("split"), false, Some(1)).map_err(|e| e.to_string())?;
    let resumed = run(&path("split"), true, None).map_err(|e| e.to_string())?;
    ensure(without_time(&full.metrics) == without_time(&resumed.metrics), || "resumed metrics differ".into())?;
    ensure(bits(&full.params) == bits(&resumed.params), || "resumed parameters differ".into())?;
    Ok("checkpoint and 5 dataset round trips bit-exact, resume after epoch 1 of 3 reproduces metrics".into())
}

fn tsplib() -> Outcome {
    let mut detail = Vec::new();
    for (text, name, nodes, bks) in [
        (include_str!("../data/eil51.tsp"), "eil51", 51, 426.0),
        (include_str!("../data/berlin52.tsp"), "berlin52", 52, 7542.0),
    ] {
        let p = parse_tsplib(text).map_err(|e| e.to_string())?;
        ensure(p.instance.nodes == nodes, || format!("{name}: {} nodes", p.instance.nodes))?;
        ensure(p.bks() == Some(bks), || format!("{name}: BKS {:?}", p.bks()))?;
        let g = two_places(gap(bks, bks, false).map_err(|e| e.to_string())?);
        ensure(g == "0.00", || format!("{name}: gap at the BKS prints {g}"))?;
        detail.push(format!("{name} {nodes}/{bks}"));
    }
    Ok(format!("{}, gap at BKS 0.00%", detail.join(", ")))
}
