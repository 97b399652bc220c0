#![allow(dead_code)]

pub mod masks;
pub mod policy_check;

use nco_core::rng;
use nco_core::tensor::gradcheck::{check, GradCheckOptions, GradCheckReport};
use nco_core::tensor::nn::{attention, mha, MhaWeights};
use nco_core::tensor::{Tape, Tensor, Var};
use rand::Rng;

pub const REL_TOL: f64 = 1e-4;

pub fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng::stream(seed, 99);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

/// Random extent in `[lo, hi]`.
fn ext(seed: u64, salt: u64, lo: usize, hi: usize) -> usize {
    let mut r = rng::stream(seed, 1000 + salt);
    r.random_range(lo..=hi)
}

fn rand_mask(len: usize, row: usize, seed: u64) -> Vec<bool> {
    let mut r = rng::stream(seed, 7);
    let mut m: Vec<bool> = (0..len).map(|_| r.random_bool(0.6)).collect();
    for chunk in m.chunks_mut(row) {
        let k = r.random_range(0..chunk.len());
        chunk[k] = true;
    }
    m
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions { seed, ..Default::default() }
}

type Case = (&'static str, fn(u64) -> GradCheckReport);

/// One finite-difference check per differentiable op; each entry runs with a
/// seed that also drives shapes and inputs.
pub fn op_cases() -> Vec<Case> {
    vec![
        ("add_broadcast", |s| {
            let (a, b) = (ext(s, 0, 1, 4), ext(s, 1, 1, 5));
            let x = rand_tensor(&[a, b], s, -2.0, 2.0);
            let y = rand_tensor(&[b], s + 1, -2.0, 2.0);
            check(&[x, y], |_, v| v[0].add(&v[1]), &opts(s))
        }),
        ("sub_broadcast", |s| {
            let (a, b) = (ext(s, 0, 1, 4), ext(s, 1, 1, 5));
            let x = rand_tensor(&[a, 1, b], s, -2.0, 2.0);
            let y = rand_tensor(&[3, b], s + 1, -2.0, 2.0);
            check(&[x, y], |_, v| v[0].sub(&v[1]), &opts(s))
        }),
        ("mul_broadcast", |s| {
            let (a, b) = (ext(s, 0, 1, 4), ext(s, 1, 1, 5));
            let x = rand_tensor(&[a, b], s, -2.0, 2.0);
            let y = rand_tensor(&[a, 1], s + 1, -2.0, 2.0);
            check(&[x, y], |_, v| v[0].mul(&v[1]), &opts(s))
        }),
        ("minimum", |s| {
            let n = ext(s, 0, 2, 12);
            let x = rand_tensor(&[n], s, -2.0, 2.0);
            let y = rand_tensor(&[n], s + 1, -2.0, 2.0);
            check(&[x, y], |_, v| v[0].minimum(&v[1]), &opts(s))
        }),
        ("exp", |s| check(&[rand_tensor(&[ext(s, 0, 1, 9)], s, -2.0, 2.0)], |_, v| v[0].exp(), &opts(s))),
        ("log", |s| check(&[rand_tensor(&[ext(s, 0, 1, 9)], s, 0.2, 3.0)], |_, v| v[0].log(), &opts(s))),
        ("tanh", |s| check(&[rand_tensor(&[ext(s, 0, 1, 9)], s, -3.0, 3.0)], |_, v| v[0].tanh(), &opts(s))),
        ("relu", |s| {
            // keep inputs away from the kink
            let x = rand_tensor(&[ext(s, 0, 1, 9)], s, 0.1, 2.0);
            let sign = rand_tensor(&[x.len()], s + 1, -1.0, 1.0);
            let x = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(sign.data()).map(|(a, b)| a * b.signum()).collect(),
            );
            check(&[x], |_, v| v[0].relu(), &opts(s))
        }),
        ("square_sqrt", |s| {
            check(&[rand_tensor(&[ext(s, 0, 1, 9)], s, 0.2, 3.0)], |_, v| v[0].sqrt().add(&v[0].square()), &opts(s))
        }),
        ("tanh_clip", |s| {
            check(&[rand_tensor(&[ext(s, 0, 1, 9)], s, -3.0, 3.0)], |_, v| v[0].tanh_clip(10.0), &opts(s))
        }),
        ("scale_add_scalar_neg", |s| {
            check(
                &[rand_tensor(&[ext(s, 0, 1, 9)], s, -3.0, 3.0)],
                |_, v| v[0].scale(1.7).add_scalar(0.3).neg(),
                &opts(s),
            )
        }),
        ("fill_where", |s| {
            let n = ext(s, 0, 2, 10);
            let cond = rand_mask(n, n, s);
            check(&[rand_tensor(&[n], s, -3.0, 3.0)], move |_, v| v[0].fill_where(&cond, 0.5), &opts(s))
        }),
        ("broadcast_to", |s| {
            let d = ext(s, 0, 1, 5);
            check(&[rand_tensor(&[1, d], s, -1.0, 1.0)], move |_, v| v[0].broadcast_to(&[3, 2, d]), &opts(s))
        }),
        ("sum_mean", |s| {
            let x = rand_tensor(&[ext(s, 0, 1, 4), ext(s, 1, 1, 4)], s, -1.0, 1.0);
            check(&[x], |_, v| v[0].sum().add(&v[0].mean().scale(3.0)), &opts(s))
        }),
        ("sum_axis_mean_axis", |s| {
            let x = rand_tensor(&[ext(s, 0, 1, 4), ext(s, 1, 1, 4), ext(s, 2, 1, 4)], s, -1.0, 1.0);
            check(&[x], |_, v| v[0].sum_axis(1).add(&v[0].mean_axis(1).scale(2.0)), &opts(s))
        }),
        ("reshape_permute", |s| {
            let (a, b, c) = (ext(s, 0, 1, 3), ext(s, 1, 1, 3), ext(s, 2, 1, 3));
            let x = rand_tensor(&[a, b, c], s, -1.0, 1.0);
            check(&[x], move |_, v| v[0].permute(&[2, 0, 1]).reshape(&[c * a, b]), &opts(s))
        }),
        ("concat", |s| {
            let (a, b) = (ext(s, 0, 1, 3), ext(s, 1, 1, 3));
            let x = rand_tensor(&[2, a], s, -1.0, 1.0);
            let y = rand_tensor(&[2, b], s + 1, -1.0, 1.0);
            check(&[x, y], |_, v| Var::concat(&[v[0].clone(), v[1].clone(), v[0].clone()], 1), &opts(s))
        }),
        ("index_select", |s| {
            let rows = ext(s, 0, 2, 5);
            let idx: Vec<usize> = (0..7).map(|i| (i * 3 + s as usize) % rows).collect();
            let x = rand_tensor(&[rows, 3], s, -1.0, 1.0);
            check(&[x], move |_, v| v[0].index_select(&idx), &opts(s))
        }),
        ("gather_nodes", |s| {
            let (b, n) = (ext(s, 0, 1, 3), ext(s, 1, 2, 5));
            let idx: Vec<usize> = (0..b).map(|i| (i + s as usize) % n).collect();
            let x = rand_tensor(&[b, n, 3], s, -1.0, 1.0);
            check(&[x], move |_, v| v[0].gather_nodes(&idx), &opts(s))
        }),
        ("gather_last", |s| {
            let (b, n) = (ext(s, 0, 1, 4), ext(s, 1, 2, 5));
            let idx: Vec<usize> = (0..b).map(|i| (2 * i + s as usize) % n).collect();
            let x = rand_tensor(&[b, n], s, -1.0, 1.0);
            check(&[x], move |_, v| v[0].gather_last(&idx), &opts(s))
        }),
        ("select_rows", |s| {
            let b = ext(s, 0, 2, 5);
            let cond = rand_mask(b, b, s);
            let x = rand_tensor(&[b, 3], s, -1.0, 1.0);
            let y = rand_tensor(&[b, 3], s + 1, -1.0, 1.0);
            check(&[x, y], move |_, v| v[0].select_rows(&cond, &v[1]), &opts(s))
        }),
        ("matmul_shared", |s| {
            let (m, k, n) = (ext(s, 0, 1, 4), ext(s, 1, 1, 4), ext(s, 2, 1, 4));
            let x = rand_tensor(&[2, m, k], s, -1.0, 1.0);
            let w = rand_tensor(&[k, n], s + 1, -1.0, 1.0);
            check(&[x, w], |_, v| v[0].matmul(&v[1]), &opts(s))
        }),
        ("matmul_batched_t", |s| {
            let (m, k, n) = (ext(s, 0, 1, 4), ext(s, 1, 1, 4), ext(s, 2, 1, 4));
            let x = rand_tensor(&[2, 2, m, k], s, -1.0, 1.0);
            let y = rand_tensor(&[2, 2, n, k], s + 1, -1.0, 1.0);
            let z = rand_tensor(&[2, 2, k, n], s + 2, -1.0, 1.0);
            check(&[x, y, z], |_, v| v[0].matmul_t(&v[1]).add(&v[0].matmul(&v[2])), &opts(s))
        }),
        ("linear", |s| {
            let (k, n) = (ext(s, 1, 1, 5), ext(s, 2, 1, 5));
            let x = rand_tensor(&[3, k], s, -1.0, 1.0);
            let w = rand_tensor(&[k, n], s + 1, -1.0, 1.0);
            let b = rand_tensor(&[n], s + 2, -1.0, 1.0);
            check(&[x, w, b], |_, v| v[0].linear(&v[1], Some(&v[2])), &opts(s))
        }),
        ("masked_softmax", |s| {
            let (b, a) = (ext(s, 0, 1, 4), ext(s, 1, 2, 6));
            let mask = rand_mask(b * a, a, s);
            let temp = 0.5 + (s % 3) as f64 * 0.5;
            let x = rand_tensor(&[b, a], s, -2.0, 2.0);
            check(&[x], move |_, v| v[0].masked_softmax(&mask, temp).unwrap(), &opts(s))
        }),
        ("masked_log_softmax", |s| {
            let (b, a) = (ext(s, 0, 1, 4), ext(s, 1, 2, 6));
            let mask = rand_mask(b * a, a, s);
            let infeasible: Vec<bool> = mask.iter().map(|m| !m).collect();
            let temp = 0.5 + (s % 3) as f64 * 0.5;
            let x = rand_tensor(&[b, a], s, -2.0, 2.0);
            check(
                &[x],
                move |_, v| v[0].masked_log_softmax(&mask, temp).unwrap().fill_where(&infeasible, 0.0),
                &opts(s),
            )
        }),
        ("batch_norm_train", |s| {
            let (b, n, d) = (ext(s, 0, 1, 3), ext(s, 1, 2, 4), ext(s, 2, 1, 4));
            let x = rand_tensor(&[b, n, d], s, -1.0, 1.0);
            let g = rand_tensor(&[d], s + 1, 0.5, 1.5);
            let be = rand_tensor(&[d], s + 2, -0.5, 0.5);
            check(&[x, g, be], |_, v| v[0].batch_norm(&v[1], &v[2], 1e-5, None).0, &opts(s))
        }),
        ("batch_norm_eval", |s| {
            let d = ext(s, 2, 1, 4);
            let x = rand_tensor(&[2, 3, d], s, -1.0, 1.0);
            let g = rand_tensor(&[d], s + 1, 0.5, 1.5);
            let be = rand_tensor(&[d], s + 2, -0.5, 0.5);
            let mean = rand_tensor(&[d], s + 3, -0.5, 0.5).into_data();
            let var = rand_tensor(&[d], s + 4, 0.5, 1.5).into_data();
            check(&[x, g, be], move |_, v| v[0].batch_norm(&v[1], &v[2], 1e-5, Some((&mean, &var))).0, &opts(s))
        }),
        ("instance_norm", |s| {
            let (b, n, d) = (ext(s, 0, 1, 3), ext(s, 1, 2, 4), ext(s, 2, 1, 4));
            let x = rand_tensor(&[b, n, d], s, -1.0, 1.0);
            let g = rand_tensor(&[d], s + 1, 0.5, 1.5);
            let be = rand_tensor(&[d], s + 2, -0.5, 0.5);
            check(&[x, g, be], |_, v| v[0].instance_norm(&v[1], &v[2], 1e-5), &opts(s))
        }),
        ("skip_connection", |s| {
            let x = rand_tensor(&[2, 3, 4], s, -1.0, 1.0);
            let w = rand_tensor(&[4, 4], s + 1, -1.0, 1.0);
            check(&[x, w], |_, v| v[0].add(&v[0].matmul(&v[1]).relu()), &opts(s))
        }),
        ("attention_masked", |s| {
            let (lq, lk) = (ext(s, 0, 1, 3), ext(s, 1, 1, 4));
            let q = rand_tensor(&[2, lq, 4], s, -1.0, 1.0);
            let k = rand_tensor(&[2, lk, 4], s + 1, -1.0, 1.0);
            let v = rand_tensor(&[2, lk, 4], s + 2, -1.0, 1.0);
            let mask = rand_mask(2 * lq * lk, lk, s);
            check(&[q, k, v], move |_, x| attention(&x[0], &x[1], &x[2], 2, Some(&mask)).unwrap(), &opts(s))
        }),
        ("mha", |s| {
            let q = rand_tensor(&[2, 3, 8], s, -1.0, 1.0);
            let kv = rand_tensor(&[2, 4, 8], s + 1, -1.0, 1.0);
            let ws: Vec<_> = (0..4).map(|i| rand_tensor(&[8, 8], s + 10 + i, -0.5, 0.5)).collect();
            let inputs = [vec![q, kv], ws].concat();
            check(
                &inputs,
                |_, v| {
                    let w = MhaWeights { wq: &v[2], wk: &v[3], wv: &v[4], wo: &v[5] };
                    mha(&v[0], &v[1], &v[1], &w, 2, None).unwrap()
                },
                &opts(s),
            )
        }),
    ]
}

/// Runs every op case for `seeds` and returns `(name, worst error, checked)`.
pub fn run_op_cases(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64, usize)> {
    op_cases()
        .into_iter()
        .map(|(name, case)| {
            let mut worst = 0.0f64;
            let mut checked = 0;
            for s in seeds.clone() {
                let r = case(s);
                worst = worst.max(r.max_rel_err);
                checked += r.checked;
            }
            (name, worst, checked)
        })
        .collect()
}

pub fn with_tape<R>(f: impl FnOnce(&Tape<f64>) -> R) -> R {
    let tape = Tape::new();
    f(&tape)
}

use nco_core::env::{self, InstanceBatch, KeyedBatch};

/// Uniformly random feasible actions until every row finishes; `[B, T]`.
pub fn random_rollout(inst: &InstanceBatch, seed: u64) -> Tensor<i32> {
    let mut r = rng::stream(seed, 5);
    let mut state = env::reset(inst);
    let mut rows: Vec<Vec<i32>> = vec![Vec::new(); inst.batch];
    while !state.all_done() {
        let actions = random_actions(&state, &mut r);
        for (b, &a) in actions.iter().enumerate() {
            if a >= 0 {
                rows[b].push(a);
            }
        }
        state = env::step(inst, &state, &actions).unwrap();
    }
    env::pad_actions(&rows)
}

pub fn random_actions(state: &KeyedBatch, r: &mut impl Rng) -> Vec<i32> {
    let mask = state.action_mask();
    let a = mask.shape()[1];
    (0..state.batch())
        .map(|b| {
            if state.done()[b] {
                return -1;
            }
            let feasible: Vec<usize> = (0..a).filter(|&j| mask.data()[b * a + j]).collect();
            feasible[r.random_range(0..feasible.len())] as i32
        })
        .collect()
}
