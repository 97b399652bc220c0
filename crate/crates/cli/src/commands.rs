use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use nco_core::decode::{decode, two_places, write_csv, DecodeScheme, EvalReport};
use nco_core::env::tsplib::{parse_cvrplib, parse_tsplib, ParsedInstance};
use nco_core::env::{generate as generate_instances, pad_actions, reward, EnvId, GenerateOptions, InstanceBatch};
use nco_core::oracle::{solve_batch, Solver};
use nco_core::search::{search as run_search, SearchConfig, SearchMethod};
use nco_core::train::{fit, load_config, load_policy, read_dataset, write_dataset, FitOptions};

use crate::{EvalArgs, GenerateArgs, OracleArgs, SearchArgs, TrainArgs};

fn parse_env(name: &str) -> Result<EnvId> {
    name.parse::<EnvId>().map_err(anyhow::Error::from)
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let env = parse_env(&a.env)?;
    let opts = GenerateOptions { capacity: a.capacity, max_length: a.max_length, pctsp_length: None };
    let inst = generate_instances(env, a.n, a.count, a.seed, &opts)?;
    write_dataset(&inst, &a.out)?;
    println!("wrote {} {} instances with {} nodes to {}", inst.batch, env.name(), inst.nodes, a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let paths: Vec<&Path> = a.config.iter().map(|p| p.as_path()).collect();
    let cfg = load_config(&paths, &a.set)?;
    let opts = FitOptions { run_dir: a.run_dir.clone(), resume: a.resume, stop_after: a.stop_after, verbose: !a.quiet };
    let out = fit(&cfg, &opts)?;
    if let Some(last) = out.metrics.last() {
        println!(
            "epoch {}: val cost {:.4} ({} steps), run dir {}",
            last.epoch,
            last.val_cost,
            last.step,
            a.run_dir.display()
        );
    }
    Ok(())
}

/// A dataset file: NCOF, or one TSPLib / CVRPLib instance.
struct Dataset {
    inst: InstanceBatch,
    benchmark: Option<ParsedInstance>,
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if ext == "tsp" || ext == "vrp" {
        let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
        let parsed = if ext == "tsp" { parse_tsplib(&text)? } else { parse_cvrplib(&text)? };
        return Ok(Dataset { inst: parsed.instance.clone(), benchmark: Some(parsed) });
    }
    Ok(Dataset { inst: read_dataset(path)?, benchmark: None })
}

/// Length in file units with rounded Euclidean distances, as benchmark
/// tables report it.
fn benchmark_cost(parsed: &ParsedInstance, env: EnvId, actions: &[i32]) -> f64 {
    let visits: Vec<usize> = actions.iter().filter(|&&a| a >= 0).map(|&a| a as usize).collect();
    let (start, path): (usize, &[usize]) = match env {
        EnvId::Tsp => (visits[0], &visits[1..]),
        _ => (0, &visits[..]),
    };
    let mut prev = start;
    let mut total = 0.0;
    for &v in path {
        total += parsed.nint_distance(prev, v);
        prev = v;
    }
    total + parsed.nint_distance(prev, start)
}

struct OracleCsv {
    bks: Vec<f64>,
    actions: Vec<Vec<i32>>,
}

fn read_oracle_csv(path: &Path) -> Result<OracleCsv> {
    let mut r = csv::Reader::from_path(path).with_context(|| path.display().to_string())?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let bks_col = col("bks").with_context(|| format!("{}: no bks column", path.display()))?;
    let act_col = col("actions");
    let mut out = OracleCsv { bks: Vec::new(), actions: Vec::new() };
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let v: f64 =
            rec[bks_col].trim().parse().with_context(|| format!("{}: row {}: bad bks", path.display(), i + 1))?;
        out.bks.push(v);
        if let Some(c) = act_col {
            let seq = rec[c]
                .split_whitespace()
                .map(|t| t.parse::<i32>())
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("{}: row {}: bad actions", path.display(), i + 1))?;
            out.actions.push(seq);
        }
    }
    Ok(out)
}

fn reference(spec: Option<&str>, data: &Dataset) -> Result<Option<Vec<f64>>> {
    match spec {
        None => Ok(data.benchmark.as_ref().and_then(|b| b.bks()).map(|v| vec![v])),
        Some("oracle") => {
            let solved = solve_batch(&data.inst, Solver::for_env(data.inst.env))?;
            Ok(Some(solved.iter().map(|r| r.value as f64).collect()))
        }
        Some(path) => {
            let bks = read_oracle_csv(Path::new(path))?.bks;
            if bks.len() != data.inst.batch {
                bail!("{path}: {} reference values for {} instances", bks.len(), data.inst.batch);
            }
            Ok(Some(bks))
        }
    }
}

/// Costs per instance: file units for benchmark files, unit square otherwise.
fn costs_of(data: &Dataset, actions: &[Vec<i32>], unit: Vec<f32>) -> Vec<f32> {
    match &data.benchmark {
        Some(b) => actions.iter().map(|a| benchmark_cost(b, data.inst.env, a) as f32).collect(),
        None => unit,
    }
}

fn rows_of(traj: &nco_core::env::Trajectory) -> Vec<Vec<i32>> {
    (0..traj.batch()).map(|b| traj.row_actions(b).iter().copied().filter(|&a| a >= 0).collect()).collect()
}

fn emit(reports: &[EvalReport], out: Option<&Path>) -> Result<()> {
    let refs: Vec<&EvalReport> = reports.iter().collect();
    match out {
        Some(p) => write_csv(File::create(p).with_context(|| p.display().to_string())?, &refs, true)?,
        None => write_csv(io::stdout().lock(), &refs, true)?,
    }
    for r in reports {
        let label = r.rows.first().map(|x| x.scheme.as_str()).unwrap_or("-");
        let gap = r.mean_gap.map(|g| format!(", gap {}%", two_places(g))).unwrap_or_default();
        eprintln!("{label}: cost {:.4}{gap}, {} samples, {:.3}s", r.mean_cost, r.samples, r.seconds);
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let data = load_dataset(&a.dataset)?;
    let bks = reference(a.bks.as_deref(), &data)?;
    let env = data.inst.env;
    let mut reports = Vec::new();
    if let Some(path) = &a.solutions {
        let sol = read_oracle_csv(path)?;
        if sol.actions.len() != data.inst.batch {
            bail!("{}: {} solutions for {} instances", path.display(), sol.actions.len(), data.inst.batch);
        }
        let r = reward(&data.inst, &pad_actions(&sol.actions))?;
        let unit = r.iter().map(|&x| if env.maximize() { x } else { -x }).collect();
        let costs = costs_of(&data, &sol.actions, unit);
        reports.push(EvalReport::new("solutions", env, &costs, bks.as_deref(), 1, 0.0)?);
        return emit(&reports, a.out.as_deref());
    }
    let ckpt = a.checkpoint.as_ref().expect("clap requires a checkpoint");
    let (policy, _) = load_policy(ckpt)?;
    if policy.config.env != env {
        bail!("checkpoint was trained on {} but the dataset is {}", policy.config.env.name(), env.name());
    }
    for s in &a.scheme {
        let scheme: DecodeScheme = s.parse()?;
        let out = decode(&policy, &data.inst, scheme, a.seed)?;
        let costs = costs_of(&data, &rows_of(&out.best), out.costs(env));
        reports.push(EvalReport::new(&scheme.to_string(), env, &costs, bks.as_deref(), out.samples, out.seconds)?);
    }
    emit(&reports, a.out.as_deref())
}

pub fn search(a: SearchArgs) -> Result<()> {
    let method: SearchMethod = a.method.parse()?;
    let data = load_dataset(&a.dataset)?;
    let bks = reference(a.bks.as_deref(), &data)?;
    let env = data.inst.env;
    let (policy, _) = load_policy(&a.checkpoint)?;
    if policy.config.env != env {
        bail!("checkpoint was trained on {} but the dataset is {}", policy.config.env.name(), env.name());
    }
    let cfg = SearchConfig {
        iterations: a.iters,
        seed: a.seed,
        per_instance: a.per_instance,
        ..SearchConfig::for_method(method)
    };
    let zero = decode(&policy, &data.inst, DecodeScheme::Greedy, a.seed)?;
    let zero_costs = costs_of(&data, &rows_of(&zero.best), zero.costs(env));
    let out = run_search(method, &policy, &data.inst, &cfg)?;
    let costs = costs_of(&data, &rows_of(&out.best), out.costs(env));
    let samples = cfg.iterations * cfg.augments * cfg.samples_per_copy;
    let reports = vec![
        EvalReport::new("zero_shot", env, &zero_costs, bks.as_deref(), zero.samples, zero.seconds)?,
        EvalReport::new(method.label(), env, &costs, bks.as_deref(), samples, out.seconds)?,
    ];
    if let Some(path) = &a.trace {
        let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
        w.write_record(["iteration", "mean_best_cost"])?;
        for (i, c) in out.mean_cost_trace(env).iter().enumerate() {
            w.write_record([i.to_string(), format!("{c}")])?;
        }
        w.flush()?;
    }
    emit(&reports, a.out.as_deref())
}

pub fn oracle(a: OracleArgs) -> Result<()> {
    let env = parse_env(&a.env)?;
    let data = load_dataset(&a.dataset)?;
    if data.inst.env != env {
        bail!("dataset holds {} instances, not {}", data.inst.env.name(), env.name());
    }
    let solver = Solver::for_env(env);
    let solved = solve_batch(&data.inst, solver)?;
    let mut w = csv::Writer::from_path(&a.out).with_context(|| a.out.display().to_string())?;
    w.write_record(["instance_id", "bks", "actions"])?;
    for (i, r) in solved.iter().enumerate() {
        let value = match &data.benchmark {
            Some(b) => benchmark_cost(b, env, &r.actions),
            None => r.value as f64,
        };
        let seq: Vec<String> = r.actions.iter().map(|x| x.to_string()).collect();
        w.write_record([i.to_string(), format!("{value}"), seq.join(" ")])?;
    }
    w.flush()?;
    let mean = solved.iter().map(|r| r.value as f64).sum::<f64>() / solved.len().max(1) as f64;
    let mut err = io::stderr().lock();
    writeln!(err, "{}: {} instances, mean optimum {mean:.4}", solver.name(), solved.len())?;
    Ok(())
}
