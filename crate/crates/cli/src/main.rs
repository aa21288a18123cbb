use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dact::bench::{
    bucket_report, normalize_instance, parse_benchmark, tsplib_model_size, BenchmarkInstance, DistanceConvention,
    InstanceRuns, ScaleRecord, CVRPLIB_DEPOTS,
};
use dact::cpe::{build_table, table_for_transfer, PositionalMethod};
use dact::diagnostics::dump_attention;
use dact::env::{initial_solution, InitMode, Instance, Operator, Problem};
use dact::inference::{improve_augmented, improve_many, ImproveConfig, RunReport};
use dact::model::Dact;
use dact::training::{train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "dact", version, about = "Learned 2-opt/insert/swap improvement heuristics for TSP and CVRP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate uniform random instances as JSON.
    Gen(GenArgs),
    /// Train a policy and critic with n-step PPO.
    Train(TrainArgs),
    /// Improve instances with a trained policy; writes one JSON line per run.
    Improve(ImproveArgs),
    /// Like improve, then prints a summary (mean cost, gap buckets).
    Eval(ImproveArgs),
    /// Write a positional encoding table as CSV.
    EncodeCpe(EncodeArgs),
    /// Write per-layer, per-head attention matrices as CSV.
    DumpAttn(DumpArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value = "tsp")]
    problem: Problem,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON training configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<Problem>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long = "T")]
    t_train: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_cl: bool,
    /// Start from an existing checkpoint.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Output directory for metrics.jsonl and checkpoints.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ImproveArgs {
    #[arg(long)]
    model: PathBuf,
    /// Model for TSPLIB instances of 99 cities or more.
    #[arg(long)]
    model_large: Option<PathBuf>,
    /// Instance JSON or TSPLIB/CVRPLIB files.
    #[arg(long, required = true, num_args = 1..)]
    instances: Vec<PathBuf>,
    #[arg(long = "T", default_value_t = 1000)]
    steps: usize,
    /// Restart threshold; 0 disables. Defaults to 250, or 10/20 for TSPLIB/CVRPLIB files.
    #[arg(long = "Tr")]
    restart: Option<usize>,
    #[arg(long, default_value_t = 1)]
    augments: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value = "greedy")]
    init: InitMode,
    #[arg(long)]
    depots: Option<usize>,
    #[arg(long)]
    operator: Option<Operator>,
    /// Report benchmark costs with exact rather than rounded edge lengths.
    #[arg(long)]
    exact_distances: bool,
    /// Override the optimum used for gaps (single benchmark file).
    #[arg(long)]
    optimum: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value = "cpe")]
    method: String,
    /// Length the encoding was trained at; reuses its frequencies when far from n.
    #[arg(long)]
    trained_n: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    instances: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value = "greedy")]
    init: InitMode,
    #[arg(long)]
    depots: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(std::env::args_os()) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Improve(a) => improve_cmd(a, false),
        Command::Eval(a) => improve_cmd(a, true),
        Command::EncodeCpe(a) => encode(a),
        Command::DumpAttn(a) => dump(a),
    }
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let instances = (0..a.count as u64)
        .map(|k| Instance::generate(a.n, a.problem, a.seed.wrapping_add(k)))
        .collect::<dact::Result<Vec<_>>>()?;
    write_out(a.out.as_deref(), &(serde_json::to_string(&instances)? + "\n"))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => {
            serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?
        }
        None => {
            let problem = a.problem.unwrap_or(Problem::Tsp);
            TrainConfig::for_problem(problem, a.n.unwrap_or(20))
        }
    };
    if a.config.is_some() && (a.problem.is_some_and(|p| p != cfg.problem) || a.n.is_some_and(|n| n != cfg.size)) {
        bail!("--problem/--n conflict with the configuration file");
    }
    if let Some(v) = a.epochs {
        cfg.ppo.epochs = v;
    }
    if let Some(v) = a.batches {
        cfg.ppo.batches = v;
    }
    if let Some(v) = a.batch_size {
        cfg.ppo.batch_size = v;
    }
    if let Some(v) = a.t_train {
        cfg.ppo.t_train = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.no_cl {
        cfg.cl.enabled = false;
    }
    let init = a.init_from.as_ref().map(Dact::load).transpose()?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let outcome = train(&cfg, Some(&a.out), init, |row| {
        println!("{}", serde_json::to_string(row).unwrap_or_default());
    })?;
    outcome.model.save(a.out.join("final.ckpt"))?;
    Ok(())
}

struct Loaded {
    name: String,
    instance: Instance,
    bench: Option<(BenchmarkInstance, ScaleRecord)>,
}

fn load_instances(paths: &[PathBuf], exact: bool, optimum: Option<f64>) -> Result<Vec<Loaded>> {
    let mut out = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            let value: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let list: Vec<Instance> =
                if value.is_array() { serde_json::from_value(value)? } else { vec![serde_json::from_value(value)?] };
            for (k, inst) in list.into_iter().enumerate() {
                inst.validate()?;
                out.push(Loaded { name: format!("{stem}#{k}"), instance: inst, bench: None });
            }
        } else {
            let mut b = parse_benchmark(&text).with_context(|| format!("parsing {}", path.display()))?;
            if exact {
                b.convention = DistanceConvention::Exact;
            }
            if optimum.is_some() {
                b.optimum = optimum;
            }
            let (instance, scale) = normalize_instance(&b)?;
            let name = if b.name.is_empty() { stem } else { b.name.clone() };
            out.push(Loaded { name, instance, bench: Some((b, scale)) });
        }
    }
    if optimum.is_some() && out.iter().filter(|l| l.bench.is_some()).count() != 1 {
        bail!("--optimum needs exactly one benchmark file");
    }
    Ok(out)
}

fn improve_cmd(a: ImproveArgs, summary: bool) -> Result<()> {
    let loaded = load_instances(&a.instances, a.exact_distances, a.optimum)?;
    if loaded.is_empty() {
        bail!("no instances given");
    }
    let small = Dact::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let large = a.model_large.as_ref().map(Dact::load).transpose()?;
    let pick = |l: &Loaded| -> &Dact {
        match (&l.bench, &large) {
            (Some((b, _)), Some(m)) if b.problem == Problem::Tsp && tsplib_model_size(b.size()) == 100 => m,
            _ => &small,
        }
    };
    let restart_for = |l: &Loaded| -> Option<usize> {
        let r = a.restart.unwrap_or(match &l.bench {
            Some((b, _)) if b.problem == Problem::Tsp => 10,
            Some(_) => 20,
            None => 250,
        });
        (r > 0).then_some(r)
    };
    let cfg_for = |l: &Loaded| ImproveConfig {
        steps: a.steps,
        restart: restart_for(l),
        operator: a.operator.unwrap_or(Operator::TwoOpt),
        init: a.init,
        depots: a.depots.or(match &l.bench {
            Some((b, _)) if b.problem == Problem::Cvrp => Some(CVRPLIB_DEPOTS),
            _ => None,
        }),
        ..Default::default()
    };
    for l in &loaded {
        if pick(l).config.problem != l.instance.problem {
            bail!("{}: model is for {:?}, instance is {:?}", l.name, pick(l).config.problem, l.instance.problem);
        }
    }

    // (instance index, run) -> report
    let mut reports: Vec<Vec<Option<RunReport>>> = vec![vec![None; a.runs]; loaded.len()];
    let seed_of = |k: usize, r: usize| a.seed.wrapping_add((r * loaded.len() + k) as u64);
    if a.augments > 1 {
        for (k, l) in loaded.iter().enumerate() {
            for r in 0..a.runs {
                reports[k][r] = Some(improve_augmented(pick(l), &l.instance, a.augments, seed_of(k, r), &cfg_for(l))?);
            }
        }
    } else {
        // batch instances sharing a model and configuration
        let mut groups: Vec<(usize, ImproveConfig, Vec<(usize, usize)>)> = Vec::new();
        for (k, l) in loaded.iter().enumerate() {
            let model_id = std::ptr::from_ref(pick(l)) as usize;
            let cfg = cfg_for(l);
            let jobs = (0..a.runs).map(|r| (k, r));
            match groups.iter_mut().find(|(m, c, _)| *m == model_id && *c == cfg) {
                Some(g) => g.2.extend(jobs),
                None => groups.push((model_id, cfg, jobs.collect())),
            }
        }
        for (_, cfg, jobs) in groups {
            let model = pick(&loaded[jobs[0].0]);
            let insts: Vec<Instance> = jobs.iter().map(|(k, _)| loaded[*k].instance.clone()).collect();
            let seeds: Vec<u64> = jobs.iter().map(|(k, r)| seed_of(*k, *r)).collect();
            for ((k, r), rep) in jobs.into_iter().zip(improve_many(model, &insts, &seeds, &cfg)?) {
                reports[k][r] = Some(rep);
            }
        }
    }

    let mut lines = String::new();
    let mut runs = Vec::new();
    let (mut total, mut total_init, mut count) = (0.0, 0.0, 0usize);
    for (k, l) in loaded.iter().enumerate() {
        let mut costs = Vec::new();
        for (r, rep) in reports[k].iter().enumerate() {
            let rep = rep.as_ref().expect("every run filled");
            let mut row = serde_json::json!({
                "name": l.name,
                "run": r,
                "seed": seed_of(k, r),
                "cost": rep.best_cost,
                "initial_cost": rep.initial_cost,
                "steps": rep.steps,
                "augments": rep.augments,
                "time_secs": rep.wall_time_secs,
                "tour": rep.best_solution.order(),
            });
            if let Some((b, scale)) = &l.bench {
                let raw = match b.convention {
                    DistanceConvention::Exact => scale.to_raw_cost(rep.best_cost),
                    DistanceConvention::Rounded => b.cost(&l.instance, &rep.best_solution),
                };
                row["raw_cost"] = raw.into();
                row["convention"] = serde_json::to_value(b.convention)?;
                if let Some(o) = b.optimum {
                    row["optimum"] = o.into();
                    row["gap"] = dact::bench::gap(raw, o)?.into();
                }
                costs.push(raw);
            }
            total += rep.best_cost;
            total_init += rep.initial_cost;
            count += 1;
            lines.push_str(&serde_json::to_string(&row)?);
            lines.push('\n');
        }
        if let Some((b, _)) = &l.bench {
            runs.push(InstanceRuns { name: l.name.clone(), size: b.size(), optimum: b.optimum, costs });
        }
    }
    write_out(a.out.as_deref(), &lines)?;
    if summary {
        let mut s = serde_json::json!({
            "instances": loaded.len(),
            "runs": count,
            "mean_cost": total / count as f64,
            "mean_initial_cost": total_init / count as f64,
        });
        if !runs.is_empty() {
            s["gaps"] = serde_json::to_value(bucket_report(&runs))?;
        }
        println!("{}", serde_json::to_string(&s)?);
    }
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let method: PositionalMethod = serde_json::from_value(serde_json::Value::String(a.method.to_ascii_lowercase()))
        .map_err(|_| anyhow::anyhow!("unknown method '{}' (expected cpe or abs)", a.method))?;
    let table = match a.trained_n {
        Some(old) => table_for_transfer(a.n, old, a.dim, method)?,
        None => build_table(a.n, a.dim, method, None)?,
    };
    write_out(a.out.as_deref(), &table.to_csv())
}

fn dump(a: DumpArgs) -> Result<()> {
    let model = Dact::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let loaded = load_instances(std::slice::from_ref(&a.instances), false, None)?;
    let Some(l) = loaded.get(a.index) else {
        bail!("index {} out of range ({} instances)", a.index, loaded.len());
    };
    let depots = match l.instance.problem {
        Problem::Tsp => 0,
        Problem::Cvrp => ImproveConfig { depots: a.depots, ..Default::default() }.depots_for(&l.instance),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let sol = initial_solution(&l.instance, a.init, depots, &mut rng)?;
    let files = dump_attention(&model, &l.instance, &sol, &a.out)?;
    println!("wrote {} files to {}", files.len(), a.out.display());
    Ok(())
}
