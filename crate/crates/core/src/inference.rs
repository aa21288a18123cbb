//! Policy-driven improvement rollouts, batched in lockstep across instances.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cpe::PositionalTable;
use crate::env::{
    default_depots, greedy_route_count, initial_solution, is_feasible, tour_length, InitMode, Instance, Operator,
    Problem, Solution, State,
};
use crate::error::{invalid, Error, Result};
use crate::model::Dact;

/// Rows per forward pass when improving many instances.
pub const DEFAULT_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImproveConfig {
    pub steps: usize,
    /// Consecutive non-improving steps before resetting to the incumbent.
    pub restart: Option<usize>,
    pub operator: Operator,
    pub init: InitMode,
    /// Depot copies for CVRP; `None` picks the size default.
    pub depots: Option<usize>,
    pub chunk: usize,
}

impl Default for ImproveConfig {
    fn default() -> Self {
        ImproveConfig {
            steps: 1000,
            restart: Some(250),
            operator: Operator::TwoOpt,
            init: InitMode::Greedy,
            depots: None,
            chunk: DEFAULT_CHUNK,
        }
    }
}

impl ImproveConfig {
    pub fn depots_for(&self, instance: &Instance) -> usize {
        match instance.problem {
            Problem::Tsp => 0,
            Problem::Cvrp => {
                self.depots.unwrap_or_else(|| default_depots(instance.size())).max(greedy_route_count(instance))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub best_cost: f64,
    pub best_solution: Solution,
    pub initial_cost: f64,
    /// Incumbent cost after each step; entry 0 is the initial solution.
    pub trace: Vec<f64>,
    pub wall_time_secs: f64,
    pub steps: usize,
    pub augments: usize,
}

/// Worker count from `DACT_THREADS`, falling back to the machine's parallelism.
pub fn worker_count() -> usize {
    std::env::var("DACT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Samples and applies one action for every state. Returns the actions and
/// rewards in order.
#[allow(clippy::too_many_arguments)]
pub fn policy_step(
    model: &Dact,
    instances: &[&Instance],
    states: &mut [State],
    table: &PositionalTable,
    operator: Operator,
    restart: Option<usize>,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<((usize, usize), f64)>> {
    let items: Vec<(&Instance, &Solution)> =
        instances.iter().copied().zip(states.iter().map(|s| &s.solution)).collect();
    let input = model.batch_input(&items, table)?;
    let mut mask = Vec::with_capacity(input.batch * input.n * input.n);
    for (inst, st) in instances.iter().zip(states.iter()) {
        mask.extend(st.mask(inst, operator)?);
    }
    let (dists, _) = model.evaluate(&input, &mask, false)?;
    let mut out = Vec::with_capacity(states.len());
    for ((dist, st), (inst, rng)) in dists.iter().zip(states.iter_mut()).zip(instances.iter().zip(rngs.iter_mut())) {
        let (action, _) = dist.sample(rng)?;
        let r = st.step(inst, action, operator, restart)?;
        out.push((action, r));
    }
    Ok(out)
}

/// Runs `steps` sampled moves on pre-built states of equal node count and
/// fills in one trace per state.
pub fn rollout(
    model: &Dact,
    instances: &[&Instance],
    states: &mut [State],
    cfg: &ImproveConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Vec<f64>>> {
    let mut traces: Vec<Vec<f64>> = states.iter().map(|s| vec![s.best_cost]).collect();
    if states.is_empty() || cfg.steps == 0 {
        return Ok(traces);
    }
    let table = model.positional_table(states[0].node_count())?;
    for _ in 0..cfg.steps {
        policy_step(model, instances, states, &table, cfg.operator, cfg.restart, rngs)?;
        for (t, s) in traces.iter_mut().zip(states.iter()) {
            t.push(s.best_cost);
        }
    }
    Ok(traces)
}

fn improve_chunk(model: &Dact, instances: &[&Instance], seeds: &[u64], cfg: &ImproveConfig) -> Result<Vec<RunReport>> {
    let start = Instant::now();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|s| ChaCha8Rng::seed_from_u64(*s)).collect();
    let mut states = Vec::with_capacity(instances.len());
    for (inst, rng) in instances.iter().zip(rngs.iter_mut()) {
        let depots = cfg.depots_for(inst);
        let sol = initial_solution(inst, cfg.init, depots, rng)?;
        states.push(State::new(inst, sol, depots)?);
    }
    let initial: Vec<f64> = states.iter().map(|s| s.cost).collect();
    let traces = rollout(model, instances, &mut states, cfg, &mut rngs)?;
    let secs = start.elapsed().as_secs_f64() / instances.len().max(1) as f64;
    let mut reports = Vec::with_capacity(states.len());
    for ((st, trace), (inst, init)) in states.into_iter().zip(traces).zip(instances.iter().zip(initial)) {
        if !is_feasible(inst, &st.best, cfg.depots_for(inst)) {
            return Err(Error::Infeasible("reported solution violates a constraint".into()));
        }
        reports.push(RunReport {
            best_cost: st.best_cost,
            best_solution: st.best,
            initial_cost: init,
            trace,
            wall_time_secs: secs,
            steps: cfg.steps,
            augments: 1,
        });
    }
    Ok(reports)
}

/// Improves each instance with its own seed. Instances are grouped by node
/// count, chunked, and the chunks spread over `DACT_THREADS` workers.
pub fn improve_many(
    model: &Dact,
    instances: &[Instance],
    seeds: &[u64],
    cfg: &ImproveConfig,
) -> Result<Vec<RunReport>> {
    if seeds.len() != instances.len() {
        return invalid(format!("{} seeds for {} instances", seeds.len(), instances.len()));
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (k, inst) in instances.iter().enumerate() {
        groups.entry(inst.node_count(cfg.depots_for(inst))).or_default().push(k);
    }
    let chunk = cfg.chunk.max(1);
    let jobs: Vec<Vec<usize>> =
        groups.into_values().flat_map(|idx| idx.chunks(chunk).map(<[usize]>::to_vec).collect::<Vec<_>>()).collect();
    let run = |job: &Vec<usize>| -> Result<Vec<(usize, RunReport)>> {
        let insts: Vec<&Instance> = job.iter().map(|k| &instances[*k]).collect();
        let s: Vec<u64> = job.iter().map(|k| seeds[*k]).collect();
        Ok(job.iter().copied().zip(improve_chunk(model, &insts, &s, cfg)?).collect())
    };
    let workers = worker_count().min(jobs.len()).max(1);
    let mut results: Vec<(usize, RunReport)> = Vec::with_capacity(instances.len());
    if workers == 1 {
        for job in &jobs {
            results.extend(run(job)?);
        }
    } else {
        let parts: Vec<Result<Vec<(usize, RunReport)>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let jobs = &jobs;
                    let run = &run;
                    scope.spawn(move || {
                        let mut mine = Vec::new();
                        for job in jobs.iter().skip(w).step_by(workers) {
                            mine.extend(run(job)?);
                        }
                        Ok(mine)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for p in parts {
            results.extend(p?);
        }
    }
    results.sort_by_key(|(k, _)| *k);
    Ok(results.into_iter().map(|(_, r)| r).collect())
}

pub fn improve(model: &Dact, instance: &Instance, seed: u64, cfg: &ImproveConfig) -> Result<RunReport> {
    Ok(improve_many(model, std::slice::from_ref(instance), &[seed], cfg)?.remove(0))
}

/// Default number of coordinate transforms per problem.
pub fn default_augments(problem: Problem) -> usize {
    match problem {
        Problem::Tsp => 4,
        Problem::Cvrp => 6,
    }
}

fn transform(k: usize, [x, y]: [f64; 2]) -> [f64; 2] {
    match k {
        0 => [x, y],
        1 => [1.0 - x, y],
        2 => [x, 1.0 - y],
        3 => [1.0 - x, 1.0 - y],
        4 => [y, x],
        5 => [1.0 - y, x],
        6 => [y, 1.0 - x],
        _ => [1.0 - y, 1.0 - x],
    }
}

/// The first `k` of the eight symmetries of the unit square.
pub fn augment_variants(instance: &Instance, k: usize) -> Result<Vec<Instance>> {
    if !(1..=8).contains(&k) {
        return invalid(format!("augment count must be in 1..=8, got {k}"));
    }
    Ok((0..k)
        .map(|t| Instance { coords: instance.coords.iter().map(|c| transform(t, *c)).collect(), ..instance.clone() })
        .collect())
}

/// Improves every variant (seed `seed + v` for variant `v`) and keeps the best.
pub fn improve_augmented(
    model: &Dact,
    instance: &Instance,
    k: usize,
    seed: u64,
    cfg: &ImproveConfig,
) -> Result<RunReport> {
    let start = Instant::now();
    let variants = augment_variants(instance, k)?;
    let seeds: Vec<u64> = (0..k as u64).map(|v| seed.wrapping_add(v)).collect();
    let reports = improve_many(model, &variants, &seeds, cfg)?;
    let len = reports[0].trace.len();
    let trace = (0..len).map(|t| reports.iter().map(|r| r.trace[t]).fold(f64::INFINITY, f64::min)).collect();
    let best = reports.into_iter().min_by(|a, b| a.best_cost.total_cmp(&b.best_cost)).expect("at least one variant");
    let cost = tour_length(instance, &best.best_solution);
    Ok(RunReport { best_cost: cost, trace, wall_time_secs: start.elapsed().as_secs_f64(), augments: k, ..best })
}
