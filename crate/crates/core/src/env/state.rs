use super::instance::{Instance, Problem};
use super::operators::Operator;
use super::solution::{is_feasible, route_loads, run_sums, tour_length, Solution};
use crate::error::{invalid, Error, Result};

/// Reduced cost against the incumbent: positive only for a new best.
pub fn reward(best: f64, next: f64) -> f64 {
    best - next.min(best)
}

/// Row-major `[N', feature_dim]` node features, rows indexed by node id.
///
/// CVRP columns: x, y, distance to predecessor, distance to successor,
/// route demand before the node, own demand, route demand from the node to
/// the end of its route. Demands are divided by the capacity. A depot copy
/// carries the load of the route it opens in the last column.
pub fn features(instance: &Instance, solution: &Solution) -> Vec<f32> {
    let n = solution.len();
    match instance.problem {
        Problem::Tsp => (0..n)
            .flat_map(|v| {
                let c = instance.coord(v);
                [c[0] as f32, c[1] as f32]
            })
            .collect(),
        Problem::Cvrp => {
            let q = instance.capacity as f64;
            let (ending, starting) = run_sums(instance, solution);
            let mut out = vec![0f32; n * 7];
            for v in 0..n {
                let p = solution.pos(v);
                let c = instance.coord(v);
                let own = instance.demand(v);
                let (before, after) =
                    if instance.is_depot(v) { (0, starting[(p + 1) % n]) } else { (ending[p] - own, starting[p]) };
                let row = &mut out[v * 7..v * 7 + 7];
                row[0] = c[0] as f32;
                row[1] = c[1] as f32;
                row[2] = instance.dist(solution.pred(v), v) as f32;
                row[3] = instance.dist(v, solution.succ(v)) as f32;
                row[4] = (before as f64 / q) as f32;
                row[5] = (own as f64 / q) as f32;
                row[6] = (after as f64 / q) as f32;
            }
            out
        }
    }
}

fn routes_fit(instance: &Instance, solution: &Solution) -> bool {
    route_loads(instance, solution).iter().all(|l| *l <= instance.capacity)
}

/// Capacity check for a single 2-opt move on a feasible CVRP solution,
/// using the depot-free run sums around the reversed segment.
fn two_opt_fits(
    instance: &Instance,
    solution: &Solution,
    runs: &(Vec<u32>, Vec<u32>),
    depot_prefix: &[usize],
    i: usize,
    j: usize,
) -> bool {
    let n = solution.len();
    let (a, b) = (solution.pos(i), solution.pos(j));
    let seg_len = (b + n - a) % n + 1;
    if seg_len == n {
        return true;
    }
    let depots_in = |from: usize, len: usize| -> usize {
        // cyclic count over positions from..from+len
        let end = from + len;
        if end <= n {
            depot_prefix[end] - depot_prefix[from]
        } else {
            depot_prefix[n] - depot_prefix[from] + depot_prefix[end - n]
        }
    };
    if depots_in(a, seg_len) == 0 || depots_in((b + 1) % n, n - seg_len) == 0 {
        return true;
    }
    let (ending, starting) = runs;
    ending[(a + n - 1) % n] + ending[b] <= instance.capacity && starting[a] + starting[(b + 1) % n] <= instance.capacity
}

/// Row-major `N' x N'` boolean mask, `true` meaning forbidden.
pub fn feasibility_mask(
    instance: &Instance,
    solution: &Solution,
    operator: Operator,
    last_action: Option<(usize, usize)>,
) -> Result<Vec<bool>> {
    let n = solution.len();
    let mut mask = vec![false; n * n];
    for v in 0..n {
        mask[v * n + v] = true;
    }
    if let Some((i, j)) = last_action {
        mask[i * n + j] = true;
        mask[j * n + i] = true;
    }
    if instance.problem == Problem::Cvrp {
        match operator {
            Operator::TwoOpt => {
                let runs = run_sums(instance, solution);
                let mut prefix = vec![0usize; n + 1];
                for p in 0..n {
                    prefix[p + 1] = prefix[p] + instance.is_depot(solution.at(p)) as usize;
                }
                for i in 0..n {
                    for j in 0..n {
                        if !mask[i * n + j] && !two_opt_fits(instance, solution, &runs, &prefix, i, j) {
                            mask[i * n + j] = true;
                        }
                    }
                }
            }
            Operator::Insert | Operator::Swap => {
                let mut scratch = solution.clone();
                for i in 0..n {
                    for j in 0..n {
                        if mask[i * n + j] {
                            continue;
                        }
                        operator.apply_in_place(&mut scratch, i, j)?;
                        if !routes_fit(instance, &scratch) {
                            mask[i * n + j] = true;
                        }
                        scratch.copy_from(solution);
                    }
                }
            }
        }
    }
    if mask.iter().all(|m| *m) {
        return Err(Error::FullyMasked { row: 0 });
    }
    Ok(mask)
}

/// An improvement-MDP state: the current solution plus incumbent bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub solution: Solution,
    pub cost: f64,
    pub best: Solution,
    pub best_cost: f64,
    pub last_action: Option<(usize, usize)>,
    /// Consecutive steps without a new incumbent.
    pub stall: usize,
}

impl State {
    pub fn new(instance: &Instance, solution: Solution, depots: usize) -> Result<Self> {
        if !is_feasible(instance, &solution, depots) {
            return Err(Error::Infeasible(format!("initial solution of length {} is not feasible", solution.len())));
        }
        let cost = tour_length(instance, &solution);
        Ok(State { best: solution.clone(), solution, cost, best_cost: cost, last_action: None, stall: 0 })
    }

    pub fn node_count(&self) -> usize {
        self.solution.len()
    }

    pub fn features(&self, instance: &Instance) -> Vec<f32> {
        features(instance, &self.solution)
    }

    /// Position index of each node id in the current solution.
    pub fn positions(&self) -> &[usize] {
        self.solution.positions()
    }

    pub fn mask(&self, instance: &Instance, operator: Operator) -> Result<Vec<bool>> {
        feasibility_mask(instance, &self.solution, operator, self.last_action)
    }

    fn is_masked(&self, instance: &Instance, operator: Operator, i: usize, j: usize) -> bool {
        let n = self.node_count();
        if i == j || i >= n || j >= n {
            return true;
        }
        if let Some((a, b)) = self.last_action {
            if (a, b) == (i, j) || (a, b) == (j, i) {
                return true;
            }
        }
        if instance.problem == Problem::Cvrp {
            return match operator.apply(&self.solution, i, j) {
                Ok(next) => !routes_fit(instance, &next),
                Err(_) => true,
            };
        }
        false
    }

    /// Applies `(i, j)`, updates the incumbent and the restart counter, and
    /// returns the reward. With `restart = Some(t)`, `t` consecutive
    /// non-improving steps put the incumbent back as the current solution.
    pub fn step(
        &mut self,
        instance: &Instance,
        action: (usize, usize),
        operator: Operator,
        restart: Option<usize>,
    ) -> Result<f64> {
        let (i, j) = action;
        if self.is_masked(instance, operator, i, j) {
            return invalid(format!("action ({i}, {j}) is masked"));
        }
        operator.apply_in_place(&mut self.solution, i, j)?;
        self.cost = tour_length(instance, &self.solution);
        self.last_action = Some(action);
        let r = reward(self.best_cost, self.cost);
        if self.cost < self.best_cost {
            self.best.copy_from(&self.solution);
            self.best_cost = self.cost;
            self.stall = 0;
        } else {
            self.stall += 1;
            if let Some(t) = restart {
                if t > 0 && self.stall >= t {
                    self.solution.copy_from(&self.best);
                    self.cost = self.best_cost;
                    self.stall = 0;
                }
            }
        }
        Ok(r)
    }
}
