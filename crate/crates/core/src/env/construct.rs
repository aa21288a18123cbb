use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::instance::{Instance, Problem};
use super::solution::Solution;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Random,
    Greedy,
}

impl std::str::FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(InitMode::Random),
            "greedy" => Ok(InitMode::Greedy),
            other => Err(format!("unknown init mode '{other}'")),
        }
    }
}

/// Builds a feasible starting solution. `depots` is the number of depot
/// copies for CVRP and is ignored for TSP.
pub fn initial_solution<R: Rng + ?Sized>(
    instance: &Instance,
    mode: InitMode,
    depots: usize,
    rng: &mut R,
) -> Result<Solution> {
    match instance.problem {
        Problem::Tsp => {
            let n = instance.num_locations();
            let order = match mode {
                InitMode::Random => {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(rng);
                    order
                }
                InitMode::Greedy => nearest_neighbor(instance),
            };
            Solution::from_order(order)
        }
        Problem::Cvrp => {
            if let Some(c) = (1..instance.num_locations()).find(|&c| instance.demands[c] > instance.capacity) {
                return Err(Error::Infeasible(format!(
                    "customer {c} demands {} over capacity {}",
                    instance.demands[c], instance.capacity
                )));
            }
            let routes = match mode {
                InitMode::Random => {
                    let mut customers: Vec<usize> = (1..instance.num_locations()).collect();
                    customers.shuffle(rng);
                    split_routes(instance, &customers)
                }
                InitMode::Greedy => greedy_routes(instance),
            };
            pad_routes(instance, routes, depots)
        }
    }
}

fn nearest_neighbor(instance: &Instance) -> Vec<usize> {
    let n = instance.num_locations();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut cur = 0;
    visited[0] = true;
    order.push(0);
    for _ in 1..n {
        let next = (0..n)
            .filter(|&v| !visited[v])
            .min_by(|&a, &b| instance.dist(cur, a).total_cmp(&instance.dist(cur, b)))
            .expect("unvisited node remains");
        visited[next] = true;
        order.push(next);
        cur = next;
    }
    order
}

fn split_routes(instance: &Instance, customers: &[usize]) -> Vec<Vec<usize>> {
    let mut routes = vec![Vec::new()];
    let mut load = 0;
    for &c in customers {
        let d = instance.demands[c];
        if load + d > instance.capacity {
            routes.push(Vec::new());
            load = 0;
        }
        load += d;
        routes.last_mut().unwrap().push(c);
    }
    routes
}

fn greedy_routes(instance: &Instance) -> Vec<Vec<usize>> {
    let n = instance.num_locations();
    let mut visited = vec![false; n];
    visited[0] = true;
    let mut left = n - 1;
    let mut routes = Vec::new();
    while left > 0 {
        let mut route = Vec::new();
        let (mut cur, mut load) = (0, 0);
        while let Some(next) = (1..n)
            .filter(|&v| !visited[v] && load + instance.demands[v] <= instance.capacity)
            .min_by(|&a, &b| instance.dist(cur, a).total_cmp(&instance.dist(cur, b)))
        {
            visited[next] = true;
            load += instance.demands[next];
            route.push(next);
            cur = next;
            left -= 1;
        }
        routes.push(route);
    }
    routes
}

/// Lays routes out as `0, r1, copy, r2, ...` and appends unused depot copies.
fn pad_routes(instance: &Instance, routes: Vec<Vec<usize>>, depots: usize) -> Result<Solution> {
    if routes.len() > depots {
        return Err(Error::Infeasible(format!(
            "{} routes needed but only {depots} depot copies available",
            routes.len()
        )));
    }
    let base = instance.num_locations();
    let mut copies = std::iter::once(0).chain(base..base + depots - 1);
    let mut order = Vec::with_capacity(base - 1 + depots);
    for route in routes {
        order.push(copies.next().unwrap());
        order.extend(route);
    }
    order.extend(copies);
    Solution::from_order(order)
}

/// Number of routes the nearest-neighbor construction opens; 0 for TSP.
pub fn greedy_route_count(instance: &Instance) -> usize {
    match instance.problem {
        Problem::Tsp => 0,
        Problem::Cvrp => greedy_routes(instance).len(),
    }
}
