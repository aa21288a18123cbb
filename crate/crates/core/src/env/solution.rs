use serde::{Deserialize, Serialize};

use super::instance::{Instance, Problem};
use crate::error::{invalid, Result};

/// A cyclic visiting order over node ids `0..len`, with its inverse.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Solution {
    order: Vec<usize>,
    pos: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Solution {
    type Error = crate::error::Error;

    fn try_from(order: Vec<usize>) -> Result<Self> {
        Solution::from_order(order)
    }
}

impl From<Solution> for Vec<usize> {
    fn from(s: Solution) -> Self {
        s.order
    }
}

impl Solution {
    /// Fails unless `order` is a permutation of `0..order.len()`.
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut pos = vec![usize::MAX; n];
        for (p, &node) in order.iter().enumerate() {
            if node >= n || pos[node] != usize::MAX {
                return invalid(format!("order is not a permutation of 0..{n}"));
            }
            pos[node] = p;
        }
        Ok(Solution { order, pos })
    }

    pub fn identity(n: usize) -> Self {
        Solution { order: (0..n).collect(), pos: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Position of each node id in the order.
    pub fn positions(&self) -> &[usize] {
        &self.pos
    }

    #[inline]
    pub fn pos(&self, node: usize) -> usize {
        self.pos[node]
    }

    #[inline]
    pub fn at(&self, p: usize) -> usize {
        self.order[p % self.order.len()]
    }

    #[inline]
    pub fn succ(&self, node: usize) -> usize {
        self.order[(self.pos[node] + 1) % self.order.len()]
    }

    #[inline]
    pub fn pred(&self, node: usize) -> usize {
        let n = self.order.len();
        self.order[(self.pos[node] + n - 1) % n]
    }

    fn reindex(&mut self, from: usize, to: usize) {
        for p in from..=to {
            self.pos[self.order[p]] = p;
        }
    }

    /// Reverses the cyclic segment from node `i` to node `j` in tour direction.
    pub(crate) fn reverse_segment(&mut self, i: usize, j: usize) {
        let n = self.order.len();
        let (a, b) = (self.pos[i], self.pos[j]);
        let len = (b + n - a) % n + 1;
        for k in 0..len / 2 {
            let p = (a + k) % n;
            let q = (b + n - k) % n;
            self.order.swap(p, q);
            self.pos[self.order[p]] = p;
            self.pos[self.order[q]] = q;
        }
    }

    /// Moves node `i` to directly after node `j`.
    pub(crate) fn move_after(&mut self, i: usize, j: usize) {
        let from = self.pos[i];
        let pj = self.pos[j];
        self.order.remove(from);
        let at = if pj > from { pj } else { pj + 1 };
        self.order.insert(at, i);
        let (lo, hi) = (from.min(at), from.max(at));
        self.reindex(lo, hi);
    }

    pub(crate) fn exchange(&mut self, i: usize, j: usize) {
        let (a, b) = (self.pos[i], self.pos[j]);
        self.order.swap(a, b);
        self.pos[i] = b;
        self.pos[j] = a;
    }

    /// Replaces `self` by `other` without reallocating.
    pub fn copy_from(&mut self, other: &Solution) {
        self.order.clone_from(&other.order);
        self.pos.clone_from(&other.pos);
    }
}

/// Total Euclidean length of the closed tour (depot copies sit on the depot).
pub fn tour_length(instance: &Instance, solution: &Solution) -> f64 {
    let order = solution.order();
    let n = order.len();
    (0..n).map(|p| instance.dist(order[p], order[(p + 1) % n])).sum()
}

/// Demand carried on each route, routes being maximal depot-free runs of the
/// cyclic order. TSP solutions form one route with zero demand.
pub fn route_loads(instance: &Instance, solution: &Solution) -> Vec<u32> {
    if instance.problem == Problem::Tsp {
        return vec![0];
    }
    let order = solution.order();
    let n = order.len();
    let Some(start) = order.iter().position(|&v| instance.is_depot(v)) else {
        return vec![order.iter().map(|&v| instance.demand(v)).sum()];
    };
    let mut loads = Vec::new();
    let mut load = 0;
    for k in 1..=n {
        let node = order[(start + k) % n];
        if instance.is_depot(node) {
            loads.push(load);
            load = 0;
        } else {
            load += instance.demand(node);
        }
    }
    loads
}

/// True when the node set matches the instance and every route fits the capacity.
pub fn is_feasible(instance: &Instance, solution: &Solution, depots: usize) -> bool {
    if solution.len() != instance.node_count(depots) {
        return false;
    }
    match instance.problem {
        Problem::Tsp => true,
        Problem::Cvrp => route_loads(instance, solution).iter().all(|l| *l <= instance.capacity),
    }
}

/// Per-position run sums: `ending[p]` is the demand of the depot-free run
/// ending at `p` (inclusive), `starting[p]` of the run starting at `p`.
/// Both are 0 at depot positions.
pub(crate) fn run_sums(instance: &Instance, solution: &Solution) -> (Vec<u32>, Vec<u32>) {
    let order = solution.order();
    let n = order.len();
    let mut ending = vec![0u32; n];
    let mut starting = vec![0u32; n];
    let Some(start) = order.iter().position(|&v| instance.is_depot(v)) else {
        return (ending, starting);
    };
    let mut acc = 0;
    for k in 1..=n {
        let p = (start + k) % n;
        let node = order[p];
        acc = if instance.is_depot(node) { 0 } else { acc + instance.demand(node) };
        ending[p] = acc;
    }
    acc = 0;
    for k in 1..=n {
        let p = (start + n - k) % n;
        let node = order[p];
        acc = if instance.is_depot(node) { 0 } else { acc + instance.demand(node) };
        starting[p] = acc;
    }
    (ending, starting)
}
