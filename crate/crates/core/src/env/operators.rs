use serde::{Deserialize, Serialize};

use super::instance::Instance;
use super::solution::Solution;
use crate::error::{invalid, Result};

/// Pairwise local-search move applied to a node pair `(i, j)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    /// Reverse the segment running from `i` to `j` in tour direction.
    #[default]
    #[serde(rename = "2opt")]
    TwoOpt,
    /// Place `i` directly after `j`.
    Insert,
    /// Exchange the positions of `i` and `j`.
    Swap,
}

impl std::str::FromStr for Operator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "2opt" | "2-opt" | "two_opt" => Ok(Operator::TwoOpt),
            "insert" => Ok(Operator::Insert),
            "swap" => Ok(Operator::Swap),
            other => Err(format!("unknown operator '{other}'")),
        }
    }
}

fn check_pair(solution: &Solution, i: usize, j: usize) -> Result<()> {
    if i == j {
        return invalid(format!("operator needs two distinct nodes, got ({i}, {i})"));
    }
    let n = solution.len();
    if i >= n || j >= n {
        return invalid(format!("node pair ({i}, {j}) out of range for {n} nodes"));
    }
    Ok(())
}

impl Operator {
    pub fn apply_in_place(self, solution: &mut Solution, i: usize, j: usize) -> Result<()> {
        check_pair(solution, i, j)?;
        match self {
            Operator::TwoOpt => solution.reverse_segment(i, j),
            Operator::Insert => solution.move_after(i, j),
            Operator::Swap => solution.exchange(i, j),
        }
        Ok(())
    }

    pub fn apply(self, solution: &Solution, i: usize, j: usize) -> Result<Solution> {
        let mut next = solution.clone();
        self.apply_in_place(&mut next, i, j)?;
        Ok(next)
    }

    /// Change in tour length caused by applying the move, in O(1).
    pub fn delta(self, instance: &Instance, solution: &Solution, i: usize, j: usize) -> f64 {
        let d = |a: usize, b: usize| instance.dist(a, b);
        let n = solution.len();
        match self {
            Operator::TwoOpt => {
                let (pi, sj) = (solution.pred(i), solution.succ(j));
                if sj == i {
                    // the segment spans the whole cycle
                    return 0.0;
                }
                d(pi, j) + d(i, sj) - d(pi, i) - d(j, sj)
            }
            Operator::Insert => {
                let (p, s) = (solution.pred(i), solution.succ(i));
                if j == p {
                    return 0.0;
                }
                let sj = if solution.succ(j) == i { s } else { solution.succ(j) };
                d(p, s) - d(p, i) - d(i, s) + d(j, i) + d(i, sj) - d(j, sj)
            }
            Operator::Swap => {
                let (a, b) = (solution.pos(i), solution.pos(j));
                let mut starts = [(a + n - 1) % n, a, (b + n - 1) % n, b];
                starts.sort_unstable();
                let mut total = 0.0;
                let node_after = |p: usize| {
                    let v = solution.at(p);
                    if v == i {
                        j
                    } else if v == j {
                        i
                    } else {
                        v
                    }
                };
                for (k, &p) in starts.iter().enumerate() {
                    if k > 0 && starts[k - 1] == p {
                        continue;
                    }
                    let q = (p + 1) % n;
                    total += d(node_after(p), node_after(q)) - d(solution.at(p), solution.at(q));
                }
                total
            }
        }
    }
}

pub fn apply_2opt(solution: &Solution, i: usize, j: usize) -> Result<Solution> {
    Operator::TwoOpt.apply(solution, i, j)
}

pub fn apply_insert(solution: &Solution, i: usize, j: usize) -> Result<Solution> {
    Operator::Insert.apply(solution, i, j)
}

pub fn apply_swap(solution: &Solution, i: usize, j: usize) -> Result<Solution> {
    Operator::Swap.apply(solution, i, j)
}
