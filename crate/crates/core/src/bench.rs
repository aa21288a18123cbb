//! TSPLIB / CVRPLIB ingestion, coordinate normalization and gap reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::env::{Instance, Problem, Solution};
use crate::error::{invalid, Error, Result};

/// How edge lengths are measured when comparing against a published optimum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceConvention {
    Exact,
    /// Nearest-integer rounding of every edge (TSPLIB `nint`).
    Rounded,
}

impl DistanceConvention {
    pub fn dist(self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let d = (a[0] - b[0]).hypot(a[1] - b[1]);
        match self {
            DistanceConvention::Exact => d,
            DistanceConvention::Rounded => (d + 0.5).floor(),
        }
    }
}

/// A parsed benchmark file. Location 0 is the depot for CVRP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkInstance {
    pub name: String,
    pub problem: Problem,
    pub coords: Vec<[f64; 2]>,
    /// Per location, depot included; empty for TSP.
    pub demands: Vec<u32>,
    pub capacity: u32,
    pub optimum: Option<f64>,
    pub convention: DistanceConvention,
    pub comment: Option<String>,
}

impl BenchmarkInstance {
    /// Cities for TSP, customers for CVRP.
    pub fn size(&self) -> usize {
        match self.problem {
            Problem::Tsp => self.coords.len(),
            Problem::Cvrp => self.coords.len() - 1,
        }
    }

    /// Length of `solution` on the raw coordinates. The solution may come from
    /// the normalized instance, which shares location indices.
    pub fn cost(&self, instance: &Instance, solution: &Solution) -> f64 {
        let n = solution.len();
        (0..n)
            .map(|p| {
                let a = instance.location(solution.at(p));
                let b = instance.location(solution.at((p + 1) % n));
                self.convention.dist(self.coords[a], self.coords[b])
            })
            .sum()
    }

    /// Cost of visiting locations in `order` cyclically; for CVRP the order
    /// may contain the depot (location 0) several times.
    pub fn order_cost(&self, order: &[usize]) -> f64 {
        let n = order.len();
        (0..n).map(|p| self.convention.dist(self.coords[order[p]], self.coords[order[(p + 1) % n]])).sum()
    }

    /// Serializes in the format `parse_benchmark` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "NAME : {}", self.name);
        if let Some(c) = &self.comment {
            let _ = writeln!(s, "COMMENT : {c}");
        }
        let kind = match self.problem {
            Problem::Tsp => "TSP",
            Problem::Cvrp => "CVRP",
        };
        let _ = writeln!(s, "TYPE : {kind}");
        let _ = writeln!(s, "DIMENSION : {}", self.coords.len());
        let _ = writeln!(s, "EDGE_WEIGHT_TYPE : EUC_2D");
        if self.problem == Problem::Cvrp {
            let _ = writeln!(s, "CAPACITY : {}", self.capacity);
        }
        if let Some(o) = self.optimum {
            let _ = writeln!(s, "OPTIMUM : {o}");
        }
        s.push_str("NODE_COORD_SECTION\n");
        for (i, [x, y]) in self.coords.iter().enumerate() {
            let _ = writeln!(s, "{} {x} {y}", i + 1);
        }
        if self.problem == Problem::Cvrp {
            s.push_str("DEMAND_SECTION\n");
            for (i, d) in self.demands.iter().enumerate() {
                let _ = writeln!(s, "{} {d}", i + 1);
            }
            s.push_str("DEPOT_SECTION\n1\n-1\n");
        }
        s.push_str("EOF\n");
        s
    }
}

fn perr<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { line, msg: msg.into() })
}

/// Extracts an optimum from comments such as `"Optimal value: 784"`.
pub fn optimum_from_comment(comment: &str) -> Option<f64> {
    let lower = comment.to_ascii_lowercase();
    ["optimal value", "optimum", "optimal", "best known", "bks"].iter().find_map(|key| {
        let rest = &lower[lower.find(key)? + key.len()..];
        let start = rest.find(|c: char| c.is_ascii_digit())?;
        if rest[..start].chars().any(|c| c.is_ascii_alphabetic()) {
            return None;
        }
        let num: String = rest[start..].chars().take_while(|c| c.is_ascii_digit() || *c == '.').collect();
        num.parse().ok()
    })
}

/// Reads the `Cost` line of a CVRPLIB `.sol` file.
pub fn parse_solution_cost(text: &str) -> Result<f64> {
    for (k, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        if it.next().is_some_and(|w| w.eq_ignore_ascii_case("cost")) {
            return it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse { line: k + 1, msg: "cost line without a number".into() });
        }
    }
    perr(0, "no Cost line found")
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Header,
    Coords,
    Demands,
    Depots,
}

/// Parses a TSPLIB or CVRPLIB file with `EDGE_WEIGHT_TYPE : EUC_2D`.
pub fn parse_benchmark(text: &str) -> Result<BenchmarkInstance> {
    let mut name = None;
    let mut comment: Option<String> = None;
    let mut problem = None;
    let mut dim: Option<usize> = None;
    let mut capacity = None;
    let mut optimum = None;
    let mut weight_type = None;
    let mut coords: BTreeMap<usize, [f64; 2]> = BTreeMap::new();
    let mut demands: BTreeMap<usize, u32> = BTreeMap::new();
    let mut depots = Vec::new();
    let mut section = Section::Header;
    let mut depots_closed = false;

    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let upper = line.to_ascii_uppercase();
        match upper.as_str() {
            "EOF" => break,
            "NODE_COORD_SECTION" => {
                section = Section::Coords;
                continue;
            }
            "DEMAND_SECTION" => {
                section = Section::Demands;
                continue;
            }
            "DEPOT_SECTION" => {
                section = Section::Depots;
                continue;
            }
            _ => {}
        }
        if let Some((key, value)) = line.split_once(':').filter(|(key, _)| is_header_key(key)) {
            let key = key.trim().to_ascii_uppercase();
            let value = value.trim();
            section = Section::Header;
            match key.as_str() {
                "NAME" => name = Some(value.to_string()),
                "COMMENT" => {
                    comment = Some(match comment.take() {
                        Some(prev) => format!("{prev} {value}"),
                        None => value.to_string(),
                    })
                }
                "TYPE" => {
                    let word = value.split_whitespace().next().unwrap_or("").to_ascii_uppercase();
                    problem = Some(match word.as_str() {
                        "TSP" => Problem::Tsp,
                        "CVRP" => Problem::Cvrp,
                        other => return perr(line_no, format!("unsupported TYPE '{other}'")),
                    });
                }
                "DIMENSION" => dim = Some(value.parse().or_else(|_| perr(line_no, "DIMENSION is not an integer"))?),
                "CAPACITY" => capacity = Some(value.parse().or_else(|_| perr(line_no, "CAPACITY is not an integer"))?),
                "EDGE_WEIGHT_TYPE" => {
                    if !value.eq_ignore_ascii_case("EUC_2D") {
                        return perr(line_no, format!("unsupported EDGE_WEIGHT_TYPE '{value}'"));
                    }
                    weight_type = Some(());
                }
                "OPTIMUM" | "OPTIMAL_VALUE" | "BEST_KNOWN" => {
                    optimum = Some(value.parse::<f64>().or_else(|_| perr(line_no, format!("{key} is not a number")))?)
                }
                _ => {}
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match section {
            Section::Header => return perr(line_no, format!("unexpected line '{line}'")),
            Section::Coords => {
                let [id, x, y] = fields[..] else {
                    return perr(line_no, "coordinate line needs 'id x y'");
                };
                let id = parse_id(id, line_no)?;
                let x: f64 = x.parse().or_else(|_| perr(line_no, format!("bad x coordinate '{x}'")))?;
                let y: f64 = y.parse().or_else(|_| perr(line_no, format!("bad y coordinate '{y}'")))?;
                if !x.is_finite() || !y.is_finite() {
                    return perr(line_no, "coordinate is not finite");
                }
                if coords.insert(id, [x, y]).is_some() {
                    return perr(line_no, format!("node {id} listed twice"));
                }
            }
            Section::Demands => {
                let [id, d] = fields[..] else {
                    return perr(line_no, "demand line needs 'id demand'");
                };
                let id = parse_id(id, line_no)?;
                let d: u32 = d.parse().or_else(|_| perr(line_no, format!("bad demand '{d}'")))?;
                if demands.insert(id, d).is_some() {
                    return perr(line_no, format!("demand for node {id} listed twice"));
                }
            }
            Section::Depots => {
                for f in fields {
                    let v: i64 = f.parse().or_else(|_| perr(line_no, format!("bad depot id '{f}'")))?;
                    if v == -1 {
                        depots_closed = true;
                    } else if depots_closed || v < 1 {
                        return perr(line_no, format!("bad depot id '{f}'"));
                    } else {
                        depots.push(v as usize);
                    }
                }
            }
        }
    }

    let problem = problem.ok_or_else(|| Error::Parse { line: 0, msg: "missing TYPE".into() })?;
    let dim = dim.ok_or_else(|| Error::Parse { line: 0, msg: "missing DIMENSION".into() })?;
    if weight_type.is_none() {
        return perr(0, "missing EDGE_WEIGHT_TYPE");
    }
    if coords.len() != dim || coords.keys().copied().ne(1..=dim) {
        return perr(0, format!("DIMENSION {dim} but {} coordinates with ids 1..={dim} expected", coords.len()));
    }
    if optimum.is_none() {
        optimum = comment.as_deref().and_then(optimum_from_comment);
    }
    if optimum.is_some_and(|o| !(o >= 0.0 && o.is_finite())) {
        return perr(0, "optimum must be a non-negative number");
    }
    let mut coords: Vec<[f64; 2]> = coords.into_values().collect();
    let (demands, capacity) = match problem {
        Problem::Tsp => (Vec::new(), 0),
        Problem::Cvrp => {
            let capacity = capacity.ok_or_else(|| Error::Parse { line: 0, msg: "missing CAPACITY".into() })?;
            if demands.len() != dim || demands.keys().copied().ne(1..=dim) {
                return perr(0, format!("DEMAND_SECTION must list all {dim} nodes"));
            }
            let depot = match depots[..] {
                [] => 1,
                [d] if d <= dim => d,
                [_] => return perr(0, "depot id out of range"),
                _ => return perr(0, "exactly one depot supported"),
            };
            let mut demands: Vec<u32> = demands.into_values().collect();
            coords.swap(0, depot - 1);
            demands.swap(0, depot - 1);
            if demands[0] != 0 {
                return perr(0, "depot demand must be 0");
            }
            (demands, capacity)
        }
    };
    Ok(BenchmarkInstance {
        name: name.unwrap_or_default(),
        problem,
        coords,
        demands,
        capacity,
        optimum,
        convention: DistanceConvention::Rounded,
        comment,
    })
}

fn is_header_key(key: &str) -> bool {
    let key = key.trim();
    !key.is_empty()
        && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && key.chars().any(|c| c.is_ascii_alphabetic())
}

fn parse_id(s: &str, line: usize) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => perr(line, format!("bad node id '{s}'")),
    }
}

pub fn parse_tsplib(text: &str) -> Result<BenchmarkInstance> {
    let b = parse_benchmark(text)?;
    if b.problem != Problem::Tsp {
        return perr(0, "expected TYPE : TSP");
    }
    Ok(b)
}

pub fn parse_cvrplib(text: &str) -> Result<BenchmarkInstance> {
    let b = parse_benchmark(text)?;
    if b.problem != Problem::Cvrp {
        return perr(0, "expected TYPE : CVRP");
    }
    Ok(b)
}

/// Maps normalized coordinates back: `raw = offset + scale * normalized`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub offset: [f64; 2],
    pub scale: f64,
}

impl ScaleRecord {
    pub fn to_raw_cost(&self, normalized_cost: f64) -> f64 {
        normalized_cost * self.scale
    }
}

/// Translates to the origin and divides by the larger coordinate range, so the
/// points fit the unit square with their aspect ratio kept.
pub fn normalize_instance(bench: &BenchmarkInstance) -> Result<(Instance, ScaleRecord)> {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &bench.coords {
        for a in 0..2 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let scale = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if !(scale > 0.0 && scale.is_finite()) {
        return invalid("benchmark needs at least two distinct points");
    }
    let coords = bench.coords.iter().map(|c| [(c[0] - lo[0]) / scale, (c[1] - lo[1]) / scale]).collect();
    let instance = match bench.problem {
        Problem::Tsp => Instance::tsp(coords),
        Problem::Cvrp => Instance::cvrp(coords, &bench.demands[1..], bench.capacity)?,
    };
    Ok((instance, ScaleRecord { offset: lo, scale }))
}

/// Which trained model size handles a TSPLIB instance of `n` cities.
pub fn tsplib_model_size(n: usize) -> usize {
    if n < 99 {
        50
    } else {
        100
    }
}

/// Default depot copies for CVRPLIB instances.
pub const CVRPLIB_DEPOTS: usize = 20;

pub fn gap(cost: f64, optimum: f64) -> Result<f64> {
    if !(optimum > 0.0 && optimum.is_finite()) {
        return invalid(format!("optimum must be positive, got {optimum}"));
    }
    Ok((cost - optimum) / optimum)
}

/// Costs of repeated runs on one benchmark instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRuns {
    pub name: String,
    pub size: usize,
    pub optimum: Option<f64>,
    pub costs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub name: String,
    pub size: usize,
    pub optimum: f64,
    pub best_cost: f64,
    pub avg_cost: f64,
    pub best_gap: f64,
    pub avg_gap: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapBucket {
    pub lo: usize,
    pub hi: usize,
    pub hi_inclusive: bool,
    pub count: usize,
    pub best_gap: Option<f64>,
    pub avg_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub entries: Vec<GapEntry>,
    pub buckets: Vec<GapBucket>,
    /// Instances without a usable optimum or without runs.
    pub excluded: Vec<String>,
}

pub const GAP_BUCKETS: [(usize, usize, bool); 3] = [(50, 100, false), (100, 150, false), (150, 200, true)];

pub fn bucket_report(runs: &[InstanceRuns]) -> GapReport {
    let mut entries = Vec::new();
    let mut excluded = Vec::new();
    for r in runs {
        let Some(opt) = r.optimum.filter(|o| *o > 0.0 && o.is_finite()) else {
            eprintln!("warning: {} has no optimum and is left out of the gap report", r.name);
            excluded.push(r.name.clone());
            continue;
        };
        if r.costs.is_empty() {
            eprintln!("warning: {} has no runs", r.name);
            excluded.push(r.name.clone());
            continue;
        }
        let best = r.costs.iter().copied().fold(f64::INFINITY, f64::min);
        let avg = r.costs.iter().sum::<f64>() / r.costs.len() as f64;
        entries.push(GapEntry {
            name: r.name.clone(),
            size: r.size,
            optimum: opt,
            best_cost: best,
            avg_cost: avg,
            best_gap: (best - opt) / opt,
            avg_gap: (avg - opt) / opt,
            runs: r.costs.len(),
        });
    }
    let buckets = GAP_BUCKETS
        .iter()
        .map(|&(lo, hi, incl)| {
            let inside: Vec<&GapEntry> =
                entries.iter().filter(|e| e.size >= lo && (e.size < hi || (incl && e.size == hi))).collect();
            let mean = |f: fn(&GapEntry) -> f64| {
                (!inside.is_empty()).then(|| inside.iter().map(|e| f(e)).sum::<f64>() / inside.len() as f64)
            };
            GapBucket {
                lo,
                hi,
                hi_inclusive: incl,
                count: inside.len(),
                best_gap: mean(|e| e.best_gap),
                avg_gap: mean(|e| e.avg_gap),
            }
        })
        .collect();
    GapReport { entries, buckets, excluded }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY_TSP: &str = "NAME : tiny\nTYPE : TSP\nDIMENSION : 3\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n2 3 0\n3 3 4\nEOF\n";

    const TINY_CVRP: &str = "NAME : toy\nCOMMENT : (No of trucks: 2, Optimal value: 20)\nTYPE : CVRP\nDIMENSION : 4\nEDGE_WEIGHT_TYPE : EUC_2D\nCAPACITY : 10\nNODE_COORD_SECTION\n1 5 5\n2 0 0\n3 10 0\n4 10 10\nDEMAND_SECTION\n1 0\n2 4\n3 7\n4 3\nDEPOT_SECTION\n1\n-1\nEOF\n";

    #[test]
    fn tiny_tsp_coordinates() {
        let b = parse_tsplib(TINY_TSP).unwrap();
        assert_eq!(b.name, "tiny");
        assert_eq!(b.coords, vec![[0.0, 0.0], [3.0, 0.0], [3.0, 4.0]]);
        assert_eq!(b.optimum, None);
        assert_eq!(b.order_cost(&[0, 1, 2]), 12.0);
    }

    #[test]
    fn cvrp_sections_and_comment_optimum() {
        let b = parse_cvrplib(TINY_CVRP).unwrap();
        assert_eq!(b.size(), 3);
        assert_eq!(b.capacity, 10);
        assert_eq!(b.demands, vec![0, 4, 7, 3]);
        assert_eq!(b.optimum, Some(20.0));
        assert_eq!(parse_benchmark(&b.to_text()).unwrap(), b);
    }

    #[test]
    fn depot_moved_to_front() {
        let text = TINY_CVRP.replace("1 0\n2 4", "1 4\n2 0").replace("DEPOT_SECTION\n1\n", "DEPOT_SECTION\n2\n");
        let b = parse_cvrplib(&text).unwrap();
        assert_eq!(b.coords[0], [0.0, 0.0]);
        assert_eq!(b.demands[0], 0);
        assert_eq!(b.demands[1], 4);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = TINY_TSP.replace("2 3 0", "2 three 0");
        match parse_tsplib(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
        let geo = TINY_TSP.replace("EUC_2D", "GEO");
        assert!(matches!(parse_tsplib(&geo), Err(Error::Parse { line: 4, .. })));
        assert!(parse_tsplib(&TINY_TSP.replace("DIMENSION : 3", "DIMENSION : 4")).is_err());
        assert!(parse_tsplib(TINY_CVRP).is_err());
    }

    #[test]
    fn comment_optimum_variants() {
        assert_eq!(optimum_from_comment("(Augerat et al, No of trucks: 5, Optimal value: 784)"), Some(784.0));
        assert_eq!(optimum_from_comment("Optimum 426"), Some(426.0));
        assert_eq!(optimum_from_comment("51-city problem (Christofides/Eilon)"), None);
        assert_eq!(parse_solution_cost("Route #1: 1 2\nCost 27591\n").unwrap(), 27591.0);
    }

    #[test]
    fn rounding_convention() {
        assert_eq!(DistanceConvention::Rounded.dist([0.0, 0.0], [1.0, 1.0]), 1.0);
        assert_eq!(DistanceConvention::Rounded.dist([0.0, 0.0], [1.5, 1.5]), 2.0);
        assert!((DistanceConvention::Exact.dist([0.0, 0.0], [1.0, 1.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn normalization_examples() {
        let mut b = parse_tsplib(TINY_TSP).unwrap();
        b.coords = vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]];
        let (inst, s) = normalize_instance(&b).unwrap();
        assert_eq!(inst.coords, vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]);
        assert_eq!(s.scale, 10.0);
        b.coords = vec![[0.0, 0.2], [1.0, 0.0], [0.5, 1.0]];
        let (inst, s) = normalize_instance(&b).unwrap();
        assert_eq!(inst.coords, b.coords);
        assert_eq!(s.scale, 1.0);
        b.coords = vec![[2.0, 2.0]; 3];
        assert!(normalize_instance(&b).is_err());
    }

    #[test]
    fn gaps_and_buckets() {
        assert_eq!(gap(426.0, 426.0).unwrap(), 0.0);
        assert!((gap(1.05 * 700.0, 700.0).unwrap() - 0.05).abs() < 1e-12);
        assert!(gap(1.0, 0.0).is_err());
        let runs = vec![
            InstanceRuns { name: "a".into(), size: 51, optimum: Some(100.0), costs: vec![110.0, 100.0] },
            InstanceRuns { name: "b".into(), size: 200, optimum: Some(10.0), costs: vec![11.0] },
            InstanceRuns { name: "c".into(), size: 120, optimum: None, costs: vec![1.0] },
        ];
        let r = bucket_report(&runs);
        assert_eq!(r.excluded, vec!["c".to_string()]);
        assert_eq!(r.entries[0].best_gap, 0.0);
        assert!((r.entries[0].avg_gap - 0.05).abs() < 1e-12);
        assert_eq!(r.buckets[0].count, 1);
        assert_eq!(r.buckets[1].count, 0);
        assert_eq!(r.buckets[1].avg_gap, None);
        assert_eq!(r.buckets[2].count, 1);
    }

    #[test]
    fn model_routing() {
        assert_eq!(tsplib_model_size(51), 50);
        assert_eq!(tsplib_model_size(98), 50);
        assert_eq!(tsplib_model_size(99), 100);
    }
}
