use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Tsp,
    Cvrp,
}

impl Problem {
    /// Width of the per-node feature vector the policy consumes.
    pub fn feature_dim(self) -> usize {
        match self {
            Problem::Tsp => 2,
            Problem::Cvrp => 7,
        }
    }
}

impl std::str::FromStr for Problem {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "tsp" => Ok(Problem::Tsp),
            "cvrp" => Ok(Problem::Cvrp),
            other => Err(format!("unknown problem '{other}' (expected tsp or cvrp)")),
        }
    }
}

/// Vehicle capacity used for generated CVRP instances of `n` customers.
pub fn default_capacity(n: usize) -> u32 {
    match n {
        0..=20 => 30,
        21..=50 => 40,
        _ => 50,
    }
}

/// Number of depot copies padded into CVRP solutions of `n` customers.
pub fn default_depots(n: usize) -> usize {
    if n <= 20 {
        10
    } else {
        20
    }
}

/// An immutable routing problem. For CVRP, location 0 is the depot and
/// locations `1..=n` are customers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub problem: Problem,
    pub coords: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demands: Vec<u32>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub capacity: u32,
    #[serde(default)]
    pub seed: u64,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

impl Instance {
    pub fn tsp(coords: Vec<[f64; 2]>) -> Self {
        Instance { problem: Problem::Tsp, coords, demands: Vec::new(), capacity: 0, seed: 0 }
    }

    /// `coords[0]` is the depot; `demands` lists customers 1..=n only.
    pub fn cvrp(coords: Vec<[f64; 2]>, customer_demands: &[u32], capacity: u32) -> Result<Self> {
        if coords.len() != customer_demands.len() + 1 {
            return invalid(format!(
                "{} locations need {} customer demands, got {}",
                coords.len(),
                coords.len().saturating_sub(1),
                customer_demands.len()
            ));
        }
        let mut demands = vec![0];
        demands.extend_from_slice(customer_demands);
        let inst = Instance { problem: Problem::Cvrp, coords, demands, capacity, seed: 0 };
        inst.validate()?;
        Ok(inst)
    }

    /// Uniform coordinates in the unit square; CVRP demands uniform in 1..=9.
    pub fn generate(n: usize, problem: Problem, seed: u64) -> Result<Self> {
        if n < 4 {
            return invalid(format!("instances need at least 4 customers, got {n}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let locations = match problem {
            Problem::Tsp => n,
            Problem::Cvrp => n + 1,
        };
        let coords = (0..locations).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        let (demands, capacity) = match problem {
            Problem::Tsp => (Vec::new(), 0),
            Problem::Cvrp => {
                let mut d = vec![0];
                d.extend((0..n).map(|_| rng.gen_range(1..=9u32)));
                (d, default_capacity(n))
            }
        };
        Ok(Instance { problem, coords, demands, capacity, seed })
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.iter().flatten().any(|c| !c.is_finite()) {
            return invalid("non-finite coordinate");
        }
        if self.problem == Problem::Cvrp {
            if self.demands.len() != self.coords.len() {
                return invalid("one demand per location required");
            }
            if self.demands[0] != 0 {
                return invalid("depot demand must be 0");
            }
            if self.capacity == 0 {
                return invalid("capacity must be positive");
            }
        }
        Ok(())
    }

    /// Number of customers (TSP: number of cities).
    pub fn size(&self) -> usize {
        match self.problem {
            Problem::Tsp => self.coords.len(),
            Problem::Cvrp => self.coords.len() - 1,
        }
    }

    pub fn num_locations(&self) -> usize {
        self.coords.len()
    }

    /// Solution length for this instance with `depots` depot copies.
    pub fn node_count(&self, depots: usize) -> usize {
        match self.problem {
            Problem::Tsp => self.coords.len(),
            Problem::Cvrp => self.size() + depots,
        }
    }

    /// Location of a solution node; depot copies beyond the first map to 0.
    #[inline]
    pub fn location(&self, node: usize) -> usize {
        if node < self.coords.len() {
            node
        } else {
            0
        }
    }

    #[inline]
    pub fn is_depot(&self, node: usize) -> bool {
        self.problem == Problem::Cvrp && self.location(node) == 0
    }

    #[inline]
    pub fn demand(&self, node: usize) -> u32 {
        match self.problem {
            Problem::Tsp => 0,
            Problem::Cvrp => self.demands[self.location(node)],
        }
    }

    #[inline]
    pub fn dist(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.coords[self.location(a)], self.coords[self.location(b)]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    }

    pub fn coord(&self, node: usize) -> [f64; 2] {
        self.coords[self.location(node)]
    }
}
