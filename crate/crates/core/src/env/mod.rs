mod construct;
mod instance;
mod operators;
mod solution;
mod state;

pub use construct::{greedy_route_count, initial_solution, InitMode};
pub use instance::{default_capacity, default_depots, Instance, Problem};
pub use operators::{apply_2opt, apply_insert, apply_swap, Operator};
pub use solution::{is_feasible, route_loads, tour_length, Solution};
pub use state::{feasibility_mask, features, reward, State};
