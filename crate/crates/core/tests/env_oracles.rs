mod common;

use common::{brute_force_mask, brute_force_tsp, held_karp, length_from_coords, rng, tight_cvrp, two_opt_descent};
use dact::env::{
    feasibility_mask, initial_solution, is_feasible, tour_length, InitMode, Instance, Operator, Problem, Solution,
    State,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

const OPS: [Operator; 3] = [Operator::TwoOpt, Operator::Insert, Operator::Swap];

#[test]
fn exhaustive_optima_agree() {
    for seed in 0..100u64 {
        let n = 4 + (seed % 5) as usize;
        let inst = Instance::generate(n, Problem::Tsp, seed).unwrap();
        let perm = brute_force_tsp(&inst);
        let dp = held_karp(&inst);
        assert!((perm - dp).abs() < 1e-9, "seed {seed}: {perm} vs {dp}");
        let (_, local) = two_opt_descent(&inst, &Solution::identity(n));
        assert!(local >= perm - 1e-9);
    }
}

#[test]
fn every_move_matches_recomputation() {
    for seed in 0..100u64 {
        let n = 4 + (seed % 5) as usize;
        let inst = Instance::generate(n, Problem::Tsp, 500 + seed).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng(seed));
        let sol = Solution::from_order(order).unwrap();
        let base = tour_length(&inst, &sol);
        assert!((base - length_from_coords(&inst, &sol)).abs() < 1e-9);
        for op in OPS {
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let next = op.apply(&sol, i, j).unwrap();
                    let fresh = length_from_coords(&inst, &next);
                    assert!((tour_length(&inst, &next) - fresh).abs() < 1e-9);
                    let delta = op.delta(&inst, &sol, i, j);
                    assert!((base + delta - fresh).abs() < 1e-5, "{op:?} ({i},{j}) seed {seed}");
                }
            }
        }
    }
}

#[test]
fn cvrp_masks_match_brute_force() {
    for seed in 0..60u64 {
        let n = 3 + (seed % 8) as usize;
        let inst = tight_cvrp(n, seed);
        let depots = n;
        let mut r = rng(seed);
        let sol = initial_solution(&inst, InitMode::Random, depots, &mut r).unwrap();
        for op in OPS {
            let mut state = State::new(&inst, sol.clone(), depots).unwrap();
            for _ in 0..15 {
                let mask = state.mask(&inst, op).unwrap();
                let oracle = brute_force_mask(&inst, &state.solution, op, state.last_action, depots);
                assert_eq!(mask, oracle, "{op:?} seed {seed}");
                let open: Vec<usize> = (0..mask.len()).filter(|k| !mask[*k]).collect();
                let nn = state.node_count();
                let a = open[r.gen_range(0..open.len())];
                state.step(&inst, (a / nn, a % nn), op, None).unwrap();
                assert!(is_feasible(&inst, &state.solution, depots));
            }
        }
    }
}

#[test]
fn masked_step_is_rejected() {
    let inst = Instance::generate(6, Problem::Tsp, 1).unwrap();
    let mut st = State::new(&inst, Solution::identity(6), 0).unwrap();
    assert!(st.step(&inst, (2, 2), Operator::TwoOpt, None).is_err());
    st.step(&inst, (1, 3), Operator::TwoOpt, None).unwrap();
    assert!(st.step(&inst, (3, 1), Operator::TwoOpt, None).is_err());
}

#[test]
fn incumbent_tracks_best_and_restart_returns_to_it() {
    let inst = Instance::generate(8, Problem::Tsp, 3).unwrap();
    let mut order: Vec<usize> = (0..8).collect();
    order.shuffle(&mut rng(2));
    let mut st = State::new(&inst, Solution::from_order(order).unwrap(), 0).unwrap();
    let mut r = rng(9);
    let mut best = st.best_cost;
    let mut rewards = 0.0;
    let start = st.best_cost;
    for _ in 0..200 {
        let mask = st.mask(&inst, Operator::TwoOpt).unwrap();
        let open: Vec<usize> = (0..64).filter(|k| !mask[*k]).collect();
        let a = open[r.gen_range(0..open.len())];
        let rew = st.step(&inst, (a / 8, a % 8), Operator::TwoOpt, Some(5)).unwrap();
        assert!(rew >= 0.0);
        rewards += rew;
        best = best.min(st.cost);
        assert!((st.best_cost - best).abs() < 1e-12);
        assert!((tour_length(&inst, &st.best) - st.best_cost).abs() < 1e-9);
        assert!(st.stall < 5);
    }
    // rewards telescope to the total improvement of the incumbent
    assert!((rewards - (start - st.best_cost)).abs() < 1e-9);
}

fn tsp_case() -> impl Strategy<Value = (Vec<[f64; 2]>, Vec<usize>)> {
    (4usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec((0.0f64..1.0, 0.0f64..1.0).prop_map(|(x, y)| [x, y]), n),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn moves_keep_a_permutation_and_exact_delta((coords, order) in tsp_case(), i in 0usize..12, j in 0usize..12) {
        let n = coords.len();
        let (i, j) = (i % n, j % n);
        prop_assume!(i != j);
        let inst = Instance::tsp(coords);
        let sol = Solution::from_order(order).unwrap();
        for op in OPS {
            let next = op.apply(&sol, i, j).unwrap();
            let mut seen = next.order().to_vec();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            for v in 0..n {
                prop_assert_eq!(next.at(next.pos(v)), v);
                prop_assert_eq!(next.pred(next.succ(v)), v);
            }
            let d = op.delta(&inst, &sol, i, j);
            prop_assert!((tour_length(&inst, &sol) + d - length_from_coords(&inst, &next)).abs() < 1e-5);
        }
    }

    #[test]
    fn two_opt_reverses_the_segment((coords, order) in tsp_case(), i in 0usize..12, j in 0usize..12) {
        let n = coords.len();
        let (i, j) = (i % n, j % n);
        prop_assume!(i != j);
        let sol = Solution::from_order(order).unwrap();
        let next = Operator::TwoOpt.apply(&sol, i, j).unwrap();
        // walking from j in the new tour retraces the old i..j segment backwards
        let mut seg = vec![i];
        while *seg.last().unwrap() != j {
            seg.push(sol.succ(*seg.last().unwrap()));
        }
        let mut walk = vec![j];
        for _ in 1..seg.len() {
            walk.push(next.succ(*walk.last().unwrap()));
        }
        seg.reverse();
        prop_assert_eq!(walk, seg);
        let _ = coords;
    }

    #[test]
    fn cvrp_mask_is_exact(n in 3usize..10, seed in 0u64..1000, steps in 0usize..6) {
        let inst = tight_cvrp(n, seed);
        let depots = n;
        let mut r = rng(seed);
        let mut st = State::new(&inst, initial_solution(&inst, InitMode::Random, depots, &mut r).unwrap(), depots).unwrap();
        for _ in 0..steps {
            let mask = st.mask(&inst, Operator::TwoOpt).unwrap();
            let open: Vec<usize> = (0..mask.len()).filter(|k| !mask[*k]).collect();
            let nn = st.node_count();
            let a = open[r.gen_range(0..open.len())];
            st.step(&inst, (a / nn, a % nn), Operator::TwoOpt, None).unwrap();
        }
        for op in OPS {
            let mask = feasibility_mask(&inst, &st.solution, op, st.last_action).unwrap();
            prop_assert_eq!(mask, brute_force_mask(&inst, &st.solution, op, st.last_action, depots));
        }
    }
}
