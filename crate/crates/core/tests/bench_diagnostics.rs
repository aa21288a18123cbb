mod common;

use dact::bench::{
    bucket_report, gap, normalize_instance, parse_benchmark, BenchmarkInstance, DistanceConvention, InstanceRuns,
};
use dact::diagnostics::{attention_by_position, decompose_abs_pe_attention, dump_attention, fused_abs_pe_attention};
use dact::env::{initial_solution, tour_length, InitMode, Instance, Problem};
use dact::model::{Dact, DactConfig};
use proptest::prelude::*;

fn bench_strategy() -> impl Strategy<Value = BenchmarkInstance> {
    (any::<bool>(), 5usize..40, prop::option::of(1.0f64..1e6)).prop_flat_map(|(cvrp, n, optimum)| {
        let coords =
            prop::collection::vec((-500i32..5000, -500i32..5000).prop_map(|(x, y)| [x as f64, y as f64 * 0.5]), n);
        let demands = prop::collection::vec(1u32..50, n - 1);
        (coords, demands).prop_map(move |(coords, d)| {
            let problem = if cvrp { Problem::Cvrp } else { Problem::Tsp };
            let demands = if cvrp { std::iter::once(0).chain(d).collect() } else { Vec::new() };
            BenchmarkInstance {
                name: format!("case{n}"),
                problem,
                coords,
                demands,
                capacity: if cvrp { 100 } else { 0 },
                optimum,
                convention: DistanceConvention::Rounded,
                comment: None,
            }
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn text_round_trip(b in bench_strategy()) {
        let parsed = parse_benchmark(&b.to_text()).unwrap();
        prop_assert_eq!(parsed, b);
    }

    #[test]
    fn normalization_scales_costs_exactly(b in bench_strategy(), seed in 0u64..100) {
        prop_assume!(b.coords.iter().any(|c| *c != b.coords[0]));
        let (inst, scale) = normalize_instance(&b).unwrap();
        prop_assert!(inst.coords.iter().flatten().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
        let depots = if inst.problem == Problem::Cvrp { inst.size() } else { 0 };
        let sol = initial_solution(&inst, InitMode::Random, depots, &mut common::rng(seed)).unwrap();
        let exact = BenchmarkInstance { convention: DistanceConvention::Exact, ..b.clone() };
        let raw = exact.cost(&inst, &sol);
        prop_assert!((scale.to_raw_cost(tour_length(&inst, &sol)) - raw).abs() <= 1e-9 * raw.max(1.0));
    }

    #[test]
    fn gap_is_scale_free(cost in 1.0f64..1e5, opt in 1.0f64..1e5, k in 0.01f64..100.0) {
        let a = gap(cost, opt).unwrap();
        let b = gap(cost * k, opt * k).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert_eq!(gap(opt, opt).unwrap(), 0.0);
    }

    #[test]
    fn best_never_exceeds_average(costs in prop::collection::vec(100.0f64..200.0, 1..12), size in 50usize..201) {
        let report = bucket_report(&[InstanceRuns { name: "x".into(), size, optimum: Some(100.0), costs }]);
        let e = &report.entries[0];
        prop_assert!(e.best_cost <= e.avg_cost + 1e-12);
        prop_assert!(e.best_gap <= e.avg_gap + 1e-12);
        let counted: usize = report.buckets.iter().map(|b| b.count).sum();
        prop_assert_eq!(counted, 1);
    }
}

#[test]
fn instances_without_optimum_are_excluded() {
    let runs = [
        InstanceRuns { name: "a".into(), size: 60, optimum: Some(10.0), costs: vec![11.0, 12.0] },
        InstanceRuns { name: "b".into(), size: 120, optimum: None, costs: vec![5.0] },
    ];
    let report = bucket_report(&runs);
    assert_eq!(report.entries.len(), 1);
    assert_eq!(report.excluded, vec!["b".to_string()]);
    assert!((report.entries[0].avg_gap - 0.15).abs() < 1e-12);
}

#[test]
fn decomposition_matches_fused_scores() {
    let mut r = common::rng(3);
    for _ in 0..20 {
        let m = |rows, cols, r: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..cols).map(|_| rand::Rng::gen_range(r, -2.0..2.0)).collect()).collect()
        };
        let (h, g) = (m(9, 12, &mut r), m(9, 12, &mut r));
        let (wq, wk) = (m(12, 5, &mut r), m(12, 5, &mut r));
        let terms = decompose_abs_pe_attention(&h, &g, &wq, &wk).unwrap();
        let fused = fused_abs_pe_attention(&h, &g, &wq, &wk).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let s: f64 = terms.iter().map(|t| t[i][j]).sum();
                assert!((s - fused[i][j]).abs() < 1e-5);
            }
        }
    }
    let h = vec![vec![1.0; 3]; 2];
    assert!(decompose_abs_pe_attention(&h, &vec![vec![1.0; 2]; 2], &vec![vec![1.0]; 3], &vec![vec![1.0]; 3]).is_err());
}

#[test]
fn attention_dump_has_one_file_per_head_and_aspect() {
    let model = Dact::new(DactConfig::default(), 2).unwrap();
    let inst = Instance::generate(10, Problem::Tsp, 8).unwrap();
    let sol = initial_solution(&inst, InitMode::Random, 0, &mut common::rng(1)).unwrap();
    let maps = attention_by_position(&model, &inst, &sol).unwrap();
    assert_eq!(maps.len(), 3 * 4);
    for (_, _, node, pos) in &maps {
        for m in [node, pos] {
            assert_eq!(m.len(), 10);
            for row in m {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let files = dump_attention(&model, &inst, &sol, dir.path()).unwrap();
    assert_eq!(files.len(), 3 * 4 * 2);
    let text = std::fs::read_to_string(dir.path().join("layer0_head0_position.csv")).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().all(|l| l.split(',').count() == 10));
}
