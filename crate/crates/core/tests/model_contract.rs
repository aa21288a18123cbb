mod common;

use dact::cpe::PositionalMethod;
use dact::env::{default_depots, initial_solution, InitMode, Instance, Operator, Problem, Solution, State};
use dact::model::{Dact, DactConfig};
use dact::numerics::{Graph, Tensor};
use rand::seq::SliceRandom;

fn random_state(problem: Problem, n: usize, seed: u64) -> (Instance, State) {
    let inst = Instance::generate(n, problem, seed).unwrap();
    let depots = if problem == Problem::Cvrp { default_depots(n) } else { 0 };
    let mut r = common::rng(seed);
    let sol = initial_solution(&inst, InitMode::Random, depots, &mut r).unwrap();
    let state = State::new(&inst, sol, depots).unwrap();
    (inst, state)
}

#[test]
fn distribution_contract() {
    for (problem, n) in [(Problem::Tsp, 10), (Problem::Cvrp, 10)] {
        let model = Dact::new(DactConfig::for_problem(problem), 3).unwrap();
        let states: Vec<(Instance, State)> = (0..4).map(|s| random_state(problem, n, s)).collect();
        let nn = states[0].1.node_count();
        let table = model.positional_table(nn).unwrap();
        let items: Vec<(&Instance, &Solution)> = states.iter().map(|(i, s)| (i, &s.solution)).collect();
        let input = model.batch_input(&items, &table).unwrap();
        assert_eq!(input.features.shape(), &[4, nn, problem.feature_dim()]);
        assert_eq!(input.pfe.shape(), &[4, nn, 64]);
        let mask: Vec<bool> = states.iter().flat_map(|(i, s)| s.mask(i, Operator::TwoOpt).unwrap()).collect();
        let (dists, values) = model.evaluate(&input, &mask, true).unwrap();
        assert_eq!(values.len(), 4);
        for d in &dists {
            let total: f64 = d.probs.iter().map(|p| *p as f64).sum();
            assert!((total - 1.0).abs() < 1e-6, "sum {total}");
            for k in 0..nn * nn {
                assert!(d.probs[k] >= 0.0);
                if d.mask[k] {
                    assert_eq!(d.probs[k], 0.0);
                } else {
                    assert!(d.clipped[k].abs() <= 6.0);
                    assert!((d.clipped[k] - 6.0 * d.raw[k].tanh()).abs() < 1e-5);
                }
            }
            let a = (0..nn * nn).find(|k| !d.mask[*k]).unwrap();
            let action = (a / nn, a % nn);
            assert!((d.log_prob(action).exp() - d.prob(action)).abs() < 1e-6);
        }
        // masked pairs are never drawn
        let mut r = common::rng(1);
        for _ in 0..10_000 {
            let ((i, j), _) = dists[0].sample(&mut r).unwrap();
            assert!(!dists[0].mask[i * nn + j]);
        }
    }
}

#[test]
fn parameter_count_near_reference() {
    let model = Dact::new(DactConfig::default(), 0).unwrap();
    let count = model.policy_param_count() as f64;
    assert!((count - 0.29e6).abs() / 0.29e6 <= 0.05, "policy has {count} parameters");
    let ffa = model.store.find("dec.ffa.0.w").unwrap();
    assert_eq!(model.store.get(ffa).value.shape(), &[8, 32]);
}

/// Relabels nodes with `sigma` and checks embeddings move with their nodes
/// while the critic value stays put.
#[test]
fn encoder_equivariance_and_critic_invariance() {
    let model = Dact::new(DactConfig::default(), 11).unwrap();
    let n = 9;
    let (inst, state) = random_state(Problem::Tsp, n, 21);
    let mut sigma: Vec<usize> = (0..n).collect();
    sigma.shuffle(&mut common::rng(4));
    let mut coords = vec![[0.0; 2]; n];
    for v in 0..n {
        coords[sigma[v]] = inst.coords[v];
    }
    let relabeled = Instance::tsp(coords);
    let order: Vec<usize> = state.solution.order().iter().map(|v| sigma[*v]).collect();
    let sol2 = Solution::from_order(order).unwrap();
    let table = model.positional_table(n).unwrap();
    let run = |inst: &Instance, sol: &Solution| {
        let input = model.batch_input(&[(inst, sol)], &table).unwrap();
        let mut g = Graph::no_grad(&model.store);
        let (h, p) = model.encode(&mut g, &input).unwrap();
        let v = model.value(&mut g, h, p).unwrap();
        (g.value(h).clone(), g.value(p).clone(), g.value(v).item())
    };
    let (h1, p1, v1) = run(&inst, &state.solution);
    let (h2, p2, v2) = run(&relabeled, &sol2);
    for v in 0..n {
        for d in 0..64 {
            assert!((h1.data()[v * 64 + d] - h2.data()[sigma[v] * 64 + d]).abs() < 1e-4);
            assert!((p1.data()[v * 64 + d] - p2.data()[sigma[v] * 64 + d]).abs() < 1e-4);
        }
    }
    assert!((v1 - v2).abs() < 1e-5, "{v1} vs {v2}");
}

#[test]
fn encode_is_three_layers_composed() {
    let model = Dact::new(DactConfig::default(), 5).unwrap();
    let (inst, state) = random_state(Problem::Tsp, 7, 2);
    let table = model.positional_table(7).unwrap();
    let input = model.batch_input(&[(&inst, &state.solution)], &table).unwrap();
    let mut g = Graph::no_grad(&model.store);
    let (h, p) = model.encode(&mut g, &input).unwrap();
    let x = g.input(input.features.clone());
    let mut hh = model.policy.embed(&mut g, &model.config, x).unwrap();
    let mut pp = g.input(input.pfe.clone());
    for l in 0..3 {
        (hh, pp) = model.policy.encoder_layer(&mut g, &model.config, l, hh, pp).unwrap();
    }
    assert_eq!(g.value(h), g.value(hh));
    assert_eq!(g.value(p), g.value(pp));
    // layer norm output rows are centred before the affine part (gain 1, offset 0 at init)
    for row in g.value(h).data().chunks(64) {
        assert!(row.iter().sum::<f32>().abs() / 64.0 < 1e-5);
    }
}

#[test]
fn zero_features_embed_to_bias() {
    let model = Dact::new(DactConfig::default(), 5).unwrap();
    let mut g = Graph::no_grad(&model.store);
    let x = g.input(Tensor::zeros(&[1, 4, 2]));
    let h = model.policy.embed(&mut g, &model.config, x).unwrap();
    let rows: Vec<&[f32]> = g.value(h).data().chunks(64).collect();
    let bias = model.store.get(model.store.find("nfe.b").unwrap()).value.data();
    for r in rows {
        assert_eq!(r, bias);
    }
}

#[test]
fn positional_switch_changes_only_pfe() {
    let cpe = Dact::new(DactConfig::default(), 9).unwrap();
    let abs = Dact::new(DactConfig { positional: PositionalMethod::AbsPe, ..DactConfig::default() }, 9).unwrap();
    assert_eq!(cpe.store.len(), abs.store.len());
    for ((_, a), (_, b)) in cpe.store.iter().zip(abs.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let (inst, state) = random_state(Problem::Tsp, 8, 1);
    let i1 = cpe.batch_input(&[(&inst, &state.solution)], &cpe.positional_table(8).unwrap()).unwrap();
    let i2 = abs.batch_input(&[(&inst, &state.solution)], &abs.positional_table(8).unwrap()).unwrap();
    assert_eq!(i1.features, i2.features);
    assert_eq!(i1.pfe.shape(), i2.pfe.shape());
    assert_ne!(i1.pfe, i2.pfe);
}

#[test]
fn reordering_moves_positions_not_nodes() {
    let model = Dact::new(DactConfig::default(), 0).unwrap();
    let inst = Instance::generate(6, Problem::Tsp, 3).unwrap();
    let a = Solution::from_order(vec![0, 1, 2, 3, 4, 5]).unwrap();
    let b = Solution::from_order(vec![2, 0, 1, 3, 5, 4]).unwrap();
    let table = model.positional_table(6).unwrap();
    let ia = model.batch_input(&[(&inst, &a)], &table).unwrap();
    let ib = model.batch_input(&[(&inst, &b)], &table).unwrap();
    for v in 0..6 {
        assert_eq!(&ib.pfe.data()[v * 64..(v + 1) * 64], table.row(b.pos(v)));
        assert_eq!(&ia.pfe.data()[v * 64..(v + 1) * 64], table.row(a.pos(v)));
    }
    // TSP features are the node coordinates, independent of the order
    assert_eq!(ia.features, ib.features);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let model = Dact::new(DactConfig::for_problem(Problem::Cvrp), 13).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let loaded = Dact::load(&path).unwrap();
    let again = dir.path().join("m2.ckpt");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(loaded.config, model.config);

    let bytes = model.to_bytes().unwrap();
    assert!(Dact::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Dact::from_bytes(&extra).is_err());
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(Dact::from_bytes(&bad).is_err());
}

#[test]
fn initialization_is_seeded() {
    let a = Dact::new(DactConfig::default(), 1).unwrap().to_bytes().unwrap();
    let b = Dact::new(DactConfig::default(), 1).unwrap().to_bytes().unwrap();
    let c = Dact::new(DactConfig::default(), 2).unwrap().to_bytes().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

fn tiny_config() -> DactConfig {
    DactConfig {
        dim: 2,
        layers: 1,
        heads: 1,
        key_dim: 2,
        value_dim: 2,
        ffn_hidden: 2,
        compat_dim: 2,
        ffa_hidden: vec![2],
        critic_heads: 1,
        critic_head_dim: 2,
        critic_hidden: vec![3, 2],
        ..DactConfig::default()
    }
}

fn set(model: &mut Dact, name: &str, values: &[f64]) {
    let id = model.store.find(name).unwrap_or_else(|| panic!("{name}"));
    let shape = model.store.get(id).value.shape().to_vec();
    let t = Tensor::new(shape, values.iter().map(|v| *v as f32).collect()).unwrap();
    model.store.set_value(id, t).unwrap();
}

fn two_node_embeddings() -> (Tensor, Tensor) {
    (
        Tensor::new(vec![1, 2, 2], vec![0.5, -1.0, 1.5, 0.25]).unwrap(),
        Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.8, -0.6]).unwrap(),
    )
}

// Frozen outputs of tests/oracles/reference_n2.py.
const ORACLE_ATT_H: [f64; 4] = [1.1374965908672863, 2.18805944926161, 1.385665741268571, 2.2823072651108567];
const ORACLE_ATT_G: [f64; 4] = [0.5640473858934625, -0.08569922803572341, 0.45545273907078493, -0.22425114387509087];
const ORACLE_CRITIC: f64 = -0.03194947713039048;

#[test]
fn two_node_attention_matches_reference() {
    let mut model = Dact::new(tiny_config(), 0).unwrap();
    let weights: [(&str, &[f64]); 10] = [
        ("enc.0.h.q.w", &[1.0, 0.5, -0.5, 1.0]),
        ("enc.0.h.k.w", &[0.3, -0.2, 0.7, 0.4]),
        ("enc.0.h.v.w", &[1.0, 2.0, 0.0, -1.0]),
        ("enc.0.h.vref.w", &[0.5, 0.0, 0.25, 1.0]),
        ("enc.0.h.o.w", &[1.0, 0.0, 0.0, 1.0, 0.5, -0.5, 0.2, 0.3]),
        ("enc.0.g.q.w", &[0.2, 1.0, 1.0, -0.3]),
        ("enc.0.g.k.w", &[-1.0, 0.4, 0.6, 0.9]),
        ("enc.0.g.v.w", &[0.1, 0.2, 0.3, 0.4]),
        ("enc.0.g.vref.w", &[-0.7, 0.5, 0.2, 0.8]),
        ("enc.0.g.o.w", &[0.3, -0.1, 0.9, 0.2, -0.4, 0.6, 0.5, 0.5]),
    ];
    for (name, w) in weights {
        set(&mut model, name, w);
    }
    let (h, p) = two_node_embeddings();
    let mut g = Graph::no_grad(&model.store);
    let (hv, pv) = (g.input(h), g.input(p));
    let (ht, gt) = model.policy.collaborative_attention(&mut g, &model.config, 0, hv, pv).unwrap();
    for (got, want) in g.value(ht).data().iter().zip(ORACLE_ATT_H) {
        assert!((*got as f64 - want).abs() < 1e-5, "{got} vs {want}");
    }
    for (got, want) in g.value(gt).data().iter().zip(ORACLE_ATT_G) {
        assert!((*got as f64 - want).abs() < 1e-5, "{got} vs {want}");
    }
}

#[test]
fn two_node_critic_matches_reference() {
    let mut model = Dact::new(tiny_config(), 0).unwrap();
    let names = [
        "critic.q.w",
        "critic.k.w",
        "critic.v.w",
        "critic.o.w",
        "critic.local.w",
        "critic.local.b",
        "critic.global.w",
        "critic.ffn.0.w",
        "critic.ffn.0.b",
        "critic.ffn.1.w",
        "critic.ffn.1.b",
        "critic.ffn.2.w",
        "critic.ffn.2.b",
    ];
    for (k, name) in names.iter().enumerate() {
        let id = model.store.find(name).unwrap();
        let len = model.store.get(id).value.len();
        let w: Vec<f64> = (0..len).map(|i| 0.5 * (1.3 * (i + 1) as f64 + 0.7 * k as f64).sin()).collect();
        set(&mut model, name, &w);
    }
    assert_eq!(model.critic_ids().len(), names.len());
    let (h, p) = two_node_embeddings();
    let mut g = Graph::no_grad(&model.store);
    let (hv, pv) = (g.input(h), g.input(p));
    let v = model.value(&mut g, hv, pv).unwrap();
    assert_eq!(g.shape(v), &[1]);
    assert!((g.value(v).item() as f64 - ORACLE_CRITIC).abs() < 1e-6);
}
