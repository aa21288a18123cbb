#![allow(dead_code)]

use dact::env::{apply_2opt, tour_length, Instance, Operator, Solution, State};
use dact::model::{Dact, DactConfig};
use dact::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use dact::training::{segment_forward, segment_input, segment_objective, segment_targets, Segment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `||a - n|| / max(||a||, ||n||)`, with a small floor.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-6)
}

/// Checks the gradient of `sum(w ⊙ build(inputs))` for random fixed `w`
/// against central differences and returns the worst relative error over
/// the inputs.
pub fn fd_check(inputs: Vec<Tensor>, h: f32, build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs.into_iter().enumerate().map(|(k, t)| store.add(format!("x{k}"), t)).collect();
    let mut r = rng(99);
    let weights = {
        let mut g = Graph::no_grad(&store);
        let vars: Vec<Var> = ids.iter().map(|id| g.param(*id)).collect();
        let out = build(&mut g, &vars);
        uniform(&mut r, g.shape(out), -1.0, 1.0)
    };
    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::no_grad(store);
        let vars: Vec<Var> = ids.iter().map(|id| g.param(*id)).collect();
        let out = build(&mut g, &vars);
        g.value(out).data().iter().zip(weights.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
    };
    let grads = {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = ids.iter().map(|id| g.param(*id)).collect();
        let out = build(&mut g, &vars);
        let w = g.input(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap()
    };
    let mut worst: f64 = 0.0;
    for id in &ids {
        let analytic: Vec<f64> = match grads.get(*id) {
            Some(gr) => gr.iter().map(|v| *v as f64).collect(),
            None => vec![0.0; store.get(*id).value.len()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = store.get(*id).value.data()[i];
            store.get_mut(*id).value.data_mut()[i] = orig + h;
            let up = eval(&store);
            store.get_mut(*id).value.data_mut()[i] = orig - h;
            let down = eval(&store);
            store.get_mut(*id).value.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h as f64));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Values in ±[margin, 1] so kinks at zero stay out of reach of the probe.
fn away_from_zero(seed: u64, shape: &[usize], margin: f32) -> Tensor {
    let mut r = rng(seed);
    let mut t = uniform(&mut r, shape, margin, 1.0);
    for v in t.data_mut() {
        if r.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn u(seed: u64, shape: &[usize]) -> Tensor {
    uniform(&mut rng(seed), shape, -1.0, 1.0)
}

/// Finite-difference relative error of every differentiable graph op.
pub fn op_gradient_errors(h: f32) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: Vec<Tensor>, build: &dyn Fn(&mut Graph, &[Var]) -> Var| {
        out.push((name, fd_check(inputs, h, build)));
    };
    check("linear", vec![u(1, &[2, 3, 4]), u(2, &[4, 5]), u(3, &[5])], &|g, v| {
        g.linear(v[0], v[1], Some(v[2])).unwrap()
    });
    check("linear_nobias", vec![u(4, &[3, 4]), u(5, &[4, 2])], &|g, v| g.linear(v[0], v[1], None).unwrap());
    check("bmm", vec![u(6, &[2, 3, 4]), u(7, &[2, 4, 5])], &|g, v| g.bmm(v[0], v[1], false).unwrap());
    check("bmm_t", vec![u(8, &[2, 3, 4]), u(9, &[2, 5, 4])], &|g, v| g.bmm(v[0], v[1], true).unwrap());

    let a = u(10, &[3, 4]);
    let b = u(11, &[3, 4]);
    check("add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]).unwrap());
    check("sub", vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]).unwrap());
    check("mul", vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]).unwrap());
    let gap = away_from_zero(12, &[3, 4], 0.1);
    let shifted =
        Tensor::new(a.shape().to_vec(), a.data().iter().zip(gap.data()).map(|(x, d)| x + d).collect()).unwrap();
    check("min", vec![a.clone(), shifted.clone()], &|g, v| g.min(v[0], v[1]).unwrap());
    check("max", vec![a.clone(), shifted], &|g, v| g.max(v[0], v[1]).unwrap());
    check("add_rows", vec![u(13, &[2, 3, 4]), u(14, &[2, 1, 4])], &|g, v| g.add_rows(v[0], v[1]).unwrap());

    let x = u(20, &[2, 5]);
    check("scale", vec![x.clone()], &|g, v| g.scale(v[0], -1.7));
    check("tanh", vec![x.clone()], &|g, v| g.tanh(v[0]));
    check("exp", vec![x.clone()], &|g, v| g.exp(v[0]));
    check("square", vec![x], &|g, v| g.square(v[0]));
    check("ln", vec![uniform(&mut rng(21), &[2, 5], 0.5, 2.0)], &|g, v| g.ln(v[0]));
    check("relu", vec![away_from_zero(22, &[2, 5], 0.05)], &|g, v| g.relu(v[0]));
    check("abs", vec![away_from_zero(23, &[2, 5], 0.05)], &|g, v| g.abs(v[0]));
    // bounds sit 0.05 away from every value: some entries inside, some clipped
    let x = u(24, &[10]);
    let lo: Vec<f32> = x.data().iter().enumerate().map(|(i, v)| if i % 3 == 0 { v + 0.05 } else { v - 0.5 }).collect();
    let hi: Vec<f32> = x.data().iter().enumerate().map(|(i, v)| if i % 3 == 1 { v - 0.05 } else { v + 0.5 }).collect();
    check("clamp", vec![x], &move |g, v| g.clamp(v[0], lo.clone(), hi.clone()).unwrap());

    check("softmax", vec![u(30, &[3, 5])], &|g, v| g.softmax_masked(v[0], None).unwrap());
    let mask: Vec<bool> = (0..15).map(|k| k % 4 == 1).collect();
    check("softmax_masked", vec![u(31, &[3, 5])], &move |g, v| g.softmax_masked(v[0], Some(&mask)).unwrap());
    check("layer_norm", vec![u(32, &[2, 3, 6]), u(33, &[6]), u(34, &[6])], &|g, v| {
        g.layer_norm(v[0], v[1], v[2]).unwrap()
    });

    check("slice_last", vec![u(40, &[2, 3, 6])], &|g, v| g.slice_last(v[0], 2, 3).unwrap());
    check("concat_last", vec![u(41, &[2, 3]), u(42, &[2, 4])], &|g, v| g.concat_last(&[v[0], v[1]]).unwrap());
    check("stack_last", vec![u(43, &[2, 3]), u(44, &[2, 3])], &|g, v| g.stack_last(&[v[0], v[1]]).unwrap());
    check("slice_outer", vec![u(45, &[4, 2, 3])], &|g, v| g.slice_outer(v[0], 1, 2).unwrap());
    check("mean_rows", vec![u(46, &[2, 4, 3])], &|g, v| g.mean_rows(v[0]).unwrap());
    check("reshape", vec![u(47, &[2, 6])], &|g, v| g.reshape(v[0], vec![3, 4]).unwrap());
    check("pick", vec![u(48, &[3, 4])], &|g, v| g.pick(v[0], &[1, 0, 3]).unwrap());
    check("mean", vec![u(49, &[3, 4])], &|g, v| g.mean(v[0]));
    check("sum", vec![u(50, &[3, 4])], &|g, v| g.sum(v[0]));
    // distinct values 0.1 apart keep the row maximum stable under the probe
    let mut vals: Vec<f32> = (0..24).map(|k| k as f32 * 0.1).collect();
    rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut rng(51));
    check("max_rows", vec![Tensor::new(vec![2, 4, 3], vals).unwrap()], &|g, v| g.max_rows(v[0]).unwrap());
    out
}

/// A short rollout on `instances` collected with a fixed random policy, in
/// the layout the trainer uses.
pub fn random_segment(model: &Dact, instances: &[Instance], n_step: usize, seed: u64) -> Segment {
    let mut r = rng(seed);
    let op = Operator::TwoOpt;
    let mut states: Vec<State> = instances
        .iter()
        .map(|inst| {
            let n = inst.num_locations();
            let mut order: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
            State::new(inst, Solution::from_order(order).unwrap(), 0).unwrap()
        })
        .collect();
    let n = states[0].node_count();
    let _ = model;
    let mut seg = Segment { solutions: Vec::new(), masks: Vec::new(), actions: Vec::new(), rewards: Vec::new() };
    for _ in 0..n_step {
        seg.solutions.push(states.iter().map(|s| s.solution.clone()).collect());
        let mut rewards = Vec::new();
        for (st, inst) in states.iter_mut().zip(instances) {
            let mask = st.mask(inst, op).unwrap();
            let open: Vec<usize> = (0..n * n).filter(|k| !mask[*k]).collect();
            let a = open[r.gen_range(0..open.len())];
            rewards.push(st.step(inst, (a / n, a % n), op, None).unwrap());
            seg.masks.extend(mask);
            seg.actions.push(a);
        }
        seg.rewards.push(rewards);
    }
    seg.solutions.push(states.iter().map(|s| s.solution.clone()).collect());
    seg
}

/// Central-difference check of the PPO loss on selected parameters. The
/// critic sees a detached encoder output, so policy parameters are probed
/// against the policy term and critic parameters against the value loss.
/// The step along the normalised gradient is `delta / |g|`, so every probe
/// moves the loss by about `delta`. Returns `(name, relative error)`.
pub fn policy_loss_fd(n: usize, probes: &[&str], delta: f64) -> Vec<(String, f64)> {
    let mut model = Dact::new(DactConfig::default(), 7).unwrap();
    let instances: Vec<Instance> =
        (0..2).map(|s| Instance::generate(n, dact::env::Problem::Tsp, 40 + s).unwrap()).collect();
    let refs: Vec<&Instance> = instances.iter().collect();
    let seg = random_segment(&model, &instances, 2, 5);
    let table = model.positional_table(n).unwrap();
    let input = segment_input(&model, &refs, &seg, &table).unwrap();
    let rows = seg.actions.len();
    let (logp_old, v_old, returns, adv) = {
        let mut g = Graph::no_grad(&model.store);
        let fwd = segment_forward(&model, &mut g, &input, &seg).unwrap();
        let (ret, adv) = segment_targets(&seg, &fwd.values, 0.999);
        (g.value(fwd.logp).data().to_vec(), fwd.values[..rows].to_vec(), ret, adv)
    };
    let loss_of = |store: &ParamStore, model: &Dact, critic: bool| -> f64 {
        let mut g = Graph::no_grad(store);
        let fwd = segment_forward(model, &mut g, &input, &seg).unwrap();
        let (_, obj, vloss) = segment_objective(&mut g, &fwd, &logp_old, &v_old, &returns, &adv, 0.1).unwrap();
        if critic {
            g.value(vloss).item() as f64
        } else {
            -(g.value(obj).item() as f64)
        }
    };
    let grads = {
        let mut g = Graph::new(&model.store);
        let fwd = segment_forward(&model, &mut g, &input, &seg).unwrap();
        let (total, _, _) = segment_objective(&mut g, &fwd, &logp_old, &v_old, &returns, &adv, 0.1).unwrap();
        g.backward(total).unwrap()
    };
    let mut out = Vec::new();
    for name in probes {
        let id = model.store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let critic = name.starts_with("critic.");
        let full: Vec<f64> = grads.get(id).map(|g| g.iter().map(|v| *v as f64).collect()).unwrap_or_default();
        let norm = full.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0, "no gradient reaches {name}");
        let h = delta / norm;
        // directional derivative along the normalised gradient equals its norm
        let orig = model.store.get(id).value.clone();
        let shifted = |sign: f64| {
            let data = orig.data().iter().zip(&full).map(|(x, d)| x + (sign * h * d / norm) as f32).collect();
            Tensor::new(orig.shape().to_vec(), data).unwrap()
        };
        model.store.set_value(id, shifted(1.0)).unwrap();
        let up = loss_of(&model.store.clone(), &model, critic);
        model.store.set_value(id, shifted(-1.0)).unwrap();
        let down = loss_of(&model.store.clone(), &model, critic);
        model.store.set_value(id, orig).unwrap();
        let numeric = (up - down) / (2.0 * h);
        out.push((name.to_string(), (numeric - norm).abs() / norm));
    }
    out
}
/// Exhaustive TSP optimum with node 0 fixed first.
pub fn brute_force_tsp(inst: &Instance) -> f64 {
    let n = inst.num_locations();
    let mut rest: Vec<usize> = (1..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut rest, 0, &mut |perm| {
        let mut order = vec![0];
        order.extend_from_slice(perm);
        let len = tour_length(inst, &Solution::from_order(order).unwrap());
        best = best.min(len);
    });
    best
}

fn permute(v: &mut [usize], k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

/// Best-improvement 2-opt until no move shortens the tour.
pub fn two_opt_descent(inst: &Instance, start: &Solution) -> (Solution, f64) {
    let mut sol = start.clone();
    let n = sol.len();
    let mut cost = tour_length(inst, &sol);
    loop {
        let mut best = (0.0, None);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = Operator::TwoOpt.delta(inst, &sol, i, j);
                    if d < best.0 - 1e-12 {
                        best = (d, Some((i, j)));
                    }
                }
            }
        }
        match best.1 {
            Some((i, j)) => {
                sol = apply_2opt(&sol, i, j).unwrap();
                cost = tour_length(inst, &sol);
            }
            None => return (sol, cost),
        }
    }
}

/// Held-Karp dynamic program over subsets, an independent route to the
/// exact TSP optimum.
pub fn held_karp(inst: &Instance) -> f64 {
    let n = inst.num_locations();
    if n <= 3 {
        return tour_length(inst, &Solution::identity(n));
    }
    let full = 1usize << (n - 1);
    let mut dp = vec![f64::INFINITY; full * (n - 1)];
    for v in 1..n {
        dp[(1 << (v - 1)) * (n - 1) + (v - 1)] = inst.dist(0, v);
    }
    for set in 1..full {
        for last in 1..n {
            let cur = dp[set * (n - 1) + last - 1];
            if set & (1 << (last - 1)) == 0 || !cur.is_finite() {
                continue;
            }
            for next in 1..n {
                if set & (1 << (next - 1)) != 0 {
                    continue;
                }
                let s2 = set | (1 << (next - 1));
                let slot = &mut dp[s2 * (n - 1) + next - 1];
                *slot = slot.min(cur + inst.dist(last, next));
            }
        }
    }
    (1..n).map(|v| dp[(full - 1) * (n - 1) + v - 1] + inst.dist(v, 0)).fold(f64::INFINITY, f64::min)
}

/// Tour length straight from coordinates, bypassing the environment.
pub fn length_from_coords(inst: &Instance, sol: &Solution) -> f64 {
    let order = sol.order();
    (0..order.len())
        .map(|k| {
            let a = inst.coord(order[k]);
            let b = inst.coord(order[(k + 1) % order.len()]);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        })
        .sum()
}

/// Mask by applying every move and checking capacities directly.
pub fn brute_force_mask(
    inst: &Instance,
    sol: &Solution,
    op: Operator,
    last: Option<(usize, usize)>,
    depots: usize,
) -> Vec<bool> {
    let n = sol.len();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let tabu = last.is_some_and(|(a, b)| (a, b) == (i, j) || (b, a) == (i, j));
            mask[i * n + j] = i == j || tabu || !dact::env::is_feasible(inst, &op.apply(sol, i, j).unwrap(), depots);
        }
    }
    mask
}

/// A CVRP instance with `n` customers and a tight capacity so masks bind.
pub fn tight_cvrp(n: usize, seed: u64) -> Instance {
    let mut r = rng(seed);
    let coords = (0..=n).map(|_| [r.gen::<f64>(), r.gen::<f64>()]).collect();
    let demands: Vec<u32> = (0..n).map(|_| r.gen_range(1..=9)).collect();
    let capacity = demands.iter().max().copied().unwrap().max(12);
    Instance::cvrp(coords, &demands, capacity).unwrap()
}
