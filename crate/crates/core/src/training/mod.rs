//! n-step PPO with a curriculum warm start, clipped value loss and
//! per-epoch learning-rate decay.

mod objectives;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use objectives::{
    baseline_loss, baseline_loss_graph, cl_init_steps, cl_init_steps_exact, nstep_returns, ppo_objective,
    ppo_objective_graph,
};

use crate::cpe::PositionalTable;
use crate::env::{default_depots, initial_solution, InitMode, Instance, Operator, Problem, Solution, State};
use crate::error::{invalid, Error, Result};
use crate::inference::{improve_many, rollout, ImproveConfig};
use crate::model::{BatchInput, Dact, DactConfig};
use crate::numerics::{clip_param_grad_norm, Adam, Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub eps: f64,
    pub k_epochs: usize,
    pub gamma: f64,
    pub n_step: usize,
    pub t_train: usize,
    pub epochs: usize,
    pub batches: usize,
    pub batch_size: usize,
    pub lr_policy: f64,
    pub lr_critic: f64,
    pub lr_decay: f64,
    /// Bound on the gradient norm of each parameter tensor.
    pub grad_clip: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self::for_problem(Problem::Tsp, 20)
    }
}

/// Per-tensor gradient norm bound for a training size.
pub fn default_grad_clip(size: usize) -> f64 {
    match size {
        0..=20 => 0.04,
        21..=50 => 0.2,
        _ => 0.45,
    }
}

impl PpoConfig {
    pub fn for_problem(problem: Problem, size: usize) -> Self {
        let (n_step, t_train) = match problem {
            Problem::Tsp => (4, 200),
            Problem::Cvrp => (5, 250),
        };
        let batch_size = if problem == Problem::Cvrp && size >= 100 { 512 } else { 600 };
        PpoConfig {
            eps: 0.1,
            k_epochs: 3,
            gamma: 0.999,
            n_step,
            t_train,
            epochs: 200,
            batches: 20,
            batch_size,
            lr_policy: 1e-4,
            lr_critic: 3e-5,
            lr_decay: 0.985,
            grad_clip: default_grad_clip(size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return invalid(format!("eps must lie in (0, 1), got {}", self.eps));
        }
        let counts = [self.k_epochs, self.n_step, self.t_train, self.epochs, self.batches, self.batch_size];
        if counts.contains(&0) {
            return invalid("step, epoch and batch counts must be positive");
        }
        let rates = [self.gamma, self.lr_policy, self.lr_critic, self.lr_decay, self.grad_clip];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return invalid("rates and clip bounds must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClConfig {
    pub enabled: bool,
    pub kappa: f64,
    pub xi: f64,
}

/// Curriculum step-limit coefficient by problem and size.
pub fn default_xi(problem: Problem, size: usize) -> f64 {
    match (problem, size) {
        (Problem::Tsp, 0..=20) => 0.25,
        (Problem::Tsp, 21..=50) => 2.0,
        (Problem::Tsp, _) => 10.0,
        (Problem::Cvrp, 0..=20) => 1.0,
        (Problem::Cvrp, 21..=50) => 4.0,
        (Problem::Cvrp, _) => 12.5,
    }
}

impl Default for ClConfig {
    fn default() -> Self {
        Self::for_problem(Problem::Tsp, 20)
    }
}

impl ClConfig {
    pub fn for_problem(problem: Problem, size: usize) -> Self {
        ClConfig { enabled: true, kappa: 0.2, xi: default_xi(problem, size) }
    }

    pub fn steps_for_epoch(&self, epoch: usize, epochs: usize) -> usize {
        if self.enabled {
            cl_init_steps(epoch, epochs, self.xi, self.kappa)
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    pub size: usize,
    pub seed: u64,
    pub steps: usize,
    pub init: InitMode,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig { size: 100, seed: 1_000_003, steps: 200, init: InitMode::Random }
    }
}

/// Everything a training run needs; serializes to the JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub problem: Problem,
    pub size: usize,
    pub depots: Option<usize>,
    pub operator: Operator,
    pub seed: u64,
    pub ppo: PpoConfig,
    pub cl: ClConfig,
    pub model: DactConfig,
    pub validation: ValidationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_problem(Problem::Tsp, 20)
    }
}

impl TrainConfig {
    pub fn for_problem(problem: Problem, size: usize) -> Self {
        TrainConfig {
            problem,
            size,
            depots: None,
            operator: Operator::TwoOpt,
            seed: 0,
            ppo: PpoConfig::for_problem(problem, size),
            cl: ClConfig::for_problem(problem, size),
            model: DactConfig::for_problem(problem),
            validation: ValidationConfig::default(),
        }
    }

    pub fn depot_count(&self) -> usize {
        match self.problem {
            Problem::Tsp => 0,
            Problem::Cvrp => self.depots.unwrap_or_else(|| default_depots(self.size)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.model.validate()?;
        if self.model.problem != self.problem {
            return invalid("model configuration is for a different problem");
        }
        if self.size < 4 {
            return invalid(format!("training size must be at least 4, got {}", self.size));
        }
        Ok(())
    }

    pub fn validation_set(&self) -> Result<Vec<Instance>> {
        (0..self.validation.size as u64)
            .map(|k| Instance::generate(self.size, self.problem, self.validation.seed.wrapping_add(k)))
            .collect()
    }
}

/// One line of the metrics log. Batch rows carry the losses; epoch rows
/// carry the validation cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppo_obj: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_loss: Option<f64>,
    pub mean_best_cost: f64,
    pub lr: f64,
    pub lr_critic: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_init: Option<usize>,
    #[serde(default)]
    pub validation: bool,
}

pub struct TrainOutcome {
    pub model: Dact,
    pub metrics: Vec<MetricsRow>,
}

/// Improves the solutions with the current policy for `steps` sampled
/// moves (no restarts) and returns the incumbents as fresh states.
pub fn warm_start(
    model: &Dact,
    instances: &[&Instance],
    states: Vec<State>,
    steps: usize,
    operator: Operator,
    rngs: &mut [ChaCha8Rng],
    depots: usize,
) -> Result<Vec<State>> {
    if steps == 0 {
        return Ok(states);
    }
    let mut states = states;
    let cfg = ImproveConfig { steps, restart: None, operator, ..Default::default() };
    rollout(model, instances, &mut states, &cfg, rngs)?;
    states.into_iter().zip(instances).map(|(s, inst)| State::new(inst, s.best, depots)).collect()
}

/// Experience of one n-step segment, stored step-major.
#[derive(Clone, Debug)]
pub struct Segment {
    /// `n + 1` snapshots; the last one bootstraps the returns.
    pub solutions: Vec<Vec<Solution>>,
    /// Masks of the first `n` snapshots, `N²` per state.
    pub masks: Vec<bool>,
    /// Flattened `i·N + j` action per state and step.
    pub actions: Vec<usize>,
    /// `rewards[t][b]`.
    pub rewards: Vec<Vec<f64>>,
}

impl Segment {
    pub fn steps(&self) -> usize {
        self.rewards.len()
    }
}

/// Graph handles from one forward pass over a segment.
pub struct SegmentForward {
    /// `[n·B]` log-probabilities of the taken actions.
    pub logp: Var,
    /// `[n·B]` critic values of the first `n` snapshots.
    pub v_cur: Var,
    /// Critic values of all `n + 1` snapshots, detached.
    pub values: Vec<f32>,
}

/// Policy and critic forward over every snapshot of `seg`. `input` stacks the
/// snapshots step-major.
pub fn segment_forward(model: &Dact, g: &mut Graph, input: &BatchInput, seg: &Segment) -> Result<SegmentForward> {
    let rows = seg.actions.len();
    let (h, p) = model.encode(g, input)?;
    let hp = g.slice_outer(h, 0, rows)?;
    let pp = g.slice_outer(p, 0, rows)?;
    let out = model.decode(g, hp, pp, &seg.masks)?;
    let picked = g.pick(out.probs, &seg.actions)?;
    let logp = g.ln(picked);
    let all = model.value(g, h, p)?;
    let v_cur = g.slice_outer(all, 0, rows)?;
    let values = g.value(all).data().to_vec();
    Ok(SegmentForward { logp, v_cur, values })
}

/// Stacks every snapshot of `seg` step-major into one batch.
pub fn segment_input(
    model: &Dact,
    instances: &[&Instance],
    seg: &Segment,
    table: &PositionalTable,
) -> Result<BatchInput> {
    let items: Vec<(&Instance, &Solution)> =
        seg.solutions.iter().flat_map(|step| instances.iter().copied().zip(step.iter())).collect();
    model.batch_input(&items, table)
}

/// n-step returns and advantages, step-major, from detached values.
pub fn segment_targets(seg: &Segment, values: &[f32], gamma: f64) -> (Vec<f32>, Vec<f32>) {
    let n_step = seg.steps();
    let nb = seg.rewards.first().map_or(0, Vec::len);
    let rows = nb * n_step;
    let mut returns = vec![0f32; rows];
    let mut adv = vec![0f32; rows];
    for b in 0..nb {
        let rewards: Vec<f64> = (0..n_step).map(|t| seg.rewards[t][b]).collect();
        let v: Vec<f64> = (0..n_step).map(|t| values[t * nb + b] as f64).collect();
        let (r, a) = nstep_returns(&rewards, &v, values[rows + b] as f64, gamma);
        for t in 0..n_step {
            returns[t * nb + b] = r[t] as f32;
            adv[t * nb + b] = a[t] as f32;
        }
    }
    (returns, adv)
}

/// Returns `(L_BL - J_PPO, J_PPO, L_BL)`.
pub fn segment_objective(
    g: &mut Graph,
    fwd: &SegmentForward,
    logp_old: &[f32],
    v_old: &[f32],
    returns: &[f32],
    adv: &[f32],
    eps: f32,
) -> Result<(Var, Var, Var)> {
    let obj = ppo_objective_graph(g, fwd.logp, logp_old, adv, eps)?;
    let vloss = baseline_loss_graph(g, fwd.v_cur, v_old, returns, eps)?;
    let total = g.sub(vloss, obj)?;
    Ok((total, obj, vloss))
}

struct Trainer<'c> {
    cfg: &'c TrainConfig,
    model: Dact,
    adam_policy: Adam,
    adam_critic: Adam,
    rng: ChaCha8Rng,
    table: PositionalTable,
    out_dir: Option<&'c Path>,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    epoch: usize,
    batch: usize,
    segment: usize,
    k: usize,
    ppo_obj: f64,
    value_loss: f64,
    instance_seeds: &'a [u64],
}

impl Trainer<'_> {
    fn collect(&mut self, instances: &[&Instance], states: &mut [State], rngs: &mut [ChaCha8Rng]) -> Result<Segment> {
        let n_step = self.cfg.ppo.n_step;
        let op = self.cfg.operator;
        let mut seg = Segment {
            solutions: Vec::with_capacity(n_step + 1),
            masks: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::with_capacity(n_step),
        };
        for _ in 0..n_step {
            let sols: Vec<Solution> = states.iter().map(|s| s.solution.clone()).collect();
            let items: Vec<(&Instance, &Solution)> = instances.iter().copied().zip(sols.iter()).collect();
            let input = self.model.batch_input(&items, &self.table)?;
            let mut mask = Vec::with_capacity(input.batch * input.n * input.n);
            for (inst, st) in instances.iter().zip(states.iter()) {
                mask.extend(st.mask(inst, op)?);
            }
            let (dists, _) = self.model.evaluate(&input, &mask, false)?;
            let mut rewards = Vec::with_capacity(states.len());
            for ((dist, st), (inst, rng)) in
                dists.iter().zip(states.iter_mut()).zip(instances.iter().zip(rngs.iter_mut()))
            {
                let (action, _) = dist.sample(rng)?;
                rewards.push(st.step(inst, action, op, None)?);
                seg.actions.push(action.0 * input.n + action.1);
            }
            seg.masks.extend(mask);
            seg.rewards.push(rewards);
            seg.solutions.push(sols);
        }
        seg.solutions.push(states.iter().map(|s| s.solution.clone()).collect());
        Ok(seg)
    }

    /// K update epochs on one segment; returns the mean objective and value loss.
    fn update(
        &mut self,
        instances: &[&Instance],
        seg: &Segment,
        at: (usize, usize, usize),
        seeds: &[u64],
    ) -> Result<(f64, f64)> {
        let ppo = &self.cfg.ppo;
        let rows = seg.actions.len();
        let input = segment_input(&self.model, instances, seg, &self.table)?;
        let mut logp_old: Vec<f32> = Vec::new();
        let mut v_old: Vec<f32> = Vec::new();
        let (mut obj_sum, mut loss_sum) = (0.0, 0.0);
        for k in 0..ppo.k_epochs {
            let grads = {
                let mut g = Graph::new(&self.model.store);
                let fwd = segment_forward(&self.model, &mut g, &input, seg)?;
                if k == 0 {
                    logp_old = g.value(fwd.logp).data().to_vec();
                    v_old = fwd.values[..rows].to_vec();
                }
                let (returns, adv) = segment_targets(seg, &fwd.values, ppo.gamma);
                let (total, obj, vloss) =
                    segment_objective(&mut g, &fwd, &logp_old, &v_old, &returns, &adv, ppo.eps as f32)?;
                let (o, l) = (g.value(obj).item() as f64, g.value(vloss).item() as f64);
                if !(o.is_finite() && l.is_finite()) {
                    self.dump_non_finite(at, k, o, l, seeds);
                    return Err(Error::NonFinite(format!(
                        "loss at epoch {} batch {} segment {} update {}",
                        at.0, at.1, at.2, k
                    )));
                }
                obj_sum += o;
                loss_sum += l;
                g.backward(total)?
            };
            if grads.iter().any(|(_, d)| d.iter().any(|v| !v.is_finite())) {
                self.dump_non_finite(at, k, f64::NAN, f64::NAN, seeds);
                return Err(Error::NonFinite("gradient".into()));
            }
            let (pid, cid) = (self.model.policy_ids().to_vec(), self.model.critic_ids().to_vec());
            let store = &mut self.model.store;
            store.accumulate(&grads);
            let clip = ppo.grad_clip as f32;
            clip_param_grad_norm(store, &pid, clip);
            clip_param_grad_norm(store, &cid, clip);
            self.adam_policy.step(store, &pid)?;
            self.adam_critic.step(store, &cid)?;
        }
        let k = ppo.k_epochs as f64;
        Ok((obj_sum / k, loss_sum / k))
    }

    fn dump_non_finite(&self, at: (usize, usize, usize), k: usize, ppo_obj: f64, value_loss: f64, seeds: &[u64]) {
        if let Some(dir) = self.out_dir {
            let dump = NonFiniteDump {
                epoch: at.0,
                batch: at.1,
                segment: at.2,
                k,
                ppo_obj,
                value_loss,
                instance_seeds: seeds,
            };
            if let Ok(text) = serde_json::to_string_pretty(&dump) {
                let _ = std::fs::write(dir.join("nonfinite-dump.json"), text);
            }
            let _ = self.model.save(dir.join("nonfinite-model.ckpt"));
        }
    }

    fn run_batch(&mut self, epoch: usize, batch: usize, t_init: usize) -> Result<MetricsRow> {
        let cfg = self.cfg;
        let depots = cfg.depot_count();
        let seeds: Vec<u64> = (0..cfg.ppo.batch_size).map(|_| self.rng.gen()).collect();
        let instances =
            seeds.iter().map(|s| Instance::generate(cfg.size, cfg.problem, *s)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Instance> = instances.iter().collect();
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|_| ChaCha8Rng::seed_from_u64(self.rng.gen())).collect();
        let mut states = Vec::with_capacity(instances.len());
        for (inst, rng) in instances.iter().zip(rngs.iter_mut()) {
            let sol = initial_solution(inst, InitMode::Random, depots, rng)?;
            states.push(State::new(inst, sol, depots)?);
        }
        let mut states = warm_start(&self.model, &refs, states, t_init, cfg.operator, &mut rngs, depots)?;
        let segments = cfg.ppo.t_train.div_ceil(cfg.ppo.n_step);
        let (mut obj, mut loss) = (0.0, 0.0);
        for s in 0..segments {
            let seg = self.collect(&refs, &mut states, &mut rngs)?;
            let (o, l) = self.update(&refs, &seg, (epoch, batch, s), &seeds)?;
            obj += o;
            loss += l;
        }
        let mean_best = states.iter().map(|s| s.best_cost).sum::<f64>() / states.len() as f64;
        Ok(MetricsRow {
            epoch,
            batch: Some(batch),
            ppo_obj: Some(obj / segments as f64),
            value_loss: Some(loss / segments as f64),
            mean_best_cost: mean_best,
            lr: self.adam_policy.lr as f64,
            lr_critic: self.adam_critic.lr as f64,
            t_init: Some(t_init),
            validation: false,
        })
    }

    fn validate(&self, epoch: usize, instances: &[Instance]) -> Result<MetricsRow> {
        let v = &self.cfg.validation;
        let icfg = ImproveConfig {
            steps: v.steps,
            restart: None,
            operator: self.cfg.operator,
            init: v.init,
            depots: self.cfg.depots,
            ..Default::default()
        };
        let seeds: Vec<u64> = (0..instances.len() as u64).map(|k| v.seed.wrapping_add(k)).collect();
        let reports = improve_many(&self.model, instances, &seeds, &icfg)?;
        let mean = reports.iter().map(|r| r.best_cost).sum::<f64>() / reports.len().max(1) as f64;
        Ok(MetricsRow {
            epoch,
            batch: None,
            ppo_obj: None,
            value_loss: None,
            mean_best_cost: mean,
            lr: self.adam_policy.lr as f64,
            lr_critic: self.adam_critic.lr as f64,
            t_init: None,
            validation: true,
        })
    }
}

/// Runs the full training loop. With `out_dir`, metrics are appended to
/// `metrics.jsonl` and a checkpoint is written after every epoch. `on_row`
/// sees every metrics row as it is produced.
pub fn train(
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    init_from: Option<Dact>,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = match init_from {
        Some(m) if m.config != cfg.model => return invalid("initial checkpoint has a different model configuration"),
        Some(m) => m,
        None => Dact::new(cfg.model.clone(), cfg.seed)?,
    };
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let n_nodes = match cfg.problem {
        Problem::Tsp => cfg.size,
        Problem::Cvrp => cfg.size + cfg.depot_count(),
    };
    let mut trainer = Trainer {
        cfg,
        table: model.positional_table(n_nodes)?,
        model,
        adam_policy: Adam::new(cfg.ppo.lr_policy as f32),
        adam_critic: Adam::new(cfg.ppo.lr_critic as f32),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a41),
        out_dir,
    };
    let validation = cfg.validation_set()?;
    let mut metrics = Vec::new();
    let mut emit = |row: MetricsRow, metrics: &mut Vec<MetricsRow>| -> Result<()> {
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&row)?)?;
            f.flush()?;
        }
        on_row(&row);
        metrics.push(row);
        Ok(())
    };
    if !validation.is_empty() {
        let row = trainer.validate(0, &validation)?;
        emit(row, &mut metrics)?;
    }
    for epoch in 1..=cfg.ppo.epochs {
        let t_init = cfg.cl.steps_for_epoch(epoch, cfg.ppo.epochs);
        for batch in 1..=cfg.ppo.batches {
            let row = trainer.run_batch(epoch, batch, t_init)?;
            emit(row, &mut metrics)?;
        }
        trainer.adam_policy.decay(cfg.ppo.lr_decay as f32);
        trainer.adam_critic.decay(cfg.ppo.lr_decay as f32);
        if !validation.is_empty() {
            let row = trainer.validate(epoch, &validation)?;
            emit(row, &mut metrics)?;
        }
        if let Some(dir) = out_dir {
            trainer.model.save(dir.join(format!("epoch-{epoch:03}.ckpt")))?;
            trainer.model.save(dir.join("latest.ckpt"))?;
        }
    }
    Ok(TrainOutcome { model: trainer.model, metrics })
}

/// Validation rows of a metrics log, in epoch order.
pub fn validation_curve(metrics: &[MetricsRow]) -> Vec<(usize, f64)> {
    metrics.iter().filter(|r| r.validation).map(|r| (r.epoch, r.mean_best_cost)).collect()
}
