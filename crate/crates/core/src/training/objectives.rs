use crate::error::{shape_err, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Logistic curve used by the curriculum schedule.
fn sigmoid_epoch(epoch: f64, epochs: f64, kappa: f64) -> f64 {
    1.0 / (1.0 + (-kappa * (epoch - epochs / 2.0)).exp())
}

/// Curriculum warm-up length before flooring.
pub fn cl_init_steps_exact(epoch: usize, epochs: usize, xi: f64, kappa: f64) -> f64 {
    let (e, big_e) = (epoch as f64, epochs as f64);
    let s0 = sigmoid_epoch(0.0, big_e, kappa);
    let ratio = (sigmoid_epoch(e, big_e, kappa) - s0) / (sigmoid_epoch(big_e, big_e, kappa) - s0);
    ratio * xi * big_e
}

/// Number of policy steps used to warm-start the initial solutions at `epoch`.
pub fn cl_init_steps(epoch: usize, epochs: usize, xi: f64, kappa: f64) -> usize {
    let v = cl_init_steps_exact(epoch.min(epochs), epochs, xi, kappa);
    // guards against 1 - 1e-16 style round-off at the endpoint
    (v + 1e-9).floor().max(0.0) as usize
}

/// Discounted n-step returns bootstrapped from `v_boot`, and advantages
/// against `values`.
pub fn nstep_returns(rewards: &[f64], values: &[f64], v_boot: f64, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = v_boot;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        returns[t] = acc;
    }
    let adv = returns.iter().zip(values).map(|(r, v)| r - v).collect();
    (returns, adv)
}

/// Clipped surrogate objective (to be maximized).
pub fn ppo_objective(logp_new: &[f64], logp_old: &[f64], adv: &[f64], eps: f64) -> f64 {
    let terms = logp_new.iter().zip(logp_old).zip(adv).map(|((n, o), a)| {
        let rho = (n - o).exp();
        (rho * a).min(rho.clamp(1.0 - eps, 1.0 + eps) * a)
    });
    terms.sum::<f64>() / adv.len().max(1) as f64
}

/// Pessimistic clipped value loss.
pub fn baseline_loss(v_new: &[f64], v_old: &[f64], returns: &[f64], eps: f64) -> f64 {
    let terms = v_new.iter().zip(v_old).zip(returns).map(|((v, o), r)| {
        let clipped = v.clamp(o - eps, o + eps);
        (v - r).abs().max((clipped - r).abs()).powi(2)
    });
    terms.sum::<f64>() / returns.len().max(1) as f64
}

fn constant(g: &mut Graph, data: &[f32]) -> Result<Var> {
    Ok(g.input(Tensor::new(vec![data.len()], data.to_vec())?))
}

/// Graph form of [`ppo_objective`] on a `[R]` vector of new log-probabilities.
pub fn ppo_objective_graph(g: &mut Graph, logp_new: Var, logp_old: &[f32], adv: &[f32], eps: f32) -> Result<Var> {
    if g.shape(logp_new) != [adv.len()] || logp_old.len() != adv.len() {
        return shape_err("ppo objective inputs differ in length");
    }
    let old = constant(g, logp_old)?;
    let a = constant(g, adv)?;
    let diff = g.sub(logp_new, old)?;
    let rho = g.exp(diff);
    let plain = g.mul(rho, a)?;
    let n = adv.len();
    let clipped_rho = g.clamp(rho, vec![1.0 - eps; n], vec![1.0 + eps; n])?;
    let clipped = g.mul(clipped_rho, a)?;
    let m = g.min(plain, clipped)?;
    Ok(g.mean(m))
}

/// Graph form of [`baseline_loss`] on a `[R]` vector of new values.
pub fn baseline_loss_graph(g: &mut Graph, v_new: Var, v_old: &[f32], returns: &[f32], eps: f32) -> Result<Var> {
    if g.shape(v_new) != [returns.len()] || v_old.len() != returns.len() {
        return shape_err("value loss inputs differ in length");
    }
    let r = constant(g, returns)?;
    let lo = v_old.iter().map(|o| o - eps).collect();
    let hi = v_old.iter().map(|o| o + eps).collect();
    let clipped = g.clamp(v_new, lo, hi)?;
    let d1 = g.sub(v_new, r)?;
    let d1 = g.abs(d1);
    let d2 = g.sub(clipped, r)?;
    let d2 = g.abs(d2);
    let m = g.max(d1, d2)?;
    let sq = g.square(m);
    Ok(g.mean(sq))
}
