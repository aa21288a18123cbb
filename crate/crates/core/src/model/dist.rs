use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{invalid, Error, Result};

/// Categorical distribution over the `n × n` node pairs of one state.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub n: usize,
    pub probs: Vec<f32>,
    /// Logits before the tanh clip.
    pub raw: Vec<f32>,
    pub clipped: Vec<f32>,
    pub mask: Vec<bool>,
}

impl ActionDistribution {
    pub fn prob(&self, action: (usize, usize)) -> f32 {
        self.probs[action.0 * self.n + action.1]
    }

    pub fn log_prob(&self, action: (usize, usize)) -> f32 {
        self.prob(action).ln()
    }

    /// Draws a pair; masked pairs carry zero weight and are never returned.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<((usize, usize), f32)> {
        let k = sample_index(&self.probs, rng)?;
        let action = (k / self.n, k % self.n);
        Ok((action, self.log_prob(action)))
    }

    pub fn greedy(&self) -> (usize, usize) {
        let k = self.probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| k).unwrap_or(0);
        (k / self.n, k % self.n)
    }
}

/// Index drawn with probability proportional to `weights`.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f32], rng: &mut R) -> Result<usize> {
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("action probabilities".into()));
    }
    match WeightedIndex::new(weights) {
        Ok(d) => Ok(d.sample(rng)),
        Err(e) => invalid(format!("cannot sample: {e}")),
    }
}
