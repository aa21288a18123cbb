use serde::{Deserialize, Serialize};

use crate::cpe::PositionalMethod;
use crate::env::Problem;
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DactConfig {
    pub problem: Problem,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub ffn_hidden: usize,
    /// Query/key width of each compatibility head in the decoder.
    pub compat_dim: usize,
    pub ffa_hidden: Vec<usize>,
    /// Logit bound: clipped logits are `clip · tanh(raw)`.
    pub clip: f32,
    pub positional: PositionalMethod,
    pub critic_heads: usize,
    pub critic_head_dim: usize,
    pub critic_hidden: Vec<usize>,
}

impl Default for DactConfig {
    fn default() -> Self {
        DactConfig {
            problem: Problem::Tsp,
            dim: 64,
            layers: 3,
            heads: 4,
            key_dim: 16,
            value_dim: 16,
            ffn_hidden: 64,
            compat_dim: 64,
            ffa_hidden: vec![32, 32],
            clip: 6.0,
            positional: PositionalMethod::Cpe,
            critic_heads: 6,
            critic_head_dim: 16,
            critic_hidden: vec![128, 64],
        }
    }
}

impl DactConfig {
    pub fn for_problem(problem: Problem) -> Self {
        DactConfig { problem, ..Self::default() }
    }

    pub fn feature_dim(&self) -> usize {
        self.problem.feature_dim()
    }

    /// Width of the concatenated head outputs fed to the output projection.
    pub fn head_concat_width(&self) -> usize {
        2 * self.heads * self.value_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return invalid(format!("embedding width must be positive and even, got {}", self.dim));
        }
        if [self.layers, self.heads, self.key_dim, self.value_dim, self.ffn_hidden, self.compat_dim].contains(&0) {
            return invalid("layer, head and width settings must be positive");
        }
        if self.critic_heads == 0 || self.critic_head_dim == 0 {
            return invalid("critic heads and head width must be positive");
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return invalid(format!("clip must be positive, got {}", self.clip));
        }
        Ok(())
    }
}
