//! The actor (dual-aspect encoder plus pairwise decoder), the critic, and
//! their checkpoint container.

mod checkpoint;
mod config;
mod critic;
mod dist;
mod layers;
mod policy;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::DactConfig;
pub use critic::CriticNet;
pub use dist::{sample_index, ActionDistribution};
pub use policy::{DecoderOutput, HeadAttention, PolicyNet};

use crate::cpe::{build_table, PositionalTable};
use crate::env::{Instance, Solution};
use crate::error::{shape_err, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Network inputs for a batch of states sharing one node count.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub batch: usize,
    pub n: usize,
    /// `[B, N, F]` node features.
    pub features: Tensor,
    /// `[B, N, dim]` positional rows, looked up by each node's position.
    pub pfe: Tensor,
}

/// Policy and critic with all their weights in one store.
#[derive(Clone, Debug)]
pub struct Dact {
    pub config: DactConfig,
    pub store: ParamStore,
    pub policy: PolicyNet,
    pub critic: CriticNet,
    policy_ids: Vec<ParamId>,
    critic_ids: Vec<ParamId>,
}

impl Dact {
    pub fn new(config: DactConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let policy = PolicyNet::new(&mut store, &config, &mut rng);
        let critic = CriticNet::new(&mut store, &config, &mut rng);
        let policy_ids = policy.param_ids();
        let critic_ids = critic.param_ids();
        Ok(Dact { config, store, policy, critic, policy_ids, critic_ids })
    }

    pub fn policy_ids(&self) -> &[ParamId] {
        &self.policy_ids
    }

    pub fn critic_ids(&self) -> &[ParamId] {
        &self.critic_ids
    }

    pub fn policy_param_count(&self) -> usize {
        self.store.num_elements(&self.policy_ids)
    }

    pub fn critic_param_count(&self) -> usize {
        self.store.num_elements(&self.critic_ids)
    }

    /// Positional table for solutions of `n` nodes under this configuration.
    pub fn positional_table(&self, n: usize) -> Result<PositionalTable> {
        build_table(n, self.config.dim, self.config.positional, None)
    }

    /// Stacks the features and positional rows of several states.
    pub fn batch_input(&self, items: &[(&Instance, &Solution)], table: &PositionalTable) -> Result<BatchInput> {
        let Some((_, first)) = items.first() else {
            return shape_err("empty batch");
        };
        let n = first.len();
        let (f, dim) = (self.config.feature_dim(), self.config.dim);
        if table.n != n || table.dim != dim {
            return shape_err(format!("positional table {}x{} for {n} nodes of width {dim}", table.n, table.dim));
        }
        let mut features = Vec::with_capacity(items.len() * n * f);
        let mut pfe = Vec::with_capacity(items.len() * n * dim);
        for (inst, sol) in items {
            if sol.len() != n || inst.problem != self.config.problem {
                return shape_err("batch mixes node counts or problem types");
            }
            features.extend(crate::env::features(inst, sol));
            for v in 0..n {
                pfe.extend_from_slice(table.row(sol.pos(v)));
            }
        }
        let b = items.len();
        Ok(BatchInput {
            batch: b,
            n,
            features: Tensor::new(vec![b, n, f], features)?,
            pfe: Tensor::new(vec![b, n, dim], pfe)?,
        })
    }

    /// Encoder outputs `(H, G)`, each `[B,N,dim]`.
    pub fn encode(&self, g: &mut Graph, input: &BatchInput) -> Result<(Var, Var)> {
        let x = g.input(input.features.clone());
        let p = g.input(input.pfe.clone());
        self.policy.encode(g, &self.config, x, p)
    }

    pub fn decode(&self, g: &mut Graph, h: Var, p: Var, mask: &[bool]) -> Result<DecoderOutput> {
        self.policy.decode(g, &self.config, h, p, mask)
    }

    pub fn value(&self, g: &mut Graph, h: Var, p: Var) -> Result<Var> {
        self.critic.value(g, &self.config, h, p)
    }

    /// Forward pass without gradient tracking: one distribution and one
    /// value per state.
    pub fn evaluate(
        &self,
        input: &BatchInput,
        mask: &[bool],
        with_value: bool,
    ) -> Result<(Vec<ActionDistribution>, Vec<f32>)> {
        let mut g = Graph::no_grad(&self.store);
        let (h, p) = self.encode(&mut g, input)?;
        let out = self.decode(&mut g, h, p, mask)?;
        let values = if with_value {
            let v = self.value(&mut g, h, p)?;
            g.value(v).data().to_vec()
        } else {
            Vec::new()
        };
        let nn = input.n * input.n;
        let (probs, raw, clipped) = (g.value(out.probs).data(), g.value(out.raw).data(), g.value(out.clipped).data());
        let dists = (0..input.batch)
            .map(|b| ActionDistribution {
                n: input.n,
                probs: probs[b * nn..(b + 1) * nn].to_vec(),
                raw: raw[b * nn..(b + 1) * nn].to_vec(),
                clipped: clipped[b * nn..(b + 1) * nn].to_vec(),
                mask: mask[b * nn..(b + 1) * nn].to_vec(),
            })
            .collect();
        Ok((dists, values))
    }

    /// Critic values only.
    pub fn values(&self, input: &BatchInput) -> Result<Vec<f32>> {
        let mut g = Graph::no_grad(&self.store);
        let (h, p) = self.encode(&mut g, input)?;
        let v = self.value(&mut g, h, p)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Encoder attention of every layer and head, `[B,N,N]` tensors.
    pub fn attention(&self, input: &BatchInput) -> Result<Vec<(usize, usize, Tensor, Tensor)>> {
        let mut g = Graph::no_grad(&self.store);
        let x = g.input(input.features.clone());
        let p = g.input(input.pfe.clone());
        let mut trace = Vec::new();
        self.policy.encode_traced(&mut g, &self.config, x, p, Some(&mut trace))?;
        Ok(trace.into_iter().map(|a| (a.layer, a.head, g.value(a.node).clone(), g.value(a.position).clone())).collect())
    }
}
