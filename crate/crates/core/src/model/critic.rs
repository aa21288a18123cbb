use rand::Rng;

use super::config::DactConfig;
use super::layers::{split_heads, Linear, Mlp};
use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Var};

/// State-value network over the concatenated node and positional embeddings.
#[derive(Clone, Debug)]
pub struct CriticNet {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    local: Linear,
    global: Linear,
    head: Mlp,
}

impl CriticNet {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, c: &DactConfig, rng: &mut R) -> Self {
        let width = 2 * c.dim;
        let inner = c.critic_heads * c.critic_head_dim;
        let mut widths = vec![width];
        widths.extend(&c.critic_hidden);
        widths.push(1);
        CriticNet {
            q: Linear::new(store, "critic.q", width, inner, false, rng),
            k: Linear::new(store, "critic.k", width, inner, false, rng),
            v: Linear::new(store, "critic.v", width, inner, false, rng),
            out: Linear::new(store, "critic.o", inner, width, false, rng),
            local: Linear::new(store, "critic.local", width, width, true, rng),
            global: Linear::new(store, "critic.global", width, width, false, rng),
            head: Mlp::new(store, "critic.ffn", &widths, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in [&self.q, &self.k, &self.v, &self.out, &self.local, &self.global] {
            ids.extend(l.ids());
        }
        ids.extend(self.head.ids());
        ids
    }

    /// One value per batch row, shape `[B]`. The embeddings are detached so
    /// the value loss never reaches the policy.
    pub fn value(&self, g: &mut Graph, c: &DactConfig, h: Var, p: Var) -> Result<Var> {
        let h = g.detach(h);
        let p = g.detach(p);
        let e = g.concat_last(&[h, p])?;
        let (heads, d) = (c.critic_heads, c.critic_head_dim);
        let q = self.q.forward(g, e)?;
        let k = self.k.forward(g, e)?;
        let v = self.v.forward(g, e)?;
        let qs = split_heads(g, q, heads, d)?;
        let ks = split_heads(g, k, heads, d)?;
        let vs = split_heads(g, v, heads, d)?;
        let scale = 1.0 / (d as f32).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for t in 0..heads {
            let s = g.bmm(qs[t], ks[t], true)?;
            let s = g.scale(s, scale);
            let a = g.softmax_masked(s, None)?;
            outs.push(g.bmm(a, vs[t], false)?);
        }
        let cat = g.concat_last(&outs)?;
        let att = self.out.forward(g, cat)?;
        let e2 = g.add(e, att)?;
        let loc = self.local.forward(g, e2)?;
        let mean = g.mean_rows(e2)?;
        let glob = self.global.forward(g, mean)?;
        let fused = g.add_rows(loc, glob)?;
        let pooled = g.mean_rows(fused)?;
        let v = self.head.forward(g, pooled)?;
        let b = g.shape(v)[0];
        g.reshape(v, vec![b])
    }
}
