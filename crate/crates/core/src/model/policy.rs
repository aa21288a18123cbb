use rand::Rng;

use super::config::DactConfig;
use super::layers::{split_heads, LayerNorm, Linear, Mlp};
use crate::error::{shape_err, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Var};

/// Normalized attention of one encoder head, `[B,N,N]` per aspect.
#[derive(Clone, Copy, Debug)]
pub struct HeadAttention {
    pub layer: usize,
    pub head: usize,
    pub node: Var,
    pub position: Var,
}

/// Projections of one aspect inside the collaborative attention.
#[derive(Clone, Debug)]
struct AspectProj {
    q: Linear,
    k: Linear,
    v: Linear,
    v_ref: Linear,
    out: Linear,
}

impl AspectProj {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c: &DactConfig, rng: &mut R) -> Self {
        let (d, m) = (c.dim, c.heads);
        AspectProj {
            q: Linear::new(store, &format!("{name}.q"), d, m * c.key_dim, false, rng),
            k: Linear::new(store, &format!("{name}.k"), d, m * c.key_dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d, m * c.value_dim, false, rng),
            v_ref: Linear::new(store, &format!("{name}.vref"), d, m * c.value_dim, false, rng),
            out: Linear::new(store, &format!("{name}.o"), c.head_concat_width(), d, false, rng),
        }
    }

    fn ids(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.v_ref, &self.out].iter().flat_map(|l| l.ids()).collect()
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    node: AspectProj,
    pos: AspectProj,
    node_norm1: LayerNorm,
    node_norm2: LayerNorm,
    pos_norm1: LayerNorm,
    pos_norm2: LayerNorm,
    node_ffn: Mlp,
    pos_ffn: Mlp,
}

impl EncoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c: &DactConfig, rng: &mut R) -> Self {
        let widths = [c.dim, c.ffn_hidden, c.dim];
        EncoderLayer {
            node: AspectProj::new(store, &format!("{name}.h"), c, rng),
            pos: AspectProj::new(store, &format!("{name}.g"), c, rng),
            node_norm1: LayerNorm::new(store, &format!("{name}.h.ln1"), c.dim),
            node_norm2: LayerNorm::new(store, &format!("{name}.h.ln2"), c.dim),
            pos_norm1: LayerNorm::new(store, &format!("{name}.g.ln1"), c.dim),
            pos_norm2: LayerNorm::new(store, &format!("{name}.g.ln2"), c.dim),
            node_ffn: Mlp::new(store, &format!("{name}.h.ffn"), &widths, rng),
            pos_ffn: Mlp::new(store, &format!("{name}.g.ffn"), &widths, rng),
        }
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.node.ids();
        ids.extend(self.pos.ids());
        for ln in [&self.node_norm1, &self.node_norm2, &self.pos_norm1, &self.pos_norm2] {
            ids.extend(ln.ids());
        }
        ids.extend(self.node_ffn.ids());
        ids.extend(self.pos_ffn.ids());
        ids
    }
}

/// Dual-aspect collaborative attention: each aspect scores itself, then
/// borrows the other aspect's normalized scores as referential weights.
fn dac_attention(
    g: &mut Graph,
    c: &DactConfig,
    node: &AspectProj,
    pos: &AspectProj,
    h: Var,
    p: Var,
    mut record: Option<(&mut Vec<HeadAttention>, usize)>,
) -> Result<(Var, Var)> {
    let (m, dk, dv) = (c.heads, c.key_dim, c.value_dim);
    let scale = 1.0 / (dk as f32).sqrt();
    let scores = |g: &mut Graph, proj: &AspectProj, x: Var| -> Result<Vec<Var>> {
        let q = proj.q.forward(g, x)?;
        let k = proj.k.forward(g, x)?;
        let qs = split_heads(g, q, m, dk)?;
        let ks = split_heads(g, k, m, dk)?;
        qs.into_iter()
            .zip(ks)
            .map(|(q, k)| {
                let s = g.bmm(q, k, true)?;
                let s = g.scale(s, scale);
                g.softmax_masked(s, None)
            })
            .collect()
    };
    let alpha_h = scores(g, node, h)?;
    let alpha_g = scores(g, pos, p)?;
    if let Some((out, layer)) = record.as_mut() {
        for k in 0..m {
            out.push(HeadAttention { layer: *layer, head: k, node: alpha_h[k], position: alpha_g[k] });
        }
    }
    let mix = |g: &mut Graph, proj: &AspectProj, x: Var, own: &[Var], other: &[Var]| -> Result<Var> {
        let v = proj.v.forward(g, x)?;
        let vr = proj.v_ref.forward(g, x)?;
        let vs = split_heads(g, v, m, dv)?;
        let vrs = split_heads(g, vr, m, dv)?;
        let mut parts = Vec::with_capacity(2 * m);
        for k in 0..m {
            parts.push(g.bmm(own[k], vs[k], false)?);
            parts.push(g.bmm(other[k], vrs[k], false)?);
        }
        let cat = g.concat_last(&parts)?;
        proj.out.forward(g, cat)
    };
    let h_att = mix(g, node, h, &alpha_h, &alpha_g)?;
    let g_att = mix(g, pos, p, &alpha_g, &alpha_h)?;
    Ok((h_att, g_att))
}

#[derive(Clone, Debug)]
struct Decoder {
    node_local: Linear,
    node_global: Linear,
    pos_local: Linear,
    pos_global: Linear,
    node_q: Linear,
    node_k: Linear,
    pos_q: Linear,
    pos_k: Linear,
    ffa: Mlp,
}

impl Decoder {
    fn new<R: Rng>(store: &mut ParamStore, c: &DactConfig, rng: &mut R) -> Self {
        let (d, m, dc) = (c.dim, c.heads, c.compat_dim);
        let mut widths = vec![2 * m];
        widths.extend(&c.ffa_hidden);
        widths.push(1);
        Decoder {
            node_local: Linear::new(store, "dec.h.local", d, d, true, rng),
            node_global: Linear::new(store, "dec.h.global", d, d, false, rng),
            pos_local: Linear::new(store, "dec.g.local", d, d, true, rng),
            pos_global: Linear::new(store, "dec.g.global", d, d, false, rng),
            node_q: Linear::new(store, "dec.h.q", d, m * dc, false, rng),
            node_k: Linear::new(store, "dec.h.k", d, m * dc, false, rng),
            pos_q: Linear::new(store, "dec.g.q", d, m * dc, false, rng),
            pos_k: Linear::new(store, "dec.g.k", d, m * dc, false, rng),
            ffa: Mlp::new(store, "dec.ffa", &widths, rng),
        }
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in [
            &self.node_local,
            &self.node_global,
            &self.pos_local,
            &self.pos_global,
            &self.node_q,
            &self.node_k,
            &self.pos_q,
            &self.pos_k,
        ] {
            ids.extend(l.ids());
        }
        ids.extend(self.ffa.ids());
        ids
    }
}

/// Output of the decoder for a batch: raw and clipped logits, and the
/// masked distribution, each `[B, N·N]`.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub raw: Var,
    pub clipped: Var,
    pub probs: Var,
}

/// Actor network: node-feature embedding, stacked encoder, pairwise decoder.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    embed: Linear,
    layers: Vec<EncoderLayer>,
    decoder: Decoder,
}

impl PolicyNet {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, c: &DactConfig, rng: &mut R) -> Self {
        PolicyNet {
            embed: Linear::new(store, "nfe", c.feature_dim(), c.dim, true, rng),
            layers: (0..c.layers).map(|l| EncoderLayer::new(store, &format!("enc.{l}"), c, rng)).collect(),
            decoder: Decoder::new(store, c, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.embed.ids();
        for layer in &self.layers {
            ids.extend(layer.ids());
        }
        ids.extend(self.decoder.ids());
        ids
    }

    /// Node-feature embeddings `[B,N,dim]` from features `[B,N,F]`.
    pub fn embed(&self, g: &mut Graph, c: &DactConfig, features: Var) -> Result<Var> {
        if g.shape(features).last() != Some(&c.feature_dim()) {
            return shape_err(format!("node features {:?} need width {}", g.shape(features), c.feature_dim()));
        }
        self.embed.forward(g, features)
    }

    /// The collaborative attention sub-layer of encoder layer `l` alone.
    pub fn collaborative_attention(
        &self,
        g: &mut Graph,
        c: &DactConfig,
        l: usize,
        h: Var,
        p: Var,
    ) -> Result<(Var, Var)> {
        let layer = &self.layers[l];
        dac_attention(g, c, &layer.node, &layer.pos, h, p, None)
    }

    pub fn encoder_layer(&self, g: &mut Graph, c: &DactConfig, l: usize, h: Var, p: Var) -> Result<(Var, Var)> {
        self.encoder_layer_traced(g, c, l, h, p, None)
    }

    fn encoder_layer_traced(
        &self,
        g: &mut Graph,
        c: &DactConfig,
        l: usize,
        h: Var,
        p: Var,
        record: Option<&mut Vec<HeadAttention>>,
    ) -> Result<(Var, Var)> {
        let layer = &self.layers[l];
        let (ha, pa) = dac_attention(g, c, &layer.node, &layer.pos, h, p, record.map(|r| (r, l)))?;
        let stream = |g: &mut Graph, x: Var, att: Var, ln1: &LayerNorm, ffn: &Mlp, ln2: &LayerNorm| -> Result<Var> {
            let s = g.add(x, att)?;
            let x1 = ln1.forward(g, s)?;
            let f = ffn.forward(g, x1)?;
            let s2 = g.add(x1, f)?;
            ln2.forward(g, s2)
        };
        let h_out = stream(g, h, ha, &layer.node_norm1, &layer.node_ffn, &layer.node_norm2)?;
        let p_out = stream(g, p, pa, &layer.pos_norm1, &layer.pos_ffn, &layer.pos_norm2)?;
        Ok((h_out, p_out))
    }

    /// Runs the embedding and every encoder layer. `pfe` is the frozen
    /// positional input `[B,N,dim]`.
    pub fn encode(&self, g: &mut Graph, c: &DactConfig, features: Var, pfe: Var) -> Result<(Var, Var)> {
        self.encode_traced(g, c, features, pfe, None)
    }

    pub fn encode_traced(
        &self,
        g: &mut Graph,
        c: &DactConfig,
        features: Var,
        pfe: Var,
        mut record: Option<&mut Vec<HeadAttention>>,
    ) -> Result<(Var, Var)> {
        let mut h = self.embed(g, c, features)?;
        if g.shape(pfe) != g.shape(h) {
            return shape_err(format!("positional input {:?} vs {:?}", g.shape(pfe), g.shape(h)));
        }
        let mut p = pfe;
        for l in 0..self.layers.len() {
            (h, p) = self.encoder_layer_traced(g, c, l, h, p, record.as_deref_mut())?;
        }
        Ok((h, p))
    }

    /// Pairwise action distribution over `N·N` node pairs. `mask` is
    /// `[B·N·N]` with `true` marking forbidden pairs.
    pub fn decode(&self, g: &mut Graph, c: &DactConfig, h: Var, p: Var, mask: &[bool]) -> Result<DecoderOutput> {
        let dec = &self.decoder;
        let shape = g.shape(h).to_vec();
        let (b, n) = (shape[0], shape[1]);
        let pool = |g: &mut Graph, x: Var, local: &Linear, global: &Linear| -> Result<Var> {
            let loc = local.forward(g, x)?;
            let mx = g.max_rows(x)?;
            let glob = global.forward(g, mx)?;
            g.add_rows(loc, glob)
        };
        let h_hat = pool(g, h, &dec.node_local, &dec.node_global)?;
        let p_hat = pool(g, p, &dec.pos_local, &dec.pos_global)?;
        let scale = 1.0 / (c.compat_dim as f32).sqrt();
        let compat = |g: &mut Graph, x: Var, q: &Linear, k: &Linear| -> Result<Vec<Var>> {
            let qv = q.forward(g, x)?;
            let kv = k.forward(g, x)?;
            let qs = split_heads(g, qv, c.heads, c.compat_dim)?;
            let ks = split_heads(g, kv, c.heads, c.compat_dim)?;
            qs.into_iter()
                .zip(ks)
                .map(|(q, k)| {
                    let s = g.bmm(q, k, true)?;
                    Ok(g.scale(s, scale))
                })
                .collect()
        };
        let mut proposals = compat(g, p_hat, &dec.pos_q, &dec.pos_k)?;
        proposals.extend(compat(g, h_hat, &dec.node_q, &dec.node_k)?);
        let stacked = g.stack_last(&proposals)?;
        let raw = dec.ffa.forward(g, stacked)?;
        let raw = g.reshape(raw, vec![b, n * n])?;
        let t = g.tanh(raw);
        let clipped = g.scale(t, c.clip);
        let probs = g.softmax_masked(clipped, Some(mask))?;
        Ok(DecoderOutput { raw, clipped, probs })
    }
}
