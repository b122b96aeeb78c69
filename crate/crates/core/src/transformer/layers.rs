//! Graph-level building blocks shared by the baseline and the context-aware models.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var, MASK_VALUE};

/// Projection weights of one multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// `W_g` (`[2d, d]`) and `b_g` (`[d]`) of a gated interpolation.
#[derive(Clone, Copy, Debug)]
pub struct GateWeights {
    pub w: Var,
    pub b: Var,
}

/// Multi-head attention from `query [b,m,d]` to `memory [b,n,d]`.
/// Returns the projected output and the raw attention node (whose saved
/// probabilities can be read with [`Graph::attention_weights`]).
pub fn multi_head_attention<F: Real>(
    g: &mut Graph<F>,
    w: &AttentionWeights,
    heads: usize,
    query: Var,
    memory: Var,
    mask: Option<&Tensor<F>>,
) -> Result<(Var, Var)> {
    let q = g.linear(query, w.wq, Some(w.bq))?;
    let k = g.linear(memory, w.wk, Some(w.bk))?;
    let v = g.linear(memory, w.wv, Some(w.bv))?;
    let q = g.split_heads(q, heads)?;
    let k = g.split_heads(k, heads)?;
    let v = g.split_heads(v, heads)?;
    let att = g.scaled_dot_attention(q, k, v, mask)?;
    let merged = g.merge_heads(att)?;
    let out = g.linear(merged, w.wo, Some(w.bo))?;
    Ok((out, att))
}

/// Additive attention mask `[b, m, n]`: key positions at or beyond
/// `key_lens[i]` are masked, and with `causal` so are keys after the query.
pub fn attention_mask<F: Real>(key_lens: &[usize], m: usize, n: usize, causal: bool) -> Tensor<F> {
    let b = key_lens.len();
    let neg = F::lit(MASK_VALUE);
    let mut t = Tensor::zeros(&[b, m, n]);
    let data = t.data_mut();
    for (bb, &len) in key_lens.iter().enumerate() {
        for i in 0..m {
            for j in 0..n {
                if j >= len || (causal && j > i) {
                    data[(bb * m + i) * n + j] = neg;
                }
            }
        }
    }
    t
}

/// Sinusoidal position encodings, `[n, d]`.
pub fn positional_encoding<F: Real>(n: usize, d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * d];
    for pos in 0..n {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            out[pos * d + i] = F::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// Pad id sequences to a rectangle; returns flat ids, lengths and the width.
pub fn pad_batch(seqs: &[Vec<u32>], pad: u32) -> (Vec<u32>, Vec<usize>, usize) {
    let width = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut flat = Vec::with_capacity(seqs.len() * width);
    let mut lens = Vec::with_capacity(seqs.len());
    for s in seqs {
        flat.extend_from_slice(s);
        flat.extend(std::iter::repeat(pad).take(width - s.len()));
        lens.push(s.len());
    }
    (flat, lens, width)
}

/// Per-forward state: the graph, lazily bound parameters, dropout RNG and overrides.
pub struct Session<'a, F: Real> {
    pub g: &'a mut Graph<F>,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    rng: ChaCha8Rng,
    pub dropout: f64,
    pub gate_override: Option<f64>,
    pub heads: usize,
}

impl<'a, F: Real> Session<'a, F> {
    pub fn new(g: &'a mut Graph<F>, params: &'a ParamStore, heads: usize, dropout: f64, seed: u64) -> Self {
        Session {
            g,
            params,
            bound: vec![None; params.len()],
            rng: ChaCha8Rng::seed_from_u64(seed),
            dropout,
            gate_override: None,
            heads,
        }
    }

    /// Bind a named parameter into the graph (once per session).
    pub fn p(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("model has no parameter `{name}`")))?;
        if let Some(v) = self.bound[idx] {
            return Ok(v);
        }
        let (_, t) = self.params.by_index(idx);
        let v = self.g.param(t.cast::<F>());
        self.bound[idx] = Some(v);
        Ok(v)
    }

    pub fn into_bound(self) -> Vec<Option<Var>> {
        self.bound
    }

    pub fn bound(&self) -> &[Option<Var>] {
        &self.bound
    }

    pub fn attention_weights(&mut self, prefix: &str) -> Result<AttentionWeights> {
        Ok(AttentionWeights {
            wq: self.p(&format!("{prefix}.q.w"))?,
            bq: self.p(&format!("{prefix}.q.b"))?,
            wk: self.p(&format!("{prefix}.k.w"))?,
            bk: self.p(&format!("{prefix}.k.b"))?,
            wv: self.p(&format!("{prefix}.v.w"))?,
            bv: self.p(&format!("{prefix}.v.b"))?,
            wo: self.p(&format!("{prefix}.o.w"))?,
            bo: self.p(&format!("{prefix}.o.b"))?,
        })
    }

    pub fn gate_weights(&mut self, prefix: &str) -> Result<GateWeights> {
        Ok(GateWeights {
            w: self.p(&format!("{prefix}.w"))?,
            b: self.p(&format!("{prefix}.b"))?,
        })
    }

    pub fn drop(&mut self, x: Var) -> Var {
        let p = self.dropout;
        self.g.dropout(x, p, &mut self.rng)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gain = self.p(&format!("{prefix}.g"))?;
        let bias = self.p(&format!("{prefix}.b"))?;
        self.g.layer_norm(x, gain, bias)
    }

    pub fn attention(&mut self, prefix: &str, query: Var, memory: Var, mask: &Tensor<F>) -> Result<(Var, Var)> {
        let w = self.attention_weights(prefix)?;
        multi_head_attention(self.g, &w, self.heads, query, memory, Some(mask))
    }

    pub fn ffn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w1 = self.p(&format!("{prefix}.w1"))?;
        let b1 = self.p(&format!("{prefix}.b1"))?;
        let w2 = self.p(&format!("{prefix}.w2"))?;
        let b2 = self.p(&format!("{prefix}.b2"))?;
        let h = self.g.linear(x, w1, Some(b1))?;
        let h = self.g.relu(h);
        let h = self.drop(h);
        self.g.linear(h, w2, Some(b2))
    }

    /// Scaled embedding lookup, optionally with sinusoidal positions.
    pub fn embed(&mut self, table: &str, ids: &[u32], b: usize, n: usize, positions: bool) -> Result<Var> {
        let t = self.p(table)?;
        let d = self.g.shape(t)[1];
        let e = self.g.embedding(t, ids, &[b, n])?;
        let mut x = self.g.scale(e, (d as f64).sqrt());
        if positions {
            let pe = positional_encoding::<F>(n, d);
            let mut data = Vec::with_capacity(b * n * d);
            for _ in 0..b {
                data.extend_from_slice(&pe);
            }
            let pe = self.g.constant(Tensor::new(vec![b, n, d], data)?);
            x = self.g.add(x, pe)?;
        }
        Ok(x)
    }

    /// Pre-norm self-attention encoder stack with a final layer norm.
    pub fn encoder_stack(&mut self, prefix: &str, layers: usize, mut x: Var, mask: &Tensor<F>) -> Result<Var> {
        x = self.drop(x);
        for l in 0..layers {
            let h = self.layer_norm(&format!("{prefix}.{l}.ln1"), x)?;
            let (a, _) = self.attention(&format!("{prefix}.{l}.self"), h, h, mask)?;
            let a = self.drop(a);
            x = self.g.add(x, a)?;
            let h = self.layer_norm(&format!("{prefix}.{l}.ln2"), x)?;
            let f = self.ffn(&format!("{prefix}.{l}.ffn"), h)?;
            let f = self.drop(f);
            x = self.g.add(x, f)?;
        }
        self.layer_norm(&format!("{prefix}.ln"), x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_layout() {
        let m = attention_mask::<f32>(&[2, 3], 3, 3, true);
        let d = m.data();
        // batch 0: key 2 is padding; causal hides j > i
        assert_eq!(d[0..3], [0.0, -1e9, -1e9]);
        assert_eq!(d[6..9], [0.0, 0.0, -1e9]);
        assert_eq!(d[9 + 6..9 + 9], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn positions_differ() {
        let pe = positional_encoding::<f64>(3, 4);
        assert_eq!(pe[0..4], [0.0, 1.0, 0.0, 1.0]);
        assert_ne!(pe[4..8], pe[8..12]);
    }

    #[test]
    fn padding() {
        let (flat, lens, w) = pad_batch(&[vec![5, 6], vec![7]], 0);
        assert_eq!(flat, vec![5, 6, 7, 0]);
        assert_eq!(lens, vec![2, 1]);
        assert_eq!(w, 2);
    }
}
