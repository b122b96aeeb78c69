//! Document-context integration: single-encoder concatenation, the gated
//! merge, and the outside / sequential / parallel multi-encoder variants.

use crate::corpus::vocab::BREAK;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::transformer::layers::{multi_head_attention, AttentionWeights, GateWeights, Session};
use crate::transformer::params::{init_tensor, layout, CONTEXT_PREFIX};
use crate::transformer::{Model, ModelConfig};

/// `prev₁ _BREAK_ prev₂ … _BREAK_ cur`; no context leaves `cur` unchanged.
pub fn build_single_encoder_input<S: AsRef<[u32]>>(prev: &[S], cur: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    for p in prev {
        out.extend_from_slice(p.as_ref());
        out.push(BREAK);
    }
    out.extend_from_slice(cur);
    out
}

/// Gated interpolation `g⊙ctx + (1−g)⊙cur` with `g = σ([ctx;cur]·W + b)`.
///
/// `force` replaces the computed gate by a constant (used to switch the
/// context pathway off or fully on). Returns the output and the gate node.
pub fn gate_combine<F: Real>(
    g: &mut Graph<F>,
    ctx: Var,
    cur: Var,
    w: &GateWeights,
    force: Option<f64>,
) -> Result<(Var, Var)> {
    if g.shape(ctx) != g.shape(cur) {
        return Err(Error::dim("gate_combine", g.shape(ctx), g.shape(cur)));
    }
    let gate = match force {
        Some(v) => {
            let shape = g.shape(cur).to_vec();
            g.constant(Tensor::full(&shape, F::lit(v)))
        }
        None => {
            let joined = g.concat_last(ctx, cur)?;
            let logits = g.linear(joined, w.w, Some(w.b))?;
            g.sigmoid(logits)
        }
    };
    let keep = g.one_minus(gate);
    let a = g.mul(gate, ctx)?;
    let b = g.mul(keep, cur)?;
    Ok((g.add(a, b)?, gate))
}

/// Output of one integration block.
#[derive(Clone, Copy, Debug)]
pub struct Integrated {
    pub output: Var,
    pub gate: Var,
    /// Attention node over the context (probabilities via [`Graph::attention_weights`]).
    pub context_attention: Var,
}

/// Outside-decoder integration: attend from the current-sentence encoding to
/// the context encoding, then gate the result against the current encoding.
#[allow(clippy::too_many_arguments)]
pub fn outside_integrate<F: Real>(
    g: &mut Graph<F>,
    h_cur: Var,
    h_pre: Var,
    attn: &AttentionWeights,
    gate: &GateWeights,
    heads: usize,
    context_mask: Option<&Tensor<F>>,
    force: Option<f64>,
) -> Result<Integrated> {
    let (h_bar, att) = multi_head_attention(g, attn, heads, h_cur, h_pre, context_mask)?;
    let (output, gate) = gate_combine(g, h_bar, h_cur, gate, force)?;
    Ok(Integrated {
        output,
        gate,
        context_attention: att,
    })
}

/// Weights and masks for one inside-decoder block.
pub struct InsideBlock<'a, F: Real> {
    pub current: &'a AttentionWeights,
    pub context: &'a AttentionWeights,
    pub gate: &'a GateWeights,
    pub heads: usize,
    pub current_mask: Option<&'a Tensor<F>>,
    pub context_mask: Option<&'a Tensor<F>>,
}

/// Stacked attentions: `A = attn(z → cur)`, `B = attn(A → pre)`, then `gate(B, A)`.
/// With `context_first` the order is swapped (`A = attn(z → pre)`,
/// `B = attn(A → cur)`, `gate(A, B)`).
pub fn sequential_attend<F: Real>(
    g: &mut Graph<F>,
    z: Var,
    h_cur: Var,
    h_pre: Var,
    blk: &InsideBlock<'_, F>,
    context_first: bool,
    force: Option<f64>,
) -> Result<Integrated> {
    if context_first {
        let (a, att) = multi_head_attention(g, blk.context, blk.heads, z, h_pre, blk.context_mask)?;
        let (b, _) = multi_head_attention(g, blk.current, blk.heads, a, h_cur, blk.current_mask)?;
        let (output, gate) = gate_combine(g, a, b, blk.gate, force)?;
        return Ok(Integrated {
            output,
            gate,
            context_attention: att,
        });
    }
    let (a, _) = multi_head_attention(g, blk.current, blk.heads, z, h_cur, blk.current_mask)?;
    let (b, att) = multi_head_attention(g, blk.context, blk.heads, a, h_pre, blk.context_mask)?;
    let (output, gate) = gate_combine(g, b, a, blk.gate, force)?;
    Ok(Integrated {
        output,
        gate,
        context_attention: att,
    })
}

/// Side-by-side attentions from the same query: `A = attn(z → cur)`,
/// `B = attn(z → pre)`, then `gate(B, A)`.
pub fn parallel_attend<F: Real>(
    g: &mut Graph<F>,
    z: Var,
    h_cur: Var,
    h_pre: Var,
    blk: &InsideBlock<'_, F>,
    force: Option<f64>,
) -> Result<Integrated> {
    let (a, _) = multi_head_attention(g, blk.current, blk.heads, z, h_cur, blk.current_mask)?;
    let (b, att) = multi_head_attention(g, blk.context, blk.heads, z, h_pre, blk.context_mask)?;
    let (output, gate) = gate_combine(g, b, a, blk.gate, force)?;
    Ok(Integrated {
        output,
        gate,
        context_attention: att,
    })
}

/// Encode padded context ids `[b, n]`. With zero context layers this is the
/// scaled embedding lookup alone: no positions, no normalisation.
pub fn encode_context<F: Real>(
    s: &mut Session<'_, F>,
    cfg: &ModelConfig,
    ids: &[u32],
    b: usize,
    n: usize,
    mask: &Tensor<F>,
) -> Result<Var> {
    let table = if cfg.shared_source_embeddings { "src.emb" } else { "ctx.emb" };
    let x = s.embed(table, ids, b, n, cfg.context_positional_encoding)?;
    if cfg.context_encoder_layers == 0 {
        return Ok(s.drop(x));
    }
    s.encoder_stack("ctx.enc", cfg.context_encoder_layers, x, mask)
}

/// What [`init_from_sentence_model`] did.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
}

/// Copy every parameter the document model shares with a sentence model.
/// Context-only parameters are re-initialised (the gate bias starts at
/// `gate_bias_init`, so the initial gate is small). An unshared context
/// embedding table starts as a copy of the source table.
pub fn init_from_sentence_model(doc: &mut Model, sentence: &Model, seed: u64) -> Result<TransferReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = TransferReport::default();
    for (name, shape, init) in layout(&doc.cfg) {
        if let Some(src) = sentence.params.get(&name) {
            if src.shape() != shape.as_slice() {
                return Err(Error::Transfer {
                    name,
                    expected: shape,
                    found: src.shape().to_vec(),
                });
            }
            *doc.params.get_mut(&name).expect("layout parameter") = src.clone();
            report.copied.push(name);
            continue;
        }
        if !name.starts_with(CONTEXT_PREFIX) {
            return Err(Error::Transfer {
                name,
                expected: shape,
                found: Vec::new(),
            });
        }
        let fresh = if name == "ctx.emb" {
            match sentence.params.get("src.emb") {
                Some(t) if t.shape() == shape.as_slice() => t.clone(),
                _ => init_tensor(&shape, init, &mut rng),
            }
        } else {
            init_tensor(&shape, init, &mut rng)
        };
        *doc.params.get_mut(&name).expect("layout parameter") = fresh;
        report.fresh.push(name);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::IntegrationMode;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn single_encoder_input() {
        assert_eq!(build_single_encoder_input(&[vec![10, 11]], &[12, 13]), vec![10, 11, BREAK, 12, 13]);
        assert_eq!(build_single_encoder_input::<Vec<u32>>(&[], &[12]), vec![12]);
        assert_eq!(
            build_single_encoder_input(&[vec![7], vec![8]], &[9]),
            vec![7, BREAK, 8, BREAK, 9]
        );
    }

    fn gate_weights(g: &mut Graph<f64>, d: usize, bias: f64) -> GateWeights {
        GateWeights {
            w: g.constant(Tensor::zeros(&[2 * d, d])),
            b: g.constant(Tensor::full(&[d], bias)),
        }
    }

    #[test]
    fn gate_examples() {
        let mut g = Graph::<f64>::new();
        let ctx = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let cur = g.constant(t(&[1, 2], &[3.0, 3.0]));

        let w = gate_weights(&mut g, 2, 0.0);
        let (out, gate) = gate_combine(&mut g, ctx, cur, &w, None).unwrap();
        assert_eq!(g.data(out), &[2.0, 2.0]);
        assert_eq!(g.data(gate), &[0.5, 0.5]);

        let w = gate_weights(&mut g, 2, -100.0);
        let (out, _) = gate_combine(&mut g, ctx, cur, &w, None).unwrap();
        for v in g.data(out) {
            assert!((v - 3.0).abs() < 1e-6);
        }

        let w = gate_weights(&mut g, 2, 3f64.ln());
        let (out, gate) = gate_combine(&mut g, ctx, cur, &w, None).unwrap();
        for (&o, &gv) in g.data(out).iter().zip(g.data(gate)) {
            assert!((gv - 0.75).abs() < 1e-12);
            assert!((o - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_zero_gate_is_exact_identity() {
        let mut g = Graph::<f32>::new();
        let ctx = g.constant(Tensor::new(vec![1, 3], vec![0.3, -7.0, 1e3]).unwrap());
        let cur = g.constant(Tensor::new(vec![1, 3], vec![0.1, 0.2, -0.3]).unwrap());
        let w = GateWeights {
            w: g.constant(Tensor::zeros(&[6, 3])),
            b: g.constant(Tensor::zeros(&[3])),
        };
        let (out, _) = gate_combine(&mut g, ctx, cur, &w, Some(0.0)).unwrap();
        assert_eq!(g.data(out), g.data(cur));
    }

    #[test]
    fn gate_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let ctx = g.constant(Tensor::zeros(&[2, 2]));
        let cur = g.constant(Tensor::zeros(&[1, 2]));
        let w = gate_weights(&mut g, 2, 0.0);
        assert!(matches!(
            gate_combine(&mut g, ctx, cur, &w, None),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn transfer_rejects_shape_mismatch() {
        let sent = Model::new(ModelConfig::desk(20, 20), 1).unwrap();
        let mut cfg = ModelConfig::desk(21, 20).with_mode(IntegrationMode::MultiOutside);
        cfg.gate_bias_init = -2.0;
        let mut doc = Model::new(cfg, 2).unwrap();
        match init_from_sentence_model(&mut doc, &sent, 0) {
            Err(Error::Transfer { name, .. }) => assert_eq!(name, "src.emb"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn transfer_copies_shared_and_keeps_source() {
        let sent = Model::new(ModelConfig::desk(20, 20), 1).unwrap();
        let before = sent.clone();
        let cfg = ModelConfig::desk(20, 20).with_mode(IntegrationMode::MultiInsidePar);
        let mut doc = Model::new(cfg, 2).unwrap();
        let rep = init_from_sentence_model(&mut doc, &sent, 0).unwrap();
        assert_eq!(sent.params, before.params);
        assert_eq!(rep.copied.len(), sent.params.len());
        assert!(rep.fresh.iter().all(|n| n.starts_with(CONTEXT_PREFIX)));
        assert_eq!(doc.params.get("enc.0.self.q.w"), sent.params.get("enc.0.self.q.w"));
        let b = doc.params.get("ctx.dec.0.gate.b").unwrap();
        assert!(b.data().iter().all(|&v| v == -2.0));
    }
}
