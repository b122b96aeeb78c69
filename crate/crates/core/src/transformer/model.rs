use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::beam::StepModel;
use super::config::{IntegrationMode, ModelConfig};
use super::layers::{attention_mask, pad_batch, Session};
use super::params::{initialise, layout, ParamStore};
use crate::context::{
    build_single_encoder_input, encode_context, outside_integrate, parallel_attend, sequential_attend, InsideBlock,
};
use crate::corpus::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Reduction, Tensor, Var};

/// An encoder–decoder Transformer, optionally with context integration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// A padded-on-demand batch of examples. `context` holds one (possibly
/// multi-sentence, `_BREAK_`-joined) context sequence per example.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub source: Vec<Vec<u32>>,
    pub context: Option<Vec<Vec<u32>>>,
    pub target_in: Vec<Vec<u32>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Replace every gate by this constant.
    pub gate_override: Option<f64>,
    /// Dropout seed (only used on training graphs).
    pub seed: u64,
}

/// Nodes of one recorded forward pass.
pub struct Forward {
    /// `[b, m, V]`
    pub logits: Var,
    /// One gate node per integration block (per decoder layer for inside modes).
    pub gates: Vec<Var>,
    /// One context-attention node per integration block.
    pub context_attention: Vec<Var>,
    /// Graph node of each parameter, by parameter index.
    pub bound: Vec<Option<Var>>,
}

/// Encoder-side result for one sentence, reused across decoding steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    /// What the decoder cross-attends to, `[n, d]`.
    pub memory: Tensor<f32>,
    /// Context encoding for inside-decoder modes, `[n_ctx, d]`.
    pub context: Option<Tensor<f32>>,
    pub gate_override: Option<f64>,
}

struct Memory {
    cur: Var,
    cur_lens: Vec<usize>,
    ctx: Option<(Var, Vec<usize>)>,
}

/// BOS-prefixed decoder input and EOS-terminated output for a target sentence.
pub fn teacher_forcing(target: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(target.len() + 1);
    input.push(BOS);
    input.extend_from_slice(target);
    let mut output = target.to_vec();
    output.push(EOS);
    (input, output)
}

impl Model {
    /// Fresh model with seeded initialisation.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = initialise(&cfg, &mut rng);
        Ok(Model { cfg, params })
    }

    /// Wrap existing parameters, checking names and shapes against the config.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(&cfg);
        if expected.len() != params.len() {
            return Err(Error::Contract(format!(
                "config expects {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (i, (name, shape, _)) in expected.into_iter().enumerate() {
            let (have, t) = params.by_index(i);
            if have != name || t.shape() != shape.as_slice() {
                return Err(Error::Transfer {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(Model { cfg, params })
    }

    /// Number of scalar parameters.
    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.cfg.max_len {
            return Err(Error::Length {
                len,
                max: self.cfg.max_len,
            });
        }
        Ok(())
    }

    fn encoder_side<F: Real>(
        &self,
        s: &mut Session<'_, F>,
        source: &[Vec<u32>],
        context: Option<&[Vec<u32>]>,
        gates: &mut Vec<Var>,
        atts: &mut Vec<Var>,
    ) -> Result<Memory> {
        let cfg = &self.cfg;
        let mode = cfg.integration_mode;
        if mode.uses_context() {
            match context {
                None => return Err(Error::Contract(format!("integration mode {mode} needs a context input"))),
                Some(c) if c.len() != source.len() => {
                    return Err(Error::Contract(format!(
                        "{} context sequences for {} sources",
                        c.len(),
                        source.len()
                    )))
                }
                _ => {}
            }
        }
        let joined: Vec<Vec<u32>>;
        let inputs: &[Vec<u32>] = if mode == IntegrationMode::SingleEncoder {
            let ctx = context.unwrap_or_default();
            joined = source
                .iter()
                .zip(ctx)
                .map(|(src, c)| {
                    if c.is_empty() {
                        src.clone()
                    } else {
                        build_single_encoder_input(&[c], src)
                    }
                })
                .collect();
            &joined
        } else {
            source
        };
        for x in inputs {
            if x.is_empty() {
                return Err(Error::Contract("empty source sentence".into()));
            }
            self.check_len(x.len())?;
        }
        let b = inputs.len();
        let (ids, lens, n) = pad_batch(inputs, PAD);
        let x = s.embed("src.emb", &ids, b, n, true)?;
        let self_mask = attention_mask::<F>(&lens, n, n, false);
        let h_cur = s.encoder_stack("enc", cfg.encoder_layers, x, &self_mask)?;
        if !mode.is_multi_encoder() {
            return Ok(Memory {
                cur: h_cur,
                cur_lens: lens,
                ctx: None,
            });
        }

        let ctx = context.expect("checked above");
        for c in ctx {
            if c.is_empty() {
                return Err(Error::Contract(
                    "zero-length context; a pruned context must be the _EMPTY_ token".into(),
                ));
            }
            self.check_len(c.len())?;
        }
        let (cids, clens, nc) = pad_batch(ctx, PAD);
        let cmask = attention_mask::<F>(&clens, nc, nc, false);
        let h_pre = encode_context(s, cfg, &cids, b, nc, &cmask)?;
        if mode == IntegrationMode::MultiOutside {
            let attn = s.attention_weights("ctx.attn")?;
            let gate = s.gate_weights("ctx.gate")?;
            let mask = attention_mask::<F>(&clens, n, nc, false);
            let out = outside_integrate(s.g, h_cur, h_pre, &attn, &gate, s.heads, Some(&mask), s.gate_override)?;
            gates.push(out.gate);
            atts.push(out.context_attention);
            return Ok(Memory {
                cur: out.output,
                cur_lens: lens,
                ctx: None,
            });
        }
        Ok(Memory {
            cur: h_cur,
            cur_lens: lens,
            ctx: Some((h_pre, clens)),
        })
    }

    fn decoder<F: Real>(
        &self,
        s: &mut Session<'_, F>,
        mem: &Memory,
        target_in: &[Vec<u32>],
        gates: &mut Vec<Var>,
        atts: &mut Vec<Var>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        for t in target_in {
            if t.is_empty() {
                return Err(Error::Contract("decoder prefix must start with the sentence-begin id".into()));
            }
            self.check_len(t.len())?;
        }
        let b = target_in.len();
        let (ids, tlens, m) = pad_batch(target_in, PAD);
        let n = s.g.shape(mem.cur)[1];
        let self_mask = attention_mask::<F>(&tlens, m, m, true);
        let cross_mask = attention_mask::<F>(&mem.cur_lens, m, n, false);
        let ctx_mask = mem
            .ctx
            .as_ref()
            .map(|(h, lens)| attention_mask::<F>(lens, m, s.g.shape(*h)[1], false));

        let x = s.embed("tgt.emb", &ids, b, m, true)?;
        let mut x = s.drop(x);
        for l in 0..cfg.decoder_layers {
            let h = s.layer_norm(&format!("dec.{l}.ln1"), x)?;
            let (a, _) = s.attention(&format!("dec.{l}.self"), h, h, &self_mask)?;
            let a = s.drop(a);
            x = s.g.add(x, a)?;

            let z = s.layer_norm(&format!("dec.{l}.ln2"), x)?;
            let c = match &mem.ctx {
                None => s.attention(&format!("dec.{l}.cross"), z, mem.cur, &cross_mask)?.0,
                Some((h_pre, _)) => {
                    let current = s.attention_weights(&format!("dec.{l}.cross"))?;
                    let context = s.attention_weights(&format!("ctx.dec.{l}.attn"))?;
                    let gate = s.gate_weights(&format!("ctx.dec.{l}.gate"))?;
                    let blk = InsideBlock {
                        current: &current,
                        context: &context,
                        gate: &gate,
                        heads: s.heads,
                        current_mask: Some(&cross_mask),
                        context_mask: ctx_mask.as_ref(),
                    };
                    let force = s.gate_override;
                    let out = if cfg.integration_mode == IntegrationMode::MultiInsideSeq {
                        sequential_attend(s.g, z, mem.cur, *h_pre, &blk, cfg.context_first, force)?
                    } else {
                        parallel_attend(s.g, z, mem.cur, *h_pre, &blk, force)?
                    };
                    gates.push(out.gate);
                    atts.push(out.context_attention);
                    out.output
                }
            };
            let c = s.drop(c);
            x = s.g.add(x, c)?;

            let h = s.layer_norm(&format!("dec.{l}.ln3"), x)?;
            let f = s.ffn(&format!("dec.{l}.ffn"), h)?;
            let f = s.drop(f);
            x = s.g.add(x, f)?;
        }
        let x = s.layer_norm("dec.ln", x)?;
        let w = s.p("out.w")?;
        let bias = s.p("out.b")?;
        s.g.linear(x, w, Some(bias))
    }

    fn session<'a, F: Real>(&'a self, g: &'a mut Graph<F>, opts: &ForwardOptions) -> Session<'a, F> {
        let mut s = Session::new(g, &self.params, self.cfg.heads, self.cfg.dropout, opts.seed);
        s.gate_override = opts.gate_override;
        s
    }

    /// Record a full teacher-forced forward pass on `g`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, batch: &Batch, opts: &ForwardOptions) -> Result<Forward> {
        if batch.source.len() != batch.target_in.len() {
            return Err(Error::Contract(format!(
                "{} sources for {} targets",
                batch.source.len(),
                batch.target_in.len()
            )));
        }
        let mut s = self.session(g, opts);
        let (mut gates, mut atts) = (Vec::new(), Vec::new());
        let mem = self.encoder_side(&mut s, &batch.source, batch.context.as_deref(), &mut gates, &mut atts)?;
        let logits = self.decoder(&mut s, &mem, &batch.target_in, &mut gates, &mut atts)?;
        Ok(Forward {
            logits,
            gates,
            context_attention: atts,
            bound: s.into_bound(),
        })
    }

    /// Token-level cross-entropy of a batch; padded positions are ignored.
    pub fn loss<F: Real>(
        &self,
        g: &mut Graph<F>,
        batch: &Batch,
        target_out: &[Vec<u32>],
        smoothing: f64,
        reduction: Reduction,
        opts: &ForwardOptions,
    ) -> Result<(Var, Forward)> {
        let fwd = self.forward(g, batch, opts)?;
        let m = g.shape(fwd.logits)[1];
        let mut flat = Vec::with_capacity(target_out.len() * m);
        for t in target_out {
            if t.len() > m {
                return Err(Error::dim("loss targets", &[t.len()], &[m]));
            }
            flat.extend_from_slice(t);
            flat.extend(std::iter::repeat(PAD).take(m - t.len()));
        }
        let loss = g.cross_entropy(fwd.logits, &flat, smoothing, Some(PAD), reduction)?;
        Ok((loss, fwd))
    }

    /// Current-sentence encoder output `[n, d]` (eval mode).
    pub fn encode(&self, tokens: &[u32]) -> Result<Tensor<f32>> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty source sentence".into()));
        }
        self.check_len(tokens.len())?;
        let mut g = Graph::<f32>::new();
        let mut s = self.session(&mut g, &ForwardOptions::default());
        let n = tokens.len();
        let x = s.embed("src.emb", tokens, 1, n, true)?;
        let mask = attention_mask::<f32>(&[n], n, n, false);
        let h = s.encoder_stack("enc", self.cfg.encoder_layers, x, &mask)?;
        let d = self.cfg.d_model;
        Tensor::new(vec![n, d], g.data(h).to_vec())
    }

    /// Run the encoder side for one sentence and its context.
    pub fn encode_input(&self, source: &[u32], context: Option<&[u32]>, gate_override: Option<f64>) -> Result<Encoded> {
        let mut g = Graph::<f32>::new();
        let opts = ForwardOptions {
            gate_override,
            seed: 0,
        };
        let mut s = self.session(&mut g, &opts);
        let (mut gates, mut atts) = (Vec::new(), Vec::new());
        let src = [source.to_vec()];
        let ctx = context.map(|c| vec![c.to_vec()]);
        let mem = self.encoder_side(&mut s, &src, ctx.as_deref(), &mut gates, &mut atts)?;
        let d = self.cfg.d_model;
        let n = g.shape(mem.cur)[1];
        let memory = Tensor::new(vec![n, d], g.data(mem.cur).to_vec())?;
        let context = match mem.ctx {
            Some((h, _)) => {
                let nc = g.shape(h)[1];
                Some(Tensor::new(vec![nc, d], g.data(h).to_vec())?)
            }
            None => None,
        };
        Ok(Encoded {
            memory,
            context,
            gate_override,
        })
    }

    /// Decoder logits `[b, m, V]` for prefixes over a shared encoding.
    fn decode_logits(&self, enc: &Encoded, prefixes: &[Vec<u32>]) -> Result<(Vec<f32>, usize)> {
        let b = prefixes.len();
        let mut g = Graph::<f32>::new();
        let opts = ForwardOptions {
            gate_override: enc.gate_override,
            seed: 0,
        };
        let repeat = |t: &Tensor<f32>| {
            let mut shape = vec![b];
            shape.extend_from_slice(t.shape());
            let mut data = Vec::with_capacity(b * t.len());
            for _ in 0..b {
                data.extend_from_slice(t.data());
            }
            Tensor::new(shape, data)
        };
        let cur = g.constant(repeat(&enc.memory)?);
        let ctx = match &enc.context {
            Some(c) => Some((g.constant(repeat(c)?), vec![c.shape()[0]; b])),
            None => None,
        };
        let mem = Memory {
            cur,
            cur_lens: vec![enc.memory.shape()[0]; b],
            ctx,
        };
        let mut s = self.session(&mut g, &opts);
        let (mut gates, mut atts) = (Vec::new(), Vec::new());
        let logits = self.decoder(&mut s, &mem, prefixes, &mut gates, &mut atts)?;
        let m = g.shape(logits)[1];
        Ok((g.data(logits).to_vec(), m))
    }

    /// Next-token distribution after `prefix` (which starts with BOS).
    pub fn decode_step(&self, prefix: &[u32], enc: &Encoded) -> Result<Vec<f32>> {
        let all = self.step_distributions(prefix, enc)?;
        Ok(all.into_iter().last().expect("nonempty prefix"))
    }

    /// Next-token distribution at every prefix position.
    pub fn step_distributions(&self, prefix: &[u32], enc: &Encoded) -> Result<Vec<Vec<f32>>> {
        let (logits, m) = self.decode_logits(enc, &[prefix.to_vec()])?;
        let v = self.cfg.tgt_vocab;
        Ok((0..m).map(|i| softmax_row(&logits[i * v..(i + 1) * v])).collect())
    }

    /// Log-probabilities of the next token for each prefix.
    pub fn next_log_probs(&self, enc: &Encoded, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
        let (logits, m) = self.decode_logits(enc, prefixes)?;
        let v = self.cfg.tgt_vocab;
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(r, p)| {
                let pos = r * m + p.len() - 1;
                log_softmax_row(&logits[pos * v..(pos + 1) * v])
            })
            .collect())
    }

    /// Beam-search translation of one sentence; the result ends with EOS
    /// unless `max_len` was reached.
    pub fn translate(
        &self,
        source: &[u32],
        context: Option<&[u32]>,
        beam: usize,
        max_len: usize,
        gate_override: Option<f64>,
    ) -> Result<Vec<u32>> {
        let enc = self.encode_input(source, context, gate_override)?;
        let stepper = Stepper { model: self, enc: &enc };
        let max_len = max_len.min(self.cfg.max_len.saturating_sub(1)).max(1);
        super::beam::beam_search(&stepper, beam, max_len, BOS, EOS)
    }
}

struct Stepper<'a> {
    model: &'a Model,
    enc: &'a Encoded,
}

impl StepModel for Stepper<'_> {
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
        self.model.next_log_probs(self.enc, prefixes)
    }
}

fn softmax_row(row: &[f32]) -> Vec<f32> {
    let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let e: Vec<f64> = row.iter().map(|&x| (x as f64 - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|&v| (v / s) as f32).collect()
}

fn log_softmax_row(row: &[f32]) -> Vec<f32> {
    let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let s: f64 = row.iter().map(|&x| (x as f64 - mx).exp()).sum();
    let lz = mx + s.ln();
    row.iter().map(|&x| (x as f64 - lz) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: IntegrationMode) -> ModelConfig {
        let mut c = ModelConfig::desk(13, 11).with_mode(mode);
        c.d_model = 8;
        c.ffn_dim = 12;
        c.heads = 2;
        c.encoder_layers = 1;
        c.decoder_layers = 2;
        c
    }

    #[test]
    fn encode_shape_and_determinism() {
        let m = Model::new(tiny(IntegrationMode::None), 3).unwrap();
        let a = m.encode(&[7]).unwrap();
        assert_eq!(a.shape(), &[1, 8]);
        let x = m.encode(&[7, 8, 9]).unwrap();
        let y = m.encode(&[7, 8, 9]).unwrap();
        assert_eq!(x, y);
        let z = m.encode(&[9, 8, 7]).unwrap();
        assert_ne!(x.data()[..8], z.data()[16..]);
    }

    #[test]
    fn overlong_input_is_length_error() {
        let mut c = tiny(IntegrationMode::None);
        c.max_len = 3;
        let m = Model::new(c, 0).unwrap();
        assert!(matches!(m.encode(&[7, 7, 7, 7]), Err(Error::Length { len: 4, max: 3 })));
    }

    #[test]
    fn missing_context_is_contract_error() {
        let m = Model::new(tiny(IntegrationMode::MultiInsidePar), 0).unwrap();
        assert!(matches!(m.encode_input(&[7], None, None), Err(Error::Contract(_))));
        assert!(matches!(m.encode_input(&[7], Some(&[]), None), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_output_projection_is_uniform() {
        let mut m = Model::new(tiny(IntegrationMode::None), 1).unwrap();
        for v in m.params.get_mut("out.w").unwrap().data_mut() {
            *v = 0.0;
        }
        let enc = m.encode_input(&[7, 8], None, None).unwrap();
        let p = m.decode_step(&[BOS, 9], &enc).unwrap();
        for &x in &p {
            assert!((x - 1.0 / 11.0).abs() < 1e-7);
        }
    }

    #[test]
    fn decode_is_causal() {
        for mode in IntegrationMode::ALL {
            let m = Model::new(tiny(mode), 5).unwrap();
            let ctx = [8u32, 4, 9];
            let enc = m.encode_input(&[7, 10, 12], Some(&ctx), None).unwrap();
            let short = m.step_distributions(&[BOS, 9, 10], &enc).unwrap();
            let long = m.step_distributions(&[BOS, 9, 10, 7], &enc).unwrap();
            for (a, b) in short.iter().zip(&long) {
                assert_eq!(a, b, "{mode}");
                let s: f32 = a.iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
