use indexmap::IndexMap;
use rand::Rng;

use super::config::ModelConfig;
use crate::tensor::Tensor;

/// Name prefix reserved for context-integration parameters.
pub const CONTEXT_PREFIX: &str = "ctx.";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Xavier,
    Zeros,
    Ones,
    Const(f32),
}

/// Named parameter tensors in a fixed, config-determined order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: IndexMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.map.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.map.get_index_of(name)
    }

    pub fn by_index(&self, i: usize) -> (&str, &Tensor<f32>) {
        let (k, v) = self.map.get_index(i).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Tensor<f32> {
        self.map.get_index_mut(i).expect("parameter index").1
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }
}

fn push(out: &mut Vec<(String, Vec<usize>, Init)>, name: String, shape: Vec<usize>, init: Init) {
    out.push((name, shape, init));
}

fn attention(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        push(out, format!("{prefix}.{p}.w"), vec![d, d], Init::Xavier);
        push(out, format!("{prefix}.{p}.b"), vec![d], Init::Zeros);
    }
}

fn layer_norm(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    push(out, format!("{prefix}.g"), vec![d], Init::Ones);
    push(out, format!("{prefix}.b"), vec![d], Init::Zeros);
}

fn ffn(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize, f: usize) {
    push(out, format!("{prefix}.w1"), vec![d, f], Init::Xavier);
    push(out, format!("{prefix}.b1"), vec![f], Init::Zeros);
    push(out, format!("{prefix}.w2"), vec![f, d], Init::Xavier);
    push(out, format!("{prefix}.b2"), vec![d], Init::Zeros);
}

fn encoder_stack(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, layers: usize, d: usize, f: usize) {
    for l in 0..layers {
        layer_norm(out, &format!("{prefix}.{l}.ln1"), d);
        attention(out, &format!("{prefix}.{l}.self"), d);
        layer_norm(out, &format!("{prefix}.{l}.ln2"), d);
        ffn(out, &format!("{prefix}.{l}.ffn"), d, f);
    }
    layer_norm(out, &format!("{prefix}.ln"), d);
}

fn gate(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize, bias: f32) {
    push(out, format!("{prefix}.w"), vec![2 * d, d], Init::Xavier);
    push(out, format!("{prefix}.b"), vec![d], Init::Const(bias));
}

/// Every parameter of a model built from `cfg`: name, shape and initialiser.
pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f) = (cfg.d_model, cfg.ffn_dim);
    let mut out = Vec::new();
    push(&mut out, "src.emb".into(), vec![cfg.src_vocab, d], Init::Xavier);
    push(&mut out, "tgt.emb".into(), vec![cfg.tgt_vocab, d], Init::Xavier);
    encoder_stack(&mut out, "enc", cfg.encoder_layers, d, f);
    for l in 0..cfg.decoder_layers {
        layer_norm(&mut out, &format!("dec.{l}.ln1"), d);
        attention(&mut out, &format!("dec.{l}.self"), d);
        layer_norm(&mut out, &format!("dec.{l}.ln2"), d);
        attention(&mut out, &format!("dec.{l}.cross"), d);
        layer_norm(&mut out, &format!("dec.{l}.ln3"), d);
        ffn(&mut out, &format!("dec.{l}.ffn"), d, f);
    }
    layer_norm(&mut out, "dec.ln", d);
    push(&mut out, "out.w".into(), vec![d, cfg.tgt_vocab], Init::Xavier);
    push(&mut out, "out.b".into(), vec![cfg.tgt_vocab], Init::Zeros);

    let mode = cfg.integration_mode;
    if mode.is_multi_encoder() {
        let bias = cfg.gate_bias_init as f32;
        if !cfg.shared_source_embeddings {
            push(&mut out, "ctx.emb".into(), vec![cfg.src_vocab, d], Init::Xavier);
        }
        if cfg.context_encoder_layers > 0 {
            encoder_stack(&mut out, "ctx.enc", cfg.context_encoder_layers, d, f);
        }
        if mode.is_inside_decoder() {
            for l in 0..cfg.decoder_layers {
                attention(&mut out, &format!("ctx.dec.{l}.attn"), d);
                gate(&mut out, &format!("ctx.dec.{l}.gate"), d, bias);
            }
        } else {
            attention(&mut out, "ctx.attn", d);
            gate(&mut out, "ctx.gate", d, bias);
        }
    }
    out
}

pub fn init_tensor<R: Rng + ?Sized>(shape: &[usize], init: Init, rng: &mut R) -> Tensor<f32> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::Const(c) => Tensor::full(shape, c),
        Init::Xavier => {
            let (fan_in, fan_out) = match shape {
                [a, b] => (*a, *b),
                [a] => (*a, *a),
                _ => (shape.iter().product(), shape.iter().product()),
            };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = rng.gen_range(-a..a) as f32;
            }
            t
        }
    }
}

pub fn initialise<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(cfg) {
        store.insert(name, init_tensor(&shape, init, rng));
    }
    store
}
