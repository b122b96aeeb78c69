use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{put, KvFile};

/// How document context enters the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntegrationMode {
    /// Sentence-level baseline.
    None,
    /// Context and current sentence concatenated into one encoder input.
    SingleEncoder,
    /// Separate context encoder; gated merge of encoder outputs before the decoder.
    MultiOutside,
    /// Context attention stacked after the current-sentence attention in every decoder layer.
    MultiInsideSeq,
    /// Context and current-sentence attentions side by side in every decoder layer.
    MultiInsidePar,
}

impl IntegrationMode {
    pub const ALL: [IntegrationMode; 5] = [
        IntegrationMode::None,
        IntegrationMode::SingleEncoder,
        IntegrationMode::MultiOutside,
        IntegrationMode::MultiInsideSeq,
        IntegrationMode::MultiInsidePar,
    ];

    pub const MULTI_ENCODER: [IntegrationMode; 3] = [
        IntegrationMode::MultiOutside,
        IntegrationMode::MultiInsideSeq,
        IntegrationMode::MultiInsidePar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IntegrationMode::None => "none",
            IntegrationMode::SingleEncoder => "single",
            IntegrationMode::MultiOutside => "outside",
            IntegrationMode::MultiInsideSeq => "inside-seq",
            IntegrationMode::MultiInsidePar => "inside-par",
        }
    }

    pub fn uses_context(self) -> bool {
        self != IntegrationMode::None
    }

    /// Has a separate context encoder and a gate.
    pub fn is_multi_encoder(self) -> bool {
        matches!(
            self,
            IntegrationMode::MultiOutside | IntegrationMode::MultiInsideSeq | IntegrationMode::MultiInsidePar
        )
    }

    pub fn is_inside_decoder(self) -> bool {
        matches!(self, IntegrationMode::MultiInsideSeq | IntegrationMode::MultiInsidePar)
    }
}

impl fmt::Display for IntegrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IntegrationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IntegrationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown integration mode `{s}` (none|single|outside|inside-seq|inside-par)"))
    }
}

/// Every hyperparameter that determines the shape and behaviour of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_len: usize,
    pub integration_mode: IntegrationMode,
    /// 0 means the context is represented by its (scaled) word embeddings only.
    pub context_encoder_layers: usize,
    pub context_positional_encoding: bool,
    pub shared_source_embeddings: bool,
    /// Sequential variant only: attend to the context before the current sentence.
    pub context_first: bool,
    /// Initial gate bias; -2 gives g ≈ 0.12.
    pub gate_bias_init: f64,
}

pub const CONTEXT_ENCODER_DEPTHS: [usize; 4] = [0, 1, 2, 6];

impl ModelConfig {
    /// Small configuration used for tests and desk-scale experiments.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            d_model: 64,
            ffn_dim: 128,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            dropout: 0.1,
            label_smoothing: 0.1,
            max_len: 256,
            integration_mode: IntegrationMode::None,
            context_encoder_layers: 0,
            context_positional_encoding: false,
            shared_source_embeddings: true,
            context_first: false,
            gate_bias_init: -2.0,
        }
    }

    /// The 6-layer base Transformer.
    pub fn base(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            d_model: 512,
            ffn_dim: 2048,
            heads: 8,
            encoder_layers: 6,
            decoder_layers: 6,
            context_encoder_layers: 6,
            context_positional_encoding: true,
            ..Self::desk(src_vocab, tgt_vocab)
        }
    }

    pub fn with_mode(mut self, mode: IntegrationMode) -> Self {
        self.integration_mode = mode;
        self
    }

    /// Set the context encoder depth; depth 0 also drops positional encoding.
    pub fn with_context_layers(mut self, layers: usize) -> Self {
        self.context_encoder_layers = layers;
        self.context_positional_encoding = layers > 0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.src_vocab == 0 || self.tgt_vocab == 0 {
            return fail("vocabulary sizes must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0,1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0,1)", self.label_smoothing));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if self.integration_mode.is_multi_encoder() {
            if !CONTEXT_ENCODER_DEPTHS.contains(&self.context_encoder_layers) {
                return fail(format!(
                    "context_encoder_layers must be one of {CONTEXT_ENCODER_DEPTHS:?}, got {}",
                    self.context_encoder_layers
                ));
            }
            if self.context_encoder_layers == 0 && self.context_positional_encoding {
                return fail("an embeddings-only context encoder has no positional encoding".into());
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn write_kv(&self, out: &mut String) {
        put(out, "src_vocab", self.src_vocab);
        put(out, "tgt_vocab", self.tgt_vocab);
        put(out, "d_model", self.d_model);
        put(out, "ffn_dim", self.ffn_dim);
        put(out, "heads", self.heads);
        put(out, "encoder_layers", self.encoder_layers);
        put(out, "decoder_layers", self.decoder_layers);
        put(out, "dropout", self.dropout);
        put(out, "label_smoothing", self.label_smoothing);
        put(out, "max_len", self.max_len);
        put(out, "integration_mode", self.integration_mode);
        put(out, "context_encoder_layers", self.context_encoder_layers);
        put(out, "context_positional_encoding", self.context_positional_encoding);
        put(out, "shared_source_embeddings", self.shared_source_embeddings);
        put(out, "context_first", self.context_first);
        put(out, "gate_bias_init", self.gate_bias_init);
    }

    /// Read model keys from `kv`; missing keys fall back to [`ModelConfig::desk`].
    /// `src_vocab`/`tgt_vocab` may be absent when `vocab_size` is known from elsewhere.
    pub fn read_kv(kv: &mut KvFile, vocab_size: Option<usize>) -> Result<Self> {
        let v = vocab_size.unwrap_or(0);
        let d = ModelConfig::desk(v, v);
        let context_encoder_layers: usize = kv.take_or("context_encoder_layers", d.context_encoder_layers)?;
        let cfg = ModelConfig {
            src_vocab: kv.take_or("src_vocab", d.src_vocab)?,
            tgt_vocab: kv.take_or("tgt_vocab", d.tgt_vocab)?,
            d_model: kv.take_or("d_model", d.d_model)?,
            ffn_dim: kv.take_or("ffn_dim", d.ffn_dim)?,
            heads: kv.take_or("heads", d.heads)?,
            encoder_layers: kv.take_or("encoder_layers", d.encoder_layers)?,
            decoder_layers: kv.take_or("decoder_layers", d.decoder_layers)?,
            dropout: kv.take_or("dropout", d.dropout)?,
            label_smoothing: kv.take_or("label_smoothing", d.label_smoothing)?,
            max_len: kv.take_or("max_len", d.max_len)?,
            integration_mode: kv.take_or("integration_mode", d.integration_mode)?,
            context_encoder_layers,
            context_positional_encoding: kv
                .take_or("context_positional_encoding", context_encoder_layers > 0)?,
            shared_source_embeddings: kv.take_or("shared_source_embeddings", d.shared_source_embeddings)?,
            context_first: kv.take_or("context_first", d.context_first)?,
            gate_bias_init: kv.take_or("gate_bias_init", d.gate_bias_init)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let cfg = ModelConfig::desk(40, 50)
            .with_mode(IntegrationMode::MultiInsideSeq)
            .with_context_layers(2);
        let mut s = String::new();
        cfg.write_kv(&mut s);
        let mut kv = KvFile::parse(&s, "t").unwrap();
        let back = ModelConfig::read_kv(&mut kv, None).unwrap();
        kv.finish().unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn validation_rules() {
        let mut c = ModelConfig::desk(10, 10);
        c.heads = 3;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk(10, 10).with_mode(IntegrationMode::MultiInsidePar);
        c.context_positional_encoding = true;
        c.context_encoder_layers = 0;
        assert!(c.validate().is_err());

        let c = ModelConfig::desk(10, 10)
            .with_mode(IntegrationMode::MultiOutside)
            .with_context_layers(3);
        assert!(c.validate().is_err());

        // context fields are ignored without integration
        let mut c = ModelConfig::desk(10, 10);
        c.context_encoder_layers = 3;
        c.context_positional_encoding = true;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn mode_names_parse() {
        for m in IntegrationMode::ALL {
            assert_eq!(m.as_str().parse::<IntegrationMode>().unwrap(), m);
        }
        assert!("bogus".parse::<IntegrationMode>().is_err());
    }
}
