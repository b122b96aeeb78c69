//! Tokenisation, BPE, vocabularies, document corpora, examples and batching.

pub mod vocab;

pub use vocab::Vocabulary;
