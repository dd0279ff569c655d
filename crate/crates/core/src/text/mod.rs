//! Hashing tokenizer and the embedding-mean text encoder producing `z^t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamGroup, ParamId, ParamStore, Session};
use crate::rng::{fnv1a64, Rng};
use crate::tensor::{Tensor, Var};

pub const MAX_LEN: usize = 512;
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
const RESERVED: usize = 4;

/// Hashed vocabulary: every token maps into `[4, size)`, leaving the four
/// reserved ids untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary { size: 8192 }
    }
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size <= RESERVED {
            return Err(Error::invalid(format!("vocabulary size must exceed {RESERVED}, got {size}")));
        }
        Ok(Vocabulary { size })
    }

    pub fn id(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % (self.size - RESERVED) as u64) as usize + RESERVED
    }
}

/// Fixed-length ids and attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub input_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Number of unmasked positions.
    pub fn active(&self) -> usize {
        self.attention_mask.iter().map(|&m| m as usize).sum()
    }
}

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// `[cls] tokens… [sep]` padded or truncated to [`MAX_LEN`].
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    tokenize_to(text, vocab, MAX_LEN)
}

pub fn tokenize_to(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let max_len = max_len.max(2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(words(text).take(max_len - 2).map(|w| vocab.id(&w)));
    ids.push(SEP_ID);
    let active = ids.len();
    ids.resize(max_len, PAD_ID);
    let mut mask = vec![1u8; active];
    mask.resize(max_len, 0);
    TokenSequence {
        input_ids: ids,
        attention_mask: mask,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub embed_dim: usize,
    pub out_dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            embed_dim: 128,
            out_dim: 64,
        }
    }
}

/// Masked mean of token embeddings → affine → tanh → affine.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub hidden: Linear,
    pub project: Linear,
    pub vocab: Vocabulary,
    pub config: TextEncoderConfig,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, vocab: Vocabulary, config: TextEncoderConfig, rng: &mut Rng) -> Self {
        let d = config.embed_dim;
        let table = Tensor::randn(&[vocab.size, d], 1.0, rng);
        let embedding = store.add(format!("{name}.embedding"), table, ParamGroup::Head);
        let hidden = Linear::new(store, &format!("{name}.hidden"), d, d, true, ParamGroup::Head, rng);
        let project = Linear::new(store, &format!("{name}.project"), d, config.out_dim, true, ParamGroup::Head, rng);
        TextEncoder {
            embedding,
            hidden,
            project,
            vocab,
            config,
        }
    }

    /// Encodes a batch to `[N × out_dim]`.
    pub fn forward(&self, s: &mut Session, batch: &[&TokenSequence]) -> Result<Var> {
        let Some(first) = batch.first() else {
            return Err(Error::invalid("empty text batch"));
        };
        let seq = first.len();
        let mut ids = Vec::with_capacity(seq * batch.len());
        let mut mask = Vec::with_capacity(seq * batch.len());
        for t in batch {
            if t.len() != seq {
                return Err(Error::invalid("token sequences differ in length"));
            }
            ids.extend_from_slice(&t.input_ids);
            mask.extend(t.attention_mask.iter().map(|&m| m as f64));
        }
        let table = s.param(self.embedding);
        let pooled = s.tape.embedding_mean(table, &ids, &mask, seq)?;
        let h = self.hidden.forward(s, pooled)?;
        let h = s.tape.tanh(h);
        self.project.forward(s, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_text_layout() {
        let v = Vocabulary::default();
        let t = tokenize("The boy", &v);
        assert_eq!(t.len(), 512);
        assert_eq!(&t.input_ids[..4], &[CLS_ID, v.id("the"), v.id("boy"), SEP_ID]);
        assert!(t.input_ids[4..].iter().all(|&i| i == PAD_ID));
        assert_eq!(t.active(), 4);
        assert!(t.attention_mask[..4].iter().all(|&m| m == 1));
    }

    #[test]
    fn long_text_is_truncated_with_sep_last() {
        let text: String = (0..600).map(|i| format!("w{i} ")).collect();
        let t = tokenize(&text, &Vocabulary::default());
        assert_eq!(t.len(), 512);
        assert_eq!(t.input_ids[511], SEP_ID);
        assert_eq!(t.active(), 512);
    }

    #[test]
    fn empty_and_punctuation_only() {
        let v = Vocabulary::default();
        assert_eq!(tokenize("", &v).active(), 2);
        assert_eq!(tokenize(" ,.;!? ", &v).active(), 2);
        let t = tokenize("hello, world!", &v);
        assert_eq!(&t.input_ids[1..3], &[v.id("hello"), v.id("world")]);
    }

    #[test]
    fn hashed_ids_avoid_reserved_range() {
        let v = Vocabulary::new(9).unwrap();
        for w in ["a", "b", "cookie", "jar", "ünïcode", "42"] {
            let id = v.id(w);
            assert!((4..9).contains(&id));
        }
        assert!(Vocabulary::new(4).is_err());
    }
}
