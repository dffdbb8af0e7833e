//! Model configuration: dimensions, per-position vocabularies and the
//! special-token inventory.

use serde::{Deserialize, Serialize};

use crate::data::Catalog;
use crate::tokenizer::SemanticTokenizer;

/// Configuration of the encoder-decoder sequence model.
///
/// `level_vocabs[t]` is the vocabulary size of draft/correction position `t`
/// and `head_map[t]` selects which embedding table and output head serve that
/// position. A disambiguation suffix position shares the final level's table
/// and head, so for four levels plus suffix `head_map = [0, 1, 2, 3, 3]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub level_vocabs: Vec<usize>,
    pub head_map: Vec<usize>,
    /// Bucket counts for the encoder's attribute side-features.
    pub attr_buckets: Vec<usize>,
    pub max_history: usize,
}

/// Special decoder tokens. The three segment triggers are fed as inputs; the
/// three delimiters close segments in the serialized template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialToken {
    Bos1,
    Bos2,
    Bos3,
    Eof1,
    Eof2,
    Eof3,
}

impl SpecialToken {
    pub fn index(self) -> usize {
        match self {
            SpecialToken::Bos1 => 0,
            SpecialToken::Bos2 => 1,
            SpecialToken::Bos3 => 2,
            SpecialToken::Eof1 => 3,
            SpecialToken::Eof2 => 4,
            SpecialToken::Eof3 => 5,
        }
    }
}

pub const NUM_SPECIAL_TOKENS: usize = 6;

impl ModelConfig {
    /// Builds a config sized for the given tokenizer and catalog.
    #[allow(clippy::too_many_arguments)]
    pub fn for_tokenizer(
        tokenizer: &SemanticTokenizer,
        catalog: &Catalog,
        embed_dim: usize,
        model_dim: usize,
        encoder_layers: usize,
        decoder_layers: usize,
        heads: usize,
        max_history: usize,
    ) -> Self {
        let levels = tokenizer.config.levels;
        let level_vocabs = tokenizer.vocab_sizes();
        let mut head_map: Vec<usize> = (0..levels).collect();
        if tokenizer.config.use_suffix {
            head_map.push(levels - 1);
        }
        ModelConfig {
            embed_dim,
            model_dim,
            ffn_dim: model_dim * 2,
            encoder_layers,
            decoder_layers,
            heads,
            level_vocabs,
            head_map,
            attr_buckets: catalog.attribute_buckets.clone(),
            max_history,
        }
    }

    /// Number of draft/correction positions (the decoded sequence length).
    pub fn seq_len(&self) -> usize {
        self.level_vocabs.len()
    }

    /// Number of attributes scored by the reflection segment.
    pub fn num_attributes(&self) -> usize {
        self.attr_buckets.len()
    }

    /// Classes of the localization slot: positions 1..=L plus "fully correct".
    pub fn loc_classes(&self) -> usize {
        self.seq_len() + 1
    }

    /// Total decoder template length 2L + K + 4.
    pub fn template_len(&self) -> usize {
        2 * self.seq_len() + self.num_attributes() + 4
    }

    /// Number of distinct level tables/heads.
    pub fn num_level_tables(&self) -> usize {
        self.head_map.iter().max().map(|m| m + 1).unwrap_or(0)
    }

    /// Vocabulary size served by level table `h`.
    pub fn table_vocab(&self, h: usize) -> usize {
        let pos = self
            .head_map
            .iter()
            .position(|&m| m == h)
            .expect("head index not referenced by any position");
        self.level_vocabs[pos]
    }

    pub fn validate(&self) {
        assert!(!self.level_vocabs.is_empty(), "at least one level is required");
        assert_eq!(self.level_vocabs.len(), self.head_map.len(), "head_map length mismatch");
        assert!(self.model_dim % self.heads == 0, "model_dim must divide into heads");
        assert!(!self.attr_buckets.is_empty(), "at least one attribute is required");
        for (pos, &h) in self.head_map.iter().enumerate() {
            assert_eq!(
                self.level_vocabs[pos],
                self.table_vocab(h),
                "positions sharing a head must share a vocabulary"
            );
        }
    }
}
