//! Three-segment decoding template: position roles, the reflection-isolating
//! self-attention mask, and decoder input materialization.
//!
//! Layout over `2L + K + 4` decoder positions (0-based):
//!
//! ```text
//! 0 .. L-1        draft tokens           (autoregressive, triggered by BOS1)
//! L               EOF1 delimiter
//! L+1 .. L+K+1    K+1 reflection slots   (parallel, slot 0 = localization)
//! L+K+2           EOF2 delimiter
//! L+K+3 .. 2L+K+2 correction tokens      (autoregressive, triggered by BOS3)
//! 2L+K+3          EOF3 delimiter
//! ```
//!
//! The mask is causal everywhere except that reflection slots may not attend
//! to one another: each slot sees the draft, the EOF1 delimiter and itself.
//! Correction positions attend to everything before them, including all
//! reflection slots, which is how the correction conditions on the reflection
//! outcome.

use crate::model::config::{ModelConfig, SpecialToken};
use crate::tensor::MASK_NEG;

/// Role of one decoder position. Draft and correction indices are 1-based
/// levels; reflection slot 0 is the localization slot and slot `k >= 1`
/// scores attribute `k - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionRole {
    Draft(usize),
    Eof1,
    Reflection(usize),
    Eof2,
    Correction(usize),
    Eof3,
}

/// Roles tiling the template exactly once in segment order.
pub fn template_roles(seq_len: usize, num_attributes: usize) -> Vec<PositionRole> {
    let mut roles = Vec::with_capacity(2 * seq_len + num_attributes + 4);
    for t in 1..=seq_len {
        roles.push(PositionRole::Draft(t));
    }
    roles.push(PositionRole::Eof1);
    for j in 0..=num_attributes {
        roles.push(PositionRole::Reflection(j));
    }
    roles.push(PositionRole::Eof2);
    for t in 1..=seq_len {
        roles.push(PositionRole::Correction(t));
    }
    roles.push(PositionRole::Eof3);
    roles
}

/// Square self-attention mask over the template positions.
#[derive(Debug, Clone)]
pub struct TemplateMask {
    pub size: usize,
    allowed: Vec<bool>,
}

impl TemplateMask {
    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    /// Additive 0/MASK_NEG mask restricted to the first `prefix` positions.
    pub fn additive_prefix(&self, prefix: usize) -> Vec<f64> {
        assert!(prefix <= self.size);
        let mut out = vec![0.0; prefix * prefix];
        for q in 0..prefix {
            for k in 0..prefix {
                if !self.allows(q, k) {
                    out[q * prefix + k] = MASK_NEG;
                }
            }
        }
        out
    }
}

/// Builds the template mask for `seq_len` levels and `num_attributes`
/// semantic slots: causal, with attention between distinct reflection slots
/// blocked.
pub fn build_template_mask(seq_len: usize, num_attributes: usize) -> TemplateMask {
    assert!(seq_len >= 1 && num_attributes >= 1);
    let roles = template_roles(seq_len, num_attributes);
    let size = roles.len();
    let mut allowed = vec![false; size * size];
    for q in 0..size {
        for k in 0..=q {
            let blocked = matches!(
                (roles[q], roles[k]),
                (PositionRole::Reflection(a), PositionRole::Reflection(b)) if a != b
            );
            allowed[size * q + k] = !blocked;
        }
    }
    TemplateMask { size, allowed }
}

/// Token content of a materialized template. `correction` may be shorter
/// than `seq_len` while the correction segment is still being decoded.
#[derive(Debug, Clone, Default)]
pub struct TemplateTokens {
    pub draft: Vec<usize>,
    /// Localization value in 1..=L+1.
    pub loc: usize,
    /// One 0/1 flag per attribute.
    pub sem: Vec<usize>,
    pub correction: Vec<usize>,
}

/// How reflection-slot inputs are fed to the decoder.
///
/// `Trigger` feeds BOS2 at every slot (the parallel prediction pass, where
/// the reflection tokens are unknown). `InPlace` feeds the reflection tokens
/// at their own slots so downstream correction positions can attend to them;
/// a slot's own input never reaches any other slot thanks to the mask.
/// `Mixed` keeps a slot's token only where the flag is set, which is used as
/// scheduled masking during fine-tuning so reflection slots stay predictable
/// from the draft alone.
#[derive(Debug, Clone)]
pub enum ReflectionInputs {
    Trigger,
    InPlace,
    Mixed(Vec<bool>),
}

/// One decoder input token: which embedding table and which row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecInput {
    /// Token from level table `table`.
    Level { table: usize, token: usize },
    Special(SpecialToken),
    /// Localization class in 0..=L.
    Loc(usize),
    /// Flag value for attribute `attr`.
    Sem { attr: usize, value: usize },
}

/// Input token per decoder position, for the first `prefix` positions.
pub fn decoder_inputs(
    config: &ModelConfig,
    tokens: &TemplateTokens,
    prefix: usize,
    reflection: &ReflectionInputs,
) -> Vec<DecInput> {
    let l = config.seq_len();
    let k = config.num_attributes();
    let roles = template_roles(l, k);
    assert!(prefix <= roles.len(), "prefix exceeds template length");
    let mut inputs = Vec::with_capacity(prefix);
    for (pos, role) in roles.iter().enumerate().take(prefix) {
        let input = match *role {
            PositionRole::Draft(1) => DecInput::Special(SpecialToken::Bos1),
            PositionRole::Draft(t) => {
                DecInput::Level { table: config.head_map[t - 2], token: tokens.draft[t - 2] }
            }
            PositionRole::Eof1 => {
                DecInput::Level { table: config.head_map[l - 1], token: tokens.draft[l - 1] }
            }
            PositionRole::Reflection(j) => {
                let in_place = match reflection {
                    ReflectionInputs::Trigger => false,
                    ReflectionInputs::InPlace => true,
                    ReflectionInputs::Mixed(keep) => keep[j],
                };
                if !in_place {
                    DecInput::Special(SpecialToken::Bos2)
                } else if j == 0 {
                    assert!(tokens.loc >= 1 && tokens.loc <= l + 1, "loc out of range");
                    DecInput::Loc(tokens.loc - 1)
                } else {
                    DecInput::Sem { attr: j - 1, value: tokens.sem[j - 1] }
                }
            }
            PositionRole::Eof2 => DecInput::Special(SpecialToken::Eof2),
            PositionRole::Correction(1) => DecInput::Special(SpecialToken::Bos3),
            PositionRole::Correction(t) => {
                DecInput::Level { table: config.head_map[t - 2], token: tokens.correction[t - 2] }
            }
            PositionRole::Eof3 => {
                DecInput::Level { table: config.head_map[l - 1], token: tokens.correction[l - 1] }
            }
        };
        let _ = pos;
        inputs.push(input);
    }
    inputs
}

/// Position index helpers for the fixed layout.
pub fn draft_pos(t: usize) -> usize {
    t - 1
}

pub fn eof1_pos(seq_len: usize) -> usize {
    seq_len
}

pub fn reflection_pos(seq_len: usize, slot: usize) -> usize {
    seq_len + 1 + slot
}

pub fn eof2_pos(seq_len: usize, num_attributes: usize) -> usize {
    seq_len + num_attributes + 2
}

pub fn correction_pos(seq_len: usize, num_attributes: usize, t: usize) -> usize {
    seq_len + num_attributes + 2 + t
}

/// Prefix length needed to read all reflection slots in one pass.
pub fn reflection_prefix(seq_len: usize, num_attributes: usize) -> usize {
    seq_len + num_attributes + 2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_tile_in_order() {
        let roles = template_roles(3, 2);
        assert_eq!(roles.len(), 2 * 3 + 2 + 4);
        assert_eq!(roles[0], PositionRole::Draft(1));
        assert_eq!(roles[3], PositionRole::Eof1);
        assert_eq!(roles[4], PositionRole::Reflection(0));
        assert_eq!(roles[6], PositionRole::Reflection(2));
        assert_eq!(roles[7], PositionRole::Eof2);
        assert_eq!(roles[8], PositionRole::Correction(1));
        assert_eq!(roles[11], PositionRole::Eof3);
    }

    #[test]
    fn mask_blocks_cross_reflection_only() {
        let (l, k) = (4, 2);
        let mask = build_template_mask(l, k);
        for a in 0..=k {
            for b in 0..=k {
                let allowed = mask.allows(reflection_pos(l, a), reflection_pos(l, b));
                assert_eq!(allowed, a == b, "slots {a} -> {b}");
            }
        }
    }

    #[test]
    fn mask_reflection_sees_draft_and_eof1() {
        let (l, k) = (4, 2);
        let mask = build_template_mask(l, k);
        for slot in 0..=k {
            let q = reflection_pos(l, slot);
            for t in 1..=l {
                assert!(mask.allows(q, draft_pos(t)));
            }
            assert!(mask.allows(q, eof1_pos(l)));
        }
    }

    #[test]
    fn mask_correction_sees_all_reflections() {
        let (l, k) = (4, 2);
        let mask = build_template_mask(l, k);
        for t in 1..=l {
            let q = correction_pos(l, k, t);
            for slot in 0..=k {
                assert!(mask.allows(q, reflection_pos(l, slot)));
            }
            assert!(mask.allows(q, eof2_pos(l, k)));
        }
    }

    #[test]
    fn mask_draft_is_causal() {
        let (l, k) = (4, 2);
        let mask = build_template_mask(l, k);
        for t in 1..=l {
            for t2 in 1..=l {
                assert_eq!(mask.allows(draft_pos(t), draft_pos(t2)), t2 <= t);
            }
        }
    }

    #[test]
    fn mask_reflection_never_sees_correction() {
        let (l, k) = (3, 2);
        let mask = build_template_mask(l, k);
        for slot in 0..=k {
            for t in 1..=l {
                assert!(!mask.allows(reflection_pos(l, slot), correction_pos(l, k, t)));
            }
        }
    }

    #[test]
    fn inputs_follow_segment_triggers() {
        let cfg = ModelConfig {
            embed_dim: 8,
            model_dim: 8,
            ffn_dim: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 1,
            level_vocabs: vec![5, 5, 5],
            head_map: vec![0, 1, 1],
            attr_buckets: vec![4, 3],
            max_history: 10,
        };
        let tokens = TemplateTokens {
            draft: vec![1, 2, 3],
            loc: 2,
            sem: vec![1, 0],
            correction: vec![4, 0, 2],
        };
        let inputs =
            decoder_inputs(&cfg, &tokens, cfg.template_len(), &ReflectionInputs::InPlace);
        assert_eq!(inputs[0], DecInput::Special(SpecialToken::Bos1));
        assert_eq!(inputs[1], DecInput::Level { table: 0, token: 1 });
        assert_eq!(inputs[3], DecInput::Level { table: 1, token: 3 }); // eof1 carries last draft token
        assert_eq!(inputs[4], DecInput::Loc(1));
        assert_eq!(inputs[5], DecInput::Sem { attr: 0, value: 1 });
        assert_eq!(inputs[7], DecInput::Special(SpecialToken::Eof2));
        assert_eq!(inputs[8], DecInput::Special(SpecialToken::Bos3));
        assert_eq!(inputs[9], DecInput::Level { table: 0, token: 4 });

        let triggered =
            decoder_inputs(&cfg, &tokens, cfg.template_len(), &ReflectionInputs::Trigger);
        for slot in 0..=2 {
            assert_eq!(
                triggered[reflection_pos(3, slot)],
                DecInput::Special(SpecialToken::Bos2)
            );
        }
    }
}
