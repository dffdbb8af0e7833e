//! Inference engine: beam-search drafts, parallel reflection with entropy
//! measurement, entropy-calibrated re-ranking, the skip rule, and the greedy
//! correction pass that produces the final ranked item list.
//!
//! Each beam gets an entropy-calibrated score
//! `egrs = base_log_prob + alpha_entropy * mean_reflection_entropy`, so beams
//! whose reflection is uncertain rank higher and keep their correction
//! budget, while confident beams either skip correction outright (when the
//! localization slot declares the draft fully correct) or are pruned first.

use serde::{Deserialize, Serialize};

use crate::model::{template, EncoderOutput, Model, PositionRole, ReflectionInputs, TemplateTokens};
use crate::rng::argmax;
use crate::tensor::{entropy, log_sum_exp, softmax_row};
use crate::tokenizer::SemanticTokenizer;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Beam budget B.
    pub beam_size: usize,
    /// Entropy calibration weight.
    pub alpha_entropy: f64,
    /// Retain drafts whose reflection declares them fully correct.
    pub skip_rule: bool,
    /// Per-beam width of the correction decode (1 = greedy).
    pub correction_width: usize,
    /// Plain one-pass beam search (no reflection, no correction).
    pub one_pass: bool,
    /// Treat every beam as skipped regardless of its reflection.
    pub force_skip: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 20,
            alpha_entropy: 0.2,
            skip_rule: true,
            correction_width: 1,
            one_pass: false,
            force_skip: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BeamStatus {
    Pending,
    SkippedCorrect,
    Corrected,
}

/// Greedy reflection outcome for one beam.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReflectionOutcome {
    /// Localization value in 1..=L+1; L+1 declares the draft fully correct.
    pub loc: usize,
    /// One 0/1 flag per attribute.
    pub sem: Vec<usize>,
    /// Mean token-level entropy over the reflection slots, natural log.
    pub entropy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Beam {
    pub draft: Vec<usize>,
    /// Sum of draft token log-probabilities.
    pub base_score: f64,
    pub reflection: Option<ReflectionOutcome>,
    pub egrs_score: f64,
    pub status: BeamStatus,
    pub final_tokens: Vec<usize>,
    pub item: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DecodeStats {
    pub draft_steps: usize,
    pub reflection_passes: usize,
    pub correction_steps: usize,
    pub skipped: usize,
    pub corrected: usize,
    pub invalid_dropped: usize,
    pub truncated_beams: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Deduplicated items ranked by entropy-calibrated score.
    pub items: Vec<(usize, f64)>,
    pub beams: Vec<Beam>,
    pub stats: DecodeStats,
}

fn log_probs(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&v| v - lse).collect()
}

/// Standard beam search over the draft levels. Beams come back sorted by
/// base score (descending), ties broken by token order. If some level offers
/// fewer expansions than the budget, all of them are returned.
pub fn beam_search_draft(
    model: &Model,
    enc: &EncoderOutput,
    beam_size: usize,
    stats: &mut DecodeStats,
) -> Vec<Beam> {
    assert!(beam_size >= 1);
    let l = model.config.seq_len();
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for level in 1..=l {
        let mut expansions: Vec<(Vec<usize>, f64)> = Vec::new();
        for (prefix, score) in &beams {
            let tokens = TemplateTokens { draft: prefix.clone(), ..Default::default() };
            let logits = model.decode_step(enc, &tokens, PositionRole::Draft(level));
            stats.draft_steps += 1;
            let lps = log_probs(&logits);
            for (tok, lp) in lps.iter().enumerate() {
                let mut next = prefix.clone();
                next.push(tok);
                expansions.push((next, score + lp));
            }
        }
        expansions.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if expansions.len() < beam_size {
            stats.truncated_beams = true;
        }
        expansions.truncate(beam_size);
        beams = expansions;
    }
    beams
        .into_iter()
        .map(|(draft, base_score)| Beam {
            final_tokens: Vec::new(),
            egrs_score: base_score,
            base_score,
            draft,
            reflection: None,
            status: BeamStatus::Pending,
            item: None,
        })
        .collect()
}

/// One masked parallel pass over the reflection slots: greedy tokens plus the
/// mean slot entropy.
pub fn reflect(
    model: &Model,
    enc: &EncoderOutput,
    draft: &[usize],
    stats: &mut DecodeStats,
) -> ReflectionOutcome {
    let l = model.config.seq_len();
    let k = model.config.num_attributes();
    let tokens = TemplateTokens { draft: draft.to_vec(), ..Default::default() };
    let reads: Vec<usize> = (0..=k).map(|j| template::reflection_pos(l, j)).collect();
    let slot_logits = model.decoder_logits(
        enc,
        &tokens,
        template::reflection_prefix(l, k),
        &ReflectionInputs::Trigger,
        &reads,
    );
    stats.reflection_passes += 1;

    let mut entropies = Vec::with_capacity(k + 1);
    let mut greedy = Vec::with_capacity(k + 1);
    for logits in &slot_logits {
        let mut probs = logits.clone();
        softmax_row(&mut probs);
        entropies.push(entropy(&probs));
        greedy.push(argmax(&probs));
    }
    let mean_entropy = entropies.iter().sum::<f64>() / entropies.len() as f64;
    ReflectionOutcome {
        loc: greedy[0] + 1,
        sem: greedy[1..].to_vec(),
        entropy: mean_entropy,
    }
}

/// Re-scores beams by `base + alpha * entropy` and keeps the top `beam_size`.
/// Ties break by base score, then token order, so ranking is deterministic.
pub fn egrs_rank(beams: &mut Vec<Beam>, alpha_entropy: f64, beam_size: usize) {
    for beam in beams.iter_mut() {
        let h = beam.reflection.as_ref().map(|r| r.entropy).unwrap_or(0.0);
        beam.egrs_score = beam.base_score + alpha_entropy * h;
    }
    beams.sort_by(|a, b| {
        b.egrs_score
            .total_cmp(&a.egrs_score)
            .then_with(|| b.base_score.total_cmp(&a.base_score))
            .then_with(|| a.draft.cmp(&b.draft))
    });
    beams.truncate(beam_size);
}

/// Applies the skip rule: a reflection that declares the draft fully correct
/// retains the draft as the final sequence and spends no correction budget.
pub fn apply_skip_rule(beam: &mut Beam, seq_len: usize) {
    let skip = beam
        .reflection
        .as_ref()
        .map(|r| r.loc == seq_len + 1)
        .unwrap_or(false);
    if skip {
        beam.status = BeamStatus::SkippedCorrect;
        beam.final_tokens = beam.draft.clone();
    }
}

/// Decodes the correction segment for one beam, conditioned on its draft and
/// reflection tokens through the template mask. `width` 1 is greedy; larger
/// widths run a small per-beam beam search over correction tokens and keep
/// the best sequence.
pub fn correct_pass(
    model: &Model,
    enc: &EncoderOutput,
    draft: &[usize],
    reflection: &ReflectionOutcome,
    width: usize,
    stats: &mut DecodeStats,
) -> Vec<usize> {
    assert!(width >= 1);
    let l = model.config.seq_len();
    let mut candidates: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for level in 1..=l {
        let mut expansions: Vec<(Vec<usize>, f64)> = Vec::new();
        for (prefix, score) in &candidates {
            let tokens = TemplateTokens {
                draft: draft.to_vec(),
                loc: reflection.loc,
                sem: reflection.sem.clone(),
                correction: prefix.clone(),
            };
            let logits = model.decode_step(enc, &tokens, PositionRole::Correction(level));
            stats.correction_steps += 1;
            let lps = log_probs(&logits);
            if width == 1 {
                let tok = argmax(&lps);
                let mut next = prefix.clone();
                next.push(tok);
                expansions.push((next, score + lps[tok]));
            } else {
                for (tok, lp) in lps.iter().enumerate() {
                    let mut next = prefix.clone();
                    next.push(tok);
                    expansions.push((next, score + lp));
                }
            }
        }
        expansions.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        expansions.truncate(width);
        candidates = expansions;
    }
    candidates.into_iter().next().unwrap().0
}

/// Maps finals through the lookup, drops invalid codes, deduplicates keeping
/// the highest-scored entry, and ranks by entropy-calibrated score.
pub fn finalize(
    mut beams: Vec<Beam>,
    tokenizer: &SemanticTokenizer,
    mut stats: DecodeStats,
) -> DecodeResult {
    for beam in beams.iter_mut() {
        beam.item = tokenizer.item_for(&beam.final_tokens);
        match beam.status {
            BeamStatus::SkippedCorrect => stats.skipped += 1,
            BeamStatus::Corrected => stats.corrected += 1,
            BeamStatus::Pending => {}
        }
    }
    beams.sort_by(|a, b| {
        b.egrs_score
            .total_cmp(&a.egrs_score)
            .then_with(|| b.base_score.total_cmp(&a.base_score))
            .then_with(|| a.final_tokens.cmp(&b.final_tokens))
    });
    let mut seen = std::collections::HashSet::new();
    let mut items = Vec::new();
    for beam in &beams {
        match beam.item {
            None => stats.invalid_dropped += 1,
            Some(item) => {
                if seen.insert(item) {
                    items.push((item, beam.egrs_score));
                }
            }
        }
    }
    DecodeResult { items, beams, stats }
}

/// Full decode for one user history.
pub fn decode_user(
    model: &Model,
    tokenizer: &SemanticTokenizer,
    enc: &EncoderOutput,
    config: &DecodeConfig,
) -> DecodeResult {
    let l = model.config.seq_len();
    let mut stats = DecodeStats::default();
    let mut beams = beam_search_draft(model, enc, config.beam_size, &mut stats);

    if config.one_pass {
        for beam in beams.iter_mut() {
            beam.status = BeamStatus::SkippedCorrect;
            beam.final_tokens = beam.draft.clone();
            beam.egrs_score = beam.base_score;
        }
        return finalize(beams, tokenizer, stats);
    }

    for beam in beams.iter_mut() {
        let outcome = reflect(model, enc, &beam.draft, &mut stats);
        beam.reflection = Some(outcome);
        if config.force_skip {
            beam.status = BeamStatus::SkippedCorrect;
            beam.final_tokens = beam.draft.clone();
        } else if config.skip_rule {
            apply_skip_rule(beam, l);
        }
    }

    egrs_rank(&mut beams, config.alpha_entropy, config.beam_size);

    for beam in beams.iter_mut() {
        if beam.status != BeamStatus::Pending {
            continue;
        }
        let reflection = beam.reflection.clone().expect("pending beam must be reflected");
        beam.final_tokens = correct_pass(
            model,
            enc,
            &beam.draft,
            &reflection,
            config.correction_width,
            &mut stats,
        );
        beam.status = BeamStatus::Corrected;
    }

    finalize(beams, tokenizer, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::model::ModelConfig;
    use crate::tokenizer::TokenizerConfig;

    fn fixture() -> (Model, SemanticTokenizer, EncoderOutput) {
        let data_cfg = SyntheticConfig {
            n_items: 60,
            n_users: 4,
            n_categories: 4,
            n_brands: 3,
            embed_dim: 8,
            ..Default::default()
        };
        let ds = generate_synthetic(&data_cfg, 5).unwrap();
        let tok_cfg = TokenizerConfig {
            levels: 2,
            codebook_size: 8,
            kmeans_iters: 10,
            use_suffix: true,
            seed: 5,
        };
        let tokenizer = SemanticTokenizer::fit(&ds.catalog.embeddings(), tok_cfg).unwrap();
        let model_cfg = ModelConfig::for_tokenizer(&tokenizer, &ds.catalog, 8, 16, 1, 1, 2, 10);
        let model = Model::new(model_cfg, 3);
        let history =
            crate::model::build_history(&ds.sequences[0].items[..4], &tokenizer, &ds.catalog);
        let enc = model.encode(&history);
        (model, tokenizer, enc)
    }

    #[test]
    fn beam_width_one_is_greedy() {
        let (model, _, enc) = fixture();
        let mut stats = DecodeStats::default();
        let beams = beam_search_draft(&model, &enc, 1, &mut stats);
        assert_eq!(beams.len(), 1);
        let mut prefix = Vec::new();
        for level in 1..=model.config.seq_len() {
            let tokens = TemplateTokens { draft: prefix.clone(), ..Default::default() };
            let logits = model.decode_step(&enc, &tokens, PositionRole::Draft(level));
            prefix.push(argmax(&logits));
        }
        assert_eq!(beams[0].draft, prefix);
    }

    #[test]
    fn beams_sorted_non_increasing() {
        let (model, _, enc) = fixture();
        let mut stats = DecodeStats::default();
        let beams = beam_search_draft(&model, &enc, 12, &mut stats);
        for w in beams.windows(2) {
            assert!(w[0].base_score >= w[1].base_score);
        }
    }

    #[test]
    fn beam_search_matches_exhaustive_enumeration() {
        let (model, _, enc) = fixture();
        let l = model.config.seq_len();
        let total: usize = model.config.level_vocabs.iter().product();
        let mut stats = DecodeStats::default();
        let beams = beam_search_draft(&model, &enc, total, &mut stats);

        // brute-force oracle: score every full sequence by chained log-probs
        let mut all: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        for level in 1..=l {
            let mut next = Vec::new();
            for (prefix, score) in &all {
                let tokens = TemplateTokens { draft: prefix.clone(), ..Default::default() };
                let logits = model.decode_step(&enc, &tokens, PositionRole::Draft(level));
                let lps = log_probs(&logits);
                for (tok, lp) in lps.iter().enumerate() {
                    let mut p = prefix.clone();
                    p.push(tok);
                    next.push((p, score + lp));
                }
            }
            all = next;
        }
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        assert_eq!(beams.len(), all.len());
        for (beam, (tokens, score)) in beams.iter().zip(&all) {
            assert_eq!(&beam.draft, tokens);
            assert!((beam.base_score - score).abs() < 1e-9);
        }
    }

    #[test]
    fn reflection_entropy_is_bounded() {
        let (model, _, enc) = fixture();
        let mut stats = DecodeStats::default();
        let outcome = reflect(&model, &enc, &[1, 2, 0], &mut stats);
        let l = model.config.seq_len();
        let k = model.config.num_attributes();
        let bound = (((l + 1) as f64).ln() + k as f64 * 2f64.ln()) / (k + 1) as f64;
        assert!(outcome.entropy >= 0.0);
        assert!(outcome.entropy <= bound + 1e-12);
        assert!(outcome.loc >= 1 && outcome.loc <= l + 1);
        assert_eq!(outcome.sem.len(), k);
    }

    #[test]
    fn egrs_rank_prefers_entropy_at_equal_base() {
        let beam = |draft: Vec<usize>, base: f64, h: f64| Beam {
            draft,
            base_score: base,
            reflection: Some(ReflectionOutcome { loc: 1, sem: vec![0, 0], entropy: h }),
            egrs_score: 0.0,
            status: BeamStatus::Pending,
            final_tokens: Vec::new(),
            item: None,
        };
        let mut beams = vec![beam(vec![0, 0], -1.0, 0.1), beam(vec![1, 1], -1.0, 0.9)];
        egrs_rank(&mut beams, 0.2, 2);
        assert_eq!(beams[0].draft, vec![1, 1]);

        // alpha 0 falls back to the base-score order
        let mut beams = vec![beam(vec![1, 1], -2.0, 0.9), beam(vec![0, 0], -1.0, 0.1)];
        egrs_rank(&mut beams, 0.0, 2);
        assert_eq!(beams[0].draft, vec![0, 0]);
        assert_eq!(beams[0].egrs_score, beams[0].base_score);
    }

    #[test]
    fn egrs_pruning_is_monotone() {
        let mut beams: Vec<Beam> = (0..8)
            .map(|i| Beam {
                draft: vec![i, i],
                base_score: -(i as f64),
                reflection: Some(ReflectionOutcome {
                    loc: 1,
                    sem: vec![0, 0],
                    entropy: (i as f64) * 0.3,
                }),
                egrs_score: 0.0,
                status: BeamStatus::Pending,
                final_tokens: Vec::new(),
                item: None,
            })
            .collect();
        let full: Vec<f64> = {
            let mut clone = beams.clone();
            egrs_rank(&mut clone, 0.5, 8);
            clone.iter().map(|b| b.egrs_score).collect()
        };
        egrs_rank(&mut beams, 0.5, 3);
        let kept_min = beams.iter().map(|b| b.egrs_score).fold(f64::INFINITY, f64::min);
        for score in full.iter().skip(3) {
            assert!(kept_min >= *score);
        }
    }

    #[test]
    fn skip_rule_keeps_draft_and_spends_no_correction() {
        let (model, tokenizer, enc) = fixture();
        let l = model.config.seq_len();
        let mut beam = Beam {
            draft: vec![1, 2, 0],
            base_score: -1.0,
            reflection: Some(ReflectionOutcome { loc: l + 1, sem: vec![1, 1], entropy: 0.2 }),
            egrs_score: -1.0,
            status: BeamStatus::Pending,
            final_tokens: Vec::new(),
            item: None,
        };
        apply_skip_rule(&mut beam, l);
        assert_eq!(beam.status, BeamStatus::SkippedCorrect);
        assert_eq!(beam.final_tokens, beam.draft);

        let mut pending = beam.clone();
        pending.reflection = Some(ReflectionOutcome { loc: 1, sem: vec![0, 0], entropy: 0.2 });
        pending.status = BeamStatus::Pending;
        apply_skip_rule(&mut pending, l);
        assert_eq!(pending.status, BeamStatus::Pending);

        // a full decode counts zero correction steps when all beams skip
        let cfg = DecodeConfig { beam_size: 4, force_skip: true, ..Default::default() };
        let result = decode_user(&model, &tokenizer, &enc, &cfg);
        assert_eq!(result.stats.correction_steps, 0);
        assert_eq!(result.stats.skipped, 4);
    }

    #[test]
    fn greedy_correction_spends_l_steps_per_beam() {
        let (model, _, enc) = fixture();
        let l = model.config.seq_len();
        let reflection = ReflectionOutcome { loc: 1, sem: vec![0, 1], entropy: 0.5 };
        let mut stats = DecodeStats::default();
        let corrected = correct_pass(&model, &enc, &[1, 2, 0], &reflection, 1, &mut stats);
        assert_eq!(corrected.len(), l);
        assert_eq!(stats.correction_steps, l);
    }

    #[test]
    fn correction_budget_linear_in_pending_beams() {
        let (model, tokenizer, enc) = fixture();
        let l = model.config.seq_len();
        let cfg = DecodeConfig { beam_size: 6, ..Default::default() };
        let result = decode_user(&model, &tokenizer, &enc, &cfg);
        let pending = result.stats.corrected;
        assert!(result.stats.correction_steps <= l * pending);
        assert_eq!(result.stats.skipped + result.stats.corrected, result.beams.len());
    }

    #[test]
    fn one_pass_equals_forced_skip_with_zero_alpha() {
        let (model, tokenizer, enc) = fixture();
        let one_pass = decode_user(
            &model,
            &tokenizer,
            &enc,
            &DecodeConfig { beam_size: 8, one_pass: true, ..Default::default() },
        );
        let degenerate = decode_user(
            &model,
            &tokenizer,
            &enc,
            &DecodeConfig {
                beam_size: 8,
                alpha_entropy: 0.0,
                force_skip: true,
                ..Default::default()
            },
        );
        assert_eq!(one_pass.items, degenerate.items);
        let finals_a: Vec<_> = one_pass.beams.iter().map(|b| b.final_tokens.clone()).collect();
        let finals_b: Vec<_> = degenerate.beams.iter().map(|b| b.final_tokens.clone()).collect();
        assert_eq!(finals_a, finals_b);
    }

    #[test]
    fn finalize_deduplicates_and_bounds_length() {
        let (model, tokenizer, enc) = fixture();
        let cfg = DecodeConfig { beam_size: 10, ..Default::default() };
        let result = decode_user(&model, &tokenizer, &enc, &cfg);
        let mut seen = std::collections::HashSet::new();
        for (item, _) in &result.items {
            assert!(seen.insert(*item), "duplicate item in ranking");
        }
        assert!(result.items.len() <= 10);
    }
}
