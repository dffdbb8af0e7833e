//! Supervised fine-tuning on the reflect-and-correct template.
//!
//! Beam drafts from the pretrained backbone are annotated with structured
//! reflection labels (first-divergence position plus one consistency flag
//! per attribute), serialized into three-segment templates, and the model is
//! fine-tuned on draft, reflection and correction supervision jointly:
//!
//! `loss = draft_nll + lambda_rc * (reflection_nll + correction_nll)`
//!
//! with delimiter positions excluded. During training the reflection-slot
//! inputs are randomly masked back to the BOS2 trigger (scheduled masking) so
//! the slots stay predictable from the draft alone, matching the parallel
//! prediction pass used at inference.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Catalog, SplitDataset};
use crate::decode::{beam_search_draft, DecodeStats};
use crate::error::GrcError;
use crate::model::{
    build_history, template_roles, GraphCtx, HistoryItem, Model, PositionRole, ReflectionInputs,
    TemplateForwardGraph, TemplateTokens,
};
use crate::optim::{AdamState, GradStore};
use crate::rng::stream_rng;
use crate::tensor::{Tape, TensorId};
use crate::tokenizer::SemanticTokenizer;
use crate::Result;

/// Structured reflection label for one draft against the ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionLabel {
    /// First position where the draft diverges, or L+1 when fully correct.
    pub loc: usize,
    /// 1 where the draft item matches the target item on that attribute.
    pub sem: Vec<usize>,
    /// The draft decoded to no catalog item; its flags are pessimistic zeros.
    pub invalid_draft: bool,
}

/// First-divergence position: `min { t : draft_t != gt_t }`, or L+1.
pub fn annotate_loc(draft: &[usize], gt: &[usize]) -> usize {
    assert_eq!(draft.len(), gt.len(), "annotate_loc: length mismatch");
    for (t, (d, g)) in draft.iter().zip(gt).enumerate() {
        if d != g {
            return t + 1;
        }
    }
    draft.len() + 1
}

/// Attribute-consistency flags between a (possibly unresolvable) draft item
/// and the target item. An invalid draft matches nothing.
pub fn annotate_sem(draft_item: Option<usize>, gt_item: usize, catalog: &Catalog) -> Vec<usize> {
    (0..catalog.attribute_names.len())
        .map(|k| {
            let gt_bucket = catalog.items[gt_item].attributes[k];
            match draft_item {
                Some(d) => usize::from(catalog.items[d].attributes[k] == gt_bucket),
                None => 0,
            }
        })
        .collect()
}

/// Full label: localization plus semantic flags, resolving items through the
/// tokenizer lookup.
pub fn annotate(
    draft: &[usize],
    gt_tokens: &[usize],
    gt_item: usize,
    tokenizer: &SemanticTokenizer,
    catalog: &Catalog,
) -> ReflectionLabel {
    let loc = annotate_loc(draft, gt_tokens);
    let draft_item = tokenizer.item_for(draft);
    ReflectionLabel {
        loc,
        sem: annotate_sem(draft_item, gt_item, catalog),
        invalid_draft: draft_item.is_none(),
    }
}

/// One supervision record: a draft with its labels and the ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Template {
    pub user_id: usize,
    /// History item ids feeding the encoder.
    pub history: Vec<usize>,
    pub draft: Vec<usize>,
    pub label: ReflectionLabel,
    /// Ground-truth code; also the correction segment's target.
    pub gt: Vec<usize>,
}

/// One entry of the serialized template sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TemplateEntry {
    Draft(usize),
    Eof1,
    Loc(usize),
    Sem { attr: usize, value: usize },
    Eof2,
    Correction(usize),
    Eof3,
}

impl Template {
    /// Model-facing token content (correction segment carries the target).
    pub fn tokens(&self) -> TemplateTokens {
        TemplateTokens {
            draft: self.draft.clone(),
            loc: self.label.loc,
            sem: self.label.sem.clone(),
            correction: self.gt.clone(),
        }
    }

    /// Serializes the full 2L+K+4 template sequence with delimiters.
    pub fn serialized(&self) -> Vec<TemplateEntry> {
        let mut out = Vec::with_capacity(2 * self.draft.len() + self.label.sem.len() + 4);
        out.extend(self.draft.iter().map(|&t| TemplateEntry::Draft(t)));
        out.push(TemplateEntry::Eof1);
        out.push(TemplateEntry::Loc(self.label.loc));
        out.extend(
            self.label
                .sem
                .iter()
                .enumerate()
                .map(|(attr, &value)| TemplateEntry::Sem { attr, value }),
        );
        out.push(TemplateEntry::Eof2);
        out.extend(self.gt.iter().map(|&t| TemplateEntry::Correction(t)));
        out.push(TemplateEntry::Eof3);
        out
    }

    /// Per-position loss weights for the serialized sequence: draft positions
    /// weigh 1, reflection and correction weigh `lambda_rc`, delimiters 0.
    pub fn loss_weights(&self, lambda_rc: f64) -> Vec<f64> {
        let l = self.draft.len();
        let k = self.label.sem.len();
        template_roles(l, k)
            .into_iter()
            .map(|role| match role {
                PositionRole::Draft(_) => 1.0,
                PositionRole::Reflection(_) => lambda_rc,
                PositionRole::Correction(_) => lambda_rc,
                _ => 0.0,
            })
            .collect()
    }

    /// Inverse of [`Template::serialized`], minus the history reference.
    pub fn parse_entries(entries: &[TemplateEntry]) -> Option<(Vec<usize>, usize, Vec<usize>, Vec<usize>)> {
        let mut draft = Vec::new();
        let mut sem = Vec::new();
        let mut correction = Vec::new();
        let mut loc = None;
        let mut segment = 0;
        for e in entries {
            match (segment, e) {
                (0, TemplateEntry::Draft(t)) => draft.push(*t),
                (0, TemplateEntry::Eof1) => segment = 1,
                (1, TemplateEntry::Loc(v)) => loc = Some(*v),
                (1, TemplateEntry::Sem { value, .. }) => sem.push(*value),
                (1, TemplateEntry::Eof2) => segment = 2,
                (2, TemplateEntry::Correction(t)) => correction.push(*t),
                (2, TemplateEntry::Eof3) => segment = 3,
                _ => return None,
            }
        }
        if segment != 3 {
            return None;
        }
        Some((draft, loc?, sem, correction))
    }
}

// ── corpus construction ─────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftCorpusConfig {
    /// Beam drafts annotated per training pair.
    pub drafts_per_pair: usize,
    /// At most this many fully-correct drafts are kept per pair, so the
    /// correction supervision is not dominated by no-op corrections.
    pub max_correct_per_pair: usize,
}

impl Default for SftCorpusConfig {
    fn default() -> Self {
        SftCorpusConfig { drafts_per_pair: 4, max_correct_per_pair: 1 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SftCorpusReport {
    pub templates: usize,
    pub pairs: usize,
    pub skipped_pairs: usize,
    pub invalid_drafts: usize,
}

/// Runs beam search on the frozen backbone over every training pair and
/// freezes the annotated drafts into templates. Deterministic ordering by
/// user, then pair position, then beam rank.
pub fn make_sft_corpus(
    model: &Model,
    tokenizer: &SemanticTokenizer,
    catalog: &Catalog,
    split: &SplitDataset,
    config: &SftCorpusConfig,
) -> (Vec<Template>, SftCorpusReport) {
    let mut templates = Vec::new();
    let mut report = SftCorpusReport::default();
    for user in &split.users {
        for t in 1..user.train.len() {
            let history_items = &user.train[..t];
            let gt_item = user.train[t];
            report.pairs += 1;
            let history = build_history(history_items, tokenizer, catalog);
            let enc = model.encode(&history);
            let mut stats = DecodeStats::default();
            let beams = beam_search_draft(model, &enc, config.drafts_per_pair, &mut stats);
            if beams.is_empty() {
                report.skipped_pairs += 1;
                continue;
            }
            let gt_tokens = tokenizer.code_of(gt_item).tokens.clone();
            let mut kept_correct = 0;
            for beam in &beams {
                let label = annotate(&beam.draft, &gt_tokens, gt_item, tokenizer, catalog);
                let fully_correct = label.loc == gt_tokens.len() + 1;
                if fully_correct {
                    if kept_correct >= config.max_correct_per_pair {
                        continue;
                    }
                    kept_correct += 1;
                }
                if label.invalid_draft {
                    report.invalid_drafts += 1;
                }
                templates.push(Template {
                    user_id: user.user_id,
                    history: history_items.to_vec(),
                    draft: beam.draft.clone(),
                    label,
                    gt: gt_tokens.clone(),
                });
            }
        }
    }
    report.templates = templates.len();
    (templates, report)
}

pub fn save_corpus(path: &Path, templates: &[Template]) -> Result<()> {
    let mut out = String::new();
    for t in templates {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| GrcError::io(path.display().to_string(), e))
}

pub fn load_corpus(path: &Path) -> Result<Vec<Template>> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| GrcError::io(path.display().to_string(), e))?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(GrcError::from))
        .collect()
}

// ── loss ────────────────────────────────────────────────────────────

/// Whether the draft-segment loss supervises ground-truth tokens (the model
/// sees its own draft as context but is pulled toward the target) or the
/// draft tokens themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftSupervision {
    GroundTruth,
    Draft,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftConfig {
    pub lambda_rc: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability that a reflection slot keeps its label token as input
    /// during training; otherwise it is masked back to the BOS2 trigger.
    pub reflection_keep_prob: f64,
    pub draft_supervision: DraftSupervision,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            lambda_rc: 1.2,
            steps: 400,
            batch_size: 8,
            learning_rate: 1e-3,
            reflection_keep_prob: 0.5,
            draft_supervision: DraftSupervision::GroundTruth,
        }
    }
}

/// Combines the per-position NLL nodes of one template forward pass:
/// draft NLL + lambda_rc * (reflection NLL + correction NLL), delimiters
/// excluded. Draft and correction terms sum over positions.
pub fn sft_loss(
    tape: &mut Tape,
    graph: &TemplateForwardGraph,
    template: &Template,
    lambda_rc: f64,
    draft_supervision: DraftSupervision,
) -> TensorId {
    let draft_targets: &[usize] = match draft_supervision {
        DraftSupervision::GroundTruth => &template.gt,
        DraftSupervision::Draft => &template.draft,
    };
    let mut draft_terms = Vec::new();
    for (logits, &target) in graph.draft.iter().zip(draft_targets) {
        draft_terms.push(tape.cross_entropy(*logits, &[target]));
    }
    let draft_stack = tape.concat_rows(&draft_terms);
    let draft_nll = tape.sum_all(draft_stack);

    let mut rc_terms = Vec::new();
    rc_terms.push(tape.cross_entropy(graph.reflection[0], &[template.label.loc - 1]));
    for (k, &flag) in template.label.sem.iter().enumerate() {
        rc_terms.push(tape.cross_entropy(graph.reflection[k + 1], &[flag]));
    }
    for (logits, &target) in graph.correction.iter().zip(&template.gt) {
        rc_terms.push(tape.cross_entropy(*logits, &[target]));
    }
    let rc_stack = tape.concat_rows(&rc_terms);
    let rc_nll = tape.sum_all(rc_stack);
    let rc_weighted = tape.scale(rc_nll, lambda_rc);
    tape.add(draft_nll, rc_weighted)
}

fn reflection_mask(k: usize, keep_prob: f64, rng: &mut ChaCha8Rng) -> ReflectionInputs {
    if keep_prob >= 1.0 {
        return ReflectionInputs::InPlace;
    }
    if keep_prob <= 0.0 {
        return ReflectionInputs::Trigger;
    }
    ReflectionInputs::Mixed((0..=k).map(|_| rng.gen::<f64>() < keep_prob).collect())
}

/// Fine-tunes the model on a frozen template corpus. Returns the loss curve.
pub fn train_sft(
    model: &mut Model,
    templates: &[Template],
    tokenizer: &SemanticTokenizer,
    catalog: &Catalog,
    config: &SftConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    assert!(!templates.is_empty(), "sft requires a non-empty corpus");
    let k = model.config.num_attributes();
    let mut adam = AdamState::new(config.learning_rate);
    let mut rng = stream_rng(seed, &[0x5f7]);
    let mut curve = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut tape = Tape::new();
        let mut ctx = GraphCtx::new(&mut tape, &model.params, true);
        let mut batch_losses = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let template = &templates[rng.gen_range(0..templates.len())];
            let history: Vec<HistoryItem> = build_history(&template.history, tokenizer, catalog);
            let refl = reflection_mask(k, config.reflection_keep_prob, &mut rng);
            let graph = ctx_forward(model, &mut ctx, &history, template, &refl);
            batch_losses.push(sft_loss(
                ctx.tape,
                &graph,
                template,
                config.lambda_rc,
                config.draft_supervision,
            ));
        }
        let stacked = ctx.tape.concat_rows(&batch_losses);
        let loss = ctx.tape.mean_all(stacked);
        let loss_value = ctx.tape.value(loss);
        ctx.tape.backward(loss);
        let mut grads = GradStore::new();
        ctx.collect_grads(&mut grads);
        drop(tape);
        adam.step(&mut model.params, &grads)?;
        curve.push(loss_value);
    }
    Ok(curve)
}

fn ctx_forward(
    model: &Model,
    ctx: &mut GraphCtx,
    history: &[HistoryItem],
    template: &Template,
    refl: &ReflectionInputs,
) -> TemplateForwardGraph {
    model.template_forward(ctx, history, &template.tokens(), refl)
}
