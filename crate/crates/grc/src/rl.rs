//! GRPO reinforcement learning over full draft/reflect/correct episodes.
//!
//! Each episode samples a draft token by token, samples the structured
//! reflection in one masked parallel pass, then samples a correction
//! conditioned on the draft and the sampled reflection. Episodes are scored
//! with a decomposed reward:
//!
//! * task reward: token hit counts of draft and correction, the correction
//!   weighted by `beta_last`,
//! * localization reward: predicted-divergence accuracy plus the hit ratio
//!   of actual fixes inside the predicted error region,
//! * semantic reward: flag accuracy plus credit for attributes flagged
//!   mismatched and actually repaired,
//! * improvement reward: the strict token-hit gain of the correction.
//!
//! Advantages are group-relative (per user), and the policy is updated with
//! the clipped ratio objective plus an exact per-position KL penalty against
//! the frozen fine-tuned reference policy.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Catalog;
use crate::model::{
    build_history, template, GraphCtx, HistoryItem, Model, ReflectionInputs, TemplateTokens,
};
use crate::optim::{AdamState, GradStore};
use crate::rng::{argmax, sample_index, stream_rng};
use crate::sft::annotate;
use crate::tensor::{log_sum_exp, Tape, TensorId};
use crate::tokenizer::SemanticTokenizer;
use crate::Result;

// ── rewards ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Weight of the correction reward against the task reward.
    pub beta_cor: f64,
    /// Weight of the corrected sequence's hit count inside the task reward.
    pub beta_last: f64,
    pub beta_loc: f64,
    pub beta_sem: f64,
    /// Stabilizer in the error-region hit ratio's denominator.
    pub epsilon: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { beta_cor: 2.2, beta_last: 2.0, beta_loc: 1.0, beta_sem: 0.8, epsilon: 1e-6 }
    }
}

/// Every reward component of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub l0: usize,
    pub l1: usize,
    pub r_task: f64,
    pub r_loc_label: f64,
    pub r_loc_cor: f64,
    pub r_loc: f64,
    pub r_sem_label: f64,
    pub r_sem_cor: f64,
    pub r_sem: f64,
    pub r_delta: f64,
    pub r_cor: f64,
    pub r_total: f64,
}

/// Token hit counts and the task reward `l0 + beta_last * l1`.
pub fn reward_task(
    draft: &[usize],
    corrected: &[usize],
    gt: &[usize],
    beta_last: f64,
) -> (usize, usize, f64) {
    assert_eq!(draft.len(), gt.len());
    assert_eq!(corrected.len(), gt.len());
    let l0 = draft.iter().zip(gt).filter(|(d, g)| d == g).count();
    let l1 = corrected.iter().zip(gt).filter(|(c, g)| c == g).count();
    let r_task = l0 as f64 + beta_last * l1 as f64;
    (l0, l1, r_task)
}

/// Localization reward: label accuracy plus the hit ratio of fixed positions
/// inside the predicted error region `{t : t >= loc_hat}`.
pub fn reward_loc(
    loc_hat: usize,
    loc_gt: usize,
    draft: &[usize],
    corrected: &[usize],
    gt: &[usize],
    epsilon: f64,
) -> (f64, f64, f64) {
    let l = gt.len();
    assert!(loc_hat >= 1 && loc_hat <= l + 1, "loc_hat out of range");
    let r_loc_label = if loc_hat == loc_gt { 1.0 } else { 0.0 };
    let region_size = if loc_hat <= l { l - loc_hat + 1 } else { 0 };
    let mut fixed_in_region = 0usize;
    for t in loc_hat..=l {
        if draft[t - 1] != gt[t - 1] && corrected[t - 1] == gt[t - 1] {
            fixed_in_region += 1;
        }
    }
    let r_loc_cor = fixed_in_region as f64 / (region_size as f64 + epsilon);
    let r_loc = r_loc_label + r_loc_cor;
    (r_loc_label, r_loc_cor, r_loc)
}

/// Semantic reward: mean flag accuracy plus the mean of the repair indicator
/// (flagged mismatched, truly mismatched before, matching after).
pub fn reward_sem(
    sem_hat: &[usize],
    sem_gt: &[usize],
    draft_item: Option<usize>,
    corrected_item: Option<usize>,
    gt_item: usize,
    catalog: &Catalog,
) -> (f64, f64, f64) {
    let k = sem_hat.len();
    assert!(k >= 1);
    assert_eq!(sem_gt.len(), k);
    let mut label_hits = 0usize;
    let mut repairs = 0usize;
    for attr in 0..k {
        if sem_hat[attr] == sem_gt[attr] {
            label_hits += 1;
        }
        let gt_bucket = catalog.items[gt_item].attributes[attr];
        let before = catalog.attribute_of(draft_item, attr) == Some(gt_bucket);
        let after = catalog.attribute_of(corrected_item, attr) == Some(gt_bucket);
        if sem_hat[attr] == 0 && !before && after {
            repairs += 1;
        }
    }
    let r_sem_label = label_hits as f64 / k as f64;
    let r_sem_cor = repairs as f64 / k as f64;
    let r_sem = r_sem_label + r_sem_cor;
    (r_sem_label, r_sem_cor, r_sem)
}

/// Strict improvement: the hit-count gain when positive, otherwise 0.
pub fn reward_delta(l0: usize, l1: usize) -> f64 {
    if l1 > l0 {
        (l1 - l0) as f64
    } else {
        0.0
    }
}

/// Sampled reflection tokens of one episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReflectionSample {
    /// Localization value in 1..=L+1.
    pub loc: usize,
    pub sem: Vec<usize>,
}

/// Full reward for one episode against the ground truth.
#[allow(clippy::too_many_arguments)]
pub fn compute_reward(
    draft: &[usize],
    reflection: &ReflectionSample,
    corrected: &[usize],
    gt_tokens: &[usize],
    gt_item: usize,
    tokenizer: &SemanticTokenizer,
    catalog: &Catalog,
    config: &RewardConfig,
) -> RewardBreakdown {
    let gt_label = annotate(draft, gt_tokens, gt_item, tokenizer, catalog);
    let (l0, l1, r_task) = reward_task(draft, corrected, gt_tokens, config.beta_last);
    let (r_loc_label, r_loc_cor, r_loc) =
        reward_loc(reflection.loc, gt_label.loc, draft, corrected, gt_tokens, config.epsilon);
    let draft_item = tokenizer.item_for(draft);
    let corrected_item = tokenizer.item_for(corrected);
    let (r_sem_label, r_sem_cor, r_sem) = reward_sem(
        &reflection.sem,
        &gt_label.sem,
        draft_item,
        corrected_item,
        gt_item,
        catalog,
    );
    let r_delta = reward_delta(l0, l1);
    let r_cor = config.beta_loc * r_loc + config.beta_sem * r_sem + r_delta;
    let r_total = r_task + config.beta_cor * r_cor;
    RewardBreakdown {
        l0,
        l1,
        r_task,
        r_loc_label,
        r_loc_cor,
        r_loc,
        r_sem_label,
        r_sem_cor,
        r_sem,
        r_delta,
        r_cor,
        r_total,
    }
}

// ── episodes ────────────────────────────────────────────────────────

/// One generate-reflect-correct trajectory with its sampling log-probs
/// (under the rollout policy) and reference-policy log-distributions for the
/// KL penalty.
#[derive(Debug, Clone)]
pub struct Episode {
    pub user_id: usize,
    pub history: Vec<usize>,
    pub draft: Vec<usize>,
    pub reflection: ReflectionSample,
    pub corrected: Vec<usize>,
    /// Log-probs of the sampled tokens: L draft, K+1 reflection, L correction.
    pub logp_old: Vec<f64>,
    /// Reference-policy log-distribution per sampled position.
    pub ref_logdist: Vec<Vec<f64>>,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    ZScore,
    Rank,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlConfig {
    /// Rollouts per user per iteration.
    pub group_size: usize,
    pub users_per_iter: usize,
    pub iterations: usize,
    /// Gradient steps on each iteration's episodes.
    pub updates_per_iter: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    /// Mean KL above this halves the learning rate.
    pub kl_limit: f64,
    pub advantage_mode: AdvantageMode,
    pub reward: RewardConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            group_size: 8,
            users_per_iter: 8,
            iterations: 30,
            updates_per_iter: 2,
            learning_rate: 3e-4,
            temperature: 1.0,
            clip_epsilon: 0.15,
            kl_beta: 0.03,
            kl_limit: 5.0,
            advantage_mode: AdvantageMode::ZScore,
            reward: RewardConfig::default(),
        }
    }
}

const GREEDY_TEMPERATURE: f64 = 1e-6;

fn tempered_log_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&v| v / temperature).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|&v| v - lse).collect()
}

fn sample_from_logits(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> (usize, f64) {
    if temperature <= GREEDY_TEMPERATURE {
        return (argmax(logits), 0.0);
    }
    let lps = tempered_log_probs(logits, temperature);
    let probs: Vec<f64> = lps.iter().map(|&lp| lp.exp()).collect();
    let tok = sample_index(rng, &probs);
    (tok, lps[tok])
}

/// Samples one full episode under `policy` and scores it. The reference
/// policy's per-position log-distributions are recorded for the KL penalty.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    policy: &Model,
    reference: &Model,
    tokenizer: &SemanticTokenizer,
    catalog: &Catalog,
    user_id: usize,
    history_items: &[usize],
    gt_item: usize,
    config: &RlConfig,
    rng: &mut ChaCha8Rng,
) -> Episode {
    let l = policy.config.seq_len();
    let k = policy.config.num_attributes();
    let history: Vec<HistoryItem> = build_history(history_items, tokenizer, catalog);
    let enc = policy.encode(&history);
    let temp = config.temperature;

    let mut logp_old = Vec::with_capacity(2 * l + k + 1);
    let mut draft = Vec::with_capacity(l);
    for level in 1..=l {
        let tokens = TemplateTokens { draft: draft.clone(), ..Default::default() };
        let logits = policy.decode_step(&enc, &tokens, template::PositionRole::Draft(level));
        let (tok, lp) = sample_from_logits(&logits, temp, rng);
        draft.push(tok);
        logp_old.push(lp);
    }

    // one masked parallel pass over the reflection slots
    let tokens = TemplateTokens { draft: draft.clone(), ..Default::default() };
    let reads: Vec<usize> = (0..=k).map(|j| template::reflection_pos(l, j)).collect();
    let slot_logits = policy.decoder_logits(
        &enc,
        &tokens,
        template::reflection_prefix(l, k),
        &ReflectionInputs::Trigger,
        &reads,
    );
    let (loc_class, lp_loc) = sample_from_logits(&slot_logits[0], temp, rng);
    logp_old.push(lp_loc);
    let mut sem = Vec::with_capacity(k);
    for slot in 1..=k {
        let (flag, lp) = sample_from_logits(&slot_logits[slot], temp, rng);
        sem.push(flag);
        logp_old.push(lp);
    }
    let reflection = ReflectionSample { loc: loc_class + 1, sem };

    let mut corrected = Vec::with_capacity(l);
    for level in 1..=l {
        let tokens = TemplateTokens {
            draft: draft.clone(),
            loc: reflection.loc,
            sem: reflection.sem.clone(),
            correction: corrected.clone(),
        };
        let logits = policy.decode_step(&enc, &tokens, template::PositionRole::Correction(level));
        let (tok, lp) = sample_from_logits(&logits, temp, rng);
        corrected.push(tok);
        logp_old.push(lp);
    }

    let gt_tokens = tokenizer.code_of(gt_item).tokens.clone();
    let reward = compute_reward(
        &draft,
        &reflection,
        &corrected,
        &gt_tokens,
        gt_item,
        tokenizer,
        catalog,
        &config.reward,
    );

    let ref_logdist = episode_log_dists(reference, &history, &draft, &reflection, &corrected, temp);

    Episode {
        user_id,
        history: history_items.to_vec(),
        draft,
        reflection,
        corrected,
        logp_old,
        ref_logdist,
        reward,
    }
}

/// Tempered log-distributions of a frozen model at every sampled position of
/// an episode (L draft, K+1 reflection, L correction).
pub fn episode_log_dists(
    model: &Model,
    history: &[HistoryItem],
    draft: &[usize],
    reflection: &ReflectionSample,
    corrected: &[usize],
    temperature: f64,
) -> Vec<Vec<f64>> {
    let l = model.config.seq_len();
    let k = model.config.num_attributes();
    let enc = model.encode(history);

    let reflect_tokens = TemplateTokens { draft: draft.to_vec(), ..Default::default() };
    let mut reads: Vec<usize> = (1..=l).map(template::draft_pos).collect();
    reads.extend((0..=k).map(|j| template::reflection_pos(l, j)));
    let pass_r = model.decoder_logits(
        &enc,
        &reflect_tokens,
        template::reflection_prefix(l, k),
        &ReflectionInputs::Trigger,
        &reads,
    );

    let correct_tokens = TemplateTokens {
        draft: draft.to_vec(),
        loc: reflection.loc,
        sem: reflection.sem.to_vec(),
        correction: corrected.to_vec(),
    };
    let corr_reads: Vec<usize> = (1..=l).map(|t| template::correction_pos(l, k, t)).collect();
    let pass_c = model.decoder_logits(
        &enc,
        &correct_tokens,
        template::correction_pos(l, k, l) + 1,
        &ReflectionInputs::InPlace,
        &corr_reads,
    );

    pass_r
        .iter()
        .chain(pass_c.iter())
        .map(|logits| tempered_log_probs(logits, temperature.max(GREEDY_TEMPERATURE)))
        .collect()
}

/// Log-probs of an episode's sampled tokens under a frozen model, computed
/// the same way the rollout recorded them.
pub fn rescore_episode(
    model: &Model,
    episode: &Episode,
    tokenizer: &SemanticTokenizer,
    catalog: &Catalog,
    temperature: f64,
) -> Vec<f64> {
    let history = build_history(&episode.history, tokenizer, catalog);
    let dists = episode_log_dists(
        model,
        &history,
        &episode.draft,
        &episode.reflection,
        &episode.corrected,
        temperature,
    );
    episode_tokens(model, episode)
        .iter()
        .zip(&dists)
        .map(|(&tok, dist)| dist[tok])
        .collect()
}

/// Sampled token index per position, aligned with `episode_log_dists`.
fn episode_tokens(model: &Model, episode: &Episode) -> Vec<usize> {
    let mut tokens = episode.draft.clone();
    tokens.push(episode.reflection.loc - 1);
    tokens.extend(&episode.reflection.sem);
    tokens.extend(&episode.corrected);
    debug_assert_eq!(
        tokens.len(),
        2 * model.config.seq_len() + model.config.num_attributes() + 1
    );
    tokens
}

// ── advantages ──────────────────────────────────────────────────────

/// Group-relative advantages. `ZScore` normalizes by the population standard
/// deviation; `Rank` maps average ranks onto a centered uniform grid, which
/// is invariant to any positive rescaling of the rewards. Both modes sum to
/// zero over the group. A singleton group gets advantage 0.
pub fn group_advantage(rewards: &[f64], mode: AdvantageMode) -> Vec<f64> {
    let n = rewards.len();
    if n <= 1 {
        return vec![0.0; n];
    }
    match mode {
        AdvantageMode::ZScore => {
            let mean = rewards.iter().sum::<f64>() / n as f64;
            let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect()
        }
        AdvantageMode::Rank => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| rewards[a].total_cmp(&rewards[b]));
            // average ranks over ties
            let mut rank = vec![0.0; n];
            let mut i = 0;
            while i < n {
                let mut j = i;
                while j + 1 < n && rewards[order[j + 1]] == rewards[order[i]] {
                    j += 1;
                }
                let avg = (i + j) as f64 / 2.0;
                for &idx in &order[i..=j] {
                    rank[idx] = avg;
                }
                i = j + 1;
            }
            let grid: Vec<f64> = rank.iter().map(|r| 2.0 * r / (n as f64 - 1.0) - 1.0).collect();
            let mean = grid.iter().sum::<f64>() / n as f64;
            grid.iter().map(|g| g - mean).collect()
        }
    }
}

// ── GRPO objective ──────────────────────────────────────────────────

/// Episodes of one user with their advantages.
pub struct EpisodeGroup {
    pub user_id: usize,
    pub episodes: Vec<Episode>,
    pub advantages: Vec<f64>,
}

pub struct GrpoLossStats {
    pub mean_kl: f64,
    pub dropped_episodes: usize,
}

/// Builds the clipped-surrogate-plus-KL loss for one group on `ctx`'s tape.
///
/// Per sampled position: `ratio = exp(logp_new - logp_old)`, objective
/// `min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)` averaged over the
/// episode's positions; the KL penalty is computed exactly over each
/// position's vocabulary against the frozen reference distribution. The
/// group's loss is the sum over episodes of `(-surrogate + kl_beta * KL)`,
/// scaled by `1/total_episodes` so accumulating groups yields a batch mean.
/// Episodes whose probability ratio overflows are dropped and counted.
#[allow(clippy::too_many_arguments)]
pub fn grpo_group_loss(
    model: &Model,
    ctx: &mut GraphCtx,
    group: &EpisodeGroup,
    tokenizer: &SemanticTokenizer,
    catalog: &Catalog,
    config: &RlConfig,
    total_episodes: usize,
    stats: &mut GrpoLossStats,
) -> Option<TensorId> {
    let l = model.config.seq_len();
    let k = model.config.num_attributes();
    let temp = config.temperature.max(GREEDY_TEMPERATURE);
    let mask = template::build_template_mask(l, k);
    let mut episode_losses: Vec<TensorId> = Vec::new();

    for (episode, &advantage) in group.episodes.iter().zip(&group.advantages) {
        let history = build_history(&episode.history, tokenizer, catalog);
        let enc = model.encoder_graph(ctx, &history);

        // pass over draft + reflection slots (trigger inputs), then the
        // correction pass conditioned on the sampled reflection
        let reflect_tokens = TemplateTokens { draft: episode.draft.clone(), ..Default::default() };
        let r_inputs = template::decoder_inputs(
            &model.config,
            &reflect_tokens,
            template::reflection_prefix(l, k),
            &ReflectionInputs::Trigger,
        );
        let hidden_r = model.decoder_graph(ctx, enc, &r_inputs, &mask);

        let correct_tokens = TemplateTokens {
            draft: episode.draft.clone(),
            loc: episode.reflection.loc,
            sem: episode.reflection.sem.clone(),
            correction: episode.corrected.clone(),
        };
        let c_inputs = template::decoder_inputs(
            &model.config,
            &correct_tokens,
            template::correction_pos(l, k, l) + 1,
            &ReflectionInputs::InPlace,
        );
        let hidden_c = model.decoder_graph(ctx, enc, &c_inputs, &mask);

        let tokens = episode_tokens(model, episode);
        let mut position_specs: Vec<(TensorId, usize)> = Vec::new();
        for t in 1..=l {
            let logits = model.position_logits(
                ctx,
                hidden_r,
                template::draft_pos(t),
                crate::model::HeadKind::Level(model.config.head_map[t - 1]),
            );
            position_specs.push((logits, tokens[t - 1]));
        }
        for j in 0..=k {
            let head = if j == 0 {
                crate::model::HeadKind::Loc
            } else {
                crate::model::HeadKind::Sem(j - 1)
            };
            let logits = model.position_logits(ctx, hidden_r, template::reflection_pos(l, j), head);
            position_specs.push((logits, tokens[l + j]));
        }
        for t in 1..=l {
            let logits = model.position_logits(
                ctx,
                hidden_c,
                template::correction_pos(l, k, t),
                crate::model::HeadKind::Level(model.config.head_map[t - 1]),
            );
            position_specs.push((logits, tokens[l + k + t]));
        }

        let mut surr_terms = Vec::with_capacity(position_specs.len());
        let mut kl_terms = Vec::with_capacity(position_specs.len());
        let mut finite = true;
        for (p, (logits, token)) in position_specs.iter().enumerate() {
            let scaled = ctx.tape.scale(*logits, 1.0 / temp);
            let logp = ctx.tape.log_softmax(scaled);
            let lp_new = ctx.tape.gather(logp, &[*token]);
            let diff_value = ctx.tape.data(lp_new)[0] - episode.logp_old[p];
            if !diff_value.is_finite() || diff_value > 500.0 {
                finite = false;
                break;
            }
            let old = ctx.tape.constant(vec![episode.logp_old[p]], vec![1, 1]);
            let diff = ctx.tape.sub(lp_new, old);
            let ratio = ctx.tape.exp(diff);
            let unclipped = ctx.tape.scale(ratio, advantage);
            let clipped_ratio =
                ctx.tape.clamp(ratio, 1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon);
            let clipped = ctx.tape.scale(clipped_ratio, advantage);
            surr_terms.push(ctx.tape.min_elem(unclipped, clipped));

            // exact KL(pi_theta || pi_ref) over this position's vocabulary
            let probs = ctx.tape.softmax(scaled);
            let ref_const = ctx
                .tape
                .constant(episode.ref_logdist[p].clone(), vec![1, episode.ref_logdist[p].len()]);
            let log_diff = ctx.tape.sub(logp, ref_const);
            let weighted = ctx.tape.mul(probs, log_diff);
            kl_terms.push(ctx.tape.sum_all(weighted));
        }
        if !finite {
            stats.dropped_episodes += 1;
            continue;
        }

        let surr_stack = ctx.tape.concat_rows(&surr_terms);
        let surrogate = ctx.tape.mean_all(surr_stack);
        let kl_stack = ctx.tape.concat_rows(&kl_terms);
        let kl = ctx.tape.mean_all(kl_stack);
        stats.mean_kl += ctx.tape.value(kl);

        let neg_surr = ctx.tape.scale(surrogate, -1.0);
        let kl_pen = ctx.tape.scale(kl, config.kl_beta);
        let loss = ctx.tape.add(neg_surr, kl_pen);
        episode_losses.push(ctx.tape.scale(loss, 1.0 / total_episodes as f64));
    }

    if episode_losses.is_empty() {
        return None;
    }
    let stacked = ctx.tape.concat_rows(&episode_losses);
    Some(ctx.tape.sum_all(stacked))
}

// ── training loop ───────────────────────────────────────────────────

/// Per-iteration reward and KL statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardCurveRow {
    pub iteration: usize,
    pub r_total_mean: f64,
    pub r_total_std: f64,
    pub r_task_mean: f64,
    pub r_task_std: f64,
    pub r_cor_mean: f64,
    pub r_cor_std: f64,
    pub r_loc_mean: f64,
    pub r_loc_std: f64,
    pub r_sem_mean: f64,
    pub r_sem_std: f64,
    pub r_delta_mean: f64,
    pub r_delta_std: f64,
    pub kl_mean: f64,
    pub dropped_episodes: usize,
    pub learning_rate: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// GRPO training: per iteration, sample a user minibatch, roll out
/// `group_size` episodes per user under the old-policy snapshot, compute
/// group-relative advantages, and take `updates_per_iter` clipped-objective
/// steps. The reference policy is the (frozen) input model.
pub fn train_rl(
    model: &mut Model,
    tokenizer: &SemanticTokenizer,
    catalog: &Catalog,
    rl_pairs: &[(usize, Vec<usize>, usize)],
    config: &RlConfig,
    seed: u64,
) -> Result<Vec<RewardCurveRow>> {
    assert!(!rl_pairs.is_empty(), "rl requires at least one (user, history, target)");
    assert!(config.group_size >= 2, "group-relative advantages need group_size >= 2");
    let reference = model.clone();
    let mut adam = AdamState::new(config.learning_rate);
    let mut curve = Vec::with_capacity(config.iterations);

    for iteration in 0..config.iterations {
        let old_policy = model.clone();

        // deterministic minibatch of users
        let mut pick_rng = stream_rng(seed, &[0x91, iteration as u64]);
        use rand::Rng;
        let mut groups: Vec<EpisodeGroup> = Vec::with_capacity(config.users_per_iter);
        for slot in 0..config.users_per_iter {
            let &(user_id, ref history, gt_item) = &rl_pairs[pick_rng.gen_range(0..rl_pairs.len())];
            let episodes: Vec<Episode> = (0..config.group_size)
                .map(|g| {
                    let mut rng =
                        stream_rng(seed, &[0x92, iteration as u64, slot as u64, g as u64]);
                    rollout(
                        &old_policy,
                        &reference,
                        tokenizer,
                        catalog,
                        user_id,
                        history,
                        gt_item,
                        config,
                        &mut rng,
                    )
                })
                .collect();
            let rewards: Vec<f64> = episodes.iter().map(|e| e.reward.r_total).collect();
            let advantages = group_advantage(&rewards, config.advantage_mode);
            groups.push(EpisodeGroup { user_id, episodes, advantages });
        }
        groups.sort_by_key(|g| g.user_id);

        let total_episodes: usize = groups.iter().map(|g| g.episodes.len()).sum();
        let mut last_stats = GrpoLossStats { mean_kl: 0.0, dropped_episodes: 0 };
        for _update in 0..config.updates_per_iter {
            let mut grads = GradStore::new();
            let mut stats = GrpoLossStats { mean_kl: 0.0, dropped_episodes: 0 };
            for group in &groups {
                let mut tape = Tape::new();
                let mut ctx = GraphCtx::new(&mut tape, &model.params, true);
                if let Some(loss) = grpo_group_loss(
                    model,
                    &mut ctx,
                    group,
                    tokenizer,
                    catalog,
                    config,
                    total_episodes,
                    &mut stats,
                ) {
                    ctx.tape.backward(loss);
                    ctx.collect_grads(&mut grads);
                }
            }
            adam.step(&mut model.params, &grads)?;
            stats.mean_kl /= (total_episodes - stats.dropped_episodes).max(1) as f64;
            last_stats = stats;
        }

        if last_stats.mean_kl > config.kl_limit {
            adam.learning_rate *= 0.5;
            eprintln!(
                "rl iteration {iteration}: mean KL {:.3} exceeds {:.1}, halving learning rate to {:.2e}",
                last_stats.mean_kl, config.kl_limit, adam.learning_rate
            );
        }

        let all: Vec<&RewardBreakdown> =
            groups.iter().flat_map(|g| g.episodes.iter().map(|e| &e.reward)).collect();
        let col = |f: fn(&RewardBreakdown) -> f64| -> Vec<f64> { all.iter().map(|r| f(r)).collect() };
        let (r_total_mean, r_total_std) = mean_std(&col(|r| r.r_total));
        let (r_task_mean, r_task_std) = mean_std(&col(|r| r.r_task));
        let (r_cor_mean, r_cor_std) = mean_std(&col(|r| r.r_cor));
        let (r_loc_mean, r_loc_std) = mean_std(&col(|r| r.r_loc));
        let (r_sem_mean, r_sem_std) = mean_std(&col(|r| r.r_sem));
        let (r_delta_mean, r_delta_std) = mean_std(&col(|r| r.r_delta));
        curve.push(RewardCurveRow {
            iteration,
            r_total_mean,
            r_total_std,
            r_task_mean,
            r_task_std,
            r_cor_mean,
            r_cor_std,
            r_loc_mean,
            r_loc_std,
            r_sem_mean,
            r_sem_std,
            r_delta_mean,
            r_delta_std,
            kl_mean: last_stats.mean_kl,
            dropped_episodes: last_stats.dropped_episodes,
            learning_rate: adam.learning_rate,
        });
    }
    Ok(curve)
}
