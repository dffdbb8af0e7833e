//! Training corpus: synthetic catalog + interaction generator, CSV ingestion
//! and the leave-one-out split.
//!
//! The synthetic generator plants recoverable structure: item embeddings are
//! category centroid + brand offset + noise (so the tokenizer's coarse levels
//! align with attributes), and user sequences follow a latent-interest Markov
//! process where the next item's category usually matches the current one and
//! exact repeats are common. Next-item prediction on this corpus is learnable
//! well above chance.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::GrcError;
use crate::rng::{next_gaussian, stream_rng};
use crate::Result;

pub const ATTR_CATEGORY: usize = 0;
pub const ATTR_BRAND: usize = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Item {
    /// External identifier (synthetic items use "i<idx>").
    pub external_id: String,
    pub embedding: Vec<f64>,
    /// One bucket id per configured attribute, in `attribute_names` order.
    pub attributes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    pub attribute_names: Vec<String>,
    /// Number of buckets per attribute.
    pub attribute_buckets: Vec<usize>,
    pub items: Vec<Item>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn embeddings(&self) -> Vec<Vec<f64>> {
        self.items.iter().map(|i| i.embedding.clone()).collect()
    }

    /// Attribute bucket of an item, `None` for an unresolvable item.
    pub fn attribute_of(&self, item: Option<usize>, attr: usize) -> Option<usize> {
        item.map(|i| self.items[i].attributes[attr])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: usize,
    /// Item indices in chronological order.
    pub items: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub catalog: Catalog,
    pub sequences: Vec<InteractionSequence>,
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| GrcError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GrcError::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

// ── synthetic generation ────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub n_categories: usize,
    pub n_brands: usize,
    pub embed_dim: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    /// Probability that the next interaction repeats the current item.
    pub p_repeat: f64,
    /// Probability that a non-repeat stays in the current category.
    pub p_stay: f64,
    /// Probability that an in-category step keeps the current brand.
    pub p_brand_stay: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_items: 1000,
            n_users: 3000,
            n_categories: 8,
            n_brands: 6,
            embed_dim: 16,
            seq_len_min: 6,
            seq_len_max: 24,
            p_repeat: 0.3,
            p_stay: 0.6,
            p_brand_stay: 0.5,
        }
    }
}

/// Generates the synthetic catalog and user sequences. Deterministic for a
/// fixed config and seed.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    if config.n_items == 0 || config.n_users == 0 {
        return Err(GrcError::Config("synthetic: n_items and n_users must be positive".into()));
    }
    if config.n_items < config.n_categories {
        return Err(GrcError::Config("synthetic: need at least one item per category".into()));
    }
    if config.embed_dim < 4 {
        return Err(GrcError::Config("synthetic: embed_dim must be at least 4".into()));
    }
    if config.seq_len_min < 3 || config.seq_len_max < config.seq_len_min {
        return Err(GrcError::Config("synthetic: sequence lengths must satisfy 3 <= min <= max".into()));
    }

    let d = config.embed_dim;
    let mut rng = stream_rng(seed, &[0xda7a, 1]);
    let cat_centroids: Vec<Vec<f64>> = (0..config.n_categories)
        .map(|_| (0..d).map(|_| next_gaussian(&mut rng) * 3.0).collect())
        .collect();
    let brand_offsets: Vec<Vec<f64>> = (0..config.n_brands)
        .map(|_| (0..d).map(|_| next_gaussian(&mut rng) * 1.2).collect())
        .collect();

    let mut items = Vec::with_capacity(config.n_items);
    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); config.n_categories];
    for idx in 0..config.n_items {
        // first items cover every category once so no category is empty
        let category = if idx < config.n_categories {
            idx
        } else {
            rng.gen_range(0..config.n_categories)
        };
        let brand = rng.gen_range(0..config.n_brands);
        let embedding: Vec<f64> = (0..d)
            .map(|k| {
                cat_centroids[category][k]
                    + brand_offsets[brand][k]
                    + next_gaussian(&mut rng) * 0.4
            })
            .collect();
        by_category[category].push(idx);
        items.push(Item {
            external_id: format!("i{idx}"),
            embedding,
            attributes: vec![category, brand],
        });
    }

    let mut sequences = Vec::with_capacity(config.n_users);
    for user_id in 0..config.n_users {
        let mut urng = stream_rng(seed, &[0xda7a, 2, user_id as u64]);
        let len = urng.gen_range(config.seq_len_min..=config.seq_len_max);
        // two preferred categories per user
        let pref = [
            urng.gen_range(0..config.n_categories),
            urng.gen_range(0..config.n_categories),
        ];
        let start_cat = pref[urng.gen_range(0..2)];
        let mut current = by_category[start_cat][urng.gen_range(0..by_category[start_cat].len())];
        let mut seq = vec![current];
        while seq.len() < len {
            let next = if urng.gen::<f64>() < config.p_repeat {
                current
            } else {
                let cur_cat = items[current].attributes[ATTR_CATEGORY];
                let cat = if urng.gen::<f64>() < config.p_stay {
                    cur_cat
                } else {
                    pref[urng.gen_range(0..2)]
                };
                let pool = &by_category[cat];
                let cur_brand = items[current].attributes[ATTR_BRAND];
                let same_brand: Vec<usize> = pool
                    .iter()
                    .copied()
                    .filter(|&i| items[i].attributes[ATTR_BRAND] == cur_brand)
                    .collect();
                if !same_brand.is_empty() && urng.gen::<f64>() < config.p_brand_stay {
                    same_brand[urng.gen_range(0..same_brand.len())]
                } else {
                    pool[urng.gen_range(0..pool.len())]
                }
            };
            seq.push(next);
            current = next;
        }
        sequences.push(InteractionSequence { user_id, items: seq });
    }

    Ok(Dataset {
        catalog: Catalog {
            attribute_names: vec!["category".into(), "brand".into()],
            attribute_buckets: vec![config.n_categories, config.n_brands],
            items,
        },
        sequences,
    })
}

/// Fraction of adjacent pairs whose categories match, over all sequences.
pub fn category_persistence(dataset: &Dataset) -> f64 {
    let mut same = 0usize;
    let mut total = 0usize;
    for seq in &dataset.sequences {
        for w in seq.items.windows(2) {
            total += 1;
            if dataset.catalog.items[w[0]].attributes[ATTR_CATEGORY]
                == dataset.catalog.items[w[1]].attributes[ATTR_CATEGORY]
            {
                same += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        same as f64 / total as f64
    }
}

// ── CSV ingestion ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestReport {
    pub users_kept: usize,
    pub users_dropped: usize,
    pub interactions: usize,
}

/// Reads an item-metadata CSV (`item_id,category,brand[,e0,e1,...]`) and an
/// interactions CSV (`user_id,item_id,timestamp`).
///
/// Category and brand strings are bucketed by sorted order; items without
/// embedding columns get deterministic pseudo-random embeddings hashed from
/// their id. Users with fewer than 3 interactions are dropped and counted.
pub fn ingest_csv(
    interactions_path: &Path,
    items_path: &Path,
    embed_dim: usize,
    seed: u64,
) -> Result<(Dataset, IngestReport)> {
    let mut items_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(items_path)
        .map_err(|e| GrcError::Data(format!("{}: {e}", items_path.display())))?;

    struct RawItem {
        external_id: String,
        category: String,
        brand: String,
        embedding: Option<Vec<f64>>,
    }

    let mut raw_items = Vec::new();
    for (row_idx, record) in items_reader.records().enumerate() {
        let line = row_idx + 2; // header is line 1
        let record =
            record.map_err(|e| GrcError::Data(format!("{}:{line}: {e}", items_path.display())))?;
        if record.len() < 3 {
            return Err(GrcError::Data(format!(
                "{}:{line}: expected item_id,category,brand[,embedding...]",
                items_path.display()
            )));
        }
        let embedding = if record.len() > 3 {
            let vals: std::result::Result<Vec<f64>, _> =
                (3..record.len()).map(|i| record[i].trim().parse::<f64>()).collect();
            Some(vals.map_err(|e| {
                GrcError::Data(format!("{}:{line}: bad embedding value: {e}", items_path.display()))
            })?)
        } else {
            None
        };
        raw_items.push(RawItem {
            external_id: record[0].trim().to_string(),
            category: record[1].trim().to_string(),
            brand: record[2].trim().to_string(),
            embedding,
        });
    }

    let mut categories: Vec<String> = raw_items.iter().map(|i| i.category.clone()).collect();
    categories.sort();
    categories.dedup();
    let mut brands: Vec<String> = raw_items.iter().map(|i| i.brand.clone()).collect();
    brands.sort();
    brands.dedup();
    let cat_idx: HashMap<&str, usize> =
        categories.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let brand_idx: HashMap<&str, usize> =
        brands.iter().enumerate().map(|(i, b)| (b.as_str(), i)).collect();

    let mut items = Vec::with_capacity(raw_items.len());
    let mut item_index: HashMap<String, usize> = HashMap::new();
    for raw in &raw_items {
        let embedding = match &raw.embedding {
            Some(e) => e.clone(),
            None => {
                // stable hash of the external id seeds the embedding
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for b in raw.external_id.bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x1000_0000_01b3);
                }
                let mut erng = stream_rng(seed, &[0xc5f, h]);
                (0..embed_dim).map(|_| next_gaussian(&mut erng)).collect()
            }
        };
        let idx = items.len();
        if item_index.insert(raw.external_id.clone(), idx).is_some() {
            return Err(GrcError::Data(format!(
                "{}: duplicate item id {}",
                items_path.display(),
                raw.external_id
            )));
        }
        items.push(Item {
            external_id: raw.external_id.clone(),
            embedding,
            attributes: vec![cat_idx[raw.category.as_str()], brand_idx[raw.brand.as_str()]],
        });
    }

    let mut interactions_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(interactions_path)
        .map_err(|e| GrcError::Data(format!("{}: {e}", interactions_path.display())))?;
    let mut per_user: HashMap<String, Vec<(i64, usize)>> = HashMap::new();
    let mut interactions = 0usize;
    for (row_idx, record) in interactions_reader.records().enumerate() {
        let line = row_idx + 2;
        let record = record
            .map_err(|e| GrcError::Data(format!("{}:{line}: {e}", interactions_path.display())))?;
        if record.len() != 3 {
            return Err(GrcError::Data(format!(
                "{}:{line}: expected user_id,item_id,timestamp",
                interactions_path.display()
            )));
        }
        let user = record[0].trim().to_string();
        let item_ext = record[1].trim();
        let ts: i64 = record[2].trim().parse().map_err(|e| {
            GrcError::Data(format!("{}:{line}: bad timestamp: {e}", interactions_path.display()))
        })?;
        let item = *item_index.get(item_ext).ok_or_else(|| {
            GrcError::Data(format!(
                "{}:{line}: unknown item id {item_ext}",
                interactions_path.display()
            ))
        })?;
        per_user.entry(user).or_default().push((ts, item));
        interactions += 1;
    }

    let mut user_names: Vec<String> = per_user.keys().cloned().collect();
    user_names.sort();
    let mut sequences = Vec::new();
    let mut users_dropped = 0usize;
    for name in user_names {
        let mut events = per_user.remove(&name).unwrap();
        events.sort_by_key(|&(ts, _)| ts);
        if events.len() < 3 {
            users_dropped += 1;
            continue;
        }
        sequences.push(InteractionSequence {
            user_id: sequences.len(),
            items: events.into_iter().map(|(_, item)| item).collect(),
        });
    }

    let report = IngestReport { users_kept: sequences.len(), users_dropped, interactions };
    Ok((
        Dataset {
            catalog: Catalog {
                attribute_names: vec!["category".into(), "brand".into()],
                attribute_buckets: vec![categories.len().max(1), brands.len().max(1)],
                items,
            },
            sequences,
        },
        report,
    ))
}

// ── leave-one-out split ─────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: usize,
    /// Training prefix, truncated to the last `max_history` items.
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
    pub max_history: usize,
    /// Sequences shorter than 3 that were excluded.
    pub excluded: usize,
}

/// Last item per user is the test target, second-to-last the validation
/// target; the remainder (truncated to the last `max_history` items) trains.
pub fn leave_one_out(sequences: &[InteractionSequence], max_history: usize) -> SplitDataset {
    assert!(max_history >= 1, "max_history must be positive");
    let mut users = Vec::new();
    let mut excluded = 0usize;
    for seq in sequences {
        if seq.items.len() < 3 {
            excluded += 1;
            continue;
        }
        let n = seq.items.len();
        let prefix = &seq.items[..n - 2];
        let start = prefix.len().saturating_sub(max_history);
        users.push(UserSplit {
            user_id: seq.user_id,
            train: prefix[start..].to_vec(),
            valid: seq.items[n - 2],
            test: seq.items[n - 1],
        });
    }
    SplitDataset { users, max_history, excluded }
}

impl SplitDataset {
    /// Autoregressive training pairs within each train prefix:
    /// (history ending at t-1, item at t).
    pub fn train_pairs(&self) -> Vec<(&[usize], usize)> {
        let mut pairs = Vec::new();
        for user in &self.users {
            for t in 1..user.train.len() {
                pairs.push((&user.train[..t], user.train[t]));
            }
        }
        pairs
    }

    /// History for scoring the test target: train prefix plus the validation
    /// item, truncated to `max_history`.
    pub fn test_history(&self, user: &UserSplit) -> Vec<usize> {
        let mut h = user.train.clone();
        h.push(user.valid);
        let start = h.len().saturating_sub(self.max_history);
        h[start..].to_vec()
    }
}
