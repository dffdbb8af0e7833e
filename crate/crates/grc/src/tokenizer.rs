//! Residual k-means tokenizer: maps item embeddings to short discrete
//! semantic IDs and maintains the exact code-to-item lookup.
//!
//! Level 1 clusters the raw embeddings; each further level clusters the
//! residuals left by the previous assignments, so early tokens are coarse and
//! later tokens refine. Items that share all level tokens receive a suffix
//! token (assigned in item-id order) so the lookup stays injective over the
//! catalog. Codebooks are frozen after fitting and shared by every training
//! stage.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::GrcError;
use crate::rng::stream_rng;
use crate::Result;

/// One quantization level: `codebook_size` centroids of embedding dim `d`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Codebook {
    pub level: usize,
    pub centroids: Vec<Vec<f64>>,
}

/// An item's discrete code: one token per level, plus a disambiguation
/// suffix token when the tokenizer was fitted with `use_suffix`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticId {
    pub tokens: Vec<usize>,
}

impl SemanticId {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub kmeans_iters: usize,
    /// Append a suffix position so colliding items stay distinguishable.
    /// Suffix tokens share the final level's vocabulary.
    pub use_suffix: bool,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            levels: 4,
            codebook_size: 32,
            kmeans_iters: 25,
            use_suffix: true,
            seed: 0,
        }
    }
}

/// Fitted tokenizer: frozen codebooks, per-item codes and the reverse lookup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemanticTokenizer {
    pub config: TokenizerConfig,
    pub codebooks: Vec<Codebook>,
    /// Code for catalog item `i`, including the suffix token if enabled.
    pub item_codes: Vec<SemanticId>,
    /// Mean squared residual norm after each level, recorded during fitting.
    pub mean_sq_residual: Vec<f64>,
    #[serde(skip)]
    lookup: HashMap<Vec<usize>, usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = sq_dist(point, &centroids[0]);
    for (j, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Lloyd's k-means with farthest-point seeding.
///
/// The first centroid is drawn with the seeded RNG; every further seed is the
/// point with the largest distance to its nearest chosen centroid (ties to
/// the lowest index). Empty clusters are re-seeded from the point farthest
/// from its assigned centroid.
fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<f64>> {
    assert!(points.len() >= k, "k-means needs at least k points");
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let mut far = 0;
        for (i, &d) in min_d.iter().enumerate() {
            if d > min_d[far] {
                far = i;
            }
        }
        centroids.push(points[far].clone());
        let newest = centroids.last().unwrap();
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, newest);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }

    let d = points[0].len();
    for _ in 0..iters {
        let assign: Vec<usize> = points.iter().map(|p| nearest_centroid(p, &centroids)).collect();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // deterministic re-seed: farthest point from its centroid
                let mut far = 0;
                let mut far_d = -1.0;
                for (i, p) in points.iter().enumerate() {
                    let dd = sq_dist(p, &centroids[assign[i]]);
                    if dd > far_d {
                        far_d = dd;
                        far = i;
                    }
                }
                centroids[j] = points[far].clone();
            } else {
                for (c, s) in centroids[j].iter_mut().zip(&sums[j]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
    }
    centroids
}

/// Fits one codebook per level on successive residuals.
///
/// Returns the codebooks plus the mean squared residual norm after each
/// level; the sequence is checked to be non-increasing.
pub fn fit_codebooks(
    embeddings: &[Vec<f64>],
    config: &TokenizerConfig,
) -> Result<(Vec<Codebook>, Vec<f64>)> {
    if embeddings.is_empty() {
        return Err(GrcError::Config("tokenizer: empty embedding matrix".into()));
    }
    if embeddings.len() < config.codebook_size {
        return Err(GrcError::Config(format!(
            "tokenizer: {} items cannot fill a codebook of {}",
            embeddings.len(),
            config.codebook_size
        )));
    }
    let mut residuals: Vec<Vec<f64>> = embeddings.to_vec();
    let mut codebooks = Vec::with_capacity(config.levels);
    let mut mean_sq = Vec::with_capacity(config.levels);
    for level in 0..config.levels {
        let mut rng = stream_rng(config.seed, &[0x7051, level as u64]);
        let centroids = kmeans(&residuals, config.codebook_size, config.kmeans_iters, &mut rng);
        for r in residuals.iter_mut() {
            let j = nearest_centroid(r, &centroids);
            for (v, c) in r.iter_mut().zip(&centroids[j]) {
                *v -= c;
            }
        }
        let ms = residuals.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            / residuals.len() as f64;
        mean_sq.push(ms);
        codebooks.push(Codebook { level: level + 1, centroids });
    }
    for w in mean_sq.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-9,
            "residual norm increased across levels: {} -> {}",
            w[0],
            w[1]
        );
    }
    Ok((codebooks, mean_sq))
}

/// Quantizes one embedding to its per-level tokens (no suffix).
/// Ties break toward the lowest centroid index.
pub fn encode(embedding: &[f64], codebooks: &[Codebook]) -> Vec<usize> {
    let mut residual = embedding.to_vec();
    let mut tokens = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        let j = nearest_centroid(&residual, &cb.centroids);
        tokens.push(j);
        for (v, c) in residual.iter_mut().zip(&cb.centroids[j]) {
            *v -= c;
        }
    }
    tokens
}

/// Assigns suffix tokens in item-id order so the code-to-item map is
/// injective. `suffix_capacity` bounds how many items may share a level code.
pub fn disambiguate(
    level_codes: &[Vec<usize>],
    suffix_capacity: usize,
) -> Result<(Vec<SemanticId>, HashMap<Vec<usize>, usize>)> {
    let mut groups: HashMap<&[usize], usize> = HashMap::new();
    let mut ids = Vec::with_capacity(level_codes.len());
    for code in level_codes {
        let next = groups.entry(code.as_slice()).or_insert(0);
        if *next >= suffix_capacity {
            return Err(GrcError::Config(format!(
                "suffix alphabet exhausted: more than {suffix_capacity} items share code {code:?}; \
                 raise the codebook size or add levels"
            )));
        }
        let mut tokens = code.clone();
        tokens.push(*next);
        *next += 1;
        ids.push(SemanticId { tokens });
    }
    let mut lookup = HashMap::with_capacity(ids.len());
    for (item, id) in ids.iter().enumerate() {
        let prev = lookup.insert(id.tokens.clone(), item);
        debug_assert!(prev.is_none());
    }
    Ok((ids, lookup))
}

impl SemanticTokenizer {
    /// Fits codebooks on the catalog, encodes every item and assigns
    /// suffixes. Deterministic for a fixed config.
    pub fn fit(embeddings: &[Vec<f64>], config: TokenizerConfig) -> Result<Self> {
        let (codebooks, mean_sq_residual) = fit_codebooks(embeddings, &config)?;
        let level_codes: Vec<Vec<usize>> =
            embeddings.iter().map(|e| encode(e, &codebooks)).collect();
        let (item_codes, lookup) = if config.use_suffix {
            disambiguate(&level_codes, config.codebook_size)?
        } else {
            let ids: Vec<SemanticId> =
                level_codes.iter().map(|c| SemanticId { tokens: c.clone() }).collect();
            let mut lookup = HashMap::new();
            for (item, id) in ids.iter().enumerate() {
                if lookup.insert(id.tokens.clone(), item).is_some() {
                    return Err(GrcError::Config(
                        "code collision with use_suffix = false; enable the suffix".into(),
                    ));
                }
            }
            (ids, lookup)
        };
        Ok(SemanticTokenizer { config, codebooks, item_codes, mean_sq_residual, lookup })
    }

    /// Number of decoded token positions per item (levels plus suffix).
    pub fn code_len(&self) -> usize {
        self.config.levels + usize::from(self.config.use_suffix)
    }

    /// Per-position vocabulary sizes for the sequence model.
    pub fn vocab_sizes(&self) -> Vec<usize> {
        vec![self.config.codebook_size; self.code_len()]
    }

    pub fn code_of(&self, item: usize) -> &SemanticId {
        &self.item_codes[item]
    }

    /// The deterministic lookup from a full code back to an item id.
    pub fn item_for(&self, tokens: &[usize]) -> Option<usize> {
        self.lookup.get(tokens).copied()
    }

    pub fn num_items(&self) -> usize {
        self.item_codes.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| GrcError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GrcError::io(path.display().to_string(), e))?;
        let mut tok: SemanticTokenizer = serde_json::from_str(&raw)?;
        tok.lookup = tok
            .item_codes
            .iter()
            .enumerate()
            .map(|(item, id)| (id.tokens.clone(), item))
            .collect();
        Ok(tok)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::next_gaussian;

    fn config(levels: usize, size: usize, seed: u64) -> TokenizerConfig {
        TokenizerConfig { levels, codebook_size: size, kmeans_iters: 25, use_suffix: true, seed }
    }

    #[test]
    fn n_equals_k_gives_zero_residual() {
        let points: Vec<Vec<f64>> =
            (0..8).map(|i| vec![i as f64 * 10.0, -(i as f64)]).collect();
        let (codebooks, mean_sq) = fit_codebooks(&points, &config(1, 8, 3)).unwrap();
        assert!(mean_sq[0] < 1e-18, "residual {}", mean_sq[0]);
        for p in &points {
            let r = sq_dist(p, &codebooks[0].centroids[encode(p, &codebooks)[0]]);
            assert!(r < 1e-18);
        }
    }

    #[test]
    fn two_blobs_are_perfectly_separated() {
        let mut rng = stream_rng(7, &[]);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for blob in 0..2 {
            let center = if blob == 0 { -20.0 } else { 20.0 };
            for _ in 0..40 {
                points.push(vec![
                    center + next_gaussian(&mut rng),
                    center + next_gaussian(&mut rng),
                ]);
                labels.push(blob);
            }
        }
        let (codebooks, _) = fit_codebooks(&points, &config(1, 2, 11)).unwrap();
        // brute-force nearest-centroid oracle
        let tokens: Vec<usize> = points
            .iter()
            .map(|p| {
                let d0 = sq_dist(p, &codebooks[0].centroids[0]);
                let d1 = sq_dist(p, &codebooks[0].centroids[1]);
                usize::from(d1 < d0)
            })
            .collect();
        for (p, &t) in points.iter().zip(&tokens) {
            assert_eq!(encode(p, &codebooks)[0], t);
        }
        let first = tokens[0];
        for (i, &t) in tokens.iter().enumerate() {
            assert_eq!(t == first, labels[i] == labels[0]);
        }
    }

    #[test]
    fn residual_norm_non_increasing() {
        let mut rng = stream_rng(13, &[]);
        let points: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..6).map(|_| next_gaussian(&mut rng) * 2.0).collect())
            .collect();
        let (_, mean_sq) = fit_codebooks(&points, &config(3, 8, 5)).unwrap();
        for w in mean_sq.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn encode_matches_exhaustive_search_per_level() {
        let mut rng = stream_rng(21, &[]);
        let points: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..4).map(|_| next_gaussian(&mut rng)).collect())
            .collect();
        let (codebooks, _) = fit_codebooks(&points, &config(3, 4, 9)).unwrap();
        for p in &points {
            let fast = encode(p, &codebooks);
            // independent exhaustive nearest-centroid scan
            let mut residual = p.clone();
            for (lvl, cb) in codebooks.iter().enumerate() {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (j, c) in cb.centroids.iter().enumerate() {
                    let d = sq_dist(&residual, c);
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                assert_eq!(fast[lvl], best);
                for (v, c) in residual.iter_mut().zip(&cb.centroids[best]) {
                    *v -= c;
                }
            }
        }
    }

    #[test]
    fn encode_centroid_recovers_its_token() {
        let points: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 4.0]).collect();
        let (codebooks, _) = fit_codebooks(&points, &config(1, 5, 2)).unwrap();
        for (j, c) in codebooks[0].centroids.iter().enumerate() {
            assert_eq!(encode(c, &codebooks)[0], j);
        }
    }

    #[test]
    fn disambiguate_no_collisions_gives_zero_suffixes() {
        let codes = vec![vec![0, 1], vec![1, 0], vec![2, 2]];
        let (ids, lookup) = disambiguate(&codes, 4).unwrap();
        assert!(ids.iter().all(|id| *id.tokens.last().unwrap() == 0));
        assert_eq!(lookup.len(), 3);
    }

    #[test]
    fn disambiguate_assigns_suffixes_in_item_order() {
        let codes = vec![vec![5, 5], vec![5, 5], vec![1, 2]];
        let (ids, _) = disambiguate(&codes, 4).unwrap();
        assert_eq!(ids[0].tokens, vec![5, 5, 0]);
        assert_eq!(ids[1].tokens, vec![5, 5, 1]);
        assert_eq!(ids[2].tokens, vec![1, 2, 0]);
    }

    #[test]
    fn disambiguate_exhaustion_is_a_config_error() {
        let codes = vec![vec![0]; 3];
        let err = disambiguate(&codes, 2).unwrap_err();
        assert!(matches!(err, GrcError::Config(_)));
    }

    #[test]
    fn roundtrip_is_injective_and_total() {
        let mut rng = stream_rng(31, &[]);
        let points: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..5).map(|_| next_gaussian(&mut rng)).collect())
            .collect();
        let tok = SemanticTokenizer::fit(&points, config(3, 12, 17)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for item in 0..points.len() {
            let code = tok.code_of(item);
            assert_eq!(tok.item_for(&code.tokens), Some(item));
            assert!(seen.insert(code.tokens.clone()));
        }
    }

    #[test]
    fn seeded_determinism() {
        let mut rng = stream_rng(41, &[]);
        let points: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..4).map(|_| next_gaussian(&mut rng)).collect())
            .collect();
        let a = SemanticTokenizer::fit(&points, config(3, 8, 23)).unwrap();
        let b = SemanticTokenizer::fit(&points, config(3, 8, 23)).unwrap();
        assert_eq!(a.item_codes, b.item_codes);
        let c = SemanticTokenizer::fit(&points, config(3, 8, 24)).unwrap();
        assert_eq!(c.item_codes.len(), a.item_codes.len());
    }

    #[test]
    fn save_load_preserves_codes_and_lookup() {
        let mut rng = stream_rng(51, &[]);
        let points: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..3).map(|_| next_gaussian(&mut rng)).collect())
            .collect();
        let tok = SemanticTokenizer::fit(&points, config(2, 6, 77)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codebooks.json");
        tok.save(&path).unwrap();
        let loaded = SemanticTokenizer::load(&path).unwrap();
        assert_eq!(tok.item_codes, loaded.item_codes);
        for item in 0..points.len() {
            assert_eq!(loaded.item_for(&tok.code_of(item).tokens), Some(item));
        }
    }
}
