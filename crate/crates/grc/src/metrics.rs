//! Retrieval and reflection-quality metrics over decode results.
//!
//! Leave-one-out protocol: one relevant item per user, so Recall@K is a hit
//! indicator and NDCG@K is `1 / log2(rank + 1)` with an ideal DCG of 1. The
//! reflection metrics score the predicted localization and category flags of
//! each user's top-K first-pass drafts. All metrics are macro-averaged: per
//! user first, then the mean over users.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Per-user recall: 1 when the target sits in the top K.
pub fn recall_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    assert!(k >= 1);
    if ranked.iter().take(k).any(|&item| item == target) {
        1.0
    } else {
        0.0
    }
}

/// Per-user NDCG with a single relevant item: `1 / log2(rank + 1)` when the
/// target is ranked within the top K (rank is 1-based), otherwise 0.
pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    assert!(k >= 1);
    match ranked.iter().take(k).position(|&item| item == target) {
        Some(pos) => 1.0 / ((pos as f64 + 2.0).log2()),
        None => 0.0,
    }
}

/// One draft's reflection predictions against the truth, used for the
/// reflection-quality metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DraftReflection {
    pub predicted_loc: usize,
    pub true_loc: usize,
    pub predicted_cat: usize,
    pub true_cat: usize,
}

/// Mean localization accuracy over a user's top-K first-pass drafts.
/// Fewer than K drafts average over what is available.
pub fn acc_loc_at_k(drafts: &[DraftReflection], k: usize) -> f64 {
    assert!(k >= 1);
    let take = k.min(drafts.len());
    if take == 0 {
        return 0.0;
    }
    let hits = drafts[..take]
        .iter()
        .filter(|d| d.predicted_loc == d.true_loc)
        .count();
    hits as f64 / take as f64
}

/// Mean category-flag accuracy over a user's top-K first-pass drafts.
pub fn acc_cat_at_k(drafts: &[DraftReflection], k: usize) -> f64 {
    assert!(k >= 1);
    let take = k.min(drafts.len());
    if take == 0 {
        return 0.0;
    }
    let hits = drafts[..take]
        .iter()
        .filter(|d| d.predicted_cat == d.true_cat)
        .count();
    hits as f64 / take as f64
}

/// Everything needed to evaluate one user.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserEval {
    pub user_id: usize,
    pub ranked: Vec<usize>,
    pub target: usize,
    /// First-pass drafts in base-score order with reflection annotations.
    pub drafts: Vec<DraftReflection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub users: usize,
    pub k_values: Vec<usize>,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub acc_loc: BTreeMap<usize, f64>,
    pub acc_cat: BTreeMap<usize, f64>,
    /// Users that had fewer drafts than the largest K.
    pub short_draft_users: usize,
    pub averaging: String,
}

/// Macro-averaged metrics at every requested K.
pub fn evaluate(users: &[UserEval], k_values: &[usize]) -> EvalReport {
    assert!(!k_values.is_empty());
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    let mut acc_loc = BTreeMap::new();
    let mut acc_cat = BTreeMap::new();
    let max_k = *k_values.iter().max().unwrap();
    let short_draft_users = users.iter().filter(|u| u.drafts.len() < max_k).count();
    for &k in k_values {
        let n = users.len().max(1) as f64;
        recall.insert(k, users.iter().map(|u| recall_at_k(&u.ranked, u.target, k)).sum::<f64>() / n);
        ndcg.insert(k, users.iter().map(|u| ndcg_at_k(&u.ranked, u.target, k)).sum::<f64>() / n);
        acc_loc.insert(k, users.iter().map(|u| acc_loc_at_k(&u.drafts, k)).sum::<f64>() / n);
        acc_cat.insert(k, users.iter().map(|u| acc_cat_at_k(&u.drafts, k)).sum::<f64>() / n);
    }
    EvalReport {
        users: users.len(),
        k_values: k_values.to_vec(),
        recall,
        ndcg,
        acc_loc,
        acc_cat,
        short_draft_users,
        averaging: "macro".to_string(),
    }
}

impl EvalReport {
    /// Flat CSV: `metric,k,value` rows in a fixed order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,k,value\n");
        for (name, table) in [
            ("recall", &self.recall),
            ("ndcg", &self.ndcg),
            ("acc_loc", &self.acc_loc),
            ("acc_cat", &self.acc_cat),
        ] {
            for (k, v) in table {
                out.push_str(&format!("{name},{k},{v}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn recall_hand_cases() {
        let ranked = vec![9, 5, 7, 1, 3, 8];
        assert_eq!(recall_at_k(&ranked, 9, 5), 1.0);
        assert_eq!(recall_at_k(&ranked, 8, 5), 0.0); // rank 6
        assert_eq!(recall_at_k(&ranked, 42, 5), 0.0); // absent
    }

    #[test]
    fn ndcg_hand_cases() {
        let ranked = vec![9, 5, 7, 1];
        assert_eq!(ndcg_at_k(&ranked, 9, 5), 1.0);
        assert!((ndcg_at_k(&ranked, 7, 5) - 0.5).abs() < 1e-12); // rank 3: 1/log2(4)
        assert_eq!(ndcg_at_k(&ranked, 1, 3), 0.0); // rank 4 > K
    }

    #[test]
    fn acc_metrics_hand_cases() {
        let d = |ploc, tloc, pcat, tcat| DraftReflection {
            predicted_loc: ploc,
            true_loc: tloc,
            predicted_cat: pcat,
            true_cat: tcat,
        };
        let perfect = vec![d(1, 1, 1, 1), d(3, 3, 0, 0), d(5, 5, 1, 1)];
        assert_eq!(acc_loc_at_k(&perfect, 3), 1.0);
        assert_eq!(acc_cat_at_k(&perfect, 3), 1.0);

        let inverted = vec![d(1, 2, 1, 0), d(3, 4, 0, 1)];
        assert_eq!(acc_loc_at_k(&inverted, 2), 0.0);
        assert_eq!(acc_cat_at_k(&inverted, 2), 0.0);

        // hand enumeration of a mixed 3-draft case at K = 2:
        // drafts in rank order hit (loc, cat) = (yes, no), (no, yes)
        let mixed = vec![d(2, 2, 0, 1), d(1, 3, 1, 1), d(5, 5, 0, 0)];
        assert_eq!(acc_loc_at_k(&mixed, 2), 0.5);
        assert_eq!(acc_cat_at_k(&mixed, 2), 0.5);
        // K = 3 averages over all drafts: loc 2/3, cat 2/3
        assert!((acc_loc_at_k(&mixed, 3) - 2.0 / 3.0).abs() < 1e-12);
        assert!((acc_cat_at_k(&mixed, 3) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fewer_drafts_than_k_averages_over_available() {
        let drafts = vec![DraftReflection {
            predicted_loc: 1,
            true_loc: 1,
            predicted_cat: 0,
            true_cat: 1,
        }];
        assert_eq!(acc_loc_at_k(&drafts, 10), 1.0);
        assert_eq!(acc_cat_at_k(&drafts, 10), 0.0);
    }

    #[test]
    fn evaluate_flags_short_draft_users_and_is_macro() {
        let users = vec![
            UserEval { user_id: 0, ranked: vec![1, 2], target: 1, drafts: vec![] },
            UserEval { user_id: 1, ranked: vec![3], target: 9, drafts: vec![] },
        ];
        let report = evaluate(&users, &[1, 5]);
        assert_eq!(report.users, 2);
        assert_eq!(report.recall[&1], 0.5);
        assert_eq!(report.short_draft_users, 2);
        assert_eq!(report.averaging, "macro");
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,k,value\n"));
        assert!(csv.contains("recall,1,0.5"));
    }

    // 20-line brute-force reference for both rank metrics
    fn brute_force(ranked: &[usize], target: usize, k: usize) -> (f64, f64) {
        let mut recall = 0.0;
        let mut ndcg = 0.0;
        for (i, &item) in ranked.iter().enumerate() {
            let rank = i + 1;
            if rank <= k && item == target {
                recall = 1.0;
                ndcg = 1.0 / ((rank as f64 + 1.0).log2());
            }
        }
        (recall, ndcg)
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(
            ranked in proptest::collection::vec(0usize..30, 1..25),
            target in 0usize..30,
            k in 1usize..30,
        ) {
            // deduplicate to honor the unique-items invariant
            let mut seen = std::collections::HashSet::new();
            let ranked: Vec<usize> = ranked.into_iter().filter(|i| seen.insert(*i)).collect();
            let (r_ref, n_ref) = brute_force(&ranked, target, k);
            prop_assert!((recall_at_k(&ranked, target, k) - r_ref).abs() < 1e-12);
            prop_assert!((ndcg_at_k(&ranked, target, k) - n_ref).abs() < 1e-12);
        }

        #[test]
        fn rank_metrics_are_monotone_in_k(
            ranked in proptest::collection::vec(0usize..30, 1..25),
            target in 0usize..30,
        ) {
            let mut seen = std::collections::HashSet::new();
            let ranked: Vec<usize> = ranked.into_iter().filter(|i| seen.insert(*i)).collect();
            let mut prev_r = 0.0;
            let mut prev_n = 0.0;
            for k in 1..=ranked.len() + 2 {
                let r = recall_at_k(&ranked, target, k);
                let n = ndcg_at_k(&ranked, target, k);
                prop_assert!(r >= prev_r);
                prop_assert!(n >= prev_n);
                // rank-discounted gain never exceeds the hit indicator
                prop_assert!(n <= r + 1e-12);
                prev_r = r;
                prev_n = n;
            }
        }
    }
}
