//! Top-k retrieval and the accuracy / KG-coverage metrics.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::Serialize;

use crate::compute::{Matrix, Scalar};
use crate::data::{InteractionGraph, KnowledgeGraph};
use crate::error::{Error, Result};
use crate::par;

/// Cut-offs reported by default.
pub const DEFAULT_KS: [usize; 2] = [20, 40];

/// Highest-scoring candidates in rank order.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
    /// Fewer than `k` candidates were available.
    pub truncated: bool,
}

fn score<T: Scalar>(user: &[T], item: &[T]) -> T {
    user.iter().zip(item).map(|(&a, &b)| a * b).sum()
}

/// Ranks every item not in `exclude` (sorted) by inner product with `user`,
/// descending, ties broken by ascending item id, and keeps the first `k`.
pub fn topk<T: Scalar>(user: &[T], items: &Matrix<T>, k: usize, exclude: &[u32]) -> RankedList {
    let mut cands: Vec<(T, u32)> = (0..items.rows() as u32)
        .filter(|i| exclude.binary_search(i).is_err())
        .map(|i| (score(user, items.row(i as usize)), i))
        .collect();
    let by_rank = |a: &(T, u32), b: &(T, u32)| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
    };
    let truncated = cands.len() < k;
    if !truncated && k > 0 && k < cands.len() {
        cands.select_nth_unstable_by(k - 1, by_rank);
        cands.truncate(k);
    }
    cands.sort_unstable_by(by_rank);
    cands.truncate(k);
    RankedList {
        scores: cands.iter().map(|c| c.0.to_f64_lossy()).collect(),
        items: cands.into_iter().map(|c| c.1).collect(),
        truncated,
    }
}

/// Recall and binary-gain NDCG of the first `k` ranked items against the
/// sorted relevant set.
pub fn recall_ndcg(ranked: &[u32], relevant: &[u32], k: usize) -> (f64, f64) {
    if relevant.is_empty() {
        return (0.0, 0.0);
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if relevant.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..relevant.len().min(k))
        .map(|pos| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    (hits as f64 / relevant.len() as f64, dcg / idcg)
}

/// Distinct non-item entities and distinct relations reached by the
/// original outgoing triplets of the first `k` ranked items.
pub fn coverage(ranked: &[u32], kg: &KnowledgeGraph, k: usize) -> (usize, usize) {
    let mut entities = BTreeSet::new();
    let mut relations = BTreeSet::new();
    for &item in ranked.iter().take(k) {
        if item as usize >= kg.n_items() {
            continue;
        }
        for &(r, t) in kg.item_links(item as usize) {
            if !kg.is_item(t) {
                entities.insert(t);
                relations.insert(r);
            }
        }
    }
    (entities.len(), relations.len())
}

/// Metrics at one cut-off.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AtK {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub entity_coverage: f64,
    pub relation_coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UserMetrics {
    pub user: u32,
    pub at: Vec<AtK>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub users_evaluated: usize,
    pub mean: Vec<AtK>,
    #[serde(skip)]
    pub per_user: Vec<UserMetrics>,
}

impl MetricReport {
    pub fn at(&self, k: usize) -> Option<&AtK> {
        self.mean.iter().find(|m| m.k == k)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// `metric,k,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,k,value\n");
        for name in ["recall", "ndcg", "entity_coverage", "relation_coverage"] {
            for m in &self.mean {
                out.push_str(&format!("{name},{},{}\n", m.k, field(m, name)));
            }
        }
        out
    }

    /// One row per evaluated user.
    pub fn per_user_csv(&self) -> String {
        let mut out = String::from("user");
        for m in &self.mean {
            for name in ["recall", "ndcg", "entity_coverage", "relation_coverage"] {
                out.push_str(&format!(",{name}@{}", m.k));
            }
        }
        out.push('\n');
        for u in &self.per_user {
            out.push_str(&u.user.to_string());
            for m in &u.at {
                for name in ["recall", "ndcg", "entity_coverage", "relation_coverage"] {
                    out.push_str(&format!(",{}", field(m, name)));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn field(m: &AtK, name: &str) -> f64 {
    match name {
        "recall" => m.recall,
        "ndcg" => m.ndcg,
        "entity_coverage" => m.entity_coverage,
        _ => m.relation_coverage,
    }
}

/// Metrics for one user's ranking at each cut-off.
pub fn user_metrics(
    user: u32,
    ranked: &[u32],
    relevant: &[u32],
    kg: &KnowledgeGraph,
    ks: &[usize],
) -> UserMetrics {
    UserMetrics {
        user,
        at: ks
            .iter()
            .map(|&k| {
                let (recall, ndcg) = recall_ndcg(ranked, relevant, k);
                let (ec, rc) = coverage(ranked, kg, k);
                AtK {
                    k,
                    recall,
                    ndcg,
                    entity_coverage: ec as f64,
                    relation_coverage: rc as f64,
                }
            })
            .collect(),
    }
}

/// Ranks for every user with a non-empty target list (training items
/// excluded) and averages the per-user metrics.
pub fn evaluate_embeddings<T: Scalar>(
    users: &Matrix<T>,
    items: &Matrix<T>,
    train: &InteractionGraph,
    targets: &[Vec<u32>],
    kg: &KnowledgeGraph,
    ks: &[usize],
) -> Result<MetricReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Eval("cut-offs must be positive".into()));
    }
    if users.rows() != train.n_users() || items.rows() != train.n_items() {
        return Err(Error::Eval(format!(
            "embeddings {}x / {}x do not match {} users / {} items",
            users.rows(),
            items.rows(),
            train.n_users(),
            train.n_items()
        )));
    }
    let k_max = *ks.iter().max().expect("non-empty");
    let per_user: Vec<UserMetrics> = par::map_range(users.rows(), |u| {
        let relevant = targets.get(u).filter(|t| !t.is_empty())?;
        let ranked = topk(users.row(u), items, k_max, train.items_of(u));
        Some(user_metrics(u as u32, &ranked.items, relevant, kg, ks))
    })
    .into_iter()
    .flatten()
    .collect();
    if per_user.is_empty() {
        return Err(Error::Eval("no user has evaluation items".into()));
    }
    let n = per_user.len() as f64;
    let mean = ks
        .iter()
        .enumerate()
        .map(|(slot, &k)| {
            let avg = |f: fn(&AtK) -> f64| per_user.iter().map(|u| f(&u.at[slot])).sum::<f64>() / n;
            AtK {
                k,
                recall: avg(|m| m.recall),
                ndcg: avg(|m| m.ndcg),
                entity_coverage: avg(|m| m.entity_coverage),
                relation_coverage: avg(|m| m.relation_coverage),
            }
        })
        .collect();
    Ok(MetricReport {
        users_evaluated: per_user.len(),
        mean,
        per_user,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Triplet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn items_from_scores(scores: &[f64]) -> Matrix<f64> {
        Matrix::column(scores.to_vec())
    }

    #[test]
    fn topk_sorts_and_excludes() {
        let items = items_from_scores(&[0.1, 0.9, 0.5]);
        assert_eq!(topk(&[1.0], &items, 2, &[]).items, vec![1, 2]);
        assert_eq!(topk(&[1.0], &items, 2, &[1]).items, vec![2, 0]);
        let short = topk(&[1.0], &items, 5, &[0]);
        assert!(short.truncated);
        assert_eq!(short.items, vec![1, 2]);
    }

    #[test]
    fn topk_ties_by_id() {
        let items = items_from_scores(&[0.5, 0.7, 0.5, 0.5]);
        assert_eq!(topk(&[1.0], &items, 3, &[]).items, vec![1, 0, 2]);
    }

    #[test]
    fn topk_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let items = Matrix::from_vec(100, 4, (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let user: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let exclude = vec![3u32, 10, 50];
        let got = topk(&user, &items, 10, &exclude);
        let mut all: Vec<(f64, u32)> = (0..100u32)
            .filter(|i| !exclude.contains(i))
            .map(|i| ((0..4).map(|c| user[c] * items.get(i as usize, c)).sum(), i))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(got.items, all[..10].iter().map(|x| x.1).collect::<Vec<_>>());
    }

    #[test]
    fn recall_ndcg_examples() {
        assert_eq!(recall_ndcg(&[0, 9], &[0, 1], 2).0, 0.5);
        assert_eq!(recall_ndcg(&[4, 9], &[4], 2).1, 1.0);
        let (_, n) = recall_ndcg(&[9, 4], &[4], 2);
        assert!((n - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((n - 0.63093).abs() < 1e-5);
    }

    #[test]
    fn coverage_examples() {
        // items 0,1; entities 5,6,7 (ids >= 2 are non-items)
        let t = |h, r, tl| Triplet { head: h, relation: r, tail: tl };
        let kg = KnowledgeGraph::from_triplets(
            8,
            2,
            3,
            &[t(0, 0, 5), t(0, 0, 6), t(1, 0, 6), t(1, 0, 7), t(0, 2, 1)],
            true,
        )
        .unwrap();
        assert_eq!(coverage(&[0, 1], &kg, 2), (3, 1));
        assert_eq!(coverage(&[1, 0], &kg, 1), (2, 1));
        assert_eq!(coverage(&[0, 1], &kg, 2), coverage(&[1, 0], &kg, 2));
    }

    #[test]
    fn perfect_single_user() {
        let train = InteractionGraph::from_lists(&[vec![0]], 4).unwrap();
        let kg = KnowledgeGraph::from_triplets(4, 4, 1, &[], true).unwrap();
        let users = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let items = items_from_scores(&[9.0, 3.0, 2.0, 1.0]);
        let r = evaluate_embeddings(&users, &items, &train, &[vec![1, 2]], &kg, &[2]).unwrap();
        assert_eq!(r.mean[0].recall, 1.0);
        assert_eq!(r.mean[0].ndcg, 1.0);
        assert!(evaluate_embeddings(&users, &items, &train, &[vec![]], &kg, &[2]).is_err());
    }
}
