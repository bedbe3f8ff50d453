//! Cosine scoring against the item table, full-catalog ranking, and the
//! leave-one-out metrics Recall@N, NDCG@N, and MRR.

use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::EmbeddingTable;

/// Cosine similarity between two 1xd row vectors.
pub fn score(h_u: &Array2<f64>, h_i: &Array2<f64>) -> Result<f64> {
    if h_u.dim() != h_i.dim() || h_u.nrows() != 1 {
        return Err(Error::Config(format!(
            "score expects matching 1xd vectors, got {:?} and {:?}",
            h_u.dim(),
            h_i.dim()
        )));
    }
    let dot: f64 = h_u.iter().zip(h_i.iter()).map(|(a, b)| a * b).sum();
    let nu: f64 = h_u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ni: f64 = h_i.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || ni == 0.0 {
        return Err(Error::Numeric(
            "cosine similarity of a zero-norm vector".to_string(),
        ));
    }
    Ok(dot / (nu * ni))
}

/// Items ordered by descending score; ties broken by ascending item id.
#[derive(Debug, Clone)]
pub struct RankedList {
    /// (item_id, score) with non-increasing scores.
    pub entries: Vec<(String, f64)>,
    /// 1-based rank of the target item, when one was supplied and ranked.
    pub target_rank: Option<usize>,
}

/// Score `h_u` against every table row (minus exclusions) and rank.
pub fn rank_items(
    h_u: &Array2<f64>,
    table: &EmbeddingTable,
    exclude: &HashSet<String>,
    target: Option<&str>,
) -> Result<RankedList> {
    if table.item_ids.is_empty() {
        return Err(Error::Data("cannot rank against an empty table".into()));
    }
    let mut entries = Vec::with_capacity(table.item_ids.len());
    for (i, id) in table.item_ids.iter().enumerate() {
        if exclude.contains(id) {
            continue;
        }
        let row = table.rows.row(i).insert_axis(ndarray::Axis(0)).to_owned();
        entries.push((id.clone(), score(h_u, &row)?));
    }
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    let target_rank = target.and_then(|t| {
        entries
            .iter()
            .position(|(id, _)| id == t)
            .map(|pos| pos + 1)
    });
    Ok(RankedList {
        entries,
        target_rank,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub n: usize,
    pub users: usize,
    pub skipped: usize,
}

impl MetricReport {
    /// Metrics JSON with the cutoff spelled into the key names.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert(format!("recall@{}", self.n), self.recall.into());
        map.insert(format!("ndcg@{}", self.n), self.ndcg.into());
        map.insert("mrr".to_string(), self.mrr.into());
        map.insert("users".to_string(), self.users.into());
        map.insert("skipped".to_string(), self.skipped.into());
        serde_json::Value::Object(map)
    }
}

/// Per-user metrics from 1-based target ranks, averaged over users.
/// Recall@N is a hit indicator, NDCG@N is 1/log2(1+rank) under the
/// single-relevant-item protocol, MRR uses the full ranking.
pub fn metrics_from_ranks(ranks: &[usize], skipped: usize, n: usize) -> MetricReport {
    let users = ranks.len();
    let mut recall = 0.0;
    let mut ndcg = 0.0;
    let mut mrr = 0.0;
    for &rank in ranks {
        assert!(rank >= 1, "ranks are 1-based");
        if rank <= n {
            recall += 1.0;
            ndcg += 1.0 / ((1 + rank) as f64).log2();
        }
        mrr += 1.0 / rank as f64;
    }
    let denom = users.max(1) as f64;
    MetricReport {
        recall: recall / denom,
        ndcg: ndcg / denom,
        mrr: mrr / denom,
        n,
        users,
        skipped,
    }
}

/// One user's evaluation input: an embedding (or `None` when the pipeline
/// could not produce one), the ground-truth target, and ids to exclude from
/// the candidate set.
pub struct UserEval {
    pub user_id: String,
    pub embedding: Option<Array2<f64>>,
    pub target: String,
    pub exclude: HashSet<String>,
}

/// Rank every user against the table and average the metrics. Users without
/// an embedding are skipped and tallied.
pub fn evaluate(
    users: impl IntoIterator<Item = UserEval>,
    table: &EmbeddingTable,
    n: usize,
) -> Result<MetricReport> {
    let mut ranks = Vec::new();
    let mut skipped = 0;
    for user in users {
        let Some(h) = user.embedding else {
            skipped += 1;
            continue;
        };
        let ranked = rank_items(&h, table, &user.exclude, Some(&user.target))?;
        match ranked.target_rank {
            Some(r) => ranks.push(r),
            None => {
                return Err(Error::Data(format!(
                    "target {} of user {} is not in the candidate set",
                    user.target, user.user_id
                )))
            }
        }
    }
    Ok(metrics_from_ranks(&ranks, skipped, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn table_from(rows: Vec<Vec<f64>>) -> EmbeddingTable {
        let n = rows.len();
        let d = rows[0].len();
        let mut m = Array2::zeros((n, d));
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                m[[i, j]] = *v;
            }
        }
        EmbeddingTable {
            rows: m,
            item_ids: (0..n).map(|i| format!("item-{i}")).collect(),
            epoch: 0,
            fingerprint: "test".to_string(),
        }
    }

    #[test]
    fn cosine_identity_orthogonal_and_hand_case() {
        let a = array![[1.0, 2.0]];
        let b = array![[2.0, 1.0]];
        assert!((score(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let e1 = array![[1.0, 0.0]];
        let e2 = array![[0.0, 1.0]];
        assert_eq!(score(&e1, &e2).unwrap(), 0.0);
        // (1*2 + 2*1) / (sqrt(5) * sqrt(5)) = 4/5
        assert!((score(&a, &b).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_is_an_error() {
        let a = array![[0.0, 0.0]];
        let b = array![[1.0, 0.0]];
        assert!(matches!(score(&a, &b), Err(Error::Numeric(_))));
    }

    #[test]
    fn single_item_table_ranks_it_first() {
        let table = table_from(vec![vec![0.3, 0.4]]);
        let h = array![[1.0, 1.0]];
        let ranked = rank_items(&h, &table, &HashSet::new(), Some("item-0")).unwrap();
        assert_eq!(ranked.entries.len(), 1);
        assert_eq!(ranked.target_rank, Some(1));
    }

    #[test]
    fn matching_row_wins_when_others_are_orthogonal() {
        let table = table_from(vec![
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let h = array![[1.0, 0.0, 0.0]];
        let ranked = rank_items(&h, &table, &HashSet::new(), Some("item-1")).unwrap();
        assert_eq!(ranked.entries[0].0, "item-1");
        assert_eq!(ranked.target_rank, Some(1));
    }

    #[test]
    fn ranking_matches_brute_force_sort() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..10)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let table = table_from(rows.clone());
            let h: Array2<f64> =
                Array2::from_shape_fn((1, 6), |_| rng.random_range(-1.0..1.0));
            let ranked = rank_items(&h, &table, &HashSet::new(), None).unwrap();
            // Independent brute force: compute cosines by hand and sort.
            let mut brute: Vec<(String, f64)> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let dot: f64 = r.iter().zip(h.iter()).map(|(a, b)| a * b).sum();
                    let nr = r.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nh = h.iter().map(|a| a * a).sum::<f64>().sqrt();
                    (format!("item-{i}"), dot / (nr * nh))
                })
                .collect();
            brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            let got: Vec<&str> = ranked.entries.iter().map(|(id, _)| id.as_str()).collect();
            let want: Vec<&str> = brute.iter().map(|(id, _)| id.as_str()).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn scaling_the_query_does_not_change_the_ranking() {
        let table = table_from(vec![
            vec![0.2, 0.8, 0.1],
            vec![0.9, 0.1, 0.3],
            vec![0.4, 0.4, 0.4],
        ]);
        let h = array![[0.5, -0.2, 0.7]];
        let a = rank_items(&h, &table, &HashSet::new(), None).unwrap();
        let h2 = h.mapv(|x| x * 37.5);
        let b = rank_items(&h2, &table, &HashSet::new(), None).unwrap();
        let ids_a: Vec<&str> = a.entries.iter().map(|(i, _)| i.as_str()).collect();
        let ids_b: Vec<&str> = b.entries.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(ids_a, ids_b);
    }

    #[test]
    fn exclusions_are_omitted() {
        let table = table_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let h = array![[1.0, 0.0]];
        let mut exclude = HashSet::new();
        exclude.insert("item-0".to_string());
        let ranked = rank_items(&h, &table, &exclude, None).unwrap();
        assert_eq!(ranked.entries.len(), 1);
        assert_eq!(ranked.entries[0].0, "item-1");
    }

    #[test]
    fn metric_oracles() {
        // Every target at rank 1.
        let perfect = metrics_from_ranks(&[1, 1, 1], 0, 10);
        assert_eq!((perfect.recall, perfect.ndcg, perfect.mrr), (1.0, 1.0, 1.0));
        // Rank 12 with N=10: recall 0, ndcg 0, mrr 1/12.
        let miss = metrics_from_ranks(&[12], 0, 10);
        assert_eq!(miss.recall, 0.0);
        assert_eq!(miss.ndcg, 0.0);
        assert!((miss.mrr - 1.0 / 12.0).abs() < 1e-12);
        // Rank 3 with N=10: ndcg = 1/log2(4) = 0.5.
        let third = metrics_from_ranks(&[3], 0, 10);
        assert!((third.ndcg - 0.5).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_bounds_and_improve_with_rank() {
        for n in [1usize, 5, 10] {
            let mut prev: Option<MetricReport> = None;
            for rank in (1..=30).rev() {
                let m = metrics_from_ranks(&[rank], 0, n);
                for v in [m.recall, m.ndcg, m.mrr] {
                    assert!((0.0..=1.0).contains(&v));
                }
                if let Some(p) = prev {
                    assert!(m.recall >= p.recall);
                    assert!(m.ndcg >= p.ndcg);
                    assert!(m.mrr >= p.mrr);
                }
                prev = Some(m);
            }
        }
    }

    #[test]
    fn evaluate_counts_skipped_users() {
        let table = table_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let users = vec![
            UserEval {
                user_id: "u0".into(),
                embedding: Some(array![[1.0, 0.1]]),
                target: "item-0".into(),
                exclude: HashSet::new(),
            },
            UserEval {
                user_id: "u1".into(),
                embedding: None,
                target: "item-1".into(),
                exclude: HashSet::new(),
            },
        ];
        let report = evaluate(users, &table, 10).unwrap();
        assert_eq!(report.users, 1);
        assert_eq!(report.skipped, 1);
        assert_eq!(report.recall, 1.0);
    }

    #[test]
    fn metrics_json_uses_cutoff_keys() {
        let m = metrics_from_ranks(&[1, 2], 1, 10);
        let v = m.to_json();
        assert!(v.get("recall@10").is_some());
        assert!(v.get("ndcg@10").is_some());
        assert!(v.get("mrr").is_some());
        assert_eq!(v["users"], 2);
        assert_eq!(v["skipped"], 1);
    }
}
