//! Retrieval evaluation: target captions query the target videos in the
//! action space; rankings are scored with nDCG (graded relevance) and mAP
//! (relevance strictly above 0.5).

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::adapt::{cosine_distance_matrix, AdaptDiagnostics};
use crate::corpus::{ActionLabel, Captions, Gallery, View};
use crate::error::{Error, Result};
use crate::model::{Modality, MultiViewModel};

/// Relevance above which an item counts for mAP.
pub const BINARY_THRESHOLD: f64 = 0.5;

/// `(1[same verb] + 1[same noun]) / 2`.
pub fn graded_relevance(query: ActionLabel, item: ActionLabel) -> f64 {
    ((query.verb == item.verb) as u8 + (query.noun == item.noun) as u8) as f64 / 2.0
}

/// `Σ rel_i / log2(i + 1)` with ranks from 1.
pub fn dcg(relevance_in_rank_order: &[f64]) -> f64 {
    relevance_in_rank_order
        .iter()
        .enumerate()
        .map(|(i, r)| r / ((i + 2) as f64).log2())
        .sum()
}

/// `None` when every relevance is zero.
pub fn query_ndcg(relevance_in_rank_order: &[f64]) -> Option<f64> {
    let mut ideal = relevance_in_rank_order.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(&ideal);
    (idcg > 0.0).then(|| dcg(relevance_in_rank_order) / idcg)
}

/// Average precision over items with relevance `> 0.5`; `None` if there are none.
pub fn average_precision(relevance_in_rank_order: &[f64]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevance_in_rank_order.iter().enumerate() {
        if r > BINARY_THRESHOLD {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// One query's ranking of the gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query: usize,
    /// Gallery rows, nearest first.
    pub ranking: Vec<usize>,
    /// Graded relevance aligned with `ranking`.
    pub relevance: Vec<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> (f64, usize) {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        (0.0, 0)
    } else {
        (sum / n as f64, n)
    }
}

/// Mean nDCG over queries with some relevant item; 0 when there are none.
pub fn ndcg(results: &[QueryResult]) -> f64 {
    mean_of(results.iter().map(|q| query_ndcg(&q.relevance))).0
}

/// Mean AP over queries with at least one strictly relevant item.
pub fn mean_ap(results: &[QueryResult]) -> f64 {
    mean_of(results.iter().map(|q| average_precision(&q.relevance))).0
}

/// Orders gallery rows by ascending cosine distance; ties by row.
pub fn rank_gallery(queries: ArrayView2<'_, f64>, gallery: ArrayView2<'_, f64>) -> Result<Vec<Vec<usize>>> {
    if gallery.nrows() == 0 {
        return Err(Error::Empty("evaluation gallery"));
    }
    if queries.ncols() != gallery.ncols() {
        return Err(Error::DimMismatch {
            context: "query vs gallery embedding",
            expected: gallery.ncols(),
            actual: queries.ncols(),
        });
    }
    let dist = cosine_distance_matrix(queries, gallery);
    Ok(dist
        .axis_iter(Axis(0))
        .map(|row| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            order
        })
        .collect())
}

/// Rankings and relevance of every query against a labelled gallery.
pub fn score_rankings(
    query_embeddings: ArrayView2<'_, f64>,
    query_labels: &[ActionLabel],
    gallery_embeddings: ArrayView2<'_, f64>,
    gallery_labels: &[ActionLabel],
) -> Result<Vec<QueryResult>> {
    if query_labels.is_empty() {
        return Err(Error::Empty("query set"));
    }
    if query_labels.len() != query_embeddings.nrows() || gallery_labels.len() != gallery_embeddings.nrows() {
        return Err(Error::CountMismatch {
            left_name: "labels",
            left: query_labels.len() + gallery_labels.len(),
            right_name: "embeddings",
            right: query_embeddings.nrows() + gallery_embeddings.nrows(),
        });
    }
    let rankings = rank_gallery(query_embeddings, gallery_embeddings)?;
    Ok(rankings
        .into_iter()
        .enumerate()
        .map(|(q, ranking)| {
            let relevance = ranking
                .iter()
                .map(|&g| graded_relevance(query_labels[q], gallery_labels[g]))
                .collect();
            QueryResult {
                query: q,
                ranking,
                relevance,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub query: usize,
    pub ndcg: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub ndcg: f64,
    pub map: f64,
    pub num_queries: usize,
    pub gallery_size: usize,
    /// Queries contributing to each mean.
    pub ndcg_queries: usize,
    pub map_queries: usize,
    pub per_query: Vec<QueryScore>,
}

impl RetrievalMetrics {
    pub fn from_results(results: &[QueryResult]) -> Self {
        let per_query: Vec<QueryScore> = results
            .iter()
            .map(|q| QueryScore {
                query: q.query,
                ndcg: query_ndcg(&q.relevance),
                ap: average_precision(&q.relevance),
            })
            .collect();
        let (ndcg, ndcg_queries) = mean_of(per_query.iter().map(|q| q.ndcg));
        let (map, map_queries) = mean_of(per_query.iter().map(|q| q.ap));
        RetrievalMetrics {
            ndcg,
            map,
            num_queries: results.len(),
            gallery_size: results.first().map_or(0, |q| q.ranking.len()),
            ndcg_queries,
            map_queries,
            per_query,
        }
    }
}

/// Caption queries against a video gallery in the action space. `gallery`
/// holds model-ready features; its labels come from `gallery_labels`.
pub fn evaluate_model(
    model: &MultiViewModel,
    gallery: &Gallery,
    gallery_labels: &[ActionLabel],
    queries: &Captions,
) -> Result<RetrievalMetrics> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let q = model.embed_batch(queries.text.view(), Modality::Text, View::Action)?;
    let g = model.embed_batch(gallery.video(), Modality::Video, View::Action)?;
    let results = score_rankings(q.view(), &queries.labels, g.view(), gallery_labels)?;
    Ok(RetrievalMetrics::from_results(&results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ndcg: f64,
    pub map: f64,
    pub metrics: RetrievalMetrics,
    /// Pseudo-label accuracy and coverage per view, when a source gallery was given.
    pub per_view: Vec<AdaptDiagnostics>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn new(metrics: RetrievalMetrics, per_view: Vec<AdaptDiagnostics>, config_hash: String, seed: u64) -> Self {
        EvalReport {
            ndcg: metrics.ndcg,
            map: metrics.map,
            metrics,
            per_view,
            config_hash,
            seed,
        }
    }
}

/// One row per item and view: `id,domain,view,v0,v1,...`.
pub fn write_embeddings_csv<W: Write>(w: &mut W, model: &MultiViewModel, galleries: &[&Gallery]) -> Result<usize> {
    let io = |e| Error::io("embeddings csv", e);
    let mut rows = 0;
    writeln!(w, "id,domain,view,values").map_err(io)?;
    for gallery in galleries {
        let fwd = model.forward(gallery.video(), Modality::Video)?;
        for view in View::ALL {
            let emb: Array2<f64> = fwd.embeddings(view).to_owned();
            for (id, row) in gallery.ids().iter().zip(emb.axis_iter(Axis(0))) {
                write!(w, "{},{},{}", id.index, id.domain, view).map_err(io)?;
                for v in row {
                    write!(w, ",{v:.9}").map_err(io)?;
                }
                writeln!(w).map_err(io)?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn al(verb: u32, noun: u32) -> ActionLabel {
        ActionLabel { verb, noun }
    }

    /// Textbook formulas written out independently of the library versions.
    fn naive_ndcg(rel: &[f64]) -> Option<f64> {
        let mut d = 0.0;
        for i in 1..=rel.len() {
            d += rel[i - 1] / (i as f64 + 1.0).ln() * std::f64::consts::LN_2;
        }
        let mut best = rel.to_vec();
        best.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut ideal = 0.0;
        for i in 1..=best.len() {
            ideal += best[i - 1] / (i as f64 + 1.0).ln() * std::f64::consts::LN_2;
        }
        if ideal == 0.0 {
            None
        } else {
            Some(d / ideal)
        }
    }

    fn naive_ap(rel: &[f64]) -> Option<f64> {
        let relevant: Vec<usize> = (0..rel.len()).filter(|&i| rel[i] > 0.5).collect();
        if relevant.is_empty() {
            return None;
        }
        let precisions: Vec<f64> = relevant
            .iter()
            .map(|&k| (0..=k).filter(|&j| rel[j] > 0.5).count() as f64 / (k + 1) as f64)
            .collect();
        Some(precisions.iter().sum::<f64>() / relevant.len() as f64)
    }

    fn result(rel: Vec<f64>) -> QueryResult {
        QueryResult {
            query: 0,
            ranking: (0..rel.len()).collect(),
            relevance: rel,
        }
    }

    #[test]
    fn graded_relevance_values() {
        assert_eq!(graded_relevance(al(1, 2), al(1, 2)), 1.0);
        assert_eq!(graded_relevance(al(1, 2), al(1, 3)), 0.5);
        assert_eq!(graded_relevance(al(1, 2), al(0, 2)), 0.5);
        assert_eq!(graded_relevance(al(1, 2), al(0, 3)), 0.0);
    }

    #[test]
    fn hand_cases() {
        let n = query_ndcg(&[0.5, 1.0, 0.0]).unwrap();
        assert!((dcg(&[0.5, 1.0, 0.0]) - 1.1309).abs() < 1e-4);
        assert!((dcg(&[1.0, 0.5, 0.0]) - 1.3155).abs() < 1e-4);
        assert!((n - 0.8597).abs() < 1e-4, "{n}");
        let ap = average_precision(&[1.0, 0.0, 1.0]).unwrap();
        assert!((ap - 0.8333).abs() < 1e-4);
        assert_eq!(query_ndcg(&[1.0, 0.5, 0.0]), Some(1.0));
        assert_eq!(average_precision(&[1.0, 1.0, 0.0]), Some(1.0));
        // half relevance never counts for AP
        assert_eq!(average_precision(&[0.5, 0.5]), None);
        assert_eq!(average_precision(&[0.5, 1.0]), Some(0.5));
        assert_eq!(query_ndcg(&[0.0, 0.0]), None);
    }

    #[test]
    fn all_zero_queries_are_skipped() {
        let rs = vec![result(vec![0.0, 0.0]), result(vec![1.0, 0.0])];
        assert_eq!(ndcg(&rs), 1.0);
        assert_eq!(mean_ap(&rs), 1.0);
        let m = RetrievalMetrics::from_results(&rs);
        assert_eq!((m.ndcg_queries, m.map_queries, m.num_queries), (1, 1, 2));
    }

    #[test]
    fn metrics_match_naive_oracle_on_random_rankings() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let levels = [0.0, 0.5, 1.0];
        let mut results = Vec::new();
        for _ in 0..1000 {
            let n = rng.random_range(1..60);
            let rel: Vec<f64> = (0..n).map(|_| levels[rng.random_range(0..3)]).collect();
            match (query_ndcg(&rel), naive_ndcg(&rel)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-10),
                (a, b) => assert_eq!(a, b),
            }
            match (average_precision(&rel), naive_ap(&rel)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-10),
                (a, b) => assert_eq!(a, b),
            }
            results.push(result(rel));
        }
        let oracle: Vec<f64> = results.iter().filter_map(|r| naive_ndcg(&r.relevance)).collect();
        assert!((ndcg(&results) - oracle.iter().sum::<f64>() / oracle.len() as f64).abs() < 1e-10);
        let oracle: Vec<f64> = results.iter().filter_map(|r| naive_ap(&r.relevance)).collect();
        assert!((mean_ap(&results) - oracle.iter().sum::<f64>() / oracle.len() as f64).abs() < 1e-10);
    }

    #[test]
    fn ranking_ties_go_to_lower_row() {
        let q = array![[1.0, 0.0]];
        let g = array![[0.0, 1.0], [2.0, 0.0], [0.0, -1.0], [1.0, 0.0]];
        assert_eq!(rank_gallery(q.view(), g.view()).unwrap()[0], vec![1, 3, 0, 2]);
        assert!(rank_gallery(q.view(), Array2::zeros((0, 2)).view()).is_err());
        assert!(rank_gallery(q.view(), Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn gallery_order_does_not_change_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gl: Vec<ActionLabel> = (0..30).map(|i| al(i % 3, i % 4)).collect();
        let ql: Vec<ActionLabel> = (0..10).map(|i| al(i % 4, i % 5)).collect();
        let g = Array2::from_shape_fn((30, 5), |_| rng.random_range(-1.0..1.0));
        let q = Array2::from_shape_fn((10, 5), |_| rng.random_range(-1.0..1.0));
        let base = RetrievalMetrics::from_results(&score_rankings(q.view(), &ql, g.view(), &gl).unwrap());

        let mut perm: Vec<usize> = (0..30).collect();
        perm.shuffle(&mut rng);
        let gp = g.select(Axis(0), &perm);
        let glp: Vec<ActionLabel> = perm.iter().map(|&i| gl[i]).collect();
        let shuffled = RetrievalMetrics::from_results(&score_rankings(q.view(), &ql, gp.view(), &glp).unwrap());
        assert!((base.ndcg - shuffled.ndcg).abs() < 1e-12);
        assert!((base.map - shuffled.map).abs() < 1e-12);

        // duplicate queries score identically
        let qd = ndarray::concatenate(Axis(0), &[q.view(), q.slice(ndarray::s![0..1, ..])]).unwrap();
        let mut qld = ql.clone();
        qld.push(ql[0]);
        let dup = RetrievalMetrics::from_results(&score_rankings(qd.view(), &qld, g.view(), &gl).unwrap());
        assert_eq!(dup.per_query[0].ndcg, dup.per_query[10].ndcg);
        assert_eq!(dup.per_query[0].ap, dup.per_query[10].ap);
    }

    fn arb_relevance() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(prop_oneof![Just(0.0), Just(0.5), Just(1.0)], 1..40)
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_reversal_never_helps(rel in arb_relevance()) {
            if let Some(n) = query_ndcg(&rel) {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
                let mut sorted = rel.clone();
                sorted.sort_by(|a, b| a.total_cmp(b));
                // ascending order is the worst; its reverse is ideal
                prop_assert!(query_ndcg(&sorted).unwrap() <= n + 1e-12);
                sorted.reverse();
                prop_assert!((query_ndcg(&sorted).unwrap() - 1.0).abs() < 1e-12);
            }
            if let Some(ap) = average_precision(&rel) {
                prop_assert!(ap > 0.0 && ap <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn moving_relevant_item_up_never_hurts(rel in arb_relevance(), pick in any::<prop::sample::Index>()) {
            let i = pick.index(rel.len());
            if i > 0 && rel[i] > rel[i - 1] {
                let mut up = rel.clone();
                up.swap(i, i - 1);
                prop_assert!(query_ndcg(&up).unwrap() >= query_ndcg(&rel).unwrap() - 1e-12);
                if let (Some(a), Some(b)) = (average_precision(&up), average_precision(&rel)) {
                    prop_assert!(a >= b - 1e-12);
                }
            }
        }
    }
}
