//! Retrieval evaluation: pairwise distances, average precision, mAP and
//! top-1 accuracy over a gallery of labeled embeddings.

mod triplet;

pub use triplet::{
    batch_hard_triplet_loss, multi_descriptor_embed, pk_sampler, DistanceMetric, TripletConfig,
};

use serde::Serialize;
use thiserror::Error;

use crate::linalg::Matrix;
use crate::pooling::{GlobalDescriptor, PoolError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("gallery lengths disagree: {context} ({left} vs {right})")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },
    #[error("embedding {index} is not normalized")]
    NotNormalized { index: usize },
    #[error("embedding {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("query '{query}' has no relevant items")]
    NoRelevant { query: String },
    #[error("no query has a second item of its class; mAP is undefined")]
    AllSingletons,
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("not enough classes: have {available}, need {required}")]
    NotEnoughClasses { available: usize, required: usize },
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// A fixed gallery of ℓ2-normalized embeddings with class labels and stable
/// item identifiers.
#[derive(Debug, Clone)]
pub struct EmbeddingGallery {
    embeddings: Vec<GlobalDescriptor>,
    labels: Vec<String>,
    ids: Vec<String>,
}

impl EmbeddingGallery {
    pub fn new(
        embeddings: Vec<GlobalDescriptor>,
        labels: Vec<String>,
        ids: Vec<String>,
    ) -> Result<Self, RetrievalError> {
        if embeddings.is_empty() {
            return Err(RetrievalError::EmptyGallery);
        }
        if labels.len() != embeddings.len() {
            return Err(RetrievalError::LengthMismatch {
                context: "labels",
                left: labels.len(),
                right: embeddings.len(),
            });
        }
        if ids.len() != embeddings.len() {
            return Err(RetrievalError::LengthMismatch {
                context: "ids",
                left: ids.len(),
                right: embeddings.len(),
            });
        }
        let dim = embeddings[0].dim();
        for (index, e) in embeddings.iter().enumerate() {
            if e.dim() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    index,
                    got: e.dim(),
                    expected: dim,
                });
            }
            if !e.normalized {
                return Err(RetrievalError::NotNormalized { index });
            }
        }
        Ok(Self {
            embeddings,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].dim()
    }

    pub fn embedding(&self, i: usize) -> &GlobalDescriptor {
        &self.embeddings[i]
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }
}

/// Symmetric pairwise distance matrix with an exactly zero diagonal.
pub fn pairwise_dist(gallery: &EmbeddingGallery, metric: DistanceMetric) -> Matrix {
    let s = gallery.len();
    let mut d = Matrix::zeros(s, s);
    for i in 0..s {
        for j in (i + 1)..s {
            let dist = metric.distance(
                gallery.embeddings[i].values.as_slice(),
                gallery.embeddings[j].values.as_slice(),
            );
            d.set(i, j, dist);
            d.set(j, i, dist);
        }
    }
    d
}

/// Average precision of a ranked relevance list with `relevant_count` relevant
/// items in total: `(1/R) Σ_r Pr(r)·rel(r)` where `Pr(r)` is the precision at
/// rank `r`.
pub fn average_precision(
    ranked_relevance: &[bool],
    relevant_count: usize,
) -> Result<f64, RetrievalError> {
    if relevant_count == 0 {
        return Err(RetrievalError::NoRelevant {
            query: String::new(),
        });
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank0, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(acc / relevant_count as f64)
}

/// Per-query result inside a [`RetrievalReport`].
#[derive(Debug, Clone, Serialize)]
pub struct QueryResult {
    pub id: String,
    pub label: String,
    pub ap: f64,
}

/// Outcome of a retrieval evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct RetrievalReport {
    pub per_query: Vec<QueryResult>,
    /// Arithmetic mean of the per-query average precisions.
    pub map: f64,
    /// Fraction of queries whose nearest neighbor shares their label.
    pub top1: f64,
    /// Queries whose class has no other member; they are excluded from both
    /// mAP and top-1.
    pub excluded_singletons: usize,
}

impl RetrievalReport {
    /// Per-query AP table as CSV (`id,label,ap`).
    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("id,label,ap\n");
        for q in &self.per_query {
            out.push_str(&format!("{},{},{}\n", q.id, q.label, q.ap));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Evaluates leave-one-out retrieval: every item queries the rest, candidates
/// are ranked by ascending distance with ties broken by ascending item id.
///
/// With `leave_one_out = false` the query stays in its own candidate list
/// (it then trivially ranks first). Queries whose class has no second member
/// are excluded and counted in the report.
pub fn evaluate(
    gallery: &EmbeddingGallery,
    leave_one_out: bool,
) -> Result<RetrievalReport, RetrievalError> {
    evaluate_with_metric(gallery, DistanceMetric::Euclidean, leave_one_out)
}

pub fn evaluate_with_metric(
    gallery: &EmbeddingGallery,
    metric: DistanceMetric,
    leave_one_out: bool,
) -> Result<RetrievalReport, RetrievalError> {
    let s = gallery.len();
    let dist = pairwise_dist(gallery, metric);
    let mut per_query = Vec::new();
    let mut top1_hits = 0usize;
    let mut excluded = 0usize;

    for q in 0..s {
        let mut candidates: Vec<usize> = (0..s)
            .filter(|&i| !leave_one_out || i != q)
            .collect();
        let relevant = candidates
            .iter()
            .filter(|&&i| gallery.labels[i] == gallery.labels[q])
            .count();
        if relevant == 0 {
            excluded += 1;
            continue;
        }
        candidates.sort_by(|&a, &b| {
            dist.get(q, a)
                .partial_cmp(&dist.get(q, b))
                .expect("distances are finite")
                .then_with(|| gallery.ids[a].cmp(&gallery.ids[b]))
        });
        let relevance: Vec<bool> = candidates
            .iter()
            .map(|&i| gallery.labels[i] == gallery.labels[q])
            .collect();
        let ap = average_precision(&relevance, relevant).map_err(|_| RetrievalError::NoRelevant {
            query: gallery.ids[q].clone(),
        })?;
        if relevance[0] {
            top1_hits += 1;
        }
        per_query.push(QueryResult {
            id: gallery.ids[q].clone(),
            label: gallery.labels[q].clone(),
            ap,
        });
    }

    if per_query.is_empty() {
        return Err(RetrievalError::AllSingletons);
    }
    let map = per_query.iter().map(|q| q.ap).sum::<f64>() / per_query.len() as f64;
    let top1 = top1_hits as f64 / per_query.len() as f64;
    Ok(RetrievalReport {
        per_query,
        map,
        top1,
        excluded_singletons: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;
    use crate::pooling::l2_normalize;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gallery_from(vectors: &[Vec<f64>], labels: &[&str]) -> EmbeddingGallery {
        let embeddings: Vec<GlobalDescriptor> = vectors
            .iter()
            .map(|v| GlobalDescriptor {
                values: l2_normalize(&Vector::new(v.clone()).unwrap()).unwrap(),
                normalized: true,
            })
            .collect();
        let ids: Vec<String> = (0..vectors.len()).map(|i| format!("item-{i:03}")).collect();
        EmbeddingGallery::new(
            embeddings,
            labels.iter().map(|s| s.to_string()).collect(),
            ids,
        )
        .unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.1 {
                return v.iter().map(|x| x / norm).collect();
            }
        }
    }

    #[test]
    fn pairwise_dist_basics() {
        let g = gallery_from(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], &["a", "a", "b"]);
        let d = pairwise_dist(&g, DistanceMetric::Euclidean);
        assert_eq!(d.get(0, 1), 0.0);
        assert_eq!(d.get(0, 0), 0.0);
        assert!((d.get(0, 2) - 2.0f64.sqrt()).abs() <= 1e-15);
        assert_eq!(d.get(2, 0), d.get(0, 2));
    }

    #[test]
    fn pairwise_dist_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vectors: Vec<Vec<f64>> = (0..8).map(|_| random_unit(&mut rng, 5)).collect();
        let labels: Vec<&str> = ["a", "b"].iter().cycle().take(8).cloned().collect();
        let g = gallery_from(&vectors, &labels);
        let d = pairwise_dist(&g, DistanceMetric::Euclidean);
        for i in 0..8 {
            for j in 0..8 {
                let expect: f64 = g
                    .embedding(i)
                    .values
                    .iter()
                    .zip(g.embedding(j).values.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!((d.get(i, j) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn average_precision_hand_cases() {
        assert_eq!(average_precision(&[true, true, false], 2).unwrap(), 1.0);
        assert_eq!(average_precision(&[false, true], 1).unwrap(), 0.5);
        let ap = average_precision(&[true, false, true, false, false], 2).unwrap();
        assert!((ap - 5.0 / 6.0).abs() <= 1e-15);
    }

    #[test]
    fn average_precision_rejects_no_relevant() {
        assert!(matches!(
            average_precision(&[false, false], 0),
            Err(RetrievalError::NoRelevant { .. })
        ));
    }

    #[test]
    fn ap_is_one_iff_relevant_items_lead() {
        let perfect = average_precision(&[true, true, true, false, false], 3).unwrap();
        assert_eq!(perfect, 1.0);
        let imperfect = average_precision(&[true, false, true], 2).unwrap();
        assert!(imperfect < 1.0);

        // every binary relevance pattern of length ≤ 8
        for len in 1usize..=8 {
            for bits in 0u32..(1 << len) {
                let rel: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
                let r = rel.iter().filter(|b| **b).count();
                if r == 0 {
                    continue;
                }
                let ap = average_precision(&rel, r).unwrap();
                assert!((0.0..=1.0).contains(&ap));
                let sorted_front = rel.iter().take(r).all(|b| *b);
                assert_eq!(ap == 1.0, sorted_front, "{rel:?}");
            }
        }
    }

    #[test]
    fn evaluate_separated_clusters() {
        // two tight clusters, far apart
        let g = gallery_from(
            &[
                vec![1.0, 0.0, 0.01],
                vec![1.0, 0.0, -0.01],
                vec![0.0, 1.0, 0.01],
                vec![0.0, 1.0, -0.01],
            ],
            &["a", "a", "b", "b"],
        );
        let report = evaluate(&g, true).unwrap();
        assert_eq!(report.map, 1.0);
        assert_eq!(report.top1, 1.0);
    }

    #[test]
    fn evaluate_adversarial_neighbors() {
        // each item's nearest neighbor is from the other class
        let deg = |d: f64| vec![d.to_radians().cos(), d.to_radians().sin()];
        let g = gallery_from(
            &[deg(0.0), deg(10.0), deg(180.0), deg(190.0)],
            &["a", "b", "a", "b"],
        );
        let report = evaluate(&g, true).unwrap();
        assert_eq!(report.top1, 0.0);
    }

    #[test]
    fn evaluate_excludes_singleton_classes() {
        let g = gallery_from(
            &[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]],
            &["a", "a", "lonely"],
        );
        let report = evaluate(&g, true).unwrap();
        assert_eq!(report.excluded_singletons, 1);
        assert_eq!(report.per_query.len(), 2);
    }

    #[test]
    fn evaluate_matches_brute_force_oracle() {
        // Independent oracle: recompute every AP directly from the formula
        // with its own distance loop and stable sort.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.random_range(6..14);
            let vectors: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, 4)).collect();
            let labels: Vec<String> =
                (0..n).map(|i| format!("c{}", i % 3)).collect();
            let label_refs: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
            let g = gallery_from(&vectors, &label_refs);
            let report = evaluate(&g, true).unwrap();

            let mut oracle_aps = Vec::new();
            for q in 0..n {
                let mut others: Vec<usize> = (0..n).filter(|&i| i != q).collect();
                others.sort_by(|&a, &b| {
                    let da: f64 = vectors[q]
                        .iter()
                        .zip(&vectors[a])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    let db: f64 = vectors[q]
                        .iter()
                        .zip(&vectors[b])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    da.partial_cmp(&db)
                        .unwrap()
                        .then_with(|| format!("item-{a:03}").cmp(&format!("item-{b:03}")))
                });
                let r = others.iter().filter(|&&i| labels[i] == labels[q]).count();
                if r == 0 {
                    continue;
                }
                let mut hits = 0;
                let mut acc = 0.0;
                for (rank0, &i) in others.iter().enumerate() {
                    if labels[i] == labels[q] {
                        hits += 1;
                        acc += hits as f64 / (rank0 + 1) as f64;
                    }
                }
                oracle_aps.push(acc / r as f64);
            }
            let oracle_map: f64 = oracle_aps.iter().sum::<f64>() / oracle_aps.len() as f64;
            assert!(
                (report.map - oracle_map).abs() <= 1e-12,
                "map {} vs oracle {}",
                report.map,
                oracle_map
            );
        }
    }

    #[test]
    fn evaluate_is_invariant_to_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 4;
        let vectors: Vec<Vec<f64>> = (0..9).map(|_| random_unit(&mut rng, dim)).collect();
        let labels: Vec<&str> = ["a", "b", "c"].iter().cycle().take(9).cloned().collect();
        let before = evaluate(&gallery_from(&vectors, &labels), true).unwrap();

        // random orthogonal matrix via Gram-Schmidt
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < dim {
            let mut v = random_unit(&mut rng, dim);
            for b in &basis {
                let proj: f64 = v.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b.iter()) {
                    *x -= proj * y;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                basis.push(v.iter().map(|x| x / norm).collect());
            }
        }
        let rotated: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| {
                basis
                    .iter()
                    .map(|b| b.iter().zip(v.iter()).map(|(x, y)| x * y).sum())
                    .collect()
            })
            .collect();
        let after = evaluate(&gallery_from(&rotated, &labels), true).unwrap();
        assert!((before.map - after.map).abs() <= 1e-12);
        assert!((before.top1 - after.top1).abs() <= 1e-12);
    }

    #[test]
    fn evaluate_is_invariant_to_item_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vectors: Vec<Vec<f64>> = (0..8).map(|_| random_unit(&mut rng, 3)).collect();
        let labels = ["a", "a", "b", "b", "c", "c", "a", "b"];
        let g1 = gallery_from(&vectors, &labels);

        // reverse item order, keeping each item's id and label attached
        let embeddings: Vec<GlobalDescriptor> =
            (0..8).rev().map(|i| g1.embedding(i).clone()).collect();
        let labels2: Vec<String> = (0..8).rev().map(|i| g1.label(i).to_string()).collect();
        let ids2: Vec<String> = (0..8).rev().map(|i| g1.id(i).to_string()).collect();
        let g2 = EmbeddingGallery::new(embeddings, labels2, ids2).unwrap();

        let r1 = evaluate(&g1, true).unwrap();
        let r2 = evaluate(&g2, true).unwrap();
        // per-query APs are identical; the mAP sum order differs
        assert!((r1.map - r2.map).abs() <= 1e-12);
        assert_eq!(r1.top1, r2.top1);
    }

    #[test]
    fn gallery_rejects_unnormalized_and_mismatched_inputs() {
        let raw = GlobalDescriptor {
            values: Vector::new(vec![3.0, 4.0]).unwrap(),
            normalized: false,
        };
        assert!(matches!(
            EmbeddingGallery::new(vec![raw], vec!["a".into()], vec!["x".into()]),
            Err(RetrievalError::NotNormalized { .. })
        ));

        let unit = GlobalDescriptor {
            values: Vector::new(vec![1.0, 0.0]).unwrap(),
            normalized: true,
        };
        assert!(matches!(
            EmbeddingGallery::new(vec![unit], vec![], vec!["x".into()]),
            Err(RetrievalError::LengthMismatch { .. })
        ));
    }
}
