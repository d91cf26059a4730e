//! Batch-hard triplet loss and class-balanced batch sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::RetrievalError;
use crate::linalg::Matrix;
use crate::pooling::{l2_normalize, DescriptorSet, GlobalDescriptor, PoolError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
}

impl DistanceMetric {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceMetric::Euclidean => {
                let mut acc = 0.0;
                for i in 0..a.len() {
                    let d = a[i] - b[i];
                    acc += d * d;
                }
                acc.sqrt()
            }
            DistanceMetric::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for i in 0..a.len() {
                    dot += a[i] * b[i];
                    na += a[i] * a[i];
                    nb += b[i] * b[i];
                }
                1.0 - dot / (na.sqrt() * nb.sqrt())
            }
        }
    }

    /// Gradient of `distance(a, b)` with respect to `a`. Returns zeros at the
    /// non-differentiable point `a == b` of the Euclidean metric.
    fn gradient_wrt_a(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        match self {
            DistanceMetric::Euclidean => {
                let d = self.distance(a, b);
                if d < 1e-12 {
                    return vec![0.0; a.len()];
                }
                a.iter().zip(b).map(|(x, y)| (x - y) / d).collect()
            }
            DistanceMetric::Cosine => {
                let (mut dot, mut na2, mut nb2) = (0.0, 0.0, 0.0);
                for i in 0..a.len() {
                    dot += a[i] * b[i];
                    na2 += a[i] * a[i];
                    nb2 += b[i] * b[i];
                }
                let (na, nb) = (na2.sqrt(), nb2.sqrt());
                a.iter()
                    .zip(b)
                    .map(|(x, y)| -(y / (na * nb) - dot * x / (na2 * na * nb)))
                    .collect()
            }
        }
    }
}

/// Margin and batch layout for the batch-hard triplet loss.
///
/// Desk-scale defaults are 4 classes × 2 samples; identity-retrieval setups
/// at scale typically use something like 14 classes × 4 samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletConfig {
    pub margin: f64,
    /// Distinct classes per batch (P).
    pub classes_per_batch: usize,
    /// Samples drawn per class (K).
    pub samples_per_class: usize,
    pub distance: DistanceMetric,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            classes_per_batch: 4,
            samples_per_class: 2,
            distance: DistanceMetric::Euclidean,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.margin < 0.0 || !self.margin.is_finite() {
            return Err(RetrievalError::DegenerateBatch(format!(
                "margin must be non-negative, got {}",
                self.margin
            )));
        }
        if self.classes_per_batch < 2 || self.samples_per_class < 2 {
            return Err(RetrievalError::DegenerateBatch(
                "batch-hard mining needs at least 2 classes and 2 samples per class".into(),
            ));
        }
        Ok(())
    }
}

/// Batch-hard triplet loss over a batch of embeddings (columns of `embeddings`).
///
/// For every anchor the hardest positive is its farthest same-label item and
/// the hardest negative its nearest different-label item; the loss sums the
/// hinges `[margin + d_pos − d_neg]₊` over anchors. The returned gradient is
/// with respect to the embedding columns and flows only through anchors whose
/// hinge is strictly positive, via the selected hard pairs. Selection ties go
/// to the lowest column index.
pub fn batch_hard_triplet_loss(
    embeddings: &Matrix,
    labels: &[String],
    cfg: &TripletConfig,
) -> Result<(f64, Matrix), RetrievalError> {
    let batch = embeddings.cols();
    let dim = embeddings.rows();
    if labels.len() != batch {
        return Err(RetrievalError::LengthMismatch {
            context: "batch labels",
            left: labels.len(),
            right: batch,
        });
    }
    let mut class_sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *class_sizes.entry(l.as_str()).or_insert(0) += 1;
    }
    if class_sizes.len() < 2 {
        return Err(RetrievalError::DegenerateBatch(
            "batch contains a single class".into(),
        ));
    }
    if let Some((label, _)) = class_sizes.iter().find(|(_, &count)| count < 2) {
        return Err(RetrievalError::DegenerateBatch(format!(
            "class '{label}' has a single member in the batch"
        )));
    }

    let column = |i: usize| -> Vec<f64> { (0..dim).map(|r| embeddings.get(r, i)).collect() };
    let cols: Vec<Vec<f64>> = (0..batch).map(column).collect();

    let mut dist = vec![vec![0.0; batch]; batch];
    for i in 0..batch {
        for j in (i + 1)..batch {
            let d = cfg.distance.distance(&cols[i], &cols[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }

    let mut loss = 0.0;
    let mut grad = Matrix::zeros(dim, batch);
    for anchor in 0..batch {
        let mut hardest_pos: Option<usize> = None;
        let mut hardest_neg: Option<usize> = None;
        for other in 0..batch {
            if other == anchor {
                continue;
            }
            if labels[other] == labels[anchor] {
                if hardest_pos.is_none_or(|p| dist[anchor][other] > dist[anchor][p]) {
                    hardest_pos = Some(other);
                }
            } else if hardest_neg.is_none_or(|n| dist[anchor][other] < dist[anchor][n]) {
                hardest_neg = Some(other);
            }
        }
        let (pos, neg) = (
            hardest_pos.expect("class sizes checked above"),
            hardest_neg.expect("class count checked above"),
        );
        let hinge = cfg.margin + dist[anchor][pos] - dist[anchor][neg];
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;

        let d_pos_a = cfg.distance.gradient_wrt_a(&cols[anchor], &cols[pos]);
        let d_pos_p = cfg.distance.gradient_wrt_a(&cols[pos], &cols[anchor]);
        let d_neg_a = cfg.distance.gradient_wrt_a(&cols[anchor], &cols[neg]);
        let d_neg_n = cfg.distance.gradient_wrt_a(&cols[neg], &cols[anchor]);
        for r in 0..dim {
            let cur = grad.get(r, anchor);
            grad.set(r, anchor, cur + d_pos_a[r] - d_neg_a[r]);
            let cur = grad.get(r, pos);
            grad.set(r, pos, cur + d_pos_p[r]);
            let cur = grad.get(r, neg);
            grad.set(r, neg, cur - d_neg_n[r]);
        }
    }
    Ok((loss, grad))
}

/// Samples one epoch of class-balanced batches: classes are shuffled, grouped
/// `classes_per_batch` at a time (a trailing remainder is dropped), and each
/// class contributes `samples_per_class` items — a random subset when it has
/// enough, with replacement when it does not.
///
/// Deterministic for a fixed seed.
pub fn pk_sampler(
    labels: &[String],
    classes_per_batch: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, RetrievalError> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l.as_str()).or_default().push(i);
    }
    if by_class.len() < classes_per_batch {
        return Err(RetrievalError::NotEnoughClasses {
            available: by_class.len(),
            required: classes_per_batch,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<&str> = by_class.keys().copied().collect();
    classes.shuffle(&mut rng);

    let mut batches = Vec::new();
    for group in classes.chunks(classes_per_batch) {
        if group.len() < classes_per_batch {
            break;
        }
        let mut batch = Vec::with_capacity(classes_per_batch * samples_per_class);
        for class in group {
            let members = &by_class[class];
            if members.len() >= samples_per_class {
                let mut pool = members.clone();
                pool.shuffle(&mut rng);
                batch.extend_from_slice(&pool[..samples_per_class]);
            } else {
                for _ in 0..samples_per_class {
                    batch.push(members[rng.random_range(0..members.len())]);
                }
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Embeds an item represented by several descriptor sets: each set is embedded
/// on its own, the (normalized) embeddings are averaged, and the mean is
/// normalized again.
pub fn multi_descriptor_embed(
    sets: &[DescriptorSet],
    mut embed: impl FnMut(&DescriptorSet) -> Result<GlobalDescriptor, PoolError>,
) -> Result<GlobalDescriptor, RetrievalError> {
    if sets.is_empty() {
        return Err(RetrievalError::EmptyGallery);
    }
    let first = embed(&sets[0])?;
    let mut acc = first.values.clone();
    for set in &sets[1..] {
        let e = embed(set)?;
        if e.dim() != acc.dim() {
            return Err(RetrievalError::DimensionMismatch {
                index: 0,
                got: e.dim(),
                expected: acc.dim(),
            });
        }
        acc = acc.add(&e.values);
    }
    let mean = acc.scale(1.0 / sets.len() as f64);
    Ok(GlobalDescriptor {
        values: l2_normalize(&mean)?,
        normalized: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels(groups: &[(&str, usize)]) -> Vec<String> {
        groups
            .iter()
            .flat_map(|(name, count)| std::iter::repeat_n(name.to_string(), *count))
            .collect()
    }

    #[test]
    fn satisfied_margin_gives_zero_loss() {
        // within-class distance 0.2, between-class 0.9 in 1D-ish layout
        let emb = Matrix::from_rows(&[vec![0.0, 0.2, 0.9, 1.1]]).unwrap();
        let l = labels(&[("a", 2), ("b", 2)]);
        let cfg = TripletConfig {
            margin: 0.1,
            ..TripletConfig::default()
        };
        let (loss, grad) = batch_hard_triplet_loss(&emb, &l, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn equal_distances_give_margin_per_anchor() {
        // Square layout: within-class and between-class distances both 0.5,
        // so every anchor's hinge is exactly the margin.
        let emb = Matrix::from_rows(&[
            vec![0.0, 0.5, 0.0, 0.5],
            vec![0.0, 0.0, 0.5, 0.5],
        ])
        .unwrap();
        let l = labels(&[("a", 2), ("b", 2)]);
        let cfg = TripletConfig {
            margin: 0.1,
            ..TripletConfig::default()
        };
        let (loss, _) = batch_hard_triplet_loss(&emb, &l, &cfg).unwrap();
        assert!((loss - 4.0 * 0.1).abs() <= 1e-12);
    }

    #[test]
    fn loss_is_zero_iff_margins_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = TripletConfig {
            margin: 0.05,
            ..TripletConfig::default()
        };
        for _ in 0..20 {
            let emb = Matrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
            let l = labels(&[("a", 3), ("b", 3)]);
            let (loss, _) = batch_hard_triplet_loss(&emb, &l, &cfg).unwrap();

            // oracle: check margins directly
            let col = |i: usize| -> Vec<f64> { (0..3).map(|r| emb.get(r, i)).collect() };
            let mut satisfied = true;
            for a in 0..6 {
                let d = |x: usize| DistanceMetric::Euclidean.distance(&col(a), &col(x));
                let worst_pos = (0..6)
                    .filter(|&i| i != a && l[i] == l[a])
                    .map(d)
                    .fold(f64::NEG_INFINITY, f64::max);
                let best_neg = (0..6)
                    .filter(|&i| l[i] != l[a])
                    .map(d)
                    .fold(f64::INFINITY, f64::min);
                if best_neg < worst_pos + cfg.margin {
                    satisfied = false;
                }
            }
            assert_eq!(loss == 0.0, satisfied);
        }
    }

    #[test]
    fn inactive_anchors_receive_no_gradient() {
        // a = {0, 0.01} is tight; b = {2, 8} is spread wide. Only the anchor
        // at 2 has an active hinge (d_pos = 6 beats d_neg = 1.99); it selects
        // the positive at 8 and the negative at 0.01. The item at 0 is in no
        // active triplet and must receive exactly zero gradient.
        let emb = Matrix::from_rows(&[vec![0.0, 0.01, 2.0, 8.0], vec![0.0; 4]]).unwrap();
        let l = labels(&[("a", 2), ("b", 2)]);
        let cfg = TripletConfig {
            margin: 0.1,
            ..TripletConfig::default()
        };
        let (loss, grad) = batch_hard_triplet_loss(&emb, &l, &cfg).unwrap();
        assert!((loss - (0.1 + 6.0 - 1.99)).abs() <= 1e-12);
        assert_eq!(grad.col(0).norm(), 0.0);
        assert!(grad.col(1).norm() > 0.0);
        assert!(grad.col(2).norm() > 0.0);
        assert!(grad.col(3).norm() > 0.0);
    }

    #[test]
    fn degenerate_batches_are_rejected() {
        let emb = Matrix::from_rows(&[vec![0.0, 1.0, 2.0]]).unwrap();
        let cfg = TripletConfig::default();
        assert!(matches!(
            batch_hard_triplet_loss(&emb, &labels(&[("a", 3)]), &cfg),
            Err(RetrievalError::DegenerateBatch(_))
        ));
        assert!(matches!(
            batch_hard_triplet_loss(&emb, &labels(&[("a", 2), ("b", 1)]), &cfg),
            Err(RetrievalError::DegenerateBatch(_))
        ));
    }

    #[test]
    fn cosine_distance_and_gradient_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = TripletConfig {
            margin: 0.3,
            distance: DistanceMetric::Cosine,
            ..TripletConfig::default()
        };
        let emb = Matrix::from_fn(4, 4, |_, _| rng.random_range(0.2..1.0));
        let l = labels(&[("a", 2), ("b", 2)]);
        let (loss, _) = batch_hard_triplet_loss(&emb, &l, &cfg).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn sampler_produces_balanced_batches() {
        let l = labels(&[("a", 4), ("b", 4), ("c", 4), ("d", 4)]);
        let batches = pk_sampler(&l, 2, 2, 0).unwrap();
        assert_eq!(batches.len(), 2);
        for batch in &batches {
            assert_eq!(batch.len(), 4);
            let mut seen: Vec<&str> = batch.iter().map(|&i| l[i].as_str()).collect();
            seen.dedup();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 2, "exactly two distinct labels per batch");
        }
    }

    #[test]
    fn sampler_draws_with_replacement_from_tiny_classes() {
        let l = labels(&[("a", 1), ("b", 3)]);
        let batches = pk_sampler(&l, 2, 2, 1).unwrap();
        assert_eq!(batches.len(), 1);
        let batch = &batches[0];
        // the single 'a' item appears twice
        let a_hits = batch.iter().filter(|&&i| l[i] == "a").count();
        assert_eq!(a_hits, 2);
        assert_eq!(batch.iter().filter(|&&i| i == 0).count(), 2);
    }

    #[test]
    fn sampler_is_deterministic_and_seed_sensitive() {
        let l = labels(&[("a", 3), ("b", 3), ("c", 3), ("d", 3), ("e", 3)]);
        let x = pk_sampler(&l, 2, 2, 42).unwrap();
        let y = pk_sampler(&l, 2, 2, 42).unwrap();
        assert_eq!(x, y);
        let z = pk_sampler(&l, 2, 2, 43).unwrap();
        assert_ne!(x, z);
    }

    #[test]
    fn sampler_rejects_too_few_classes() {
        let l = labels(&[("a", 5)]);
        assert!(matches!(
            pk_sampler(&l, 2, 2, 0),
            Err(RetrievalError::NotEnoughClasses { .. })
        ));
    }

    #[test]
    fn multi_set_embedding_cases() {
        let embed = |set: &DescriptorSet| {
            Ok(GlobalDescriptor {
                values: l2_normalize(&set.descriptor(0))?,
                normalized: true,
            })
        };
        let set_a =
            DescriptorSet::new(Matrix::new(2, 1, vec![1.0, 0.0]).unwrap()).unwrap();
        let set_b =
            DescriptorSet::new(Matrix::new(2, 1, vec![0.0, 1.0]).unwrap()).unwrap();

        // one set: identical to embedding it directly
        let single = multi_descriptor_embed(std::slice::from_ref(&set_a), embed).unwrap();
        assert_eq!(single.values.as_slice(), &[1.0, 0.0]);

        // two identical sets: unchanged
        let twice =
            multi_descriptor_embed(&[set_a.clone(), set_a.clone()], embed).unwrap();
        assert_eq!(twice.values.as_slice(), &[1.0, 0.0]);

        // orthogonal embeddings average to the diagonal
        let both = multi_descriptor_embed(&[set_a, set_b], embed).unwrap();
        let expect = 1.0 / 2.0f64.sqrt();
        assert!((both.values[0] - expect).abs() <= 1e-15);
        assert!((both.values[1] - expect).abs() <= 1e-15);
        assert!((both.values.norm() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        // close the loop here as well as in the grad module: perturb one
        // coordinate and compare against the analytic gradient
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = TripletConfig {
            margin: 0.25,
            ..TripletConfig::default()
        };
        let l = labels(&[("a", 2), ("b", 2)]);
        let emb = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let (_, grad) = batch_hard_triplet_loss(&emb, &l, &cfg).unwrap();
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..4 {
                let mut plus = emb.clone();
                plus.set(r, c, emb.get(r, c) + h);
                let mut minus = emb.clone();
                minus.set(r, c, emb.get(r, c) - h);
                let lp = batch_hard_triplet_loss(&plus, &l, &cfg).unwrap().0;
                let lm = batch_hard_triplet_loss(&minus, &l, &cfg).unwrap().0;
                let numeric = (lp - lm) / (2.0 * h);
                assert!(
                    (numeric - grad.get(r, c)).abs() <= 1e-5,
                    "({r},{c}): numeric {numeric} analytic {}",
                    grad.get(r, c)
                );
            }
        }
    }

    #[test]
    fn euclidean_on_unit_vectors() {
        let a = Vector::new(vec![1.0, 0.0]).unwrap();
        let b = Vector::new(vec![0.0, 1.0]).unwrap();
        let d = DistanceMetric::Euclidean.distance(a.as_slice(), b.as_slice());
        assert!((d - 2.0f64.sqrt()).abs() <= 1e-15);
    }
}
