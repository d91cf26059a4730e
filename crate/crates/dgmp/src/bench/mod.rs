//! Synthetic bursty-descriptor experiments.
//!
//! The generator produces labeled descriptor sets in which every item mixes a
//! few class-specific "signal" descriptors with many copies of one background
//! direction shared by *all* classes — the bursty regime in which plain
//! average pooling collapses toward the background while a weighting that
//! equalizes descriptor influence keeps the signal visible.

mod train;

pub use train::{
    train, EmbeddingModel, ModelConfig, TrainConfig, TrainError, TrainLogEntry, TrainOutcome,
};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Matrix, Vector};
use crate::pooling::{self, DescriptorSet, PoolError, PoolingConfig, PoolingMethod};
use crate::retrieval::{self, DistanceMetric, EmbeddingGallery, RetrievalError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Parameters of the synthetic bursty dataset.
///
/// Every item of class `c` gets `signal_count` descriptors around that class's
/// unit direction and `burst_count` descriptors around one background unit
/// direction drawn once per dataset and shared by all classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurstyGenConfig {
    pub dim: usize,
    pub n_classes: usize,
    pub items_per_class: usize,
    pub signal_count: usize,
    pub burst_count: usize,
    pub signal_noise: f64,
    pub burst_noise: f64,
    pub seed: u64,
}

impl Default for BurstyGenConfig {
    fn default() -> Self {
        // Calibrated so the bursty failure mode is actually present: with two
        // signal descriptors against 128 background ones, plain averaging
        // lands near the background for every class (mAP ≈ 0.4 on the
        // leave-one-out task) while the equalizing weighting stays near 1.0.
        Self {
            dim: 16,
            n_classes: 5,
            items_per_class: 6,
            signal_count: 2,
            burst_count: 128,
            signal_noise: 0.10,
            burst_noise: 0.10,
            seed: 0,
        }
    }
}

impl BurstyGenConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.dim < 2 {
            return Err(BenchError::InvalidConfig("dim must be at least 2".into()));
        }
        if self.n_classes == 0 || self.items_per_class == 0 {
            return Err(BenchError::InvalidConfig(
                "n_classes and items_per_class must be at least 1".into(),
            ));
        }
        if self.signal_count == 0 {
            return Err(BenchError::InvalidConfig(
                "signal_count must be at least 1".into(),
            ));
        }
        if self.signal_noise < 0.0 || self.burst_noise < 0.0 {
            return Err(BenchError::InvalidConfig(
                "noise levels must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    loop {
        let v = Vector::from_iter((0..dim).map(|_| StandardNormal.sample(rng)));
        let norm = v.norm();
        if norm > 1e-6 {
            return v.scale(1.0 / norm);
        }
    }
}

/// Generates the labeled dataset. Deterministic for a fixed seed: the
/// background direction is drawn first, then per class its direction followed
/// by its items (signal columns before burst columns).
pub fn gen_bursty(cfg: &BurstyGenConfig) -> Result<Vec<DescriptorSet>, BenchError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let background = unit_direction(&mut rng, cfg.dim);
    let n_cols = cfg.signal_count + cfg.burst_count;

    let mut items = Vec::with_capacity(cfg.n_classes * cfg.items_per_class);
    for class in 0..cfg.n_classes {
        let direction = unit_direction(&mut rng, cfg.dim);
        for item in 0..cfg.items_per_class {
            let mut m = Matrix::zeros(cfg.dim, n_cols);
            for col in 0..cfg.signal_count {
                for row in 0..cfg.dim {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    m.set(row, col, direction[row] + cfg.signal_noise * noise);
                }
            }
            for col in cfg.signal_count..n_cols {
                for row in 0..cfg.dim {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    m.set(row, col, background[row] + cfg.burst_noise * noise);
                }
            }
            items.push(
                DescriptorSet::new(m)?
                    .with_label(format!("class-{class}"))
                    .with_source_id(format!("item-{class:02}-{item:02}")),
            );
        }
    }
    Ok(items)
}

/// One pooling method's retrieval scores on the synthetic dataset.
#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkRow {
    pub label: String,
    pub method: String,
    pub map: f64,
    pub top1: f64,
    /// Solver path for GMP rows, empty otherwise.
    pub strategy: String,
    /// Wall time of pooling + evaluation. Not part of the primary CSV, which
    /// must be byte-reproducible.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkReport {
    /// Primary CSV table. Wall times are deliberately excluded so reruns with
    /// the same seed are byte-identical; they belong in sidecar metadata.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,map,top1,strategy\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.label, row.map, row.top1, row.strategy
            ));
        }
        out
    }
}

/// Pools every item with each config (identity embedding, output normalized),
/// evaluates leave-one-out retrieval, and reports mAP/top-1 per method.
pub fn run_benchmark(
    gen_cfg: &BurstyGenConfig,
    pooling_configs: &[PoolingConfig],
    metric: DistanceMetric,
) -> Result<BenchmarkReport, BenchError> {
    let dataset = gen_bursty(gen_cfg)?;
    let mut rows = Vec::with_capacity(pooling_configs.len());
    for cfg in pooling_configs {
        cfg.validate()?;
        let started = Instant::now();
        let mut normalized_cfg = cfg.clone();
        normalized_cfg.normalize_output = true;

        let mut strategy = String::new();
        let mut embeddings = Vec::with_capacity(dataset.len());
        let mut labels = Vec::with_capacity(dataset.len());
        let mut ids = Vec::with_capacity(dataset.len());
        for set in &dataset {
            let pooled = if cfg.method == PoolingMethod::Gmp {
                let (pooled, solution) = pooling::pool_gmp(set, &normalized_cfg)?;
                strategy = solution.strategy.name().to_string();
                pooled
            } else {
                pooling::pool(set, &normalized_cfg)?
            };
            embeddings.push(pooled);
            labels.push(set.label.clone().expect("generator labels every item"));
            ids.push(set.source_id.clone().expect("generator ids every item"));
        }
        let gallery = EmbeddingGallery::new(embeddings, labels, ids)?;
        let report = retrieval::evaluate_with_metric(&gallery, metric, true)?;
        rows.push(BenchmarkRow {
            label: cfg.describe(),
            method: cfg.method.name().to_string(),
            map: report.map,
            top1: report.top1,
            strategy,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok(BenchmarkReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &Vector, b: &Vector) -> f64 {
        a.dot(b) / (a.norm() * b.norm())
    }

    #[test]
    fn noiseless_separable_data_is_trivial_for_all_methods() {
        let cfg = BurstyGenConfig {
            burst_count: 0,
            signal_noise: 0.0,
            burst_noise: 0.0,
            n_classes: 3,
            items_per_class: 3,
            signal_count: 4,
            ..BurstyGenConfig::default()
        };
        let report = run_benchmark(
            &cfg,
            &[PoolingConfig::average(), PoolingConfig::gmp(1.0)],
            DistanceMetric::Euclidean,
        )
        .unwrap();
        for row in &report.rows {
            assert_eq!(row.map, 1.0, "{}", row.label);
            assert_eq!(row.top1, 1.0, "{}", row.label);
        }
    }

    #[test]
    fn noiseless_items_repeat_their_class_direction() {
        let cfg = BurstyGenConfig {
            burst_count: 0,
            signal_noise: 0.0,
            burst_noise: 0.0,
            n_classes: 2,
            items_per_class: 2,
            signal_count: 5,
            ..BurstyGenConfig::default()
        };
        let items = gen_bursty(&cfg).unwrap();
        for item in &items {
            let first = item.descriptor(0);
            assert!((first.norm() - 1.0).abs() <= 1e-12);
            for i in 1..item.len() {
                assert_eq!(item.descriptor(i).as_slice(), first.as_slice());
            }
        }
    }

    #[test]
    fn burst_dominates_average_but_not_gmp() {
        // One signal column against 50 noiseless burst columns: the mean is
        // almost exactly the background direction while the ridge weighting
        // keeps a large component along the class signal.
        let cfg = BurstyGenConfig {
            dim: 16,
            n_classes: 2,
            items_per_class: 1,
            signal_count: 1,
            burst_count: 50,
            signal_noise: 0.0,
            burst_noise: 0.0,
            seed: 3,
        };
        let items = gen_bursty(&cfg).unwrap();
        // recover the shared background direction: burst columns are exact
        let background = items[0].descriptor(1);
        for item in &items {
            let signal = item.descriptor(0);
            let avg = pooling::pool_avg(item);
            let (gmp, _) = pooling::pool_gmp_dual(item, 1.0).unwrap();

            let avg_to_bg = cosine(&avg.values, &background);
            let gmp_to_bg = cosine(&gmp.values, &background);
            let avg_to_signal = cosine(&avg.values, &signal);
            let gmp_to_signal = cosine(&gmp.values, &signal);

            assert!(avg_to_bg >= 0.99, "mean direction ~ background: {avg_to_bg}");
            assert!(gmp_to_bg < avg_to_bg, "gmp less background-dominated");
            assert!(gmp_to_signal > avg_to_signal, "gmp keeps more signal");
        }
    }

    #[test]
    fn default_bursty_config_favors_gmp_over_average() {
        let report = run_benchmark(
            &BurstyGenConfig::default(),
            &[PoolingConfig::average(), PoolingConfig::gmp(1.0)],
            DistanceMetric::Euclidean,
        )
        .unwrap();
        let avg = &report.rows[0];
        let gmp = &report.rows[1];
        assert!(
            gmp.map > avg.map,
            "gmp map {} should exceed avg map {}",
            gmp.map,
            avg.map
        );
    }

    #[test]
    fn huge_lambda_matches_average_ranking() {
        let report = run_benchmark(
            &BurstyGenConfig::default(),
            &[PoolingConfig::average(), PoolingConfig::gmp(1e8)],
            DistanceMetric::Euclidean,
        )
        .unwrap();
        assert!((report.rows[0].map - report.rows[1].map).abs() <= 0.01);
    }

    #[test]
    fn mixed_at_zero_weight_equals_average_row() {
        let report = run_benchmark(
            &BurstyGenConfig::default(),
            &[PoolingConfig::average(), PoolingConfig::mixed(0.0)],
            DistanceMetric::Euclidean,
        )
        .unwrap();
        assert!((report.rows[0].map - report.rows[1].map).abs() <= 1e-12);
        assert!((report.rows[0].top1 - report.rows[1].top1).abs() <= 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = BurstyGenConfig::default();
        let a = gen_bursty(&cfg).unwrap();
        let b = gen_bursty(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            let (xd, yd) = (x.matrix().data(), y.matrix().data());
            assert_eq!(
                xd.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                yd.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = BurstyGenConfig::default();
        for cfg in [
            BurstyGenConfig { dim: 1, ..base.clone() },
            BurstyGenConfig { signal_count: 0, ..base.clone() },
            BurstyGenConfig { signal_noise: -0.1, ..base.clone() },
            BurstyGenConfig { n_classes: 0, ..base },
        ] {
            assert!(gen_bursty(&cfg).is_err());
        }
    }
}
