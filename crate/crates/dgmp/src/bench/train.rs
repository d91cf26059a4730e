//! End-to-end metric training of a linear embedding with a trainable pooling
//! layer.
//!
//! The model is deliberately small: one linear map applied to every descriptor
//! column, the chosen pooling operator, and ℓ2 normalization. That is enough
//! to exercise every gradient path — triplet loss → normalization → pooling
//! (including the GMP regularizer) → linear map — while training runs in
//! seconds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

use crate::grad::{
    backward_avg, backward_gmp, backward_l2norm, backward_lse, backward_max, backward_mixed,
    GradError, Optimizer, OptimizerConfig, ParamGroup,
};
use crate::linalg::{matmul, Matrix, Vector};
use crate::pooling::{
    self, DescriptorSet, GlobalDescriptor, PoolError, PoolingConfig, PoolingMethod, LAMBDA_MIN,
};
use crate::retrieval::{
    batch_hard_triplet_loss, pk_sampler, EmbeddingGallery, RetrievalError, TripletConfig,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

/// Shape and initialization of the linear embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub output_dim: usize,
    pub pooling: PoolingConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            output_dim: 16,
            pooling: PoolingConfig::gmp(1.0),
            init_seed: 7,
        }
    }
}

/// Linear map + pooling + ℓ2 normalization. The output is always normalized.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    pub weights: Matrix,
    pub pooling: PoolingConfig,
}

impl EmbeddingModel {
    /// Gaussian initialization scaled by `1/√input_dim`, seeded.
    pub fn init(input_dim: usize, cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let weights = Matrix::from_fn(cfg.output_dim, input_dim, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * scale
        });
        Self {
            weights,
            pooling: cfg.pooling.clone(),
        }
    }

    fn project(&self, set: &DescriptorSet) -> Result<DescriptorSet, PoolError> {
        let projected = matmul(&self.weights, set.matrix())?;
        DescriptorSet::new(projected)
    }

    /// Pools the projected descriptors without normalization, keeping what the
    /// backward pass needs.
    fn pool_raw(
        &self,
        projected: &DescriptorSet,
    ) -> Result<(Vector, Option<Vec<usize>>), PoolError> {
        match self.pooling.method {
            PoolingMethod::Average => Ok((pooling::pool_avg(projected).values, None)),
            PoolingMethod::Max => {
                let (pooled, argmax) = pooling::pool_max_with_argmax(projected);
                Ok((pooled.values, Some(argmax)))
            }
            PoolingMethod::Mixed => Ok((
                pooling::pool_mixed(projected, self.pooling.mix_weight)?.values,
                None,
            )),
            PoolingMethod::Lse => {
                Ok((pooling::pool_lse(projected, self.pooling.lse_r)?.values, None))
            }
            PoolingMethod::Gmp => {
                let mut cfg = self.pooling.clone();
                cfg.normalize_output = false;
                Ok((pooling::pool_gmp(projected, &cfg)?.0.values, None))
            }
        }
    }

    /// Full forward pass: project, pool, normalize.
    pub fn embed(&self, set: &DescriptorSet) -> Result<GlobalDescriptor, PoolError> {
        let projected = self.project(set)?;
        let (raw, _) = self.pool_raw(&projected)?;
        Ok(GlobalDescriptor {
            values: pooling::l2_normalize(&raw)?,
            normalized: true,
        })
    }
}

/// Training schedule. The learning-rate multiplier applies to the pooling
/// regularizer only; decay multiplies the base rate by `decay_factor` per
/// epoch once `decay_start_epoch` has passed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda_lr_multiplier: f64,
    pub weight_decay: f64,
    pub triplet: TripletConfig,
    pub seed: u64,
    pub val_fraction: f64,
    pub decay_start_epoch: usize,
    pub decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 2e-4,
            lambda_lr_multiplier: 1e3,
            weight_decay: 1e-5,
            triplet: TripletConfig::default(),
            seed: 0,
            val_fraction: 0.25,
            decay_start_epoch: 15,
            decay_factor: 0.96,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be non-negative and finite".into(),
            ));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(TrainError::InvalidConfig(
                "val_fraction must lie strictly between 0 and 1".into(),
            ));
        }
        if !(0.0 < self.decay_factor && self.decay_factor <= 1.0) {
            return Err(TrainError::InvalidConfig(
                "decay_factor must lie in (0, 1]".into(),
            ));
        }
        self.triplet.validate()?;
        Ok(())
    }
}

/// One line of the training log. `loss` is absent on the initial entry, which
/// records the validation score of the untouched model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub loss: Option<f64>,
    pub val_map: f64,
    pub lambda: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation mAP.
    pub model: EmbeddingModel,
    pub log: Vec<TrainLogEntry>,
    pub best_epoch: usize,
    pub best_val_map: f64,
}

fn split_by_class(
    dataset: &[DescriptorSet],
    val_fraction: f64,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, set) in dataset.iter().enumerate() {
        let label = set.label.as_deref().ok_or_else(|| {
            TrainError::InvalidConfig(format!("item {i} has no label"))
        })?;
        by_class.entry(label).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (label, members) in &by_class {
        if members.len() < 4 {
            return Err(TrainError::InvalidConfig(format!(
                "class '{label}' has {} items; at least 4 are needed (2 train + 2 validation)",
                members.len()
            )));
        }
        let want = (members.len() as f64 * val_fraction).round() as usize;
        let take = want.clamp(2, members.len() - 2);
        let split = members.len() - take;
        train.extend_from_slice(&members[..split]);
        val.extend_from_slice(&members[split..]);
    }
    Ok((train, val))
}

fn validation_map(
    model: &EmbeddingModel,
    dataset: &[DescriptorSet],
    val: &[usize],
    triplet: &TripletConfig,
) -> Result<f64, TrainError> {
    let mut embeddings = Vec::with_capacity(val.len());
    let mut labels = Vec::with_capacity(val.len());
    let mut ids = Vec::with_capacity(val.len());
    for &i in val {
        embeddings.push(model.embed(&dataset[i])?);
        labels.push(dataset[i].label.clone().expect("checked in split"));
        ids.push(
            dataset[i]
                .source_id
                .clone()
                .unwrap_or_else(|| format!("item-{i:04}")),
        );
    }
    let gallery = EmbeddingGallery::new(embeddings, labels, ids)?;
    let report = crate::retrieval::evaluate_with_metric(&gallery, triplet.distance, true)?;
    Ok(report.map)
}

/// Trains the model with batch-hard triplet loss and AMSGrad.
///
/// Items are split per class into train and validation (the last items of
/// each class validate). Every epoch samples class-balanced batches, runs the
/// full backward chain — loss → normalization → pooling (with the regularizer
/// gradient when the method is GMP, the blend gradient when it is mixed) →
/// linear map — and logs mean loss, validation mAP, and the current
/// regularizer. The returned model is the best-validation snapshot.
pub fn train(
    model: EmbeddingModel,
    dataset: &[DescriptorSet],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model.pooling.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::InvalidConfig("dataset is empty".into()));
    }
    let (train_idx, val_idx) = split_by_class(dataset, cfg.val_fraction)?;
    let train_labels: Vec<String> = train_idx
        .iter()
        .map(|&i| dataset[i].label.clone().expect("checked in split"))
        .collect();

    let mut model = model;
    let mut optimizer = Optimizer::new(OptimizerConfig::new(cfg.learning_rate, cfg.weight_decay));
    let trains_lambda = model.pooling.method == PoolingMethod::Gmp;
    let trains_mix = model.pooling.method == PoolingMethod::Mixed;

    let initial_map = validation_map(&model, dataset, &val_idx, &cfg.triplet)?;
    let mut log = vec![TrainLogEntry {
        epoch: 0,
        loss: None,
        val_map: initial_map,
        lambda: model.pooling.lambda,
    }];
    let mut best = (0usize, initial_map, model.clone());

    for epoch in 1..=cfg.epochs {
        if epoch > cfg.decay_start_epoch {
            let decayed = cfg.learning_rate
                * cfg.decay_factor.powi((epoch - cfg.decay_start_epoch) as i32);
            optimizer.set_learning_rate(decayed);
        }
        let epoch_seed = cfg
            .seed
            .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let batches = pk_sampler(
            &train_labels,
            cfg.triplet.classes_per_batch,
            cfg.triplet.samples_per_class,
            epoch_seed,
        )?;

        let mut epoch_loss = 0.0;
        for batch in &batches {
            let items: Vec<usize> = batch.iter().map(|&b| train_idx[b]).collect();
            let batch_labels: Vec<String> = items
                .iter()
                .map(|&i| dataset[i].label.clone().expect("checked in split"))
                .collect();

            // forward
            let mut projected = Vec::with_capacity(items.len());
            let mut raw_pooled = Vec::with_capacity(items.len());
            let mut argmaxes = Vec::with_capacity(items.len());
            let mut emb = Matrix::zeros(model.weights.rows(), items.len());
            for (col, &i) in items.iter().enumerate() {
                let z = model.project(&dataset[i])?;
                let (raw, argmax) = model.pool_raw(&z)?;
                let unit = pooling::l2_normalize(&raw)?;
                for r in 0..unit.dim() {
                    emb.set(r, col, unit[r]);
                }
                projected.push(z);
                raw_pooled.push(raw);
                argmaxes.push(argmax);
            }

            let (loss, d_emb) = batch_hard_triplet_loss(&emb, &batch_labels, &cfg.triplet)?;
            epoch_loss += loss;

            // backward
            let mut d_weights = Matrix::zeros(model.weights.rows(), model.weights.cols());
            let mut d_lambda = 0.0;
            let mut d_mix = 0.0;
            for (col, &i) in items.iter().enumerate() {
                let g = d_emb.col(col);
                let upstream = backward_l2norm(&raw_pooled[col], &g)?;
                let z = &projected[col];
                let d_z = match model.pooling.method {
                    PoolingMethod::Average => backward_avg(z, &upstream)?.d_descriptors,
                    PoolingMethod::Max => {
                        let argmax = argmaxes[col].as_ref().expect("retained by forward");
                        backward_max(z, argmax, &upstream)?.d_descriptors
                    }
                    PoolingMethod::Mixed => {
                        let bundle = backward_mixed(z, model.pooling.mix_weight, &upstream)?;
                        d_mix += bundle.d_mix_weight.expect("mixed backward sets it");
                        bundle.d_descriptors
                    }
                    PoolingMethod::Lse => {
                        // the temperature stays fixed during training
                        backward_lse(z, model.pooling.lse_r, &upstream)?.d_descriptors
                    }
                    PoolingMethod::Gmp => {
                        let bundle = backward_gmp(z, model.pooling.lambda, &upstream)?;
                        d_lambda += bundle.d_lambda.expect("gmp backward sets it");
                        bundle.d_descriptors
                    }
                };
                let d_w = matmul(&d_z, &dataset[i].matrix().transpose())?;
                for (dst, src) in d_weights.data_mut().iter_mut().zip(d_w.data()) {
                    *dst += src;
                }
            }

            // optimizer step over whatever is trainable
            let d_w_flat = d_weights.data().to_vec();
            let mut lambda_slot = [model.pooling.lambda];
            let lambda_grad = [d_lambda];
            let mut mix_slot = [model.pooling.mix_weight];
            let mix_grad = [d_mix];
            {
                let mut groups: Vec<ParamGroup<'_>> =
                    vec![ParamGroup::new(model.weights.data_mut(), &d_w_flat)];
                if trains_lambda {
                    groups.push(
                        ParamGroup::new(&mut lambda_slot, &lambda_grad)
                            .with_lr_multiplier(cfg.lambda_lr_multiplier)
                            .with_min_value(LAMBDA_MIN),
                    );
                }
                if trains_mix {
                    groups.push(
                        ParamGroup::new(&mut mix_slot, &mix_grad)
                            .with_min_value(0.0)
                            .with_max_value(1.0),
                    );
                }
                optimizer.step(&mut groups)?;
            }
            if trains_lambda {
                model.pooling.lambda = lambda_slot[0];
            }
            if trains_mix {
                model.pooling.mix_weight = mix_slot[0];
            }
        }

        let mean_loss = epoch_loss / batches.len() as f64;
        let val_map = validation_map(&model, dataset, &val_idx, &cfg.triplet)?;
        log.push(TrainLogEntry {
            epoch,
            loss: Some(mean_loss),
            val_map,
            lambda: model.pooling.lambda,
        });
        if val_map > best.1 {
            best = (epoch, val_map, model.clone());
        }
    }

    Ok(TrainOutcome {
        model: best.2,
        log,
        best_epoch: best.0,
        best_val_map: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{gen_bursty, BurstyGenConfig};

    fn two_class_task() -> (Vec<DescriptorSet>, ModelConfig, TrainConfig) {
        let gen = BurstyGenConfig {
            dim: 12,
            n_classes: 2,
            items_per_class: 8,
            signal_count: 4,
            burst_count: 24,
            signal_noise: 0.15,
            burst_noise: 0.1,
            seed: 5,
        };
        let dataset = gen_bursty(&gen).unwrap();
        let model_cfg = ModelConfig {
            output_dim: 12,
            pooling: PoolingConfig::gmp(1.0),
            init_seed: 11,
        };
        let train_cfg = TrainConfig {
            epochs: 10,
            triplet: TripletConfig {
                classes_per_batch: 2,
                samples_per_class: 3,
                ..TripletConfig::default()
            },
            ..TrainConfig::default()
        };
        (dataset, model_cfg, train_cfg)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (dataset, model_cfg, mut cfg) = two_class_task();
        cfg.learning_rate = 0.0;
        cfg.epochs = 3;
        let model = EmbeddingModel::init(dataset[0].dim(), &model_cfg);
        let before = model.weights.clone();
        let lambda_before = model.pooling.lambda;
        let outcome = train(model, &dataset, &cfg).unwrap();
        // the best snapshot is epoch 0, identical to the initial model
        assert_eq!(outcome.model.weights.data(), before.data());
        assert_eq!(outcome.model.pooling.lambda, lambda_before);
        for entry in &outcome.log {
            assert_eq!(entry.lambda, lambda_before);
            assert_eq!(entry.val_map, outcome.log[0].val_map);
        }
    }

    #[test]
    fn training_improves_validation_and_moves_lambda() {
        let (dataset, model_cfg, cfg) = two_class_task();
        let model = EmbeddingModel::init(dataset[0].dim(), &model_cfg);
        let outcome = train(model, &dataset, &cfg).unwrap();
        let initial = outcome.log.first().unwrap();
        let last = outcome.log.last().unwrap();
        assert!(last.val_map >= initial.val_map);
        let lambda_moved = outcome
            .log
            .iter()
            .any(|e| (e.lambda - initial.lambda).abs() > 1e-9);
        assert!(lambda_moved, "lambda never received a gradient");
        for entry in &outcome.log {
            assert!(entry.lambda >= LAMBDA_MIN);
            if let Some(loss) = entry.loss {
                assert!(loss >= 0.0 && loss.is_finite());
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (dataset, model_cfg, mut cfg) = two_class_task();
        cfg.epochs = 5;
        let run = || {
            let model = EmbeddingModel::init(dataset[0].dim(), &model_cfg);
            let outcome = train(model, &dataset, &cfg).unwrap();
            serde_json::to_string(&outcome.log).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn epochs_zero_logs_only_the_initial_entry() {
        let (dataset, model_cfg, mut cfg) = two_class_task();
        cfg.epochs = 0;
        let model = EmbeddingModel::init(dataset[0].dim(), &model_cfg);
        let outcome = train(model, &dataset, &cfg).unwrap();
        assert_eq!(outcome.log.len(), 1);
        assert_eq!(outcome.log[0].epoch, 0);
        assert!(outcome.log[0].loss.is_none());
        assert_eq!(outcome.best_epoch, 0);
    }

    #[test]
    fn mixed_pooling_trains_its_blend_weight() {
        let (dataset, _, mut cfg) = two_class_task();
        cfg.epochs = 6;
        let model_cfg = ModelConfig {
            output_dim: 12,
            pooling: PoolingConfig::mixed(0.5),
            init_seed: 3,
        };
        let model = EmbeddingModel::init(dataset[0].dim(), &model_cfg);
        let outcome = train(model, &dataset, &cfg).unwrap();
        let w = outcome.model.pooling.mix_weight;
        assert!((0.0..=1.0).contains(&w));
    }

    #[test]
    fn small_classes_are_rejected() {
        let gen = BurstyGenConfig {
            n_classes: 2,
            items_per_class: 3,
            ..BurstyGenConfig::default()
        };
        let dataset = gen_bursty(&gen).unwrap();
        let model = EmbeddingModel::init(dataset[0].dim(), &ModelConfig::default());
        let err = train(model, &dataset, &TrainConfig::default());
        assert!(matches!(err, Err(TrainError::InvalidConfig(_))));
    }
}
