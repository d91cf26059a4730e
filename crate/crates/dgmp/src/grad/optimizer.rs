//! AMSGrad optimizer (Adam with a monotone second-moment maximum).

use super::GradError;

/// Hyperparameters. `beta1`/`beta2`/`epsilon` default to the conventional
/// 0.9 / 0.999 / 1e-8.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }
}

/// One parameter block participating in a step.
///
/// `lr_multiplier` scales the base learning rate for this block only (the GMP
/// regularizer is typically given a large one). `min_value` clamps every entry
/// after the update, which keeps the regularizer above its numerical floor.
pub struct ParamGroup<'a> {
    pub values: &'a mut [f64],
    pub grads: &'a [f64],
    pub lr_multiplier: f64,
    pub min_value: Option<f64>,
    pub max_value: Option<f64>,
}

impl<'a> ParamGroup<'a> {
    pub fn new(values: &'a mut [f64], grads: &'a [f64]) -> Self {
        Self {
            values,
            grads,
            lr_multiplier: 1.0,
            min_value: None,
            max_value: None,
        }
    }

    pub fn with_lr_multiplier(mut self, m: f64) -> Self {
        self.lr_multiplier = m;
        self
    }

    pub fn with_min_value(mut self, min: f64) -> Self {
        self.min_value = Some(min);
        self
    }

    pub fn with_max_value(mut self, max: f64) -> Self {
        self.max_value = Some(max);
        self
    }
}

#[derive(Debug, Clone)]
struct Slot {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    max_second_moment: Vec<f64>,
}

/// AMSGrad with bias correction and decoupled per-block learning-rate
/// multipliers. Weight decay is added to the gradient before the moment
/// updates.
///
/// State is laid out lazily on the first step; later steps must present the
/// same number of blocks with the same shapes. The update is plain sequential
/// `f64` arithmetic, so identical inputs produce bit-identical trajectories.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    step_count: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            step_count: 0,
            slots: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.cfg.learning_rate
    }

    /// Replaces the base learning rate (used by decay schedules).
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// The monotone second-moment accumulator of one block, for inspection.
    pub fn max_second_moment(&self, block: usize) -> Option<&[f64]> {
        self.slots.get(block).map(|s| s.max_second_moment.as_slice())
    }

    /// Applies one AMSGrad update to every block.
    pub fn step(&mut self, groups: &mut [ParamGroup<'_>]) -> Result<(), GradError> {
        for group in groups.iter() {
            if group.values.len() != group.grads.len() {
                return Err(GradError::ShapeMismatch {
                    context: "optimizer group values vs grads",
                    left: group.values.len(),
                    right: group.grads.len(),
                });
            }
        }
        if self.slots.is_empty() {
            self.slots = groups
                .iter()
                .map(|g| Slot {
                    first_moment: vec![0.0; g.values.len()],
                    second_moment: vec![0.0; g.values.len()],
                    max_second_moment: vec![0.0; g.values.len()],
                })
                .collect();
        }
        if self.slots.len() != groups.len() {
            return Err(GradError::ShapeMismatch {
                context: "optimizer group count",
                left: groups.len(),
                right: self.slots.len(),
            });
        }
        for (slot, group) in self.slots.iter().zip(groups.iter()) {
            if slot.first_moment.len() != group.values.len() {
                return Err(GradError::ShapeMismatch {
                    context: "optimizer group shape",
                    left: group.values.len(),
                    right: slot.first_moment.len(),
                });
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);

        for (slot, group) in self.slots.iter_mut().zip(groups.iter_mut()) {
            let lr = self.cfg.learning_rate * group.lr_multiplier;
            for i in 0..group.values.len() {
                let g = group.grads[i] + self.cfg.weight_decay * group.values[i];
                slot.first_moment[i] =
                    self.cfg.beta1 * slot.first_moment[i] + (1.0 - self.cfg.beta1) * g;
                slot.second_moment[i] =
                    self.cfg.beta2 * slot.second_moment[i] + (1.0 - self.cfg.beta2) * g * g;
                slot.max_second_moment[i] =
                    slot.max_second_moment[i].max(slot.second_moment[i]);

                let m_hat = slot.first_moment[i] / bc1;
                let v_hat = slot.max_second_moment[i] / bc2;
                group.values[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
                if let Some(min) = group.min_value {
                    group.values[i] = group.values[i].max(min);
                }
                if let Some(max) = group.max_value {
                    group.values[i] = group.values[i].min(max);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut opt = Optimizer::new(OptimizerConfig::new(0.1, 0.0));
        let mut params = vec![1.0, -2.0, 0.5];
        let grads = vec![0.0; 3];
        for _ in 0..5 {
            opt.step(&mut [ParamGroup::new(&mut params, &grads)]).unwrap();
        }
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // Bias-corrected first step: |Δ| = η·|g|/(|g| + ε) ≈ η
        let eta = 0.05;
        let mut opt = Optimizer::new(OptimizerConfig::new(eta, 0.0));
        let mut params = vec![0.0];
        let grads = vec![0.3];
        opt.step(&mut [ParamGroup::new(&mut params, &grads)]).unwrap();
        assert!((params[0].abs() - eta).abs() <= 1e-7, "step {}", params[0]);
        assert!(params[0] < 0.0, "step moves against the gradient");
    }

    #[test]
    fn lr_multiplier_scales_first_step() {
        // base 2e-4 with a 1e3 multiplier gives an effective first step ≈ 0.2
        let mut opt = Optimizer::new(OptimizerConfig::new(2e-4, 0.0));
        let mut param = vec![1000.0];
        let grads = vec![-4.2];
        opt.step(&mut [ParamGroup::new(&mut param, &grads).with_lr_multiplier(1e3)])
            .unwrap();
        let delta = param[0] - 1000.0;
        assert!((delta - 0.2).abs() <= 1e-6, "delta {delta}");
    }

    #[test]
    fn min_value_clamps_after_update() {
        let mut opt = Optimizer::new(OptimizerConfig::new(10.0, 0.0));
        let mut param = vec![1e-5];
        let grads = vec![5.0];
        opt.step(&mut [ParamGroup::new(&mut param, &grads).with_min_value(1e-6)])
            .unwrap();
        assert_eq!(param[0], 1e-6);
    }

    #[test]
    fn max_second_moment_is_monotone() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut opt = Optimizer::new(OptimizerConfig::new(0.01, 1e-5));
        let mut params = vec![0.5; 4];
        let mut prev = vec![0.0; 4];
        for _ in 0..50 {
            let grads: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            opt.step(&mut [ParamGroup::new(&mut params, &grads)]).unwrap();
            let cur = opt.max_second_moment(0).unwrap();
            for (c, p) in cur.iter().zip(&prev) {
                assert!(c >= p);
            }
            prev = cur.to_vec();
        }
    }

    #[test]
    fn identical_seeds_give_bit_identical_trajectories() {
        use rand::Rng;
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            let mut opt = Optimizer::new(OptimizerConfig::new(0.01, 1e-5));
            let mut params = vec![0.1, -0.2, 0.3];
            for _ in 0..20 {
                let grads: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                opt.step(&mut [ParamGroup::new(&mut params, &grads)]).unwrap();
            }
            params
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = Optimizer::new(OptimizerConfig::new(0.1, 0.0));
        let mut params = vec![1.0, 2.0];
        let grads = vec![0.1];
        assert!(matches!(
            opt.step(&mut [ParamGroup::new(&mut params, &grads)]),
            Err(GradError::ShapeMismatch { .. })
        ));
    }
}
