//! Finite-difference verification of the analytic backward passes.
//!
//! Central differences are the independent oracle: every adjoint in this
//! crate is compared against them on seeded random instances. Instances that
//! sit on a non-differentiable point (argmax ties, hinge kinks, selection
//! ties in the triplet loss) are detected and excluded rather than asserted.

use serde::Serialize;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    backward_avg, backward_gmp, backward_l2norm, backward_lse, backward_max, backward_mixed,
    GradError,
};
use crate::linalg::{Matrix, Vector};
use crate::pooling::{self, DescriptorSet};
use crate::retrieval::{batch_hard_triplet_loss, TripletConfig};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Ops that [`grad_check`] knows how to verify.
pub const CHECKED_OPS: &[&str] = &["avg", "max", "mixed", "lse", "l2norm", "gmp", "triplet"];

/// Central finite differences of a scalar function, one coordinate at a time:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / (2h)`.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let plus = f(&probe);
        probe[i] = point[i] - h;
        let minus = f(&probe);
        probe[i] = point[i];
        grads.push((plus - minus) / (2.0 * h));
    }
    grads
}

/// Worst relative error of one parameter block across all checked instances.
#[derive(Debug, Clone, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Outcome of checking one op's backward pass against finite differences.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub op: String,
    pub trials_run: usize,
    /// Instances excluded because they sat on a non-differentiable point.
    pub skipped_nondifferentiable: usize,
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn set_from(m: Matrix) -> DescriptorSet {
    DescriptorSet::new(m).expect("random finite matrix")
}

/// Minimum gap between a row's best and second-best entry for a max-type
/// instance to count as differentiable. Two decades above the probe step.
const TIE_GAP: f64 = 1e-3;

fn has_argmax_tie(m: &Matrix) -> bool {
    for r in 0..m.rows() {
        let mut best = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for c in 0..m.cols() {
            let v = m.get(r, c);
            if v > best {
                second = best;
                best = v;
            } else if v > second {
                second = v;
            }
        }
        if m.cols() > 1 && best - second < TIE_GAP {
            return true;
        }
    }
    false
}

struct Instance {
    /// (block name, analytic gradient, numeric gradient)
    blocks: Vec<(&'static str, Vec<f64>, Vec<f64>)>,
}

fn check_pool_op(op: &str, rng: &mut ChaCha8Rng) -> Result<Option<Instance>, GradError> {
    let d = rng.random_range(3..=5);
    let n = rng.random_range(2..=7);
    let m = random_matrix(rng, d, n);
    let upstream = Vector::from_iter((0..d).map(|_| rng.random_range(-1.0..1.0)));

    // Scalar loss: upstreamᵀ·pooled, so the analytic input gradient is exactly
    // the bundle produced with this upstream.
    match op {
        "avg" => {
            let set = set_from(m.clone());
            let analytic = backward_avg(&set, &upstream)?.d_descriptors;
            let numeric = finite_diff(
                |flat| {
                    let s = set_from(Matrix::new(d, n, flat.to_vec()).unwrap());
                    pooling::pool_avg(&s).values.dot(&upstream)
                },
                m.data(),
                DEFAULT_FD_STEP,
            );
            Ok(Some(Instance {
                blocks: vec![("descriptors", analytic.data().to_vec(), numeric)],
            }))
        }
        "max" => {
            if has_argmax_tie(&m) {
                return Ok(None);
            }
            let set = set_from(m.clone());
            let (_, argmax) = pooling::pool_max_with_argmax(&set);
            let analytic = backward_max(&set, &argmax, &upstream)?.d_descriptors;
            let numeric = finite_diff(
                |flat| {
                    let s = set_from(Matrix::new(d, n, flat.to_vec()).unwrap());
                    pooling::pool_max(&s).values.dot(&upstream)
                },
                m.data(),
                DEFAULT_FD_STEP,
            );
            Ok(Some(Instance {
                blocks: vec![("descriptors", analytic.data().to_vec(), numeric)],
            }))
        }
        "mixed" => {
            if has_argmax_tie(&m) {
                return Ok(None);
            }
            let w = rng.random_range(0.2..0.8);
            let set = set_from(m.clone());
            let bundle = backward_mixed(&set, w, &upstream)?;
            let numeric_phi = finite_diff(
                |flat| {
                    let s = set_from(Matrix::new(d, n, flat.to_vec()).unwrap());
                    pooling::pool_mixed(&s, w).unwrap().values.dot(&upstream)
                },
                m.data(),
                DEFAULT_FD_STEP,
            );
            let numeric_w = finite_diff(
                |p| {
                    pooling::pool_mixed(&set, p[0])
                        .unwrap()
                        .values
                        .dot(&upstream)
                },
                &[w],
                DEFAULT_FD_STEP,
            );
            Ok(Some(Instance {
                blocks: vec![
                    ("descriptors", bundle.d_descriptors.data().to_vec(), numeric_phi),
                    ("mix_weight", vec![bundle.d_mix_weight.unwrap()], numeric_w),
                ],
            }))
        }
        "lse" => {
            let r = *[0.5, 2.0, 10.0]
                .get(rng.random_range(0..3))
                .expect("in range");
            let set = set_from(m.clone());
            let bundle = backward_lse(&set, r, &upstream)?;
            let numeric_phi = finite_diff(
                |flat| {
                    let s = set_from(Matrix::new(d, n, flat.to_vec()).unwrap());
                    pooling::pool_lse(&s, r).unwrap().values.dot(&upstream)
                },
                m.data(),
                DEFAULT_FD_STEP,
            );
            let numeric_r = finite_diff(
                |p| {
                    pooling::pool_lse(&set, p[0])
                        .unwrap()
                        .values
                        .dot(&upstream)
                },
                &[r],
                DEFAULT_FD_STEP,
            );
            Ok(Some(Instance {
                blocks: vec![
                    ("descriptors", bundle.d_descriptors.data().to_vec(), numeric_phi),
                    ("lse_r", vec![bundle.d_lse_r.unwrap()], numeric_r),
                ],
            }))
        }
        "gmp" => {
            let lambda = *[0.1, 1.0, 10.0, 1e3]
                .get(rng.random_range(0..4))
                .expect("in range");
            let set = set_from(m.clone());
            let bundle = backward_gmp(&set, lambda, &upstream)?;
            let numeric_phi = finite_diff(
                |flat| {
                    let s = set_from(Matrix::new(d, n, flat.to_vec()).unwrap());
                    pooling::pool_gmp_dual(&s, lambda)
                        .unwrap()
                        .0
                        .values
                        .dot(&upstream)
                },
                m.data(),
                DEFAULT_FD_STEP,
            );
            // Step scaled by λ so the probe survives the relative conditioning.
            let numeric_l = finite_diff(
                |p| {
                    pooling::pool_gmp_dual(&set, p[0])
                        .unwrap()
                        .0
                        .values
                        .dot(&upstream)
                },
                &[lambda],
                DEFAULT_FD_STEP * lambda.max(1.0),
            );
            Ok(Some(Instance {
                blocks: vec![
                    ("descriptors", bundle.d_descriptors.data().to_vec(), numeric_phi),
                    ("lambda", vec![bundle.d_lambda.unwrap()], numeric_l),
                ],
            }))
        }
        _ => Err(GradError::UnknownOp(op.to_string())),
    }
}

fn check_l2norm(rng: &mut ChaCha8Rng) -> Result<Option<Instance>, GradError> {
    let dim = rng.random_range(2..=6);
    let mut x = Vector::from_iter((0..dim).map(|_| rng.random_range(-1.0..1.0)));
    while x.norm() < 0.5 {
        x = Vector::from_iter((0..dim).map(|_| rng.random_range(-1.0..1.0)));
    }
    let upstream = Vector::from_iter((0..dim).map(|_| rng.random_range(-1.0..1.0)));
    let analytic = backward_l2norm(&x, &upstream)?;
    let numeric = finite_diff(
        |p| {
            let v = Vector::new(p.to_vec()).unwrap();
            pooling::l2_normalize(&v).unwrap().dot(&upstream)
        },
        x.as_slice(),
        DEFAULT_FD_STEP,
    );
    Ok(Some(Instance {
        blocks: vec![("input", analytic.into_vec(), numeric)],
    }))
}

fn check_triplet(rng: &mut ChaCha8Rng) -> Result<Option<Instance>, GradError> {
    let dim = 4;
    let per_class = 3;
    let labels: Vec<String> = (0..2)
        .flat_map(|c| std::iter::repeat_n(format!("c{c}"), per_class))
        .collect();
    let batch = labels.len();
    let emb = random_matrix(rng, dim, batch);
    let cfg = TripletConfig {
        margin: 0.2,
        ..TripletConfig::default()
    };

    // Exclude instances where the hard-pair selection or the hinge could flip
    // under a ±h probe.
    let dist = |a: usize, b: usize| -> f64 {
        let mut acc = 0.0;
        for r in 0..dim {
            let diff = emb.get(r, a) - emb.get(r, b);
            acc += diff * diff;
        }
        acc.sqrt()
    };
    for a in 0..batch {
        let mut pos: Vec<f64> = (0..batch)
            .filter(|&i| i != a && labels[i] == labels[a])
            .map(|i| dist(a, i))
            .collect();
        let mut neg: Vec<f64> = (0..batch)
            .filter(|&i| labels[i] != labels[a])
            .map(|i| dist(a, i))
            .collect();
        pos.sort_by(|x, y| y.partial_cmp(x).unwrap());
        neg.sort_by(|x, y| x.partial_cmp(y).unwrap());
        if pos.len() > 1 && (pos[0] - pos[1]).abs() < 1e-4 {
            return Ok(None);
        }
        if neg.len() > 1 && (neg[1] - neg[0]).abs() < 1e-4 {
            return Ok(None);
        }
        if pos[0] < 1e-6 || neg[0] < 1e-6 {
            return Ok(None);
        }
        let hinge = cfg.margin + pos[0] - neg[0];
        if hinge.abs() < 1e-4 {
            return Ok(None);
        }
    }

    let (_, analytic) = batch_hard_triplet_loss(&emb, &labels, &cfg)?;
    let numeric = finite_diff(
        |flat| {
            let m = Matrix::new(dim, batch, flat.to_vec()).unwrap();
            batch_hard_triplet_loss(&m, &labels, &cfg).unwrap().0
        },
        emb.data(),
        DEFAULT_FD_STEP,
    );
    Ok(Some(Instance {
        blocks: vec![("embeddings", analytic.data().to_vec(), numeric)],
    }))
}

/// Checks one op's analytic backward pass against central finite differences
/// on `trials` seeded random instances.
///
/// The relative error per block is `‖g_a − g_n‖ / max(‖g_a‖, ‖g_n‖, 1e-12)`,
/// maximized over instances; the check passes when every block stays within
/// `tolerance`. Non-differentiable instances are skipped and counted.
pub fn grad_check(
    op: &str,
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<CheckReport, GradError> {
    if !CHECKED_OPS.contains(&op) {
        return Err(GradError::UnknownOp(op.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks: Vec<BlockCheck> = Vec::new();
    let mut run = 0;
    let mut skipped = 0;
    let mut attempts = 0;
    // Cap the total attempts so a pathological configuration cannot loop.
    while run < trials && attempts < trials * 20 {
        attempts += 1;
        let instance = match op {
            "l2norm" => check_l2norm(&mut rng)?,
            "triplet" => check_triplet(&mut rng)?,
            _ => check_pool_op(op, &mut rng)?,
        };
        let Some(instance) = instance else {
            skipped += 1;
            continue;
        };
        run += 1;
        for (name, analytic, numeric) in &instance.blocks {
            let err = rel_err(analytic, numeric);
            match blocks.iter_mut().find(|b| b.name == *name) {
                Some(b) => b.max_rel_err = b.max_rel_err.max(err),
                None => blocks.push(BlockCheck {
                    name: (*name).to_string(),
                    max_rel_err: err,
                }),
            }
        }
    }
    let passed = run > 0 && blocks.iter().all(|b| b.max_rel_err <= tolerance);
    Ok(CheckReport {
        op: op.to_string(),
        trials_run: run,
        skipped_nondifferentiable: skipped,
        blocks,
        tolerance,
        passed,
    })
}

/// Runs [`grad_check`] for every registered op.
pub fn grad_check_all(
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<Vec<CheckReport>, GradError> {
    CHECKED_OPS
        .iter()
        .map(|op| grad_check(op, trials, tolerance, seed))
        .collect()
}
