//! Analytic backward passes for the pooling operators.
//!
//! Every forward operator in [`crate::pooling`] has a matching adjoint here.
//! Upstream gradients are always taken with respect to the *unnormalized*
//! pooled vector; normalization has its own backward stage
//! ([`backward_l2norm`]) so each adjoint stays independently testable.
//!
//! The GMP adjoint differentiates through the closed-form ridge solution via
//! the adjoint of the linear solve: it reuses one Cholesky factorization and
//! needs exactly one solve beyond the ones the forward pass does, regardless
//! of how many descriptor columns there are.

mod check;
mod optimizer;

pub use check::{finite_diff, grad_check, grad_check_all, BlockCheck, CheckReport, CHECKED_OPS};
pub use optimizer::{Optimizer, OptimizerConfig, ParamGroup};

use thiserror::Error;

use crate::linalg::{matvec, outer, CholeskyFactor, LinalgError, Matrix, Vector};
use crate::pooling::{self, DescriptorSet, PoolError, LAMBDA_MIN};

#[derive(Debug, Error)]
pub enum GradError {
    #[error("unknown op '{0}'")]
    UnknownOp(String),
    #[error("shape mismatch: {context} ({left} vs {right})")]
    ShapeMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
}

/// Gradients of a scalar loss with respect to a pooling operator's inputs.
/// Parameter slots are `None` when the operator has no such parameter.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub d_descriptors: Matrix,
    pub d_lambda: Option<f64>,
    pub d_mix_weight: Option<f64>,
    pub d_lse_r: Option<f64>,
}

impl GradBundle {
    fn descriptors_only(d: Matrix) -> Self {
        Self {
            d_descriptors: d,
            d_lambda: None,
            d_mix_weight: None,
            d_lse_r: None,
        }
    }
}

fn check_upstream(set: &DescriptorSet, upstream: &Vector) -> Result<(), GradError> {
    if upstream.dim() != set.dim() {
        return Err(GradError::ShapeMismatch {
            context: "upstream gradient",
            left: upstream.dim(),
            right: set.dim(),
        });
    }
    Ok(())
}

/// Adjoint of average pooling: every column receives `upstream / N`.
pub fn backward_avg(set: &DescriptorSet, upstream: &Vector) -> Result<GradBundle, GradError> {
    check_upstream(set, upstream)?;
    let n = set.len() as f64;
    let d = Matrix::from_fn(set.dim(), set.len(), |r, _| upstream[r] / n);
    Ok(GradBundle::descriptors_only(d))
}

/// Adjoint of max pooling: each dimension's upstream entry is routed to the
/// column that attained the maximum. `argmax` comes from the forward pass
/// ([`pooling::pool_max_with_argmax`]); ties were resolved there to the first
/// column in storage order.
pub fn backward_max(
    set: &DescriptorSet,
    argmax: &[usize],
    upstream: &Vector,
) -> Result<GradBundle, GradError> {
    check_upstream(set, upstream)?;
    if argmax.len() != set.dim() {
        return Err(GradError::ShapeMismatch {
            context: "argmax indices",
            left: argmax.len(),
            right: set.dim(),
        });
    }
    let mut d = Matrix::zeros(set.dim(), set.len());
    for r in 0..set.dim() {
        d.set(r, argmax[r], upstream[r]);
    }
    Ok(GradBundle::descriptors_only(d))
}

/// Adjoint of mixed pooling. Returns both the descriptor gradient and the
/// gradient of the blend weight, `upstreamᵀ(max − avg)`.
pub fn backward_mixed(
    set: &DescriptorSet,
    mix_weight: f64,
    upstream: &Vector,
) -> Result<GradBundle, GradError> {
    check_upstream(set, upstream)?;
    let (max, argmax) = pooling::pool_max_with_argmax(set);
    let avg = pooling::pool_avg(set);
    let n = set.len() as f64;
    let mut d = Matrix::from_fn(set.dim(), set.len(), |r, _| {
        (1.0 - mix_weight) * upstream[r] / n
    });
    for r in 0..set.dim() {
        let cur = d.get(r, argmax[r]);
        d.set(r, argmax[r], cur + mix_weight * upstream[r]);
    }
    let d_mix: f64 = (0..set.dim())
        .map(|r| upstream[r] * (max.values[r] - avg.values[r]))
        .sum();
    Ok(GradBundle {
        d_descriptors: d,
        d_lambda: None,
        d_mix_weight: Some(d_mix),
        d_lse_r: None,
    })
}

/// Adjoint of log-sum-exp pooling. Per dimension the descriptor gradient is
/// the softmax of `r·x` times the upstream entry; the temperature gradient is
/// `(softmax-weighted mean − pooled value) / r` per dimension.
pub fn backward_lse(
    set: &DescriptorSet,
    r: f64,
    upstream: &Vector,
) -> Result<GradBundle, GradError> {
    check_upstream(set, upstream)?;
    if !r.is_finite() || r <= 0.0 {
        return Err(GradError::Pool(PoolError::InvalidParameter(format!(
            "lse r must be a positive finite value, got {r}"
        ))));
    }
    let m = set.matrix();
    let n = set.len() as f64;
    let mut d = Matrix::zeros(set.dim(), set.len());
    let mut d_r = 0.0;
    for row in 0..set.dim() {
        let mut shift = m.get(row, 0);
        for i in 1..set.len() {
            shift = shift.max(m.get(row, i));
        }
        let mut denom = 0.0;
        for i in 0..set.len() {
            denom += (r * (m.get(row, i) - shift)).exp();
        }
        let pooled = shift + (denom / n).ln() / r;
        let mut weighted_mean = 0.0;
        for i in 0..set.len() {
            let w = (r * (m.get(row, i) - shift)).exp() / denom;
            d.set(row, i, upstream[row] * w);
            weighted_mean += w * m.get(row, i);
        }
        d_r += upstream[row] * (weighted_mean - pooled) / r;
    }
    Ok(GradBundle {
        d_descriptors: d,
        d_lambda: None,
        d_mix_weight: None,
        d_lse_r: Some(d_r),
    })
}

/// Adjoint of ℓ2 normalization: projects the upstream gradient onto the
/// tangent space of the unit sphere, `(g − (x̂ᵀg)·x̂)/‖x‖`.
pub fn backward_l2norm(input: &Vector, upstream: &Vector) -> Result<Vector, GradError> {
    if input.dim() != upstream.dim() {
        return Err(GradError::ShapeMismatch {
            context: "l2norm upstream",
            left: upstream.dim(),
            right: input.dim(),
        });
    }
    let norm = input.norm();
    if norm <= 1e-300 {
        return Err(GradError::Pool(PoolError::ZeroVector));
    }
    let unit = input.scale(1.0 / norm);
    let along = unit.dot(upstream);
    Ok(upstream.sub(&unit.scale(along)).scale(1.0 / norm))
}

/// Adjoint of the GMP solve `x(A, λ) = A(AᵀA + λI)⁻¹1` with respect to the
/// descriptor matrix and the regularizer.
///
/// Dispatches to the primal or dual form exactly like the forward pass (primal
/// when N > D). Either way one factorization is built and two triangular
/// solves run: one to rebuild the forward state and one for the adjoint.
///
/// When `lambda` is below [`LAMBDA_MIN`] the clamped value is used and the
/// lambda gradient is zero (the clamp is flat there).
pub fn backward_gmp(
    set: &DescriptorSet,
    lambda: f64,
    upstream: &Vector,
) -> Result<GradBundle, GradError> {
    backward_gmp_forced(set, lambda, upstream, set.len() > set.dim())
}

/// [`backward_gmp`] with the primal/dual choice forced; used to test that both
/// adjoints agree.
pub fn backward_gmp_forced(
    set: &DescriptorSet,
    lambda: f64,
    upstream: &Vector,
    use_primal: bool,
) -> Result<GradBundle, GradError> {
    check_upstream(set, upstream)?;
    let clamped = lambda < LAMBDA_MIN;
    let lambda_eff = lambda.max(LAMBDA_MIN);
    let m = set.matrix();

    let (d_descriptors, d_lambda) = if use_primal {
        // B = A Aᵀ + λI;  x = B⁻¹ A 1;  y = B⁻¹ g
        let mut b = crate::linalg::matmul(m, &m.transpose())?;
        b.add_diagonal(lambda_eff);
        let factor = CholeskyFactor::new(&b)?;
        let pooled = factor.solve(&matvec(m, &Vector::ones(set.len()))?)?;
        let y = factor.solve(upstream)?;

        let sims = matvec(&m.transpose(), &pooled)?;
        let slack = Vector::from_iter(sims.iter().map(|s| 1.0 - s));
        let proj = matvec(&m.transpose(), &y)?;
        // dA = y(1 − Aᵀx)ᵀ − x(Aᵀy)ᵀ
        let mut d = outer(&y, &slack);
        let correction = outer(&pooled, &proj);
        for (dst, src) in d.data_mut().iter_mut().zip(correction.data()) {
            *dst -= src;
        }
        (d, -y.dot(&pooled))
    } else {
        // K = AᵀA;  S = K + λI;  w = S⁻¹1;  x = Aw;  u = S⁻¹ Aᵀg
        let mut s = crate::linalg::gram(m);
        s.add_diagonal(lambda_eff);
        let factor = CholeskyFactor::new(&s)?;
        let weights = factor.solve(&Vector::ones(set.len()))?;
        let pooled = matvec(m, &weights)?;
        let u = factor.solve(&matvec(&m.transpose(), upstream)?)?;

        // dA = g wᵀ − x uᵀ − (A u) wᵀ
        let au = matvec(m, &u)?;
        let mut d = outer(upstream, &weights);
        let t1 = outer(&pooled, &u);
        let t2 = outer(&au, &weights);
        for ((dst, a), b) in d.data_mut().iter_mut().zip(t1.data()).zip(t2.data()) {
            *dst -= a + b;
        }
        (d, -u.dot(&weights))
    };

    Ok(GradBundle {
        d_descriptors,
        d_lambda: Some(if clamped { 0.0 } else { d_lambda }),
        d_mix_weight: None,
        d_lse_r: None,
    })
}
