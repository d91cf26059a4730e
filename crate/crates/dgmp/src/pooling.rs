//! Global pooling operators over sets of local descriptors.
//!
//! A descriptor set is a D×N matrix whose columns are local descriptors (or
//! the depth fibers of a convolutional activation volume). The pooling
//! operators reduce it to a single D-vector:
//!
//! * average and max pooling, computed per dimension,
//! * mixed pooling, a convex blend of the two,
//! * log-sum-exp pooling, a smooth interpolation between them,
//! * generalized max pooling (GMP), a ridge-regression weighting that
//!   equalizes how much each descriptor contributes to dot-product
//!   similarities, which makes the result robust to bursty, over-frequent
//!   descriptors.
//!
//! GMP solves `argmin_x ‖Aᵀx − 1‖² + λ‖x‖²` for the descriptor matrix `A`,
//! either in the primal (D unknowns) or the dual (N unknowns, via the Gram
//! matrix); the two are algebraically identical and the cheaper one is picked
//! automatically.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, gram, matvec, CholeskyFactor, LinalgError, Matrix, Vector};

/// Floor applied to the GMP regularizer whenever it is used in a solve.
pub const LAMBDA_MIN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A set of local descriptors stored as the columns of a D×N matrix.
#[derive(Debug, Clone)]
pub struct DescriptorSet {
    descriptors: Matrix,
    pub label: Option<String>,
    pub source_id: Option<String>,
}

impl DescriptorSet {
    pub fn new(descriptors: Matrix) -> Result<Self, PoolError> {
        if !descriptors.is_finite() {
            return Err(PoolError::InvalidParameter(
                "descriptor matrix contains non-finite values".into(),
            ));
        }
        Ok(Self {
            descriptors,
            label: None,
            source_id: None,
        })
    }

    /// Builds from descriptor rows (one descriptor per row, transposed into
    /// columns).
    pub fn from_descriptor_rows(rows: &[Vec<f64>]) -> Result<Self, PoolError> {
        let m = Matrix::from_rows(rows)?;
        Self::new(m.transpose())
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = Some(id.into());
        self
    }

    /// Descriptor dimensionality D.
    pub fn dim(&self) -> usize {
        self.descriptors.rows()
    }

    /// Number of descriptors N.
    pub fn len(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one descriptor
    }

    pub fn matrix(&self) -> &Matrix {
        &self.descriptors
    }

    pub fn descriptor(&self, i: usize) -> Vector {
        self.descriptors.col(i)
    }

    /// Returns a copy with the columns permuted as `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let m = Matrix::from_fn(self.dim(), self.len(), |r, c| {
            self.descriptors.get(r, perm[c])
        });
        Self {
            descriptors: m,
            label: self.label.clone(),
            source_id: self.source_id.clone(),
        }
    }
}

/// Activation volume of a convolutional stage, indexed (row, col, channel).
#[derive(Debug, Clone)]
pub struct ActivationVolume {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
}

impl ActivationVolume {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self, PoolError> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(PoolError::InvalidParameter(
                "volume dimensions must be at least 1".into(),
            ));
        }
        if data.len() != height * width * depth {
            return Err(PoolError::InvalidParameter(format!(
                "volume data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                depth
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(PoolError::InvalidParameter(
                "volume contains non-finite values".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.depth + channel]
    }
}

/// Reinterprets an activation volume as a descriptor set: each spatial
/// location contributes its depth fiber as one column.
///
/// Columns enumerate locations in row-major order (row 0 left to right, then
/// row 1, ...), so column `r*w + c` is the fiber at `(r, c)`. The order is
/// fixed so serialized outputs and gradients are reproducible; the pooling
/// operators themselves are permutation invariant.
pub fn volume_to_descriptors(vol: &ActivationVolume) -> DescriptorSet {
    let n = vol.height * vol.width;
    let m = Matrix::from_fn(vol.depth, n, |ch, loc| {
        let row = loc / vol.width;
        let col = loc % vol.width;
        vol.get(row, col, ch)
    });
    DescriptorSet {
        descriptors: m,
        label: None,
        source_id: None,
    }
}

/// Pooling operator selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolingMethod {
    #[serde(rename = "avg")]
    Average,
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "mixed")]
    Mixed,
    #[serde(rename = "lse")]
    Lse,
    #[serde(rename = "gmp")]
    Gmp,
}

impl PoolingMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PoolingMethod::Average => "avg",
            PoolingMethod::Max => "max",
            PoolingMethod::Mixed => "mixed",
            PoolingMethod::Lse => "lse",
            PoolingMethod::Gmp => "gmp",
        }
    }
}

impl std::str::FromStr for PoolingMethod {
    type Err = PoolError;
    fn from_str(s: &str) -> Result<Self, PoolError> {
        match s {
            "avg" | "average" => Ok(PoolingMethod::Average),
            "max" => Ok(PoolingMethod::Max),
            "mixed" => Ok(PoolingMethod::Mixed),
            "lse" => Ok(PoolingMethod::Lse),
            "gmp" => Ok(PoolingMethod::Gmp),
            other => Err(PoolError::InvalidParameter(format!(
                "unknown pooling method '{other}'"
            ))),
        }
    }
}

/// Which closed form the GMP solver uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GmpStrategy {
    /// Primal when N > D, dual otherwise.
    Auto,
    Primal,
    Dual,
}

impl std::str::FromStr for GmpStrategy {
    type Err = PoolError;
    fn from_str(s: &str) -> Result<Self, PoolError> {
        match s {
            "auto" => Ok(GmpStrategy::Auto),
            "primal" => Ok(GmpStrategy::Primal),
            "dual" => Ok(GmpStrategy::Dual),
            other => Err(PoolError::InvalidParameter(format!(
                "unknown gmp strategy '{other}'"
            ))),
        }
    }
}

/// Which path a GMP solve actually took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GmpPath {
    Primal,
    Dual,
}

impl GmpPath {
    pub fn name(&self) -> &'static str {
        match self {
            GmpPath::Primal => "primal",
            GmpPath::Dual => "dual",
        }
    }
}

/// Pooling method plus its parameters.
///
/// `lambda` is stored raw and clamped to [`LAMBDA_MIN`] at use, so an
/// optimizer may drive it freely. Common initializations for GMP are 1, 1e3
/// and 1e5.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolingConfig {
    pub method: PoolingMethod,
    /// GMP ridge regularizer.
    pub lambda: f64,
    /// Blend factor of mixed pooling: 1 is pure max, 0 is pure average.
    pub mix_weight: f64,
    /// Log-sum-exp temperature; average as r → 0, max as r → ∞.
    pub lse_r: f64,
    pub normalize_output: bool,
    pub gmp_strategy: GmpStrategy,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            method: PoolingMethod::Average,
            lambda: 1.0,
            mix_weight: 0.5,
            lse_r: 10.0,
            normalize_output: true,
            gmp_strategy: GmpStrategy::Auto,
        }
    }
}

impl PoolingConfig {
    pub fn average() -> Self {
        Self {
            method: PoolingMethod::Average,
            ..Self::default()
        }
    }

    pub fn max() -> Self {
        Self {
            method: PoolingMethod::Max,
            ..Self::default()
        }
    }

    pub fn mixed(mix_weight: f64) -> Self {
        Self {
            method: PoolingMethod::Mixed,
            mix_weight,
            ..Self::default()
        }
    }

    pub fn lse(r: f64) -> Self {
        Self {
            method: PoolingMethod::Lse,
            lse_r: r,
            ..Self::default()
        }
    }

    pub fn gmp(lambda: f64) -> Self {
        Self {
            method: PoolingMethod::Gmp,
            lambda,
            ..Self::default()
        }
    }

    /// Validates externally supplied parameters.
    pub fn validate(&self) -> Result<(), PoolError> {
        if !self.lambda.is_finite() || self.lambda <= 0.0 {
            return Err(PoolError::InvalidParameter(format!(
                "lambda must be a positive finite value, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return Err(PoolError::InvalidParameter(format!(
                "mix_weight must lie in [0, 1], got {}",
                self.mix_weight
            )));
        }
        if !self.lse_r.is_finite() || self.lse_r <= 0.0 {
            return Err(PoolError::InvalidParameter(format!(
                "lse_r must be a positive finite value, got {}",
                self.lse_r
            )));
        }
        Ok(())
    }

    /// The regularizer actually used in solves.
    pub fn effective_lambda(&self) -> f64 {
        self.lambda.max(LAMBDA_MIN)
    }

    /// Short human-readable tag, e.g. `gmp(lambda=1)`.
    pub fn describe(&self) -> String {
        match self.method {
            PoolingMethod::Average => "avg".into(),
            PoolingMethod::Max => "max".into(),
            PoolingMethod::Mixed => format!("mixed(w={})", self.mix_weight),
            PoolingMethod::Lse => format!("lse(r={})", self.lse_r),
            PoolingMethod::Gmp => format!("gmp(lambda={})", self.lambda),
        }
    }
}

/// A pooled global descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub values: Vector,
    pub normalized: bool,
}

impl GlobalDescriptor {
    fn raw(values: Vector) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.dim()
    }

    /// Returns the ℓ2-normalized version of this descriptor.
    pub fn into_normalized(self) -> Result<Self, PoolError> {
        if self.normalized {
            return Ok(self);
        }
        Ok(Self {
            values: l2_normalize(&self.values)?,
            normalized: true,
        })
    }
}

/// Diagnostics of a GMP solve.
#[derive(Debug, Clone)]
pub struct GmpSolution {
    /// Per-descriptor weights from the dual form; `None` when the primal path
    /// was taken and reconstruction was not requested.
    pub weights: Option<Vector>,
    /// The (clamped) regularizer the solve used.
    pub lambda_used: f64,
    pub strategy: GmpPath,
    /// First-order optimality residual `‖A(Aᵀx − 1) + λx‖` of the
    /// unnormalized solution.
    pub optimality_residual: f64,
}

/// Scales a vector to unit ℓ2 norm. Divides rather than multiplying by the
/// reciprocal, which keeps exact cases like (3,4) → (0.6, 0.8) exact.
pub fn l2_normalize(v: &Vector) -> Result<Vector, PoolError> {
    let norm = v.norm();
    if norm <= 1e-300 {
        return Err(PoolError::ZeroVector);
    }
    Ok(Vector::from_iter(v.iter().map(|x| x / norm)))
}

/// Per-dimension arithmetic mean of the descriptors (unnormalized).
pub fn pool_avg(set: &DescriptorSet) -> GlobalDescriptor {
    let n = set.len() as f64;
    let m = set.matrix();
    let values = Vector::from_iter((0..set.dim()).map(|d| {
        let mut acc = 0.0;
        for i in 0..set.len() {
            acc += m.get(d, i);
        }
        acc / n
    }));
    GlobalDescriptor::raw(values)
}

/// Per-dimension maximum (unnormalized).
pub fn pool_max(set: &DescriptorSet) -> GlobalDescriptor {
    pool_max_with_argmax(set).0
}

/// Per-dimension maximum plus, for each dimension, the column index that
/// attained it. Ties go to the first column in storage order.
pub fn pool_max_with_argmax(set: &DescriptorSet) -> (GlobalDescriptor, Vec<usize>) {
    let m = set.matrix();
    let mut values = Vec::with_capacity(set.dim());
    let mut argmax = Vec::with_capacity(set.dim());
    for d in 0..set.dim() {
        let mut best = m.get(d, 0);
        let mut best_i = 0;
        for i in 1..set.len() {
            let v = m.get(d, i);
            if v > best {
                best = v;
                best_i = i;
            }
        }
        values.push(best);
        argmax.push(best_i);
    }
    (GlobalDescriptor::raw(Vector::from_iter(values)), argmax)
}

/// Convex blend `w·max + (1−w)·avg` of the unnormalized max and average
/// results.
pub fn pool_mixed(set: &DescriptorSet, mix_weight: f64) -> Result<GlobalDescriptor, PoolError> {
    if !(0.0..=1.0).contains(&mix_weight) {
        return Err(PoolError::InvalidParameter(format!(
            "mix_weight must lie in [0, 1], got {mix_weight}"
        )));
    }
    let max = pool_max(set);
    let avg = pool_avg(set);
    let values = Vector::from_iter(
        max.values
            .iter()
            .zip(avg.values.iter())
            .map(|(mx, av)| mix_weight * mx + (1.0 - mix_weight) * av),
    );
    Ok(GlobalDescriptor::raw(values))
}

/// Log-sum-exp pooling: per dimension, `(1/r)·log((1/N)·Σ exp(r·x))`.
///
/// Computed with the max-shift trick, otherwise `exp(r·x)` overflows for
/// `r·x ≳ 700`.
pub fn pool_lse(set: &DescriptorSet, r: f64) -> Result<GlobalDescriptor, PoolError> {
    if !r.is_finite() || r <= 0.0 {
        return Err(PoolError::InvalidParameter(format!(
            "lse r must be a positive finite value, got {r}"
        )));
    }
    let m = set.matrix();
    let n = set.len() as f64;
    let values = Vector::from_iter((0..set.dim()).map(|d| {
        let mut shift = m.get(d, 0);
        for i in 1..set.len() {
            shift = shift.max(m.get(d, i));
        }
        let mut acc = 0.0;
        for i in 0..set.len() {
            acc += (r * (m.get(d, i) - shift)).exp();
        }
        shift + (acc / n).ln() / r
    }));
    Ok(GlobalDescriptor::raw(values))
}

fn residual_norm(set: &DescriptorSet, pooled: &Vector, lambda: f64) -> f64 {
    // ‖A(Aᵀx − 1) + λx‖
    let m = set.matrix();
    let mut sims = matvec(&m.transpose(), pooled).expect("shape fixed by construction");
    for i in 0..sims.dim() {
        sims[i] -= 1.0;
    }
    let back = matvec(m, &sims).expect("shape fixed by construction");
    back.add(&pooled.scale(lambda)).norm()
}

/// GMP via the dual closed form: weights solve `(K + λI) w = 1` over the Gram
/// matrix `K`, and the pooled vector is the weighted descriptor sum.
///
/// The result is unnormalized; the recorded residual also refers to the
/// unnormalized vector.
pub fn pool_gmp_dual(
    set: &DescriptorSet,
    lambda: f64,
) -> Result<(GlobalDescriptor, GmpSolution), PoolError> {
    let lambda = lambda.max(LAMBDA_MIN);
    let mut k = gram(set.matrix());
    k.add_diagonal(lambda);
    let factor = CholeskyFactor::new(&k)?;
    let weights = factor.solve(&Vector::ones(set.len()))?;
    let pooled = matvec(set.matrix(), &weights)?;
    let residual = residual_norm(set, &pooled, lambda);
    Ok((
        GlobalDescriptor::raw(pooled),
        GmpSolution {
            weights: Some(weights),
            lambda_used: lambda,
            strategy: GmpPath::Dual,
            optimality_residual: residual,
        },
    ))
}

/// GMP via the primal closed form: solves the D×D normal equations
/// `(A Aᵀ + λI) x = A·1`.
pub fn pool_gmp_primal(set: &DescriptorSet, lambda: f64) -> Result<GlobalDescriptor, PoolError> {
    let lambda = lambda.max(LAMBDA_MIN);
    let m = set.matrix();
    let mut a = linalg::matmul(m, &m.transpose())?;
    a.add_diagonal(lambda);
    let rhs = matvec(m, &Vector::ones(set.len()))?;
    let pooled = linalg::spd_solve(&a, &rhs)?;
    Ok(GlobalDescriptor::raw(pooled))
}

/// GMP with strategy dispatch and normalization per config.
///
/// With `GmpStrategy::Auto` the primal path is taken when N > D. The primal
/// does not produce per-descriptor weights; they are reconstructed only when
/// `reconstruct_weights` is set (see [`pool_gmp_with_diagnostics`]).
pub fn pool_gmp(
    set: &DescriptorSet,
    cfg: &PoolingConfig,
) -> Result<(GlobalDescriptor, GmpSolution), PoolError> {
    pool_gmp_with_diagnostics(set, cfg, false)
}

/// Like [`pool_gmp`] but optionally reconstructs the dual weights on the
/// primal path via `w = (1 − Aᵀx)/λ`.
pub fn pool_gmp_with_diagnostics(
    set: &DescriptorSet,
    cfg: &PoolingConfig,
    reconstruct_weights: bool,
) -> Result<(GlobalDescriptor, GmpSolution), PoolError> {
    let lambda = cfg.effective_lambda();
    let use_primal = match cfg.gmp_strategy {
        GmpStrategy::Primal => true,
        GmpStrategy::Dual => false,
        GmpStrategy::Auto => set.len() > set.dim(),
    };
    let (descriptor, solution) = if use_primal {
        let pooled = pool_gmp_primal(set, lambda)?;
        let residual = residual_norm(set, &pooled.values, lambda);
        let weights = reconstruct_weights.then(|| {
            let sims = matvec(&set.matrix().transpose(), &pooled.values)
                .expect("shape fixed by construction");
            Vector::from_iter(sims.iter().map(|s| (1.0 - s) / lambda))
        });
        (
            pooled,
            GmpSolution {
                weights,
                lambda_used: lambda,
                strategy: GmpPath::Primal,
                optimality_residual: residual,
            },
        )
    } else {
        pool_gmp_dual(set, lambda)?
    };
    let descriptor = if cfg.normalize_output {
        descriptor.into_normalized()?
    } else {
        descriptor
    };
    Ok((descriptor, solution))
}

/// Pools with the configured method and applies ℓ2 normalization when the
/// config asks for it.
pub fn pool(set: &DescriptorSet, cfg: &PoolingConfig) -> Result<GlobalDescriptor, PoolError> {
    let raw = match cfg.method {
        PoolingMethod::Average => pool_avg(set),
        PoolingMethod::Max => pool_max(set),
        PoolingMethod::Mixed => pool_mixed(set, cfg.mix_weight)?,
        PoolingMethod::Lse => pool_lse(set, cfg.lse_r)?,
        PoolingMethod::Gmp => return Ok(pool_gmp(set, cfg)?.0),
    };
    if cfg.normalize_output {
        raw.into_normalized()
    } else {
        Ok(raw)
    }
}
