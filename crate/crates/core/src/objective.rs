//! Private agent objectives and constraints.
//!
//! An [`Objective`] carries its value/gradient oracle together with the
//! convexity metadata used by the certificates: the strong-convexity modulus
//! `m` and the gradient Lipschitz constant `l` (when known). The scalar
//! models are
//!
//! ```text
//! model 1:  f(y) = a y² + b y
//! model 2:  f(y) = a y² + b y        (usually paired with y ≤ 0.5)
//! model 3:  f(y) = e^(y+b) + e^-(y+b)
//! ```
//!
//! Model 2 has the same objective as model 1; its inequality lives in a
//! [`ConstraintSet`] so that the objective can also be run unconstrained.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;

pub type ValueFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Tolerance for the PSD test on quadratic Hessians.
pub const PSD_TOL: f64 = 1e-10;

/// The upper bound used by model 2 agents.
pub const MODEL2_BOUND: f64 = 0.5;

#[derive(Clone)]
pub enum ObjectiveKind {
    /// `½ yᵀQy + qᵀy + c`.
    Quadratic {
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        constant: f64,
    },
    Model1 {
        a: f64,
        b: f64,
    },
    Model2 {
        a: f64,
        b: f64,
    },
    Model3 {
        b: f64,
    },
    Custom {
        dim: usize,
        value: ValueFn,
        gradient: GradientFn,
    },
}

impl fmt::Debug for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveKind::Quadratic {
                hessian,
                linear,
                constant,
            } => f
                .debug_struct("Quadratic")
                .field("hessian", hessian)
                .field("linear", linear)
                .field("constant", constant)
                .finish(),
            ObjectiveKind::Model1 { a, b } => f.debug_struct("Model1").field("a", a).field("b", b).finish(),
            ObjectiveKind::Model2 { a, b } => f.debug_struct("Model2").field("a", a).field("b", b).finish(),
            ObjectiveKind::Model3 { b } => f.debug_struct("Model3").field("b", b).finish(),
            ObjectiveKind::Custom { dim, .. } => f.debug_struct("Custom").field("dim", dim).finish_non_exhaustive(),
        }
    }
}

/// A private, differentiable convex objective with its convexity indices.
#[derive(Clone, Debug)]
pub struct Objective {
    kind: ObjectiveKind,
    strong_convexity: f64,
    lipschitz: Option<f64>,
}

impl Objective {
    pub fn quadratic(hessian: DMatrix<f64>, linear: DVector<f64>, constant: f64) -> Result<Self> {
        let n = hessian.nrows();
        if hessian.ncols() != n {
            return Err(Error::InvalidParameter("quadratic Hessian must be square".into()));
        }
        if linear.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: linear.len(),
            });
        }
        let asym = (&hessian - hessian.transpose()).amax();
        if asym > 1e-12 * hessian.amax().max(1.0) {
            return Err(Error::InvalidParameter("quadratic Hessian must be symmetric".into()));
        }
        let ev = linalg::sym_eigenvalues(&hessian);
        let (lo, hi) = (ev[0], ev[n - 1]);
        if lo < -PSD_TOL {
            return Err(Error::NotPsd(lo));
        }
        Ok(Objective {
            kind: ObjectiveKind::Quadratic {
                hessian,
                linear,
                constant,
            },
            strong_convexity: lo.max(0.0),
            lipschitz: Some(hi.max(0.0)),
        })
    }

    pub fn model1(a: f64, b: f64) -> Result<Self> {
        check_curvature(a)?;
        Ok(Objective {
            kind: ObjectiveKind::Model1 { a, b },
            strong_convexity: 2.0 * a,
            lipschitz: Some(2.0 * a),
        })
    }

    pub fn model2(a: f64, b: f64) -> Result<Self> {
        check_curvature(a)?;
        Ok(Objective {
            kind: ObjectiveKind::Model2 { a, b },
            strong_convexity: 2.0 * a,
            lipschitz: Some(2.0 * a),
        })
    }

    /// `f'' = 2 cosh(y+b) ≥ 2`; the gradient is not globally Lipschitz.
    pub fn model3(b: f64) -> Self {
        Objective {
            kind: ObjectiveKind::Model3 { b },
            strong_convexity: 2.0,
            lipschitz: None,
        }
    }

    /// A user-supplied objective. Both value and gradient are required.
    pub fn custom(
        dim: usize,
        value: ValueFn,
        gradient: GradientFn,
        strong_convexity: f64,
        lipschitz: Option<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("objective dimension must be positive".into()));
        }
        check_indices(strong_convexity, lipschitz)?;
        Ok(Objective {
            kind: ObjectiveKind::Custom { dim, value, gradient },
            strong_convexity,
            lipschitz,
        })
    }

    /// Overrides the declared indices.
    pub fn with_indices(mut self, strong_convexity: f64, lipschitz: Option<f64>) -> Result<Self> {
        check_indices(strong_convexity, lipschitz)?;
        self.strong_convexity = strong_convexity;
        self.lipschitz = lipschitz;
        Ok(self)
    }

    pub fn kind(&self) -> &ObjectiveKind {
        &self.kind
    }

    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ObjectiveKind::Quadratic { linear, .. } => linear.len(),
            ObjectiveKind::Custom { dim, .. } => *dim,
            _ => 1,
        }
    }

    /// The constant Hessian of quadratic objectives (models 1 and 2 included).
    pub fn quadratic_hessian(&self) -> Option<DMatrix<f64>> {
        match &self.kind {
            ObjectiveKind::Quadratic { hessian, .. } => Some(hessian.clone()),
            ObjectiveKind::Model1 { a, .. } | ObjectiveKind::Model2 { a, .. } => {
                Some(DMatrix::from_element(1, 1, 2.0 * a))
            }
            _ => None,
        }
    }

    fn check_dim(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: y.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, y: &DVector<f64>) -> Result<f64> {
        self.check_dim(y)?;
        Ok(self.value_unchecked(y))
    }

    pub fn grad(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(y)?;
        Ok(self.gradient_unchecked(y))
    }

    pub(crate) fn value_unchecked(&self, y: &DVector<f64>) -> f64 {
        match &self.kind {
            ObjectiveKind::Quadratic {
                hessian,
                linear,
                constant,
            } => 0.5 * y.dot(&(hessian * y)) + linear.dot(y) + constant,
            ObjectiveKind::Model1 { a, b } | ObjectiveKind::Model2 { a, b } => a * y[0] * y[0] + b * y[0],
            ObjectiveKind::Model3 { b } => (y[0] + b).exp() + (-(y[0] + b)).exp(),
            ObjectiveKind::Custom { value, .. } => value(y),
        }
    }

    pub(crate) fn gradient_unchecked(&self, y: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            ObjectiveKind::Quadratic { hessian, linear, .. } => hessian * y + linear,
            ObjectiveKind::Model1 { .. } | ObjectiveKind::Model2 { .. } | ObjectiveKind::Model3 { .. } => {
                DVector::from_element(1, self.scalar_gradient(y[0]).unwrap())
            }
            ObjectiveKind::Custom { gradient, .. } => gradient(y),
        }
    }

    /// Closed-form derivative of the scalar models.
    pub(crate) fn scalar_gradient(&self, y: f64) -> Option<f64> {
        match &self.kind {
            ObjectiveKind::Model1 { a, b } | ObjectiveKind::Model2 { a, b } => Some(2.0 * a * y + b),
            ObjectiveKind::Model3 { b } => Some((y + b).exp() - (-(y + b)).exp()),
            _ => None,
        }
    }

    /// Exact unconstrained minimizer. Model 2 ignores its constraint here.
    pub fn closed_form_minimizer(&self) -> Result<DVector<f64>> {
        match &self.kind {
            ObjectiveKind::Model1 { a, b } | ObjectiveKind::Model2 { a, b } => {
                if *a <= 0.0 {
                    return Err(Error::NoClosedForm);
                }
                Ok(DVector::from_element(1, -b / (2.0 * a)))
            }
            ObjectiveKind::Model3 { b } => Ok(DVector::from_element(1, -b)),
            ObjectiveKind::Quadratic { hessian, linear, .. } => {
                if self.strong_convexity <= PSD_TOL {
                    return Err(Error::NoClosedForm);
                }
                let chol = hessian.clone().cholesky().ok_or(Error::NoClosedForm)?;
                Ok(chol.solve(&(-linear)))
            }
            ObjectiveKind::Custom { .. } => Err(Error::NoClosedForm),
        }
    }

    /// Gradient Lipschitz constant on a box: analytic for model 3, declared
    /// otherwise.
    pub fn lipschitz_on_box(&self, lo: f64, hi: f64) -> Option<f64> {
        match &self.kind {
            ObjectiveKind::Model3 { b } => {
                let r = (lo + b).abs().max((hi + b).abs());
                Some(2.0 * r.cosh())
            }
            _ => self.lipschitz,
        }
    }
}

fn check_curvature(a: f64) -> Result<()> {
    if !(a >= 0.0) || !a.is_finite() {
        return Err(Error::InvalidParameter(format!("model curvature a must be >= 0, got {a}")));
    }
    Ok(())
}

fn check_indices(m: f64, l: Option<f64>) -> Result<()> {
    if !(m >= 0.0) {
        return Err(Error::InvalidParameter(format!("strong convexity must be >= 0, got {m}")));
    }
    if let Some(l) = l {
        if !(l >= 0.0) {
            return Err(Error::InvalidParameter(format!("Lipschitz constant must be >= 0, got {l}")));
        }
        if m > 0.0 && l > 0.0 && l < m {
            return Err(Error::InvalidParameter(format!("Lipschitz constant {l} below strong convexity {m}")));
        }
    }
    Ok(())
}

/// Empirical convexity indices from sampled gradient pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndexEstimate {
    /// Minimum observed `(∇f(y)−∇f(x))ᵀ(y−x) / ‖y−x‖²`.
    pub strong_convexity: f64,
    /// Maximum observed `‖∇f(y)−∇f(x)‖ / ‖y−x‖`.
    pub lipschitz: f64,
    pub pairs: usize,
}

/// Samples `n_samples` points uniformly in `sample_box` and evaluates the
/// monotonicity and Lipschitz ratios over all point pairs.
///
/// Both values are diagnostics: `strong_convexity` is an upper bound on the
/// true modulus and `lipschitz` a lower bound on the true constant.
pub fn estimate_indices(
    f: &Objective,
    sample_box: &[(f64, f64)],
    n_samples: usize,
    seed: u64,
) -> Result<IndexEstimate> {
    if n_samples < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    check_box(sample_box, f.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<DVector<f64>> = (0..n_samples).map(|_| sample_in_box(&mut rng, sample_box)).collect();
    let grads: Vec<DVector<f64>> = points.iter().map(|p| f.gradient_unchecked(p)).collect();

    let mut m_est = f64::INFINITY;
    let mut l_est: f64 = 0.0;
    let mut pairs = 0;
    for i in 0..n_samples {
        for j in (i + 1)..n_samples {
            let dx = &points[j] - &points[i];
            let d2 = dx.norm_squared();
            if d2 == 0.0 {
                continue;
            }
            let dg = &grads[j] - &grads[i];
            m_est = m_est.min(dg.dot(&dx) / d2);
            l_est = l_est.max(dg.norm() / d2.sqrt());
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::DegenerateBox("all sampled points coincide".into()));
    }
    Ok(IndexEstimate {
        strong_convexity: m_est,
        lipschitz: l_est,
        pairs,
    })
}

pub(crate) fn check_box(sample_box: &[(f64, f64)], dim: usize) -> Result<()> {
    if sample_box.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: sample_box.len(),
        });
    }
    for (k, &(lo, hi)) in sample_box.iter().enumerate() {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::DegenerateBox(format!("coordinate {k}: [{lo}, {hi}]")));
        }
    }
    Ok(())
}

pub(crate) fn sample_in_box<R: Rng>(rng: &mut R, sample_box: &[(f64, f64)]) -> DVector<f64> {
    DVector::from_iterator(sample_box.len(), sample_box.iter().map(|&(lo, hi)| rng.random_range(lo..hi)))
}

/// Convex inequality `g(y) ≤ 0`.
#[derive(Clone)]
pub enum Inequality {
    /// `aᵀy + c ≤ 0`.
    Affine { normal: DVector<f64>, offset: f64 },
    Custom { value: ValueFn, gradient: GradientFn },
}

impl fmt::Debug for Inequality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Inequality::Affine { normal, offset } => f
                .debug_struct("Affine")
                .field("normal", normal)
                .field("offset", offset)
                .finish(),
            Inequality::Custom { .. } => f.write_str("Custom { .. }"),
        }
    }
}

impl Inequality {
    pub fn value(&self, y: &DVector<f64>) -> f64 {
        match self {
            Inequality::Affine { normal, offset } => normal.dot(y) + offset,
            Inequality::Custom { value, .. } => value(y),
        }
    }

    pub fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            Inequality::Affine { normal, .. } => normal.clone(),
            Inequality::Custom { gradient, .. } => gradient(y),
        }
    }
}

/// Affine equality `aᵀy + c = 0`. Equalities are affine by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Equality {
    pub normal: DVector<f64>,
    pub offset: f64,
}

impl Equality {
    pub fn value(&self, y: &DVector<f64>) -> f64 {
        self.normal.dot(y) + self.offset
    }
}

#[derive(Clone, Debug, Default)]
pub struct ConstraintSet {
    pub inequalities: Vec<Inequality>,
    pub equalities: Vec<Equality>,
}

impl ConstraintSet {
    pub fn none() -> Self {
        Self::default()
    }

    /// The scalar constraint `y ≤ 0.5` carried by model 2 agents.
    pub fn model2() -> Self {
        Self::upper_bound(MODEL2_BOUND)
    }

    /// Scalar `y ≤ bound`.
    pub fn upper_bound(bound: f64) -> Self {
        ConstraintSet {
            inequalities: vec![Inequality::Affine {
                normal: DVector::from_element(1, 1.0),
                offset: -bound,
            }],
            equalities: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.inequalities.is_empty() && self.equalities.is_empty()
    }

    pub fn n_ineq(&self) -> usize {
        self.inequalities.len()
    }

    pub fn n_eq(&self) -> usize {
        self.equalities.len()
    }

    pub fn g(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n_ineq(), self.inequalities.iter().map(|c| c.value(y)))
    }

    pub fn h(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n_eq(), self.equalities.iter().map(|c| c.value(y)))
    }

    pub fn check_dims(&self, dim: usize) -> Result<()> {
        for c in &self.inequalities {
            if let Inequality::Affine { normal, .. } = c {
                if normal.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: normal.len(),
                    });
                }
            }
        }
        for c in &self.equalities {
            if c.normal.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.normal.len(),
                });
            }
        }
        Ok(())
    }

    /// `∇_y L(y, λ, μ) = ∇f(y) + Σ λ_l ∇g_l(y) + Σ μ_j a_j`.
    pub fn lagrangian_gradient(
        &self,
        f: &Objective,
        y: &DVector<f64>,
        lambda: &DVector<f64>,
        mu: &DVector<f64>,
    ) -> DVector<f64> {
        let mut grad = f.gradient_unchecked(y);
        for (c, &l) in self.inequalities.iter().zip(lambda.iter()) {
            if l != 0.0 {
                grad += c.gradient(y) * l;
            }
        }
        for (c, &m) in self.equalities.iter().zip(mu.iter()) {
            grad += &c.normal * m;
        }
        grad
    }
}
