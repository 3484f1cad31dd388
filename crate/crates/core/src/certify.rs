//! Certificates for the design requirements and a centralized oracle.
//!
//! * [`centralized_solve`] computes the global optimizer of
//!   `min Σ f_i(y)` subject to every agent's constraints, with multipliers.
//! * [`sample_supply_rate`] checks the passivity inequality
//!   `Ṡ ≤ ũᵀỹ − ρ|ỹ|² − ν|ũ|²` of a single block at random states and
//!   random equilibria.
//! * [`quadratic_indices`], [`feedthrough_indices`] and
//!   [`feedthrough_indices_cocoercive`] give closed-form passivity indices.
//! * [`directed_conditions`] evaluates the matrix conditions for directed
//!   structures and [`convergence_gate`] the agent-level convergence gates.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{AgentKind, AgentState, AgentSystem, ControllerSystem, NetworkSystem};
use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::{check_box, sample_in_box, ConstraintSet, Equality, Inequality, Objective, PSD_TOL};
use crate::topology::{check_nullspace_property, CommVariant};

/// Relative tolerance used by every verdict.
pub const VERDICT_TOL: f64 = 1e-9;

/// Maximum Newton iterations of the oracle.
pub const ORACLE_MAX_ITER: usize = 200;

/// Absolute stationarity target of the oracle, scaled by `max(1, Σ|∇f_i|)`.
pub const ORACLE_TOL: f64 = 1e-12;

/// Extra Newton steps taken after [`ORACLE_TOL`] is met.
const POLISH_STEPS: usize = 3;

/// Largest number of distinct inequalities handled by active-set enumeration.
pub const MAX_ENUMERATED: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSolution {
    pub y: DVector<f64>,
    /// Inequality multipliers per agent.
    pub lambda: Vec<DVector<f64>>,
    /// Equality multipliers per agent.
    pub mu: Vec<DVector<f64>>,
    pub iterations: usize,
    pub residual: f64,
}

struct SharedIneq {
    ineq: Inequality,
    owners: Vec<(usize, usize)>,
}

struct SharedEq {
    eq: Equality,
    owners: Vec<(usize, usize)>,
}

fn same_inequality(a: &Inequality, b: &Inequality) -> bool {
    match (a, b) {
        (
            Inequality::Affine { normal: na, offset: oa },
            Inequality::Affine { normal: nb, offset: ob },
        ) => na == nb && oa == ob,
        (Inequality::Custom { value: va, .. }, Inequality::Custom { value: vb, .. }) => Arc::ptr_eq(va, vb),
        _ => false,
    }
}

/// One constraint treated as an equality inside a Newton solve.
enum ActiveRow<'a> {
    Ineq(&'a Inequality),
    Eq(&'a Equality),
}

impl ActiveRow<'_> {
    fn value(&self, y: &DVector<f64>) -> f64 {
        match self {
            ActiveRow::Ineq(c) => c.value(y),
            ActiveRow::Eq(c) => c.value(y),
        }
    }

    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            ActiveRow::Ineq(c) => c.gradient(y),
            ActiveRow::Eq(c) => c.normal.clone(),
        }
    }
}

struct NewtonResult {
    y: DVector<f64>,
    nu: DVector<f64>,
    iterations: usize,
    residual: f64,
}

fn sum_gradient(objectives: &[Objective], y: &DVector<f64>) -> (DVector<f64>, f64) {
    let mut g = DVector::zeros(y.len());
    let mut scale = 0.0;
    for f in objectives {
        let gi = f.gradient_unchecked(y);
        scale += gi.norm();
        g += gi;
    }
    (g, scale)
}

fn kkt_system(objectives: &[Objective], rows: &[ActiveRow], y: &DVector<f64>, nu: &DVector<f64>) -> (DVector<f64>, f64) {
    let n = y.len();
    let (mut grad, mut scale) = sum_gradient(objectives, y);
    for (r, &m) in rows.iter().zip(nu.iter()) {
        let gr = r.gradient(y) * m;
        scale += gr.norm();
        grad += gr;
    }
    let mut f = DVector::zeros(n + rows.len());
    f.rows_mut(0, n).copy_from(&grad);
    for (k, r) in rows.iter().enumerate() {
        f[n + k] = r.value(y);
    }
    (f, scale)
}

fn newton_kkt(objectives: &[Objective], rows: &[ActiveRow], y0: &DVector<f64>) -> Option<NewtonResult> {
    let n = y0.len();
    let a = rows.len();
    let mut y = y0.clone();
    let mut nu = DVector::zeros(a);
    let (mut f, mut scale) = kkt_system(objectives, rows, &y, &nu);
    let mut norm = f.norm();
    let mut polished = 0;
    for it in 0..=ORACLE_MAX_ITER {
        if !norm.is_finite() {
            return None;
        }
        let converged = norm <= ORACLE_TOL * scale.max(1.0);
        if converged && (polished == POLISH_STEPS || norm == 0.0 || it == ORACLE_MAX_ITER) {
            return Some(NewtonResult {
                y,
                nu,
                iterations: it,
                residual: norm,
            });
        }
        if it == ORACLE_MAX_ITER {
            break;
        }
        // Jacobian with a central-difference Hessian of the Lagrangian
        let mut jac = DMatrix::zeros(n + a, n + a);
        for k in 0..n {
            let h = 1e-5 * y[k].abs().max(1.0);
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[k] += h;
            ym[k] -= h;
            let (fp, _) = kkt_system(objectives, rows, &yp, &nu);
            let (fm, _) = kkt_system(objectives, rows, &ym, &nu);
            for r in 0..n {
                jac[(r, k)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        for (k, row) in rows.iter().enumerate() {
            let g = row.gradient(&y);
            for r in 0..n {
                jac[(r, n + k)] = g[r];
                jac[(n + k, r)] = g[r];
            }
        }
        let step = jac.full_piv_lu().solve(&(-&f))?;
        if converged {
            // full steps only, kept while they still reduce the residual
            polished += 1;
            let y_try = &y + step.rows(0, n);
            let nu_try = &nu + step.rows(n, a);
            let (f_try, s_try) = kkt_system(objectives, rows, &y_try, &nu_try);
            let n_try = f_try.norm();
            if !(n_try < norm) {
                return Some(NewtonResult {
                    y,
                    nu,
                    iterations: it,
                    residual: norm,
                });
            }
            y = y_try;
            nu = nu_try;
            f = f_try;
            scale = s_try;
            norm = n_try;
            continue;
        }
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-10 {
            let y_try = &y + step.rows(0, n) * t;
            let nu_try = &nu + step.rows(n, a) * t;
            let (f_try, s_try) = kkt_system(objectives, rows, &y_try, &nu_try);
            let n_try = f_try.norm();
            if n_try.is_finite() && n_try < (1.0 - 1e-4 * t) * norm {
                y = y_try;
                nu = nu_try;
                f = f_try;
                scale = s_try;
                norm = n_try;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no further decrease: accept a roundoff-limited solution
            if norm <= 1e3 * ORACLE_TOL * scale.max(1.0) {
                return Some(NewtonResult {
                    y,
                    nu,
                    iterations: it,
                    residual: norm,
                });
            }
            return None;
        }
    }
    None
}

/// Global optimizer of `Σ f_i` under all agents' constraints.
///
/// Unconstrained problems use damped Newton on the summed gradient with a
/// finite-difference Hessian. Inequalities are handled by enumerating active
/// sets over the distinct constraints; the multiplier of a constraint shared
/// by several agents is split equally between them.
pub fn centralized_solve(objectives: &[Objective], constraints: &[ConstraintSet]) -> Result<OracleSolution> {
    if objectives.is_empty() {
        return Err(Error::InvalidParameter("oracle needs at least one objective".into()));
    }
    if !constraints.is_empty() && constraints.len() != objectives.len() {
        return Err(Error::DimensionMismatch {
            expected: objectives.len(),
            got: constraints.len(),
        });
    }
    let n = objectives[0].dim();
    if let Some(f) = objectives.iter().find(|f| f.dim() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: f.dim(),
        });
    }
    for c in constraints {
        c.check_dims(n)?;
    }

    let mut ineqs: Vec<SharedIneq> = Vec::new();
    let mut eqs: Vec<SharedEq> = Vec::new();
    for (i, cs) in constraints.iter().enumerate() {
        for (l, c) in cs.inequalities.iter().enumerate() {
            match ineqs.iter_mut().find(|s| same_inequality(&s.ineq, c)) {
                Some(s) => s.owners.push((i, l)),
                None => ineqs.push(SharedIneq {
                    ineq: c.clone(),
                    owners: vec![(i, l)],
                }),
            }
        }
        for (j, c) in cs.equalities.iter().enumerate() {
            match eqs.iter_mut().find(|s| &s.eq == c) {
                Some(s) => s.owners.push((i, j)),
                None => eqs.push(SharedEq {
                    eq: c.clone(),
                    owners: vec![(i, j)],
                }),
            }
        }
    }
    if ineqs.len() > MAX_ENUMERATED {
        return Err(Error::InvalidParameter(format!(
            "{} distinct inequalities exceed the enumeration limit {MAX_ENUMERATED}",
            ineqs.len()
        )));
    }

    let minimizers: Vec<DVector<f64>> = objectives.iter().filter_map(|f| f.closed_form_minimizer().ok()).collect();
    let y0 = if minimizers.is_empty() {
        DVector::zeros(n)
    } else {
        minimizers.iter().fold(DVector::zeros(n), |acc, m| acc + m) / minimizers.len() as f64
    };

    let p = ineqs.len();
    let mut subsets: Vec<u32> = (0..(1u32 << p)).collect();
    subsets.sort_by_key(|s| (s.count_ones(), *s));
    let mut best_residual = f64::INFINITY;
    let mut total_iterations = 0;
    for mask in subsets {
        let active: Vec<usize> = (0..p).filter(|&l| mask & (1 << l) != 0).collect();
        let mut rows: Vec<ActiveRow> = active.iter().map(|&l| ActiveRow::Ineq(&ineqs[l].ineq)).collect();
        rows.extend(eqs.iter().map(|e| ActiveRow::Eq(&e.eq)));
        let Some(sol) = newton_kkt(objectives, &rows, &y0) else {
            continue;
        };
        total_iterations += sol.iterations;
        best_residual = best_residual.min(sol.residual);
        let feas_tol = 1e-10 * sol.y.amax().max(1.0);
        let primal_ok = (0..p)
            .filter(|l| !active.contains(l))
            .all(|l| ineqs[l].ineq.value(&sol.y) <= feas_tol);
        let dual_ok = (0..active.len()).all(|k| sol.nu[k] >= -1e-10);
        if !(primal_ok && dual_ok) {
            continue;
        }
        let mut lambda: Vec<DVector<f64>> = (0..objectives.len())
            .map(|i| DVector::zeros(constraints.get(i).map_or(0, |c| c.n_ineq())))
            .collect();
        let mut mu: Vec<DVector<f64>> = (0..objectives.len())
            .map(|i| DVector::zeros(constraints.get(i).map_or(0, |c| c.n_eq())))
            .collect();
        for (k, &l) in active.iter().enumerate() {
            let share = sol.nu[k].max(0.0) / ineqs[l].owners.len() as f64;
            for &(i, li) in &ineqs[l].owners {
                lambda[i][li] = share;
            }
        }
        for (k, e) in eqs.iter().enumerate() {
            let share = sol.nu[active.len() + k] / e.owners.len() as f64;
            for &(i, j) in &e.owners {
                mu[i][j] = share;
            }
        }
        return Ok(OracleSolution {
            y: sol.y,
            lambda,
            mu,
            iterations: total_iterations,
            residual: sol.residual,
        });
    }
    Err(Error::OracleNonConvergence {
        iterations: total_iterations.max(ORACLE_MAX_ITER),
        residual: best_residual,
    })
}

/// Largest violation among stationarity `|Σ∇_y L_i|`, primal feasibility,
/// dual feasibility and complementary slackness.
pub fn kkt_residual(
    objectives: &[Objective],
    constraints: &[ConstraintSet],
    y: &DVector<f64>,
    lambda: &[DVector<f64>],
    mu: &[DVector<f64>],
) -> f64 {
    let empty = DVector::zeros(0);
    let mut stationarity = DVector::zeros(y.len());
    let mut worst: f64 = 0.0;
    for (i, f) in objectives.iter().enumerate() {
        let cs = constraints.get(i);
        let l = lambda.get(i).unwrap_or(&empty);
        let m = mu.get(i).unwrap_or(&empty);
        match cs {
            Some(cs) => {
                stationarity += cs.lagrangian_gradient(f, y, l, m);
                let g = cs.g(y);
                for (k, &gk) in g.iter().enumerate() {
                    let lk = l.get(k).copied().unwrap_or(0.0);
                    worst = worst.max(gk.max(0.0)).max((-lk).max(0.0)).max((lk * gk).abs());
                }
                for hk in cs.h(y).iter() {
                    worst = worst.max(hk.abs());
                }
            }
            None => stationarity += f.gradient_unchecked(y),
        }
    }
    worst.max(stationarity.norm())
}

/// Claimed passivity indices of a block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EipClaim {
    /// Input surplus `ν`.
    pub nu: f64,
    /// Output surplus `ρ`.
    pub rho: f64,
}

/// Storage function used by the supply-rate check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StorageKind {
    /// `|x̃|²/(2α)` (plus `½|λ̃|² + ½|μ̃|²`), or `|z̃|²/(2β)` for controllers.
    Standard,
    /// `x̃ᵀGx̃/(2α)` with `G = (I + γQ)⁻¹`, for quadratic objectives.
    QuadraticWeighted,
}

#[derive(Clone, Copy, Debug)]
pub enum Block<'a> {
    Agent(&'a AgentSystem),
    Controller(&'a ControllerSystem),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EipReport {
    pub block: String,
    pub claim: EipClaim,
    pub samples: usize,
    /// Largest `Ṡ − w(ũ, ỹ)` observed.
    pub max_violation: f64,
    /// Largest magnitude of the terms entering the inequality.
    pub scale: f64,
    pub pass: bool,
}

impl EipReport {
    pub const CSV_HEADER: &'static str = "block,nu,rho,samples,max_violation,scale,verdict";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{},{:.17e},{:.17e},{}",
            self.block,
            self.claim.nu,
            self.claim.rho,
            self.samples,
            self.max_violation,
            self.scale,
            if self.pass { "pass" } else { "fail" }
        )
    }
}

impl fmt::Display for EipReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} nu={:<10.4e} rho={:<10.4e} samples={:<6} max_violation={:.3e} (tol {:.3e})  {}",
            self.block,
            self.claim.nu,
            self.claim.rho,
            self.samples,
            self.max_violation,
            VERDICT_TOL * self.scale,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Admissible equilibrium of an agent: state, input and output.
struct AgentEquilibrium {
    state: AgentState,
    u: DVector<f64>,
    y: DVector<f64>,
}

fn sample_agent_equilibrium<R: Rng>(
    rng: &mut R,
    agent: &AgentSystem,
    sample_box: &[(f64, f64)],
) -> Result<AgentEquilibrium> {
    let f = agent.objective();
    match agent.kind() {
        AgentKind::GradientFlow { .. } | AgentKind::Feedthrough { .. } => {
            // pick the equilibrium output; ū = ∇f(ȳ), x̄ = ȳ − γū
            let y = sample_in_box(rng, sample_box);
            let u = f.gradient_unchecked(&y);
            let x = &y - &u * agent.kind().gamma();
            Ok(AgentEquilibrium {
                state: AgentState {
                    x,
                    lambda: DVector::zeros(0),
                    mu: DVector::zeros(0),
                },
                u,
                y,
            })
        }
        AgentKind::Constrained { .. } => {
            let cs = agent.constraints();
            for _ in 0..1000 {
                let mut x = sample_in_box(rng, sample_box);
                for (k, c) in cs.inequalities.iter().enumerate() {
                    if let Inequality::Affine { normal, offset } = c {
                        if rng.random::<bool>() || k == usize::MAX {
                            x -= normal * ((normal.dot(&x) + offset) / normal.norm_squared());
                        }
                    }
                }
                x = project_affine(&x, &cs.equalities);
                let g = cs.g(&x);
                if g.iter().any(|&gl| gl > 1e-12) || cs.h(&x).amax() > 1e-9 {
                    continue;
                }
                let lambda = DVector::from_iterator(
                    g.len(),
                    g.iter().map(|&gl| if gl.abs() <= 1e-12 { rng.random_range(0.0..3.0) } else { 0.0 }),
                );
                let mu = DVector::from_iterator(cs.n_eq(), (0..cs.n_eq()).map(|_| rng.random_range(-3.0..3.0)));
                let u = cs.lagrangian_gradient(f, &x, &lambda, &mu);
                return Ok(AgentEquilibrium {
                    y: x.clone(),
                    state: AgentState { x, lambda, mu },
                    u,
                });
            }
            Err(Error::RetryBudgetExhausted(1000))
        }
    }
}

/// Least-norm correction of `x` onto `{aᵀx + c = 0}` for all equalities.
fn project_affine(x: &DVector<f64>, eqs: &[Equality]) -> DVector<f64> {
    if eqs.is_empty() {
        return x.clone();
    }
    let a = DMatrix::from_fn(eqs.len(), x.len(), |r, c| eqs[r].normal[c]);
    let resid = DVector::from_iterator(eqs.len(), eqs.iter().map(|e| e.value(x)));
    match a.clone().pseudo_inverse(1e-12) {
        Ok(pinv) => x - pinv * resid,
        Err(_) => x.clone(),
    }
}

/// Samples the dissipation inequality of one block.
///
/// Equilibria are drawn by their output `ȳ` inside `sample_box` (for
/// constrained agents by the state, optionally moved onto active affine
/// constraints). States are drawn from the box, inputs from `ū` plus a
/// perturbation of the box width. When `ρ = ν = 0` the check uses
/// `w = ũᵀỹ − Ψ` with `Ψ = x̃ᵀ(∇f(x) − ∇f(x̄)) ≥ 0` for agents without
/// output feedthrough.
pub fn sample_supply_rate(
    block: Block,
    claim: EipClaim,
    storage: StorageKind,
    n_samples: usize,
    seed: u64,
    sample_box: &[(f64, f64)],
) -> Result<EipReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_violation = f64::NEG_INFINITY;
    let mut scale: f64 = 1.0;
    let widths: Vec<f64> = sample_box.iter().map(|&(lo, hi)| hi - lo).collect();
    let block_name;
    match block {
        Block::Agent(agent) => {
            check_box(sample_box, agent.dim())?;
            block_name = format!("agent:{}", agent.kind().name());
            let alpha = agent.kind().alpha();
            let gamma = agent.kind().gamma();
            let weight = match storage {
                StorageKind::Standard => None,
                StorageKind::QuadraticWeighted => {
                    let q = agent.objective().quadratic_hessian().ok_or_else(|| {
                        Error::UnsupportedBlock("weighted storage needs a quadratic objective".into())
                    })?;
                    let n = q.nrows();
                    Some(
                        (DMatrix::identity(n, n) + q * gamma)
                            .try_inverse()
                            .ok_or_else(|| Error::SingularGain("I + gamma Q".into()))?,
                    )
                }
            };
            let use_psi = claim.rho == 0.0 && claim.nu == 0.0 && gamma == 0.0;
            for _ in 0..n_samples {
                let eq = sample_agent_equilibrium(&mut rng, agent, sample_box)?;
                let x = sample_in_box(&mut rng, sample_box);
                let n_l = agent.n_lambda();
                let lambda = DVector::from_iterator(
                    n_l,
                    (0..n_l).map(|_| if rng.random::<bool>() { 0.0 } else { rng.random_range(0.0..3.0) }),
                );
                let mu = DVector::from_iterator(agent.n_mu(), (0..agent.n_mu()).map(|_| rng.random_range(-3.0..3.0)));
                let u = DVector::from_iterator(
                    x.len(),
                    (0..x.len()).map(|k| eq.u[k] + widths[k] * rng.random_range(-0.5..0.5)),
                );
                let st = AgentState { x, lambda, mu };
                let der = agent.rhs(&st, &u);
                let y = agent.output(&st.x, &u);
                let dx = &st.x - &eq.state.x;
                let grad_s = match &weight {
                    Some(g) => g * &dx / alpha,
                    None => &dx / alpha,
                };
                let s_dot = grad_s.dot(&der.x)
                    + (&st.lambda - &eq.state.lambda).dot(&der.lambda)
                    + (&st.mu - &eq.state.mu).dot(&der.mu);
                let du = &u - &eq.u;
                let dy = &y - &eq.y;
                let cross = du.dot(&dy);
                let rho_term = claim.rho * dy.norm_squared();
                let nu_term = claim.nu * du.norm_squared();
                let psi = if use_psi {
                    let f = agent.objective();
                    dx.dot(&(f.gradient_unchecked(&st.x) - f.gradient_unchecked(&eq.state.x)))
                } else {
                    0.0
                };
                let supply = cross - rho_term - nu_term - psi;
                max_violation = max_violation.max(s_dot - supply);
                scale = scale.max(s_dot.abs()).max(cross.abs()).max(rho_term).max(nu_term).max(psi.abs());
            }
        }
        Block::Controller(ctrl) => {
            check_box(sample_box, ctrl.dim())?;
            if storage != StorageKind::Standard {
                return Err(Error::UnsupportedBlock("controllers use the standard storage".into()));
            }
            block_name = format!("controller:{}", if ctrl.feedthrough() { "feedthrough" } else { "integrator" });
            for _ in 0..n_samples {
                // integral action: every equilibrium has ζ̄ = 0 and d̄ = z̄
                let z_bar = sample_in_box(&mut rng, sample_box);
                let z = sample_in_box(&mut rng, sample_box);
                let zeta = DVector::from_iterator(z.len(), widths.iter().map(|w| w * rng.random_range(-0.5..0.5)));
                let (dz, d) = ctrl.rhs_output(&z, &zeta);
                let dzt = &z - &z_bar;
                let w_dot = dzt.dot(&dz) / ctrl.beta();
                let dd = &d - &z_bar;
                let cross = zeta.dot(&dd);
                let rho_term = claim.rho * dd.norm_squared();
                let nu_term = claim.nu * zeta.norm_squared();
                let supply = cross - rho_term - nu_term;
                max_violation = max_violation.max(w_dot - supply);
                scale = scale.max(w_dot.abs()).max(cross.abs()).max(rho_term).max(nu_term);
            }
        }
    }
    if n_samples == 0 {
        max_violation = 0.0;
    }
    Ok(EipReport {
        block: block_name,
        claim,
        samples: n_samples,
        max_violation,
        scale,
        pass: max_violation <= VERDICT_TOL * scale,
    })
}

/// Indices of a feedthrough agent with quadratic objective:
/// `G = (I + γQ)⁻¹`, `ν = λmin(γG)`, `ρ = λmin(GQ)`.
pub fn quadratic_indices(q: &DMatrix<f64>, gamma: f64) -> Result<EipClaim> {
    let n = q.nrows();
    if q.ncols() != n {
        return Err(Error::InvalidParameter("Q must be square".into()));
    }
    if !(gamma >= 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {gamma}")));
    }
    let lmin = linalg::lambda_min_sym(q);
    if lmin < -PSD_TOL {
        return Err(Error::NotPsd(lmin));
    }
    let g = (DMatrix::identity(n, n) + q * gamma)
        .try_inverse()
        .ok_or_else(|| Error::SingularGain("I + gamma Q".into()))?;
    let rho = linalg::lambda_min_sym(&(&g * q)).max(0.0);
    let nu = if gamma == 0.0 {
        0.0
    } else {
        linalg::lambda_min_sym(&(g * gamma))
    };
    Ok(EipClaim { nu, rho })
}

/// Indices from strong convexity `m` and gradient Lipschitz constant `l`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeedthroughIndices {
    pub claim: EipClaim,
    /// Whether `m > 0`, `l ≥ m` and `0 ≤ γ < 2m/l`.
    pub in_range: bool,
}

/// `(ν, ρ) = (γ/2, m − γl/2)`.
///
/// Valid only when `γl(l − 1) ≤ 2(l − m)` (always for `l ≤ 1`): the
/// derivation bounds `|∇f(y) − ∇f(ȳ)|²` by `l|ỹ|²` instead of `l²|ỹ|²`.
/// [`feedthrough_indices_cocoercive`] is valid for every `γ ≤ 2/l`.
pub fn feedthrough_indices(m: f64, l: f64, gamma: f64) -> FeedthroughIndices {
    let in_range = m > 0.0 && l >= m && gamma >= 0.0 && gamma < 2.0 * m / l;
    FeedthroughIndices {
        claim: EipClaim {
            nu: gamma / 2.0,
            rho: m - gamma * l / 2.0,
        },
        in_range,
    }
}

/// `(ν, ρ) = (γ/2, m(1 − γl/2))`, from co-coercivity of the gradient.
/// In range when `m > 0`, `l ≥ m` and `0 ≤ γ < 2/l`.
pub fn feedthrough_indices_cocoercive(m: f64, l: f64, gamma: f64) -> FeedthroughIndices {
    let in_range = m > 0.0 && l >= m && gamma >= 0.0 && gamma * l < 2.0;
    FeedthroughIndices {
        claim: EipClaim {
            nu: gamma / 2.0,
            rho: m * (1.0 - gamma * l / 2.0),
        },
        in_range,
    }
}

/// Certified indices of an agent block and the storage function they hold
/// for, or `None` when no closed-form certificate applies.
pub fn certified_indices(agent: &AgentSystem) -> Option<(EipClaim, StorageKind)> {
    let f = agent.objective();
    match agent.kind() {
        AgentKind::GradientFlow { .. } | AgentKind::Constrained { .. } => Some((
            EipClaim {
                nu: 0.0,
                rho: f.strong_convexity(),
            },
            StorageKind::Standard,
        )),
        AgentKind::Feedthrough { gamma, .. } => {
            if let Some(q) = f.quadratic_hessian() {
                return quadratic_indices(&q, gamma).ok().map(|c| (c, StorageKind::QuadraticWeighted));
            }
            if gamma == 0.0 {
                return Some((
                    EipClaim {
                        nu: 0.0,
                        rho: f.strong_convexity(),
                    },
                    StorageKind::Standard,
                ));
            }
            let l = f.lipschitz()?;
            let ind = feedthrough_indices_cocoercive(f.strong_convexity(), l, gamma);
            ind.in_range.then_some((ind.claim, StorageKind::Standard))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectedCertificate {
    /// Eigenvalues of `[[2K, R̃], [R̃ᵀ, 2L]]`, ascending.
    pub block_eigenvalues: Vec<f64>,
    pub block_scale: f64,
    /// Eigenvalues `(re, im)` of `diag(β) R_Aᵀ K⁻¹ R̃`.
    pub product_eigenvalues: Vec<(f64, f64)>,
    pub product_scale: f64,
    pub n_agents: usize,
    pub n_controllers: usize,
}

impl DirectedCertificate {
    pub fn block_psd(&self) -> bool {
        self.block_eigenvalues.first().is_none_or(|&l| l >= -VERDICT_TOL * self.block_scale)
    }

    pub fn block_pd(&self) -> bool {
        self.block_eigenvalues.first().is_none_or(|&l| l > VERDICT_TOL * self.block_scale)
    }

    /// Every product eigenvalue is zero or has positive real part.
    pub fn product_condition(&self) -> bool {
        let tol = VERDICT_TOL * self.product_scale;
        self.product_eigenvalues.iter().all(|&(re, im)| re.hypot(im) < tol || re > tol)
    }

    /// Both matrix conditions for asymptotic convergence.
    pub fn asymptotic(&self) -> bool {
        self.block_psd() && self.product_condition()
    }

    /// Exactly `N − 1` controllers and a positive definite block matrix.
    pub fn exponential(&self) -> Option<bool> {
        (self.n_controllers + 1 == self.n_agents).then(|| self.block_pd())
    }

    pub fn pass(&self) -> bool {
        self.asymptotic() || self.exponential() == Some(true)
    }
}

/// Matrix conditions for directed structures.
pub fn directed_conditions(
    r_a: &DMatrix<f64>,
    r_c: &DMatrix<f64>,
    rho: &[f64],
    nu: &[f64],
    beta: &[f64],
) -> Result<DirectedCertificate> {
    if r_a.shape() != r_c.shape() {
        return Err(Error::InvalidParameter("R_A and R_C must have the same shape".into()));
    }
    check_nullspace_property(r_a).map_err(Error::Nullspace)?;
    check_nullspace_property(r_c).map_err(Error::Nullspace)?;
    let (n_agents, n_ctrl) = r_a.shape();
    if rho.len() != n_agents || nu.len() != n_agents {
        return Err(Error::DimensionMismatch {
            expected: n_agents,
            got: rho.len().min(nu.len()),
        });
    }
    if beta.len() != n_ctrl {
        return Err(Error::DimensionMismatch {
            expected: n_ctrl,
            got: beta.len(),
        });
    }
    if let Some(&r) = rho.iter().find(|&&r| !(r > 0.0)) {
        return Err(Error::SingularGain(format!("K = diag(rho) needs rho > 0, got {r}")));
    }
    let r_tilde = r_c - r_a;
    let l = r_c.transpose() * DMatrix::from_diagonal(&DVector::from_column_slice(nu)) * r_c;
    let size = n_agents + n_ctrl;
    let mut u = DMatrix::zeros(size, size);
    for i in 0..n_agents {
        u[(i, i)] = 2.0 * rho[i];
    }
    u.view_mut((0, n_agents), (n_agents, n_ctrl)).copy_from(&r_tilde);
    u.view_mut((n_agents, 0), (n_ctrl, n_agents)).copy_from(&r_tilde.transpose());
    u.view_mut((n_agents, n_agents), (n_ctrl, n_ctrl)).copy_from(&(l * 2.0));
    let block_eigenvalues = linalg::sym_eigenvalues(&u);
    let block_scale = linalg::spectral_norm(&u).max(1.0);

    let k_inv = DMatrix::from_diagonal(&DVector::from_iterator(n_agents, rho.iter().map(|r| 1.0 / r)));
    let b = DMatrix::from_diagonal(&DVector::from_column_slice(beta));
    let product = b * r_a.transpose() * k_inv * &r_tilde;
    let product_eigenvalues = if n_ctrl == 0 {
        Vec::new()
    } else {
        let mut ev: Vec<(f64, f64)> = product.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect();
        ev.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        ev
    };
    let product_scale = linalg::spectral_norm(&product).max(1.0);
    Ok(DirectedCertificate {
        block_eigenvalues,
        block_scale,
        product_eigenvalues,
        product_scale,
        n_agents,
        n_controllers: n_ctrl,
    })
}

/// Convergence gates for a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceGate {
    /// Certified output surplus per agent (`None` when no certificate applies).
    pub agent_rho: Vec<Option<f64>>,
    /// Every agent is output-strictly passive and every controller an
    /// integrator.
    pub strict_eip: bool,
    /// `Σ m_i > 0`, or `Σ Q_i` positive definite for all-quadratic networks.
    pub sum_strictly_convex: bool,
    /// Matrix conditions, for directed structures only.
    pub directed: Option<DirectedCertificate>,
}

impl ConvergenceGate {
    pub fn pass(&self) -> bool {
        match &self.directed {
            Some(cert) => cert.pass(),
            None => self.strict_eip || self.sum_strictly_convex,
        }
    }
}

/// Evaluates the convergence gates of an assembled network.
pub fn convergence_gate(net: &NetworkSystem) -> ConvergenceGate {
    let certs: Vec<Option<(EipClaim, StorageKind)>> = net.agents().iter().map(certified_indices).collect();
    let agent_rho: Vec<Option<f64>> = certs.iter().map(|c| c.map(|(claim, _)| claim.rho)).collect();
    let controllers_ok = net.controllers().iter().all(|c| c.beta() > 0.0);
    let strict_eip = controllers_ok && agent_rho.iter().all(|r| r.is_some_and(|r| r > 0.0));

    let sum_m: f64 = net.agents().iter().map(|a| a.objective().strong_convexity()).sum();
    let sum_strictly_convex = controllers_ok
        && (sum_m > 0.0 || {
            let qs: Option<Vec<DMatrix<f64>>> = net.agents().iter().map(|a| a.objective().quadratic_hessian()).collect();
            qs.is_some_and(|qs| {
                let n = net.dim();
                let sum = qs.iter().fold(DMatrix::zeros(n, n), |acc, q| acc + q);
                linalg::lambda_min_sym(&sum) > VERDICT_TOL * linalg::spectral_norm(&sum).max(1.0)
            })
        });

    let directed = match net.comm().variant() {
        CommVariant::Directed { r_a, r_c } => {
            let rho: Option<Vec<f64>> = agent_rho.iter().copied().collect();
            let nu: Option<Vec<f64>> = certs.iter().map(|c| c.map(|(claim, _)| claim.nu)).collect();
            let beta: Vec<f64> = net.controllers().iter().map(|c| c.beta()).collect();
            match (rho, nu) {
                (Some(rho), Some(nu)) => directed_conditions(r_a, r_c, &rho, &nu, &beta).ok(),
                _ => None,
            }
            .or(Some(DirectedCertificate {
                block_eigenvalues: vec![f64::NEG_INFINITY],
                block_scale: 1.0,
                product_eigenvalues: Vec::new(),
                product_scale: 1.0,
                n_agents: r_a.nrows(),
                n_controllers: r_a.ncols(),
            }))
        }
        _ => None,
    };
    ConvergenceGate {
        agent_rho,
        strict_eip,
        sum_strictly_convex,
        directed,
    }
}
