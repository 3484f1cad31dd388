//! Agent and controller blocks and the assembled closed loop.
//!
//! Agents (`x` state, output `y`, input `u`):
//!
//! ```text
//! gradient flow:  ẋ = −α∇f(x) + αu,          y = x
//! feedthrough:    ẋ = −α∇f(x + γu) + αu,     y = x + γu
//! constrained:    ẋ = −α∇ₓL(x, λ, μ) + αu,   y = x
//!                 λ̇_l = 0 if λ_l ≤ λ_tol and g_l(x) < 0, g_l(x) otherwise
//!                 μ̇ = h(x)
//! ```
//!
//! Controllers integrate `ż = βζ` and output `d = z + βζ` (with feedthrough)
//! or `d = z`. The interconnection is `ζ = (R_Aᵀ ⊗ I) y`, `u = −(R_C ⊗ I) d`.
//! When agents and controllers both have feedthrough the outputs are coupled
//! algebraically; [`NetworkSystem::resolve_outputs`] solves that loop.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::{ConstraintSet, Inequality, Objective};
use crate::topology::CommStructure;

/// Threshold standing in for `λ = 0` in the multiplier switch.
pub const LAMBDA_TOL: f64 = 1e-12;

/// Loop matrices with `σ_min ≤ SINGULAR_TOL · σ_max` are rejected.
pub const SINGULAR_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AgentKind {
    GradientFlow { alpha: f64 },
    Feedthrough { alpha: f64, gamma: f64 },
    Constrained { alpha: f64 },
}

impl AgentKind {
    pub fn alpha(&self) -> f64 {
        match *self {
            AgentKind::GradientFlow { alpha } | AgentKind::Feedthrough { alpha, .. } | AgentKind::Constrained { alpha } => {
                alpha
            }
        }
    }

    /// Output feedthrough gain; zero for blocks without feedthrough.
    pub fn gamma(&self) -> f64 {
        match *self {
            AgentKind::Feedthrough { gamma, .. } => gamma,
            _ => 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AgentKind::GradientFlow { .. } => "gradient-flow",
            AgentKind::Feedthrough { .. } => "feedthrough",
            AgentKind::Constrained { .. } => "constrained",
        }
    }
}

/// State of one agent block.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct AgentSystem {
    kind: AgentKind,
    objective: Objective,
    constraints: ConstraintSet,
    initial: AgentState,
}

impl AgentSystem {
    /// Builds an agent with zero initial state.
    pub fn new(kind: AgentKind, objective: Objective, constraints: ConstraintSet) -> Result<Self> {
        let alpha = kind.alpha();
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha must be > 0, got {alpha}")));
        }
        if let AgentKind::Feedthrough { gamma, .. } = kind {
            if !(gamma >= 0.0) || !gamma.is_finite() {
                return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {gamma}")));
            }
            if let Some(l) = objective.lipschitz() {
                let m = objective.strong_convexity();
                if l > 0.0 && gamma > 0.0 && gamma >= 2.0 * m / l {
                    return Err(Error::InvalidParameter(format!(
                        "gamma = {gamma} violates gamma < 2m/l = {}",
                        2.0 * m / l
                    )));
                }
            }
        }
        let dim = objective.dim();
        constraints.check_dims(dim)?;
        if !matches!(kind, AgentKind::Constrained { .. }) && !constraints.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "{} agents cannot carry constraints",
                kind.name()
            )));
        }
        let initial = AgentState {
            x: DVector::zeros(dim),
            lambda: DVector::zeros(constraints.n_ineq()),
            mu: DVector::zeros(constraints.n_eq()),
        };
        Ok(AgentSystem {
            kind,
            objective,
            constraints,
            initial,
        })
    }

    pub fn gradient_flow(alpha: f64, objective: Objective) -> Result<Self> {
        Self::new(AgentKind::GradientFlow { alpha }, objective, ConstraintSet::none())
    }

    pub fn feedthrough(alpha: f64, gamma: f64, objective: Objective) -> Result<Self> {
        Self::new(AgentKind::Feedthrough { alpha, gamma }, objective, ConstraintSet::none())
    }

    pub fn constrained(alpha: f64, objective: Objective, constraints: ConstraintSet) -> Result<Self> {
        Self::new(AgentKind::Constrained { alpha }, objective, constraints)
    }

    /// Replaces the initial state; multipliers must be nonnegative.
    pub fn with_initial_state(mut self, state: AgentState) -> Result<Self> {
        let dim = self.dim();
        if state.x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: state.x.len(),
            });
        }
        if state.lambda.len() != self.constraints.n_ineq() {
            return Err(Error::DimensionMismatch {
                expected: self.constraints.n_ineq(),
                got: state.lambda.len(),
            });
        }
        if state.mu.len() != self.constraints.n_eq() {
            return Err(Error::DimensionMismatch {
                expected: self.constraints.n_eq(),
                got: state.mu.len(),
            });
        }
        if state.lambda.iter().any(|&l| l < 0.0) {
            return Err(Error::InvalidParameter("initial multipliers must be >= 0".into()));
        }
        self.initial = state;
        Ok(self)
    }

    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn initial_state(&self) -> &AgentState {
        &self.initial
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    pub fn n_lambda(&self) -> usize {
        self.constraints.n_ineq()
    }

    pub fn n_mu(&self) -> usize {
        self.constraints.n_eq()
    }

    /// `y = x + γu` (`γ = 0` unless the block has feedthrough).
    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let gamma = self.kind.gamma();
        if gamma == 0.0 {
            x.clone()
        } else {
            x + u * gamma
        }
    }

    /// Right-hand side of the agent block for input `u`.
    pub fn rhs(&self, state: &AgentState, u: &DVector<f64>) -> AgentState {
        let alpha = self.kind.alpha();
        match self.kind {
            AgentKind::GradientFlow { .. } => AgentState {
                x: (u - self.objective.gradient_unchecked(&state.x)) * alpha,
                lambda: DVector::zeros(0),
                mu: DVector::zeros(0),
            },
            AgentKind::Feedthrough { gamma, .. } => {
                let y = &state.x + u * gamma;
                AgentState {
                    x: (u - self.objective.gradient_unchecked(&y)) * alpha,
                    lambda: DVector::zeros(0),
                    mu: DVector::zeros(0),
                }
            }
            AgentKind::Constrained { .. } => {
                let grad = self
                    .constraints
                    .lagrangian_gradient(&self.objective, &state.x, &state.lambda, &state.mu);
                let g = self.constraints.g(&state.x);
                let lambda = DVector::from_iterator(
                    g.len(),
                    g.iter()
                        .zip(state.lambda.iter())
                        .map(|(&gl, &ll)| if ll <= LAMBDA_TOL && gl < 0.0 { 0.0 } else { gl }),
                );
                AgentState {
                    x: (u - grad) * alpha,
                    lambda,
                    mu: self.constraints.h(&state.x),
                }
            }
        }
    }

    /// Allocation-free right-hand side for scalar closed-form objectives
    /// with affine constraints. Returns `false` when it does not apply.
    fn scalar_rhs_into(&self, state: &[f64], out: &mut [f64], lay: &StateLayout, i: usize, u: f64) -> bool {
        let xi = lay.x_range(i).start;
        let x = state[xi];
        let alpha = self.kind.alpha();
        if !matches!(self.kind, AgentKind::Constrained { .. }) {
            return match self.objective.scalar_gradient(x + self.kind.gamma() * u) {
                Some(g) => {
                    out[xi] = alpha * (u - g);
                    true
                }
                None => false,
            };
        }
        let Some(mut grad) = self.objective.scalar_gradient(x) else {
            return false;
        };
        let lr = lay.lambda_range(i);
        for (j, ineq) in self.constraints.inequalities.iter().enumerate() {
            let Inequality::Affine { normal, offset } = ineq else {
                return false;
            };
            let lam = state[lr.start + j];
            let g = normal[0] * x + offset;
            grad += lam * normal[0];
            out[lr.start + j] = if lam <= LAMBDA_TOL && g < 0.0 { 0.0 } else { g };
        }
        let mr = lay.mu_range(i);
        for (j, eq) in self.constraints.equalities.iter().enumerate() {
            grad += state[mr.start + j] * eq.normal[0];
            out[mr.start + j] = eq.normal[0] * x + eq.offset;
        }
        out[xi] = alpha * (u - grad);
        true
    }

    /// Storage function evaluated at the deviation from an equilibrium.
    ///
    /// `|x̃|²/(2α)` in general, `x̃ᵀGx̃/(2α)` with `G = (I + γQ)⁻¹` for
    /// feedthrough agents with a quadratic objective, plus `½|λ̃|² + ½|μ̃|²`
    /// for constrained agents.
    pub fn storage(&self, dx: &DVector<f64>, dlambda: &DVector<f64>, dmu: &DVector<f64>) -> f64 {
        let alpha = self.kind.alpha();
        let primal = match (self.kind, self.storage_weight()) {
            (AgentKind::Feedthrough { .. }, Some(g)) => dx.dot(&(g * dx)),
            _ => dx.norm_squared(),
        } / (2.0 * alpha);
        primal + 0.5 * dlambda.norm_squared() + 0.5 * dmu.norm_squared()
    }

    /// `G = (I + γQ)⁻¹` for feedthrough agents with quadratic objectives.
    pub fn storage_weight(&self) -> Option<DMatrix<f64>> {
        let gamma = self.kind.gamma();
        if !matches!(self.kind, AgentKind::Feedthrough { .. }) || gamma == 0.0 {
            return None;
        }
        let q = self.objective.quadratic_hessian()?;
        let n = q.nrows();
        (DMatrix::identity(n, n) + q * gamma).try_inverse()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerSystem {
    beta: f64,
    feedthrough: bool,
    initial: DVector<f64>,
}

impl ControllerSystem {
    /// Controller with zero initial state of dimension `dim`.
    pub fn new(beta: f64, feedthrough: bool, dim: usize) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidParameter(format!("beta must be > 0, got {beta}")));
        }
        Ok(ControllerSystem {
            beta,
            feedthrough,
            initial: DVector::zeros(dim),
        })
    }

    pub fn with_initial_state(mut self, z: DVector<f64>) -> Result<Self> {
        if z.len() != self.initial.len() {
            return Err(Error::DimensionMismatch {
                expected: self.initial.len(),
                got: z.len(),
            });
        }
        self.initial = z;
        Ok(self)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn feedthrough(&self) -> bool {
        self.feedthrough
    }

    pub fn initial_state(&self) -> &DVector<f64> {
        &self.initial
    }

    pub fn dim(&self) -> usize {
        self.initial.len()
    }

    /// `(ż, d)` for state `z` and input `ζ`.
    pub fn rhs_output(&self, z: &DVector<f64>, zeta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let dz = zeta * self.beta;
        let d = if self.feedthrough { z + &dz } else { z.clone() };
        (dz, d)
    }

    pub fn storage(&self, dz: &DVector<f64>) -> f64 {
        dz.norm_squared() / (2.0 * self.beta)
    }
}

/// Positions of every block inside the packed state vector.
///
/// Layout: all agent `x` (agent-major), then all controller `z`, then the
/// multipliers `λ_i, μ_i` of each agent in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateLayout {
    pub n: usize,
    pub n_agents: usize,
    pub n_controllers: usize,
    lambda: Vec<(usize, usize)>,
    mu: Vec<(usize, usize)>,
    len: usize,
}

impl StateLayout {
    fn new(n: usize, agents: &[AgentSystem], n_controllers: usize) -> Self {
        let mut offset = (agents.len() + n_controllers) * n;
        let mut lambda = Vec::with_capacity(agents.len());
        let mut mu = Vec::with_capacity(agents.len());
        for a in agents {
            lambda.push((offset, a.n_lambda()));
            offset += a.n_lambda();
            mu.push((offset, a.n_mu()));
            offset += a.n_mu();
        }
        StateLayout {
            n,
            n_agents: agents.len(),
            n_controllers,
            lambda,
            mu,
            len: offset,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn x_range(&self, i: usize) -> std::ops::Range<usize> {
        i * self.n..(i + 1) * self.n
    }

    pub fn z_range(&self, k: usize) -> std::ops::Range<usize> {
        let start = (self.n_agents + k) * self.n;
        start..start + self.n
    }

    pub fn lambda_range(&self, i: usize) -> std::ops::Range<usize> {
        let (s, l) = self.lambda[i];
        s..s + l
    }

    pub fn mu_range(&self, i: usize) -> std::ops::Range<usize> {
        let (s, l) = self.mu[i];
        s..s + l
    }

    /// All stacked `x`.
    pub fn x_all(&self) -> std::ops::Range<usize> {
        0..self.n_agents * self.n
    }

    /// All stacked `z`.
    pub fn z_all(&self) -> std::ops::Range<usize> {
        self.n_agents * self.n..(self.n_agents + self.n_controllers) * self.n
    }

    /// Indices of every multiplier `λ` entry.
    pub fn lambda_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.lambda.iter().flat_map(|&(s, l)| s..s + l)
    }

    pub fn agent_state(&self, state: &DVector<f64>, i: usize) -> AgentState {
        AgentState {
            x: state.rows_range(self.x_range(i)).into_owned(),
            lambda: state.rows_range(self.lambda_range(i)).into_owned(),
            mu: state.rows_range(self.mu_range(i)).into_owned(),
        }
    }
}

/// Resolved interconnection signals, each stacked block-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Signals {
    pub y: DVector<f64>,
    pub u: DVector<f64>,
    pub zeta: DVector<f64>,
    pub d: DVector<f64>,
}

/// Compressed-column copy of a communication matrix.
#[derive(Clone, Debug)]
struct SparseCols {
    n_rows: usize,
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl SparseCols {
    fn new(m: &DMatrix<f64>) -> Self {
        let mut ptr = vec![0];
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for c in m.column_iter() {
            for (i, &w) in c.iter().enumerate() {
                if w != 0.0 {
                    idx.push(i);
                    val.push(w);
                }
            }
            ptr.push(idx.len());
        }
        SparseCols {
            n_rows: m.nrows(),
            ptr,
            idx,
            val,
        }
    }

    fn n_cols(&self) -> usize {
        self.ptr.len() - 1
    }

    /// `(Mᵀ ⊗ I_n) y`.
    fn mul_t(&self, y: &[f64], n: usize) -> DVector<f64> {
        let k = self.n_cols();
        let mut out = vec![0.0; k * n];
        if n == 1 {
            for (o, win) in out.iter_mut().zip(self.ptr.windows(2)) {
                let mut acc = 0.0;
                for (&i, &w) in self.idx[win[0]..win[1]].iter().zip(&self.val[win[0]..win[1]]) {
                    acc += w * y[i];
                }
                *o = acc;
            }
        } else {
            for (o, win) in out.chunks_exact_mut(n).zip(self.ptr.windows(2)) {
                for (&i, &w) in self.idx[win[0]..win[1]].iter().zip(&self.val[win[0]..win[1]]) {
                    for (oj, yj) in o.iter_mut().zip(&y[i * n..(i + 1) * n]) {
                        *oj += w * yj;
                    }
                }
            }
        }
        DVector::from_vec(out)
    }

    /// `(M ⊗ I_n) d`.
    fn mul(&self, d: &[f64], n: usize) -> DVector<f64> {
        let mut out = vec![0.0; self.n_rows * n];
        if n == 1 {
            for (&dc, win) in d.iter().zip(self.ptr.windows(2)) {
                for (&i, &w) in self.idx[win[0]..win[1]].iter().zip(&self.val[win[0]..win[1]]) {
                    out[i] += w * dc;
                }
            }
        } else {
            for (dc, win) in d.chunks_exact(n).zip(self.ptr.windows(2)) {
                for (&i, &w) in self.idx[win[0]..win[1]].iter().zip(&self.val[win[0]..win[1]]) {
                    for (oj, dj) in out[i * n..(i + 1) * n].iter_mut().zip(dc) {
                        *oj += w * dj;
                    }
                }
            }
        }
        DVector::from_vec(out)
    }
}

/// Precomputed solver for the algebraic loop
/// `(I + Γ R_C B R_Aᵀ) y = x − Γ R_C z`, restricted to agents with `γ > 0`.
#[derive(Clone, Debug)]
struct LoopSolver {
    coupled: Vec<usize>,
    lu: Option<LU<f64, Dyn, Dyn>>,
}

#[derive(Clone, Debug)]
pub struct NetworkSystem {
    agents: Vec<AgentSystem>,
    controllers: Vec<ControllerSystem>,
    comm: CommStructure,
    n: usize,
    layout: StateLayout,
    r_a: SparseCols,
    r_c: SparseCols,
    /// `R_C diag(β_ff) R_Aᵀ`.
    gammas: Vec<f64>,
    betas_ff: Vec<f64>,
    loop_solver: LoopSolver,
    loop_condition: f64,
}

impl NetworkSystem {
    /// Assembles the closed loop. Fails on dimension mismatches, a
    /// controller count that differs from the structure, constrained agents
    /// on a directed structure, or a singular algebraic loop.
    pub fn new(agents: Vec<AgentSystem>, controllers: Vec<ControllerSystem>, comm: CommStructure) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one agent".into()));
        }
        let n = agents[0].dim();
        for a in &agents {
            if a.dim() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: a.dim(),
                });
            }
        }
        for c in &controllers {
            if c.dim() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: c.dim(),
                });
            }
        }
        if comm.n_agents() != agents.len() {
            return Err(Error::DimensionMismatch {
                expected: comm.n_agents(),
                got: agents.len(),
            });
        }
        if comm.n_controllers() != controllers.len() {
            return Err(Error::DimensionMismatch {
                expected: comm.n_controllers(),
                got: controllers.len(),
            });
        }
        if comm.is_directed() && agents.iter().any(|a| matches!(a.kind(), AgentKind::Constrained { .. })) {
            return Err(Error::UnsupportedBlock(
                "constrained agents require an undirected or generalized structure".into(),
            ));
        }

        let gammas: Vec<f64> = agents.iter().map(|a| a.kind().gamma()).collect();
        let betas_ff: Vec<f64> = controllers
            .iter()
            .map(|c| if c.feedthrough() { c.beta() } else { 0.0 })
            .collect();

        // scalar loop matrix A = I + diag(γ) R_C diag(β_ff) R_Aᵀ
        let mut bra = comm.r_a().transpose();
        for (k, &b) in betas_ff.iter().enumerate() {
            bra.row_mut(k).scale_mut(b);
        }
        let m = comm.r_c() * bra;
        let n_agents = agents.len();
        let mut a_full = DMatrix::identity(n_agents, n_agents);
        for i in 0..n_agents {
            for j in 0..n_agents {
                a_full[(i, j)] += gammas[i] * m[(i, j)];
            }
        }
        let sv = linalg::singular_values(&a_full);
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(smin > SINGULAR_TOL * smax) {
            return Err(Error::SingularLoop);
        }
        let loop_condition = smax / smin;

        let coupled: Vec<usize> = (0..n_agents)
            .filter(|&i| gammas[i] > 0.0 && m.row(i).iter().any(|&v| v != 0.0))
            .collect();
        let lu = if coupled.is_empty() {
            None
        } else {
            let sub = DMatrix::from_fn(coupled.len(), coupled.len(), |r, c| a_full[(coupled[r], coupled[c])]);
            Some(sub.lu())
        };

        let layout = StateLayout::new(n, &agents, controllers.len());
        Ok(NetworkSystem {
            r_a: SparseCols::new(comm.r_a()),
            r_c: SparseCols::new(comm.r_c()),
            agents,
            controllers,
            comm,
            n,
            layout,
            gammas,
            betas_ff,
            loop_solver: LoopSolver { coupled, lu },
            loop_condition,
        })
    }

    pub fn agents(&self) -> &[AgentSystem] {
        &self.agents
    }

    pub fn controllers(&self) -> &[ControllerSystem] {
        &self.controllers
    }

    pub fn comm(&self) -> &CommStructure {
        &self.comm
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    /// 2-norm condition number of the algebraic-loop matrix.
    pub fn loop_condition(&self) -> f64 {
        self.loop_condition
    }

    /// Packs every block's initial state.
    pub fn initial_state(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.layout.len());
        for (i, a) in self.agents.iter().enumerate() {
            let init = a.initial_state();
            s.rows_range_mut(self.layout.x_range(i)).copy_from(&init.x);
            s.rows_range_mut(self.layout.lambda_range(i)).copy_from(&init.lambda);
            s.rows_range_mut(self.layout.mu_range(i)).copy_from(&init.mu);
        }
        for (k, c) in self.controllers.iter().enumerate() {
            s.rows_range_mut(self.layout.z_range(k)).copy_from(c.initial_state());
        }
        s
    }

    /// Solves `y = x + Γu`, `u = −(R_C⊗I)d`, `ζ = (R_Aᵀ⊗I)y`, `d = z + Bζ`.
    pub fn resolve_outputs(&self, x: &DVector<f64>, z: &DVector<f64>) -> Result<Signals> {
        let n = self.n;
        if x.len() != self.agents.len() * n {
            return Err(Error::DimensionMismatch {
                expected: self.agents.len() * n,
                got: x.len(),
            });
        }
        if z.len() != self.controllers.len() * n {
            return Err(Error::DimensionMismatch {
                expected: self.controllers.len() * n,
                got: z.len(),
            });
        }
        // u = −(R_C⊗I)(z + β_ff∘ζ) = −(R_C⊗I)d
        let rcz = self.r_c.mul(z.as_slice(), n);
        let mut y = x.clone();
        {
            let ys = y.as_mut_slice();
            let rs = rcz.as_slice();
            for (i, &g) in self.gammas.iter().enumerate() {
                if g > 0.0 {
                    for j in i * n..(i + 1) * n {
                        ys[j] -= g * rs[j];
                    }
                }
            }
        }
        if let Some(lu) = &self.loop_solver.lu {
            let coupled = &self.loop_solver.coupled;
            let mut known = y.clone();
            for &i in coupled {
                known.as_mut_slice()[i * n..(i + 1) * n].fill(0.0);
            }
            let mut scaled = self.r_a.mul_t(known.as_slice(), n);
            self.scale_by_beta(&mut scaled);
            let coupling = self.r_c.mul(scaled.as_slice(), n);
            let (ys, cs) = (y.as_slice(), coupling.as_slice());
            let mut rhs = DMatrix::zeros(coupled.len(), n);
            for (r, &i) in coupled.iter().enumerate() {
                for j in 0..n {
                    rhs[(r, j)] = ys[i * n + j] - self.gammas[i] * cs[i * n + j];
                }
            }
            let sol = lu.solve(&rhs).ok_or(Error::SingularLoop)?;
            let ys = y.as_mut_slice();
            for (r, &i) in coupled.iter().enumerate() {
                for j in 0..n {
                    ys[i * n + j] = sol[(r, j)];
                }
            }
        }
        let zeta = self.r_a.mul_t(y.as_slice(), n);
        let mut d = zeta.clone();
        self.scale_by_beta(&mut d);
        for (dk, zk) in d.as_mut_slice().iter_mut().zip(z.as_slice()) {
            *dk += zk;
        }
        let mut u = self.r_c.mul(d.as_slice(), n);
        u.neg_mut();
        Ok(Signals { y, u, zeta, d })
    }

    fn scale_by_beta(&self, v: &mut DVector<f64>) {
        let n = self.n;
        for (chunk, &b) in v.as_mut_slice().chunks_exact_mut(n).zip(&self.betas_ff) {
            for e in chunk {
                *e *= b;
            }
        }
    }

    /// Signals for a packed state.
    pub fn signals(&self, state: &DVector<f64>) -> Result<Signals> {
        self.check_state(state)?;
        let x = state.rows_range(self.layout.x_all()).into_owned();
        let z = state.rows_range(self.layout.z_all()).into_owned();
        self.resolve_outputs(&x, &z)
    }

    fn check_state(&self, state: &DVector<f64>) -> Result<()> {
        if state.len() != self.layout.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layout.len(),
                got: state.len(),
            });
        }
        Ok(())
    }

    /// Time derivative of the packed closed-loop state.
    pub fn closed_loop_rhs(&self, state: &DVector<f64>) -> Result<DVector<f64>> {
        let sig = self.signals(state)?;
        let n = self.n;
        let lay = &self.layout;
        let mut out = DVector::zeros(lay.len());
        for (i, a) in self.agents.iter().enumerate() {
            if n == 1 && a.scalar_rhs_into(state.as_slice(), out.as_mut_slice(), lay, i, sig.u.as_slice()[i]) {
                continue;
            }
            let u = sig.u.rows_range(lay.x_range(i)).into_owned();
            let st = lay.agent_state(state, i);
            let der = a.rhs(&st, &u);
            out.rows_range_mut(lay.x_range(i)).copy_from(&der.x);
            out.rows_range_mut(lay.lambda_range(i)).copy_from(&der.lambda);
            out.rows_range_mut(lay.mu_range(i)).copy_from(&der.mu);
        }
        let zeta = sig.zeta.as_slice();
        let dz = &mut out.as_mut_slice()[lay.z_all()];
        for (k, c) in self.controllers.iter().enumerate() {
            for j in k * n..(k + 1) * n {
                dz[j] = c.beta() * zeta[j];
            }
        }
        Ok(out)
    }

    /// Sum of block storage functions about an equilibrium state.
    pub fn storage(&self, state: &DVector<f64>, equilibrium: &DVector<f64>) -> Result<f64> {
        self.check_state(state)?;
        self.check_state(equilibrium)?;
        let lay = &self.layout;
        let diff = state - equilibrium;
        let mut v = 0.0;
        for (i, a) in self.agents.iter().enumerate() {
            let dx = diff.rows_range(lay.x_range(i)).into_owned();
            let dl = diff.rows_range(lay.lambda_range(i)).into_owned();
            let dm = diff.rows_range(lay.mu_range(i)).into_owned();
            v += a.storage(&dx, &dl, &dm);
        }
        for (k, c) in self.controllers.iter().enumerate() {
            v += c.storage(&diff.rows_range(lay.z_range(k)).into_owned());
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::ConstraintSet;
    use crate::topology::{incidence_from_edges, CommStructure};
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn scalar_state(x: f64) -> AgentState {
        AgentState {
            x: v(&[x]),
            lambda: DVector::zeros(0),
            mu: DVector::zeros(0),
        }
    }

    #[test]
    fn agent_rhs_examples() {
        let f = Objective::model1(1.0, 0.0).unwrap();
        let gf = AgentSystem::gradient_flow(1.0, f.clone()).unwrap();
        assert_eq!(gf.rhs(&scalar_state(1.0), &v(&[0.0])).x, v(&[-2.0]));

        let ft = AgentSystem::feedthrough(1.0, 1.0, f).unwrap();
        assert_eq!(ft.rhs(&scalar_state(0.0), &v(&[1.0])).x, v(&[-1.0]));

        let c = AgentSystem::constrained(1.0, Objective::model2(1.0, -2.0).unwrap(), ConstraintSet::model2()).unwrap();
        let st = AgentState {
            x: v(&[0.2]),
            lambda: v(&[0.0]),
            mu: DVector::zeros(0),
        };
        // g(0.2) = −0.3 with λ = 0: the switch holds λ at zero
        assert_eq!(c.rhs(&st, &v(&[0.0])).lambda, v(&[0.0]));
        let st = AgentState {
            x: v(&[0.2]),
            lambda: v(&[0.5]),
            mu: DVector::zeros(0),
        };
        assert!((c.rhs(&st, &v(&[0.0])).lambda[0] + 0.3).abs() < 1e-15);
    }

    #[test]
    fn agent_output_examples() {
        let f = Objective::model1(1.0, 0.0).unwrap();
        assert_eq!(AgentSystem::gradient_flow(1.0, f.clone()).unwrap().output(&v(&[3.0]), &v(&[7.0])), v(&[3.0]));
        assert_eq!(AgentSystem::feedthrough(1.0, 0.5, f.clone()).unwrap().output(&v(&[1.0]), &v(&[2.0])), v(&[2.0]));
        assert_eq!(AgentSystem::feedthrough(1.0, 0.0, f).unwrap().output(&v(&[1.0]), &v(&[2.0])), v(&[1.0]));
    }

    #[test]
    fn controller_examples() {
        let c = ControllerSystem::new(35.0, true, 1).unwrap();
        let (dz, d) = c.rhs_output(&v(&[0.7]), &v(&[0.0]));
        assert_eq!((dz, d), (v(&[0.0]), v(&[0.7])));
        let c = ControllerSystem::new(2.0, true, 1).unwrap();
        assert_eq!(c.rhs_output(&v(&[1.0]), &v(&[0.5])).1, v(&[2.0]));
        let c = ControllerSystem::new(2.0, false, 1).unwrap();
        assert_eq!(c.rhs_output(&v(&[1.0]), &v(&[5.0])).1, v(&[1.0]));
        assert!(ControllerSystem::new(0.0, true, 1).is_err());
    }

    #[test]
    fn parameter_invariants() {
        let f = Objective::model1(1.0, 0.0).unwrap();
        assert!(AgentSystem::gradient_flow(0.0, f.clone()).is_err());
        assert!(AgentSystem::feedthrough(1.0, -0.1, f.clone()).is_err());
        // m = l = 2: gamma must stay below 2
        assert!(AgentSystem::feedthrough(1.0, 2.0, f.clone()).is_err());
        assert!(AgentSystem::new(AgentKind::GradientFlow { alpha: 1.0 }, f, ConstraintSet::model2()).is_err());
    }

    fn two_agent(gamma: f64, beta: f64, ff: bool) -> NetworkSystem {
        let f = Objective::model1(1.0, 0.0).unwrap();
        let agents = vec![
            AgentSystem::feedthrough(1.0, gamma, f.clone()).unwrap(),
            AgentSystem::feedthrough(1.0, gamma, f).unwrap(),
        ];
        let ctrl = vec![ControllerSystem::new(beta, ff, 1).unwrap()];
        NetworkSystem::new(agents, ctrl, incidence_from_edges(2, &[(1, 2)]).unwrap()).unwrap()
    }

    fn assert_consistent(net: &NetworkSystem, x: &DVector<f64>, z: &DVector<f64>, s: &Signals) {
        let n = net.dim();
        let gam = DVector::from_iterator(
            x.len(),
            net.agents().iter().flat_map(|a| std::iter::repeat_n(a.kind().gamma(), n)),
        );
        let beta = DVector::from_iterator(
            z.len(),
            net.controllers()
                .iter()
                .flat_map(|c| std::iter::repeat_n(if c.feedthrough() { c.beta() } else { 0.0 }, n)),
        );
        let ra = linalg::kron_identity(net.comm().r_a(), n);
        let rc = linalg::kron_identity(net.comm().r_c(), n);
        assert!((&s.y - (x + gam.component_mul(&s.u))).amax() < 1e-10);
        assert!((&s.u + &rc * &s.d).amax() < 1e-10);
        assert!((&s.zeta - ra.transpose() * &s.y).amax() < 1e-10);
        assert!((&s.d - (z + beta.component_mul(&s.zeta))).amax() < 1e-10);
    }

    #[test]
    fn resolve_without_loop() {
        let net = two_agent(0.0, 1.0, false);
        let x = v(&[1.0, -1.0]);
        let z = v(&[0.5]);
        let s = net.resolve_outputs(&x, &z).unwrap();
        assert_eq!(s.y, x);
        assert_eq!(s.d, z);
        assert_eq!(s.u, v(&[0.5, -0.5]));
    }

    #[test]
    fn resolve_two_agent_loop() {
        let net = two_agent(1.0, 1.0, true);
        let x = v(&[1.0, -1.0]);
        let z = v(&[0.0]);
        let s = net.resolve_outputs(&x, &z).unwrap();
        // oracle: (I + E Eᵀ) y = x, I + EEᵀ = [[2,−1],[−1,2]]
        let a = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        let y = a.lu().solve(&x).unwrap();
        assert!((&s.y - &y).amax() < 1e-14);
        assert!((s.y[0] - 1.0 / 3.0).abs() < 1e-14);
        assert_consistent(&net, &x, &z, &s);
    }

    fn fig5_pair() -> CommStructure {
        CommStructure::directed(
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -2.0, 1.0, 1.0, -1.0]),
            DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 2.0, 0.0, -2.0, -1.0]),
        )
        .unwrap()
    }

    #[test]
    fn resolve_directed_without_controller_feedthrough() {
        let f = Objective::model1(1.0, 0.0).unwrap();
        let agents = (0..3).map(|_| AgentSystem::feedthrough(1.0, 0.5, f.clone()).unwrap()).collect();
        let ctrl = (0..2).map(|_| ControllerSystem::new(1.0, false, 1).unwrap()).collect();
        let comm = fig5_pair();
        let r_c = comm.r_c().clone();
        let net = NetworkSystem::new(agents, ctrl, comm).unwrap();
        let x = v(&[0.3, -0.1, 0.7]);
        let z = v(&[1.0, -2.0]);
        let s = net.resolve_outputs(&x, &z).unwrap();
        let u = -(&r_c * &z);
        assert!((&s.u - &u).amax() < 1e-14);
        assert!((&s.y - (&x + &u * 0.5)).amax() < 1e-14);
        assert_consistent(&net, &x, &z, &s);
    }

    #[test]
    fn single_agent_rhs_is_gradient_flow() {
        let f = Objective::model1(1.0, 0.0).unwrap();
        let net = NetworkSystem::new(
            vec![AgentSystem::gradient_flow(1.0, f).unwrap()],
            vec![],
            incidence_from_edges(1, &[]).unwrap(),
        )
        .unwrap();
        assert_eq!(net.closed_loop_rhs(&v(&[0.8])).unwrap(), v(&[-1.6]));
    }

    #[test]
    fn two_agent_quadratic_matches_linear_system() {
        // f1 = (y−1)², f2 = (y+1)², α = 1, γ = 0, β = 5 without feedthrough:
        // ẋ = −2x + [2, −2]ᵀ − E z,  ż = 5 Eᵀ x
        let agents = vec![
            AgentSystem::gradient_flow(1.0, Objective::model1(1.0, -2.0).unwrap()).unwrap(),
            AgentSystem::gradient_flow(1.0, Objective::model1(1.0, 2.0).unwrap()).unwrap(),
        ];
        let ctrl = vec![ControllerSystem::new(5.0, false, 1).unwrap()];
        let net = NetworkSystem::new(agents, ctrl, incidence_from_edges(2, &[(1, 2)]).unwrap()).unwrap();
        let a = DMatrix::from_row_slice(3, 3, &[-2.0, 0.0, 1.0, 0.0, -2.0, -1.0, -5.0, 5.0, 0.0]);
        let b = v(&[2.0, -2.0, 0.0]);
        for s in [v(&[0.0, 0.0, 0.0]), v(&[0.3, -1.2, 2.5]), v(&[-4.0, 1.0, 0.1])] {
            let expected = &a * &s + &b;
            assert!((net.closed_loop_rhs(&s).unwrap() - expected).amax() < 1e-13);
        }
    }

    /// Builds a state at the consensus optimum `ŷ*` of a network: `ζ = 0` and
    /// `u_i = ∇f_i(ŷ*)`.
    fn equilibrium_state(net: &NetworkSystem, y_star: f64) -> DVector<f64> {
        let grads: Vec<f64> = net.agents().iter().map(|a| a.objective().grad(&v(&[y_star])).unwrap()[0]).collect();
        // −R_C z = ∇f
        let r_c = net.comm().r_c().clone();
        let target = -DVector::from_vec(grads.clone());
        let z = r_c.svd(true, true).solve(&target, 1e-14).unwrap();
        let mut s = net.initial_state();
        let lay = net.layout().clone();
        for (i, a) in net.agents().iter().enumerate() {
            s[lay.x_range(i).start] = y_star - a.kind().gamma() * grads[i];
        }
        for k in 0..z.len() {
            s[lay.z_range(k).start] = z[k];
        }
        s
    }

    #[test]
    fn consensus_optimum_is_equilibrium() {
        // Σ (2a_i y + b_i) = 0 → y* = −Σb / (2Σa)
        let params = [(1.0, 0.5), (0.5, -1.0), (2.0, 0.25)];
        let y_star = -params.iter().map(|p| p.1).sum::<f64>() / (2.0 * params.iter().map(|p| p.0).sum::<f64>());
        let agents = vec![
            AgentSystem::gradient_flow(1.0, Objective::model1(params[0].0, params[0].1).unwrap()).unwrap(),
            AgentSystem::feedthrough(2.0, 0.3, Objective::model1(params[1].0, params[1].1).unwrap()).unwrap(),
            AgentSystem::feedthrough(0.5, 0.2, Objective::model1(params[2].0, params[2].1).unwrap()).unwrap(),
        ];
        let ctrl = vec![
            ControllerSystem::new(3.0, true, 1).unwrap(),
            ControllerSystem::new(1.0, false, 1).unwrap(),
        ];
        let net = NetworkSystem::new(agents, ctrl, incidence_from_edges(3, &[(1, 2), (3, 2)]).unwrap()).unwrap();
        let s = equilibrium_state(&net, y_star);
        let der = net.closed_loop_rhs(&s).unwrap();
        assert!(der.amax() < 1e-12, "{der}");
        let sig = net.signals(&s).unwrap();
        assert!(sig.zeta.amax() < 1e-12);
        assert!((sig.y.add_scalar(-y_star)).amax() < 1e-12);
    }

    #[test]
    fn storage_is_zero_at_equilibrium_and_positive_elsewhere() {
        let net = two_agent(0.5, 2.0, true);
        let eq = v(&[0.1, -0.1, 0.3]);
        assert_eq!(net.storage(&eq, &eq).unwrap(), 0.0);
        assert!(net.storage(&v(&[1.0, 0.0, 0.0]), &eq).unwrap() > 0.0);
    }

    #[test]
    fn network_rejects_bad_assemblies() {
        let f = Objective::model1(1.0, 0.0).unwrap();
        let comm = incidence_from_edges(2, &[(1, 2)]).unwrap();
        let agents = vec![
            AgentSystem::gradient_flow(1.0, f.clone()).unwrap(),
            AgentSystem::gradient_flow(1.0, f.clone()).unwrap(),
        ];
        assert!(NetworkSystem::new(agents.clone(), vec![], comm.clone()).is_err());
        let constrained = vec![
            AgentSystem::constrained(1.0, f.clone(), ConstraintSet::model2()).unwrap(),
            AgentSystem::gradient_flow(1.0, f.clone()).unwrap(),
            AgentSystem::gradient_flow(1.0, f).unwrap(),
        ];
        let ctrl: Vec<_> = (0..2).map(|_| ControllerSystem::new(1.0, false, 1).unwrap()).collect();
        assert!(matches!(
            NetworkSystem::new(constrained, ctrl, fig5_pair()),
            Err(Error::UnsupportedBlock(_))
        ));
    }

    proptest! {
        #[test]
        fn resolved_signals_are_consistent(
            gammas in prop::collection::vec(0.0f64..0.9, 4),
            betas in prop::collection::vec(0.1f64..10.0, 4),
            ff in prop::collection::vec(any::<bool>(), 4),
            x in prop::collection::vec(-5.0f64..5.0, 8),
            z in prop::collection::vec(-5.0f64..5.0, 8),
        ) {
            let q = DMatrix::identity(2, 2);
            let f = Objective::quadratic(q, v(&[0.0, 0.0]), 0.0).unwrap();
            let agents = gammas.iter().map(|&g| AgentSystem::feedthrough(1.0, g, f.clone()).unwrap()).collect();
            let ctrl = betas.iter().zip(&ff).map(|(&b, &t)| ControllerSystem::new(b, t, 2).unwrap()).collect();
            let comm = incidence_from_edges(4, &[(1, 2), (2, 3), (3, 4), (4, 1)]).unwrap();
            let net = NetworkSystem::new(agents, ctrl, comm).unwrap();
            let x = DVector::from_vec(x);
            let z = DVector::from_vec(z);
            let s = net.resolve_outputs(&x, &z).unwrap();
            assert_consistent(&net, &x, &z, &s);
        }

        #[test]
        fn resolved_signals_are_consistent_on_directed_structures(
            seed in 0u64..1000,
            gammas in prop::collection::vec(0.0f64..0.9, 4),
            betas in prop::collection::vec(0.1f64..10.0, 12),
            ff in prop::collection::vec(any::<bool>(), 12),
            x in prop::collection::vec(-5.0f64..5.0, 4),
            z in prop::collection::vec(-5.0f64..5.0, 12),
        ) {
            let comm = crate::topology::random_comm_structure(4, 0.7, seed, crate::topology::CommKind::Directed).unwrap();
            let k = comm.n_controllers();
            let f = Objective::model3(0.2);
            let agents = gammas.iter().map(|&g| AgentSystem::feedthrough(1.0, g, f.clone()).unwrap()).collect();
            let ctrl = (0..k).map(|i| ControllerSystem::new(betas[i], ff[i], 1).unwrap()).collect();
            let net = NetworkSystem::new(agents, ctrl, comm);
            prop_assume!(net.is_ok());
            let net = net.unwrap();
            let x = DVector::from_vec(x);
            let z = DVector::from_iterator(k, z.into_iter().take(k));
            let s = net.resolve_outputs(&x, &z).unwrap();
            assert_consistent(&net, &x, &z, &s);
        }

        #[test]
        fn no_feedthrough_is_plain_wiring(
            x in prop::collection::vec(-5.0f64..5.0, 3),
            z in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let f = Objective::model3(0.1);
            let agents = (0..3).map(|_| AgentSystem::gradient_flow(1.0, f.clone()).unwrap()).collect();
            let ctrl = (0..3).map(|_| ControllerSystem::new(2.0, false, 1).unwrap()).collect();
            let comm = incidence_from_edges(3, &[(1, 2), (2, 3), (3, 1)]).unwrap();
            let e = comm.r_a().clone();
            let net = NetworkSystem::new(agents, ctrl, comm).unwrap();
            let x = DVector::from_vec(x);
            let z = DVector::from_vec(z);
            let s = net.resolve_outputs(&x, &z).unwrap();
            prop_assert_eq!(&s.y, &x);
            prop_assert_eq!(&s.d, &z);
            prop_assert!((&s.u + &e * &z).amax() < 1e-14);
            prop_assert!((&s.zeta - e.transpose() * &x).amax() < 1e-14);
        }
    }
}
