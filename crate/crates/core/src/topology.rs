//! Communication structures between agents and controllers.
//!
//! Agents send outputs to controllers through `R_A` (`ζ = (R_Aᵀ ⊗ I) y`) and
//! receive inputs through `R_C` (`u = −(R_C ⊗ I) d`). For undirected graphs
//! both matrices equal the incidence matrix `E`; generalized structures use
//! one real matrix `R`; directed structures use an independent pair.
//!
//! Every matrix must satisfy `ker(Mᵀ) = span{1_N}`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;

/// Attempts allowed when sampling random structures.
pub const MAX_ATTEMPTS: usize = 1000;

/// Tolerance for `Mᵀ1 = 0` in the nullspace test.
pub const KERNEL_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub enum CommVariant {
    Undirected { incidence: DMatrix<f64> },
    Generalized { r: DMatrix<f64> },
    Directed { r_a: DMatrix<f64>, r_c: DMatrix<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CommKind {
    Undirected,
    Generalized,
    Directed,
}

impl fmt::Display for CommKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommKind::Undirected => "undirected",
            CommKind::Generalized => "generalized",
            CommKind::Directed => "directed",
        })
    }
}

/// A validated communication structure.
#[derive(Clone, Debug, PartialEq)]
pub struct CommStructure {
    variant: CommVariant,
}

/// Why a matrix fails the nullspace property.
#[derive(Clone, Debug, PartialEq)]
pub enum NullspaceFailure {
    /// `‖Mᵀ1‖∞` exceeds the tolerance.
    OnesNotInKernel { residual: f64 },
    /// Numeric rank differs from `N − 1`.
    Rank { rank: usize, expected: usize },
    Empty,
}

impl fmt::Display for NullspaceFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NullspaceFailure::OnesNotInKernel { residual } => {
                write!(f, "the ones vector is not in the kernel (|M^T 1| = {residual:e})")
            }
            NullspaceFailure::Rank { rank, expected } => {
                write!(f, "numeric rank {rank}, expected {expected}")
            }
            NullspaceFailure::Empty => f.write_str("matrix has no rows"),
        }
    }
}

/// Checks `Mᵀ1_N = 0` and `rank(M) = N − 1`.
pub fn check_nullspace_property(m: &DMatrix<f64>) -> std::result::Result<(), NullspaceFailure> {
    let n = m.nrows();
    if n == 0 {
        return Err(NullspaceFailure::Empty);
    }
    let residual = m.row_sum().iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if residual >= KERNEL_TOL {
        return Err(NullspaceFailure::OnesNotInKernel { residual });
    }
    let rank = linalg::numeric_rank(m);
    if rank != n - 1 {
        return Err(NullspaceFailure::Rank { rank, expected: n - 1 });
    }
    Ok(())
}

fn validate_matrix(m: &DMatrix<f64>) -> Result<()> {
    let (n, k) = m.shape();
    if n == 0 {
        return Err(Error::InvalidParameter("communication matrix needs at least one agent".into()));
    }
    if k + 1 < n {
        return Err(Error::TooFewControllers {
            agents: n,
            controllers: k,
        });
    }
    check_nullspace_property(m).map_err(Error::Nullspace)
}

impl CommStructure {
    /// Wraps an incidence matrix after checking its column structure.
    pub fn undirected(incidence: DMatrix<f64>) -> Result<Self> {
        for (c, col) in incidence.column_iter().enumerate() {
            let plus = col.iter().filter(|&&v| v == 1.0).count();
            let minus = col.iter().filter(|&&v| v == -1.0).count();
            let zero = col.iter().filter(|&&v| v == 0.0).count();
            if plus != 1 || minus != 1 || zero + 2 != col.len() {
                return Err(Error::InvalidParameter(format!(
                    "incidence column {} must hold exactly one +1 and one -1",
                    c + 1
                )));
            }
        }
        validate_matrix(&incidence)?;
        Ok(CommStructure {
            variant: CommVariant::Undirected { incidence },
        })
    }

    pub fn generalized(r: DMatrix<f64>) -> Result<Self> {
        validate_matrix(&r)?;
        Ok(CommStructure {
            variant: CommVariant::Generalized { r },
        })
    }

    pub fn directed(r_a: DMatrix<f64>, r_c: DMatrix<f64>) -> Result<Self> {
        if r_a.shape() != r_c.shape() {
            return Err(Error::InvalidParameter(format!(
                "R_A is {}x{} but R_C is {}x{}",
                r_a.nrows(),
                r_a.ncols(),
                r_c.nrows(),
                r_c.ncols()
            )));
        }
        validate_matrix(&r_a)?;
        validate_matrix(&r_c)?;
        Ok(CommStructure {
            variant: CommVariant::Directed { r_a, r_c },
        })
    }

    pub fn variant(&self) -> &CommVariant {
        &self.variant
    }

    pub fn kind(&self) -> CommKind {
        match self.variant {
            CommVariant::Undirected { .. } => CommKind::Undirected,
            CommVariant::Generalized { .. } => CommKind::Generalized,
            CommVariant::Directed { .. } => CommKind::Directed,
        }
    }

    pub fn is_directed(&self) -> bool {
        matches!(self.variant, CommVariant::Directed { .. })
    }

    /// Agents-to-controllers matrix.
    pub fn r_a(&self) -> &DMatrix<f64> {
        match &self.variant {
            CommVariant::Undirected { incidence } => incidence,
            CommVariant::Generalized { r } => r,
            CommVariant::Directed { r_a, .. } => r_a,
        }
    }

    /// Controllers-to-agents matrix.
    pub fn r_c(&self) -> &DMatrix<f64> {
        match &self.variant {
            CommVariant::Undirected { incidence } => incidence,
            CommVariant::Generalized { r } => r,
            CommVariant::Directed { r_c, .. } => r_c,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.r_a().nrows()
    }

    pub fn n_controllers(&self) -> usize {
        self.r_a().ncols()
    }

    /// 1-based edge list of an undirected structure.
    pub fn edges(&self) -> Option<Vec<(usize, usize)>> {
        let CommVariant::Undirected { incidence } = &self.variant else {
            return None;
        };
        Some(
            incidence
                .column_iter()
                .map(|col| {
                    let from = col.iter().position(|&v| v == -1.0).unwrap_or(0);
                    let to = col.iter().position(|&v| v == 1.0).unwrap_or(0);
                    (from + 1, to + 1)
                })
                .collect(),
        )
    }

    /// Mean number of agents sharing a controller with each agent.
    pub fn mean_degree(&self) -> f64 {
        let n = self.n_agents();
        let mut adj = vec![vec![false; n]; n];
        for m in [self.r_a(), self.r_c()] {
            for col in m.column_iter() {
                let support: Vec<usize> = (0..n).filter(|&i| col[i] != 0.0).collect();
                for &i in &support {
                    for &j in &support {
                        if i != j {
                            adj[i][j] = true;
                        }
                    }
                }
            }
        }
        let total: usize = adj.iter().map(|row| row.iter().filter(|&&b| b).count()).sum();
        total as f64 / n as f64
    }
}

/// Builds the incidence matrix of a connected graph from 1-based edges.
/// Edge `(i, j)` leaves `i` (entry −1) and enters `j` (entry +1).
pub fn incidence_from_edges(n_agents: usize, edges: &[(usize, usize)]) -> Result<CommStructure> {
    if n_agents == 0 {
        return Err(Error::InvalidParameter("at least one agent is required".into()));
    }
    for &(i, j) in edges {
        if i < 1 || j < 1 || i > n_agents || j > n_agents {
            return Err(Error::InvalidParameter(format!(
                "edge ({i}, {j}) references an agent outside 1..={n_agents}"
            )));
        }
        if i == j {
            return Err(Error::SelfLoop(i));
        }
    }
    if edges.len() + 1 < n_agents {
        return Err(Error::TooFewControllers {
            agents: n_agents,
            controllers: edges.len(),
        });
    }
    let zero_based: Vec<(usize, usize)> = edges.iter().map(|&(i, j)| (i - 1, j - 1)).collect();
    if !is_connected(n_agents, &zero_based) {
        return Err(Error::Disconnected);
    }
    let mut e = DMatrix::zeros(n_agents, edges.len());
    for (k, &(i, j)) in zero_based.iter().enumerate() {
        e[(i, k)] = -1.0;
        e[(j, k)] = 1.0;
    }
    CommStructure::undirected(e)
}

/// `m ⊗ I_n`.
pub fn lift(m: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    if n < 1 {
        return Err(Error::InvalidParameter("lift dimension must be at least 1".into()));
    }
    Ok(linalg::kron_identity(m, n))
}

/// Basis `{1_N ⊗ e_j}` of `ker(Mᵀ ⊗ I_p)`.
pub fn kron_kernel_basis(m: &DMatrix<f64>, p: usize) -> Result<Vec<DVector<f64>>> {
    if p < 1 {
        return Err(Error::InvalidParameter("kernel dimension must be at least 1".into()));
    }
    check_nullspace_property(m).map_err(Error::Nullspace)?;
    let ones = DVector::from_element(m.nrows(), 1.0);
    Ok((0..p)
        .map(|j| {
            let mut e = DVector::zeros(p);
            e[j] = 1.0;
            ones.kronecker(&e)
        })
        .collect())
}

pub(crate) fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return false;
    }
    let mut uf = UnionFind::new(n);
    for &(i, j) in edges {
        uf.union(i, j);
    }
    uf.count() == 1
}

/// Connected components of the agent graph induced by shared controllers,
/// each sorted ascending, ordered by smallest member.
pub fn components_of(m: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let mut uf = UnionFind::new(n);
    for col in m.column_iter() {
        let mut first = None;
        for i in 0..n {
            if col[i] != 0.0 {
                match first {
                    None => first = Some(i),
                    Some(f) => uf.union(f, i),
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_index = vec![usize::MAX; n];
    for i in 0..n {
        let r = uf.find(i);
        if root_index[r] == usize::MAX {
            root_index[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[root_index[r]].push(i);
    }
    groups
}

struct UnionFind {
    parent: Vec<usize>,
    sets: usize,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            sets: n,
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
            self.sets -= 1;
        }
    }

    fn count(&self) -> usize {
        self.sets
    }
}

/// Samples a random connected structure of the requested kind.
///
/// * `Undirected`: Erdős–Rényi graph with edge probability `density`,
///   resampled until connected; one controller per edge.
/// * `Generalized`: the same graph, where each controller may also reach one
///   extra random agent; weights are nonzero integers in `[-3, 3]` with the
///   last weight of every column chosen to make it sum to zero.
/// * `Directed`: `R_A` as in `Generalized`; `R_C` on the same number of
///   controllers from a random spanning tree plus random extra pairs, with
///   independent weights.
pub fn random_comm_structure(n_agents: usize, density: f64, seed: u64, kind: CommKind) -> Result<CommStructure> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidParameter(format!("density must lie in (0, 1], got {density}")));
    }
    if n_agents == 0 {
        return Err(Error::InvalidParameter("at least one agent is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        CommKind::Undirected => {
            let edges = random_connected_edges(&mut rng, n_agents, density)?;
            let one_based: Vec<(usize, usize)> = edges.iter().map(|&(i, j)| (i + 1, j + 1)).collect();
            incidence_from_edges(n_agents, &one_based)
        }
        CommKind::Generalized => {
            for _ in 0..MAX_ATTEMPTS {
                let edges = random_connected_edges(&mut rng, n_agents, density)?;
                let r = weighted_hyperedges(&mut rng, n_agents, &edges);
                if let Ok(s) = CommStructure::generalized(r) {
                    return Ok(s);
                }
            }
            Err(Error::RetryBudgetExhausted(MAX_ATTEMPTS))
        }
        CommKind::Directed => {
            for _ in 0..MAX_ATTEMPTS {
                let edges = random_connected_edges(&mut rng, n_agents, density)?;
                let r_a = weighted_hyperedges(&mut rng, n_agents, &edges);
                let pairs = random_tree_plus_extras(&mut rng, n_agents, edges.len());
                let r_c = weighted_hyperedges(&mut rng, n_agents, &pairs);
                if let Ok(s) = CommStructure::directed(r_a, r_c) {
                    return Ok(s);
                }
            }
            Err(Error::RetryBudgetExhausted(MAX_ATTEMPTS))
        }
    }
}

/// Zero-based edges `(i, j)`, `i < j`, of a connected random graph.
pub(crate) fn random_connected_edges<R: Rng>(rng: &mut R, n: usize, density: f64) -> Result<Vec<(usize, usize)>> {
    for _ in 0..MAX_ATTEMPTS {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < density {
                    edges.push((i, j));
                }
            }
        }
        if is_connected(n, &edges) {
            return Ok(edges);
        }
    }
    Err(Error::RetryBudgetExhausted(MAX_ATTEMPTS))
}

fn random_tree_plus_extras<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut pairs = Vec::with_capacity(k);
    for idx in 1..n {
        let parent = order[rng.random_range(0..idx)];
        pairs.push((parent, order[idx]));
    }
    while pairs.len() < k {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i != j {
            pairs.push((i, j));
        }
    }
    pairs.shuffle(rng);
    pairs
}

fn nonzero_weight<R: Rng>(rng: &mut R) -> f64 {
    let w = rng.random_range(1..=3) as f64;
    if rng.random::<bool>() {
        w
    } else {
        -w
    }
}

fn weighted_hyperedges<R: Rng>(rng: &mut R, n: usize, pairs: &[(usize, usize)]) -> DMatrix<f64> {
    let mut r = DMatrix::zeros(n, pairs.len());
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let mut members = vec![i, j];
        if n >= 3 && rng.random::<bool>() {
            let extra = loop {
                let c = rng.random_range(0..n);
                if c != i && c != j {
                    break c;
                }
            };
            members.push(extra);
        }
        let (last, head) = members.split_last().unwrap();
        loop {
            let ws: Vec<f64> = head.iter().map(|_| nonzero_weight(rng)).collect();
            let sum: f64 = ws.iter().sum();
            if sum != 0.0 {
                for (&a, &w) in head.iter().zip(&ws) {
                    r[(a, k)] = w;
                }
                r[(*last, k)] = -sum;
                break;
            }
        }
    }
    r
}
