//! Experiment configurations: the scenario file format, the randomized
//! split experiment generator and gate validation.
//!
//! A scenario file is TOML with five kinds of sections:
//!
//! ```toml
//! [network]
//! n_agents = 2
//! dim = 1
//! kind = "undirected"        # undirected | generalized | directed
//! edges = [[1, 2]]           # undirected: 1-based (from, to) pairs
//! # r = [[...], ...]         # generalized: N rows of K entries
//! # r_a = ..., r_c = ...     # directed
//! density = 0.1              # optional, informational
//! comm_seed = 7              # optional, informational
//!
//! [agents]
//! list = [
//!   { model = "model1", a = 1.0, b = -2.0, dynamics = "gradient_flow", alpha = 1.0, gamma = 0.0, x0 = [0.0] },
//!   { model = "model2", a = 1.0, b = 2.0, dynamics = "constrained", alpha = 1.0, gamma = 0.0,
//!     ineq = [{ normal = [1.0], offset = -0.5 }], x0 = [0.0] },
//! ]
//!
//! [controllers]
//! beta = [35.0]
//! feedthrough = [true]
//! # z0 = [[0.0]]
//!
//! [simulation]
//! t_end = 200.0
//! dt = 0.001
//! method = "rk4"             # rk4 | euler
//! record_every = 100
//! seed = 1
//!
//! [[event]]
//! time = 100.0
//! action = "split"           # split | replace | remove | add
//! # remove = [3]             # remove: 1-based agent ids
//! # add = [{ ... }]          # add: agent tables, numbered after all existing ids
//!
//! [[event.group]]            # one per group for split, exactly one otherwise
//! agents = [1, 2]            # 1-based global ids in row order
//! kind = "undirected"
//! edges = [[1, 2]]           # rows refer to positions within `agents`
//! beta = [35.0]
//! feedthrough = [true]
//! ```
//!
//! Models: `model1` and `model2` take `a`, `b` (`f = a y² + b y`), `model3`
//! takes `b`, `quadratic` takes `hessian`, `linear` and optional
//! `constant`. Inequalities read `normalᵀy + offset ≤ 0`, equalities
//! `normalᵀy + offset = 0`; both require `dynamics = "constrained"`.
//! Omitted initial states are zero. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::certify::{convergence_gate, OracleSolution};
use crate::dynamics::{AgentKind, AgentState, AgentSystem, ControllerSystem, NetworkSystem};
use crate::error::{Error, Result};
use crate::objective::{ConstraintSet, Equality, Inequality, Objective};
use crate::simulate::{component_oracle, EventAction, Group, Method, NetworkEvent, SimConfig};
use crate::topology::{check_nullspace_property, incidence_from_edges, random_comm_structure, CommKind, CommStructure};

pub const DEFAULT_AGENTS: usize = 100;
pub const DEFAULT_DENSITY: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 35.0;
pub const DEFAULT_T_END: f64 = 200.0;
pub const DEFAULT_SPLIT_TIME: f64 = 100.0;
/// Lower bound applied to sampled quadratic coefficients.
pub const A_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub enum WiringSpec {
    /// 1-based `(from, to)` pairs.
    Undirected { edges: Vec<(usize, usize)> },
    Generalized { r: DMatrix<f64> },
    Directed { r_a: DMatrix<f64>, r_c: DMatrix<f64> },
}

impl WiringSpec {
    pub fn kind(&self) -> CommKind {
        match self {
            WiringSpec::Undirected { .. } => CommKind::Undirected,
            WiringSpec::Generalized { .. } => CommKind::Generalized,
            WiringSpec::Directed { .. } => CommKind::Directed,
        }
    }

    pub fn n_controllers(&self) -> usize {
        match self {
            WiringSpec::Undirected { edges } => edges.len(),
            WiringSpec::Generalized { r } => r.ncols(),
            WiringSpec::Directed { r_a, .. } => r_a.ncols(),
        }
    }

    /// `(R_A, R_C)` without any structural checks beyond index ranges.
    pub fn matrices(&self, n_agents: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        match self {
            WiringSpec::Undirected { edges } => {
                let mut e = DMatrix::zeros(n_agents, edges.len());
                for (k, &(i, j)) in edges.iter().enumerate() {
                    if i < 1 || j < 1 || i > n_agents || j > n_agents {
                        return Err(Error::InvalidScenario(format!(
                            "edge ({i}, {j}) references an agent outside 1..={n_agents}"
                        )));
                    }
                    if i == j {
                        return Err(Error::SelfLoop(i));
                    }
                    e[(i - 1, k)] = -1.0;
                    e[(j - 1, k)] = 1.0;
                }
                Ok((e.clone(), e))
            }
            WiringSpec::Generalized { r } => {
                check_rows(r, n_agents, "r")?;
                Ok((r.clone(), r.clone()))
            }
            WiringSpec::Directed { r_a, r_c } => {
                check_rows(r_a, n_agents, "r_a")?;
                check_rows(r_c, n_agents, "r_c")?;
                if r_a.ncols() != r_c.ncols() {
                    return Err(Error::InvalidScenario(format!(
                        "r_a has {} columns but r_c has {}",
                        r_a.ncols(),
                        r_c.ncols()
                    )));
                }
                Ok((r_a.clone(), r_c.clone()))
            }
        }
    }

    pub fn build(&self, n_agents: usize) -> Result<CommStructure> {
        match self {
            WiringSpec::Undirected { edges } => incidence_from_edges(n_agents, edges),
            WiringSpec::Generalized { r } => {
                check_rows(r, n_agents, "r")?;
                CommStructure::generalized(r.clone())
            }
            WiringSpec::Directed { r_a, r_c } => {
                check_rows(r_a, n_agents, "r_a")?;
                check_rows(r_c, n_agents, "r_c")?;
                CommStructure::directed(r_a.clone(), r_c.clone())
            }
        }
    }

    pub fn from_comm(comm: &CommStructure) -> Self {
        match comm.kind() {
            CommKind::Undirected => WiringSpec::Undirected {
                edges: comm.edges().expect("undirected structures list their edges"),
            },
            CommKind::Generalized => WiringSpec::Generalized { r: comm.r_a().clone() },
            CommKind::Directed => WiringSpec::Directed {
                r_a: comm.r_a().clone(),
                r_c: comm.r_c().clone(),
            },
        }
    }
}

fn check_rows(m: &DMatrix<f64>, n_agents: usize, name: &str) -> Result<()> {
    if m.nrows() != n_agents {
        return Err(Error::InvalidScenario(format!(
            "{name} has {} rows for {n_agents} agents",
            m.nrows()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Model1 { a: f64, b: f64 },
    Model2 { a: f64, b: f64 },
    Model3 { b: f64 },
    Quadratic {
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        constant: f64,
    },
}

impl ModelSpec {
    pub fn build(&self) -> Result<Objective> {
        match self {
            ModelSpec::Model1 { a, b } => Objective::model1(*a, *b),
            ModelSpec::Model2 { a, b } => Objective::model2(*a, *b),
            ModelSpec::Model3 { b } => {
                if !b.is_finite() {
                    return Err(Error::InvalidParameter(format!("b must be finite, got {b}")));
                }
                Ok(Objective::model3(*b))
            }
            ModelSpec::Quadratic {
                hessian,
                linear,
                constant,
            } => Objective::quadratic(hessian.clone(), linear.clone(), *constant),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Quadratic { linear, .. } => linear.len(),
            _ => 1,
        }
    }

    /// The `b` parameter of the scalar models.
    pub fn b(&self) -> Option<f64> {
        match self {
            ModelSpec::Model1 { b, .. } | ModelSpec::Model2 { b, .. } | ModelSpec::Model3 { b } => Some(*b),
            ModelSpec::Quadratic { .. } => None,
        }
    }
}

/// `normalᵀy + offset`, compared against zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineSpec {
    pub normal: Vec<f64>,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentSpec {
    pub model: ModelSpec,
    pub dynamics: AgentKind,
    pub ineq: Vec<AffineSpec>,
    pub eq: Vec<AffineSpec>,
    pub x0: Vec<f64>,
}

impl AgentSpec {
    pub fn new(model: ModelSpec, dynamics: AgentKind) -> Self {
        let dim = model.dim();
        AgentSpec {
            model,
            dynamics,
            ineq: Vec::new(),
            eq: Vec::new(),
            x0: vec![0.0; dim],
        }
    }

    pub fn with_ineq(mut self, normal: Vec<f64>, offset: f64) -> Self {
        self.ineq.push(AffineSpec { normal, offset });
        self
    }

    pub fn build(&self) -> Result<AgentSystem> {
        let objective = self.model.build()?;
        let constraints = ConstraintSet {
            inequalities: self
                .ineq
                .iter()
                .map(|c| Inequality::Affine {
                    normal: DVector::from_column_slice(&c.normal),
                    offset: c.offset,
                })
                .collect(),
            equalities: self
                .eq
                .iter()
                .map(|c| Equality {
                    normal: DVector::from_column_slice(&c.normal),
                    offset: c.offset,
                })
                .collect(),
        };
        let agent = AgentSystem::new(self.dynamics, objective, constraints)?;
        if self.x0.len() != agent.dim() {
            return Err(Error::DimensionMismatch {
                expected: agent.dim(),
                got: self.x0.len(),
            });
        }
        let init = AgentState {
            x: DVector::from_column_slice(&self.x0),
            lambda: DVector::zeros(agent.n_lambda()),
            mu: DVector::zeros(agent.n_mu()),
        };
        agent.with_initial_state(init)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerSpec {
    pub beta: f64,
    pub feedthrough: bool,
    /// Initial state; empty means zero.
    pub z0: Vec<f64>,
}

impl ControllerSpec {
    pub fn new(beta: f64, feedthrough: bool) -> Self {
        ControllerSpec {
            beta,
            feedthrough,
            z0: Vec::new(),
        }
    }

    pub fn build(&self, dim: usize) -> Result<ControllerSystem> {
        let c = ControllerSystem::new(self.beta, self.feedthrough, dim)?;
        if self.z0.is_empty() {
            Ok(c)
        } else {
            c.with_initial_state(DVector::from_column_slice(&self.z0))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub n_agents: usize,
    pub dim: usize,
    pub wiring: WiringSpec,
    pub density: Option<f64>,
    pub comm_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSpec {
    /// 0-based global agent ids in row order.
    pub agents: Vec<usize>,
    pub wiring: WiringSpec,
    pub controllers: Vec<ControllerSpec>,
    pub density: Option<f64>,
    pub comm_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EventActionSpec {
    Split { groups: Vec<GroupSpec> },
    Replace { group: GroupSpec },
    /// 0-based ids.
    Remove { ids: Vec<usize>, group: GroupSpec },
    Add { agents: Vec<AgentSpec>, group: GroupSpec },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventSpec {
    pub time: f64,
    pub action: EventActionSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub network: NetworkSpec,
    pub agents: Vec<AgentSpec>,
    pub controllers: Vec<ControllerSpec>,
    pub simulation: SimConfig,
    pub events: Vec<EventSpec>,
    /// Comment lines written at the top of the file. Not covered by
    /// [`ScenarioSpec::hash`].
    pub notes: Vec<String>,
}

/// Assembled objects ready for integration.
#[derive(Clone, Debug)]
pub struct BuiltScenario {
    pub network: NetworkSystem,
    pub events: Vec<NetworkEvent>,
    pub config: SimConfig,
}

impl ScenarioSpec {
    fn build_net(agents: &[AgentSpec], wiring: &WiringSpec, controllers: &[ControllerSpec]) -> Result<NetworkSystem> {
        let built = agents.iter().map(|a| a.build()).collect::<Result<Vec<_>>>()?;
        let dim = built.first().map(|a| a.dim()).unwrap_or(1);
        let ctrl = controllers.iter().map(|c| c.build(dim)).collect::<Result<Vec<_>>>()?;
        let comm = wiring.build(agents.len())?;
        NetworkSystem::new(built, ctrl, comm)
    }

    fn check_header(&self) -> Result<()> {
        if self.agents.len() != self.network.n_agents {
            return Err(Error::InvalidScenario(format!(
                "network declares {} agents but {} are listed",
                self.network.n_agents,
                self.agents.len()
            )));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.model.dim() != self.network.dim {
                return Err(Error::InvalidScenario(format!(
                    "agent {} has dimension {}, network dimension is {}",
                    i + 1,
                    a.model.dim(),
                    self.network.dim
                )));
            }
        }
        Ok(())
    }

    /// Builds the network, the events and the simulation config. Any
    /// structural failure reported by [`validate`] is an error here.
    pub fn build(&self) -> Result<BuiltScenario> {
        self.check_header()?;
        self.simulation.validate()?;
        let network = Self::build_net(&self.agents, &self.network.wiring, &self.controllers)?;
        let (events, _) = self.build_events()?;
        Ok(BuiltScenario {
            network,
            events,
            config: self.simulation.clone(),
        })
    }

    /// Events plus the network of every group they create.
    fn build_events(&self) -> Result<(Vec<NetworkEvent>, Vec<GroupNetwork>)> {
        let mut all: Vec<AgentSpec> = self.agents.clone();
        let mut active: Vec<Vec<usize>> = vec![(0..self.agents.len()).collect()];
        let mut events = Vec::new();
        let mut nets = Vec::new();
        let mut last_time = f64::NEG_INFINITY;
        for ev in &self.events {
            let invalid = |reason: String| Error::InvalidEvent { time: ev.time, reason };
            if !(ev.time >= 0.0) || ev.time > self.simulation.t_end {
                return Err(invalid(format!("outside [0, {}]", self.simulation.t_end)));
            }
            if ev.time < last_time {
                return Err(invalid("events must be sorted by time".into()));
            }
            last_time = ev.time;
            let single = |active: &Vec<Vec<usize>>| -> Result<Vec<usize>> {
                if active.len() != 1 {
                    return Err(invalid(format!("event needs one active group, found {}", active.len())));
                }
                Ok(active[0].clone())
            };
            let expect_members = |g: &GroupSpec, expected: &[usize]| -> Result<()> {
                if g.agents != expected {
                    return Err(invalid(format!(
                        "group lists agents {:?}, expected {:?}",
                        one_based(&g.agents),
                        one_based(expected)
                    )));
                }
                Ok(())
            };
            let mut build_group = |g: &GroupSpec, all: &[AgentSpec]| -> Result<Group> {
                let members: Vec<AgentSpec> = g
                    .agents
                    .iter()
                    .map(|&id| all.get(id).cloned().ok_or_else(|| invalid(format!("unknown agent {}", id + 1))))
                    .collect::<Result<_>>()?;
                let net = Self::build_net(&members, &g.wiring, &g.controllers).map_err(|e| invalid(e.to_string()))?;
                let group = Group {
                    agents: g.agents.clone(),
                    comm: net.comm().clone(),
                    controllers: net.controllers().to_vec(),
                };
                nets.push((g.agents.clone(), net));
                Ok(group)
            };
            let action = match &ev.action {
                EventActionSpec::Split { groups } => {
                    let mut given: Vec<usize> = groups.iter().flat_map(|g| g.agents.iter().copied()).collect();
                    given.sort_unstable();
                    let mut current: Vec<usize> = active.iter().flatten().copied().collect();
                    current.sort_unstable();
                    if given != current {
                        return Err(invalid("split groups must partition the active agents".into()));
                    }
                    let built = groups.iter().map(|g| build_group(g, &all)).collect::<Result<Vec<_>>>()?;
                    active = groups.iter().map(|g| g.agents.clone()).collect();
                    EventAction::Split { groups: built }
                }
                EventActionSpec::Replace { group } => {
                    let current = single(&active)?;
                    expect_members(group, &current)?;
                    let g = build_group(group, &all)?;
                    EventAction::ReplaceComm {
                        comm: g.comm,
                        controllers: g.controllers,
                    }
                }
                EventActionSpec::Remove { ids, group } => {
                    let current = single(&active)?;
                    for id in ids {
                        if !current.contains(id) {
                            return Err(invalid(format!("agent {} is not active", id + 1)));
                        }
                    }
                    let keep: Vec<usize> = current.into_iter().filter(|id| !ids.contains(id)).collect();
                    expect_members(group, &keep)?;
                    let g = build_group(group, &all)?;
                    active = vec![keep];
                    EventAction::RemoveAgents {
                        ids: ids.clone(),
                        comm: g.comm,
                        controllers: g.controllers,
                    }
                }
                EventActionSpec::Add { agents, group } => {
                    let mut current = single(&active)?;
                    let first = all.len();
                    all.extend(agents.iter().cloned());
                    current.extend(first..all.len());
                    expect_members(group, &current)?;
                    let g = build_group(group, &all)?;
                    let new_agents = agents.iter().map(|a| a.build()).collect::<Result<Vec<_>>>()?;
                    active = vec![current];
                    EventAction::AddAgents {
                        agents: new_agents,
                        comm: g.comm,
                        controllers: g.controllers,
                    }
                }
            };
            events.push(NetworkEvent { time: ev.time, action });
        }
        Ok((events, nets))
    }

    /// Optimum of the whole network followed by that of every group the
    /// events create, in event order.
    pub fn component_oracles(&self) -> Result<Vec<ComponentOracle>> {
        let built = self.build()?;
        let (_, groups) = self.build_events()?;
        let mut out = vec![ComponentOracle {
            label: "network".into(),
            agent_ids: (0..self.agents.len()).collect(),
            solution: component_oracle(&built.network)?,
        }];
        for (i, (ids, net)) in groups.iter().enumerate() {
            out.push(ComponentOracle {
                label: format!("group {}", i + 1),
                agent_ids: ids.clone(),
                solution: component_oracle(net)?,
            });
        }
        Ok(out)
    }

    /// SHA-256 of the normalized file text without notes, hex encoded.
    pub fn hash(&self) -> String {
        let bare = ScenarioSpec {
            notes: Vec::new(),
            ..self.clone()
        };
        hex::encode(Sha256::digest(bare.to_toml().as_bytes()))
    }
}

/// Comment line opening every file the tool writes, e.g.
/// `# eipnet 0.1.0 trajectory scenario=3f…`.
pub fn file_header(kind: &str, scenario_hash: &str) -> String {
    format!("# eipnet {} {kind} scenario={scenario_hash}", env!("CARGO_PKG_VERSION"))
}

fn is_file_header(note: &str) -> bool {
    note.starts_with("eipnet ") && note.contains(" scenario=")
}

fn one_based(ids: &[usize]) -> Vec<usize> {
    ids.iter().map(|i| i + 1).collect()
}

/// Centralized optimum of one set of agents.
#[derive(Clone, Debug)]
pub struct ComponentOracle {
    pub label: String,
    /// 0-based agent ids.
    pub agent_ids: Vec<usize>,
    pub solution: OracleSolution,
}

/// Outcome of one validation gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GateResult {
    pub name: &'static str,
    pub pass: bool,
    /// Structural gates must pass for the scenario to be integrated at all;
    /// the others only certify convergence.
    pub structural: bool,
    pub reason: String,
}

impl GateResult {
    fn new(name: &'static str, structural: bool, outcome: std::result::Result<String, String>) -> Self {
        match outcome {
            Ok(reason) => GateResult {
                name,
                pass: true,
                structural,
                reason,
            },
            Err(reason) => GateResult {
                name,
                pass: false,
                structural,
                reason,
            },
        }
    }
}

/// Runs every gate and reports each verdict; never fails.
///
/// Gates: `controller-count`, `nullspace`, `well-posed`, `events`
/// (structural), `convergence` and, for directed wiring, `directed-lmi`.
pub fn validate(spec: &ScenarioSpec) -> Vec<GateResult> {
    let n = spec.network.n_agents;
    let mut out = Vec::new();

    let k = spec.network.wiring.n_controllers();
    out.push(GateResult::new(
        "controller-count",
        true,
        if k + 1 >= n {
            Ok(format!("{k} controllers for {n} agents"))
        } else {
            Err(format!(
                "{k} controllers cannot connect {n} agents: at least {} are required",
                n.saturating_sub(1)
            ))
        },
    ));

    let nullspace = spec.network.wiring.matrices(n).map_err(|e| e.to_string()).and_then(|(r_a, r_c)| {
        check_nullspace_property(&r_a).map_err(|f| format!("R_A: {f}"))?;
        check_nullspace_property(&r_c).map_err(|f| format!("R_C: {f}"))?;
        Ok("kernel of the transpose is spanned by the ones vector".to_string())
    });
    out.push(GateResult::new("nullspace", true, nullspace));

    let net = spec.check_header().and_then(|_| {
        if spec.controllers.len() != k {
            return Err(Error::InvalidScenario(format!(
                "wiring has {k} controllers but {} are configured",
                spec.controllers.len()
            )));
        }
        spec.simulation.validate()?;
        ScenarioSpec::build_net(&spec.agents, &spec.network.wiring, &spec.controllers)
    });
    out.push(GateResult::new(
        "well-posed",
        true,
        match &net {
            Ok(net) => Ok(format!("loop condition number {:.3e}", net.loop_condition())),
            Err(e) => Err(e.to_string()),
        },
    ));

    let events = spec.build_events();
    out.push(GateResult::new(
        "events",
        true,
        match &events {
            Ok((evs, _)) => Ok(format!("{} event{}", evs.len(), if evs.len() == 1 { "" } else { "s" })),
            Err(e) => Err(e.to_string()),
        },
    ));

    let mut directed = None;
    let convergence = match &net {
        Err(_) => Err("network could not be assembled".to_string()),
        Ok(net) => {
            let mut nets = vec![("initial network".to_string(), net.clone())];
            if let Ok((_, group_nets)) = &events {
                for (i, (_, g)) in group_nets.iter().enumerate() {
                    nets.push((format!("post-event group {}", i + 1), g.clone()));
                }
            }
            let mut failures = Vec::new();
            for (label, net) in &nets {
                let gate = convergence_gate(net);
                if label == "initial network" {
                    directed = gate.directed.clone();
                }
                if !gate.pass() {
                    let why = if gate.directed.is_some() {
                        "directed matrix conditions fail".to_string()
                    } else {
                        "agents are not all output-strictly passive and the objective sum is not strictly convex"
                            .to_string()
                    };
                    failures.push(format!("{label}: {why}"));
                }
            }
            if failures.is_empty() {
                Ok(format!("{} networks certified", nets.len()))
            } else {
                Err(failures.join("; "))
            }
        }
    };
    out.push(GateResult::new("convergence", false, convergence));

    if spec.network.wiring.kind() == CommKind::Directed {
        out.push(GateResult::new(
            "directed-lmi",
            false,
            match directed {
                Some(cert) if cert.pass() => Ok(format!(
                    "block matrix min eigenvalue {:.3e}",
                    cert.block_eigenvalues.first().copied().unwrap_or(0.0)
                )),
                Some(cert) => Err(format!(
                    "block psd: {}, product condition: {}",
                    cert.block_psd(),
                    cert.product_condition()
                )),
                None => Err("agent indices are not certified".into()),
            },
        ));
    }
    out
}

/// Randomized split experiment with [`DEFAULT_AGENTS`] agents.
pub fn generate_default_scenario(seed: u64) -> Result<ScenarioSpec> {
    generate_split_scenario(DEFAULT_AGENTS, seed)
}

/// Randomized split experiment with `n_agents` scalar agents.
///
/// Each agent draws its model uniformly from {1, 2, 3}, `a ~ U[0, 2]`
/// (floored at [`A_FLOOR`]) and `b ~ U[−2, 2]`. Model 2 agents run the
/// constrained dynamics with `y ≤ 0.5`; the others pick gradient flow or
/// feedthrough (`γ = 1`) with equal probability; all `α = 1`. Controllers
/// have `β = 35` and feedthrough. At `t = 100` the agents split by `b`
/// into an upper and a lower half, each re-wired at the same density.
pub fn generate_split_scenario(n_agents: usize, seed: u64) -> Result<ScenarioSpec> {
    if n_agents < 2 {
        return Err(Error::InvalidParameter("a split scenario needs at least two agents".into()));
    }
    if seed > i64::MAX as u64 {
        return Err(Error::InvalidParameter(format!("seed must be at most {}", i64::MAX)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agents = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let model = rng.random_range(1..=3);
        let a = (2.0 * rng.random::<f64>()).max(A_FLOOR);
        let b = rng.random_range(-2.0..=2.0);
        let spec = match model {
            1 => AgentSpec::new(ModelSpec::Model1 { a, b }, pick_dynamics(&mut rng)),
            2 => AgentSpec::new(ModelSpec::Model2 { a, b }, AgentKind::Constrained { alpha: 1.0 })
                .with_ineq(vec![1.0], -crate::objective::MODEL2_BOUND),
            _ => AgentSpec::new(ModelSpec::Model3 { b }, pick_dynamics(&mut rng)),
        };
        agents.push(spec);
    }
    let comm_seed = rng.random::<u64>() >> 1;
    let comm = random_comm_structure(n_agents, DEFAULT_DENSITY, comm_seed, CommKind::Undirected)?;
    let controllers = vec![ControllerSpec::new(DEFAULT_BETA, true); comm.n_controllers()];

    let mut order: Vec<usize> = (0..n_agents).collect();
    let bs: Vec<f64> = agents.iter().map(|a| a.model.b().unwrap()).collect();
    order.sort_by(|&i, &j| bs[j].total_cmp(&bs[i]).then(i.cmp(&j)));
    let half = n_agents / 2;
    let mut groups = Vec::new();
    for part in [&order[..half], &order[half..]] {
        let mut ids = part.to_vec();
        ids.sort_unstable();
        let group_seed = rng.random::<u64>() >> 1;
        let c = random_comm_structure(ids.len(), DEFAULT_DENSITY, group_seed, CommKind::Undirected)?;
        groups.push(GroupSpec {
            agents: ids,
            wiring: WiringSpec::from_comm(&c),
            controllers: vec![ControllerSpec::new(DEFAULT_BETA, true); c.n_controllers()],
            density: Some(DEFAULT_DENSITY),
            comm_seed: Some(group_seed),
        });
    }
    // keep the shuffle stream independent of group sizes
    order.shuffle(&mut rng);

    Ok(ScenarioSpec {
        network: NetworkSpec {
            n_agents,
            dim: 1,
            wiring: WiringSpec::from_comm(&comm),
            density: Some(DEFAULT_DENSITY),
            comm_seed: Some(comm_seed),
        },
        agents,
        controllers,
        simulation: SimConfig {
            t_end: DEFAULT_T_END,
            dt: 1e-3,
            method: Method::Rk4,
            record_every: 100,
            seed,
        },
        events: vec![EventSpec {
            time: DEFAULT_SPLIT_TIME,
            action: EventActionSpec::Split { groups },
        }],
        notes: vec![
            format!("randomized split experiment, {n_agents} agents, seed {seed}, ChaCha8 stream"),
            "model ~ U{1,2,3}; a = max(U[0,2], 0.05); b ~ U[-2,2]".into(),
            "model 2: constrained, y <= 0.5; models 1 and 3: gradient_flow or feedthrough (gamma = 1), p = 1/2".into(),
            "alpha = 1; beta = 35 with feedthrough; undirected wiring at density 0.1".into(),
            "initial states zero; split at t = 100 into the upper and lower halves by b, re-wired at density 0.1"
                .into(),
        ],
    })
}

fn pick_dynamics<R: Rng>(rng: &mut R) -> AgentKind {
    if rng.random::<bool>() {
        AgentKind::GradientFlow { alpha: 1.0 }
    } else {
        AgentKind::Feedthrough { alpha: 1.0, gamma: 1.0 }
    }
}

// ---------------------------------------------------------------- file format

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileScenario {
    network: FileNetwork,
    agents: FileAgents,
    controllers: FileControllers,
    simulation: FileSimulation,
    #[serde(default)]
    event: Vec<FileEvent>,
}

#[derive(Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum FileKind {
    Undirected,
    Generalized,
    Directed,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileNetwork {
    n_agents: usize,
    dim: usize,
    kind: FileKind,
    edges: Option<Vec<[usize; 2]>>,
    r: Option<Vec<Vec<f64>>>,
    r_a: Option<Vec<Vec<f64>>>,
    r_c: Option<Vec<Vec<f64>>>,
    density: Option<f64>,
    comm_seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileAgents {
    list: Vec<FileAgent>,
}

#[derive(Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum FileModel {
    Model1,
    Model2,
    Model3,
    Quadratic,
}

#[derive(Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum FileDynamics {
    GradientFlow,
    Feedthrough,
    Constrained,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileAgent {
    model: FileModel,
    a: Option<f64>,
    b: Option<f64>,
    hessian: Option<Vec<Vec<f64>>>,
    linear: Option<Vec<f64>>,
    constant: Option<f64>,
    dynamics: FileDynamics,
    alpha: f64,
    gamma: Option<f64>,
    #[serde(default)]
    ineq: Vec<FileAffine>,
    #[serde(default)]
    eq: Vec<FileAffine>,
    x0: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileAffine {
    normal: Vec<f64>,
    offset: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileControllers {
    beta: Vec<f64>,
    feedthrough: Vec<bool>,
    z0: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum FileMethod {
    Rk4,
    Euler,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileSimulation {
    t_end: f64,
    dt: f64,
    method: Option<FileMethod>,
    record_every: Option<usize>,
    seed: Option<u64>,
}

#[derive(Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum FileAction {
    Split,
    Replace,
    Remove,
    Add,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEvent {
    time: f64,
    action: FileAction,
    remove: Option<Vec<usize>>,
    add: Option<Vec<FileAgent>>,
    #[serde(default)]
    group: Vec<FileGroup>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileGroup {
    agents: Vec<usize>,
    kind: FileKind,
    edges: Option<Vec<[usize; 2]>>,
    r: Option<Vec<Vec<f64>>>,
    r_a: Option<Vec<Vec<f64>>>,
    r_c: Option<Vec<Vec<f64>>>,
    density: Option<f64>,
    comm_seed: Option<u64>,
    beta: Vec<f64>,
    feedthrough: Vec<bool>,
    z0: Option<Vec<Vec<f64>>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidScenario(msg.into())
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let k = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != k) {
        return Err(bad(format!("{what}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(n, k, |i, j| rows[i][j]))
}

fn wiring_from_file(
    kind: FileKind,
    edges: &Option<Vec<[usize; 2]>>,
    r: &Option<Vec<Vec<f64>>>,
    r_a: &Option<Vec<Vec<f64>>>,
    r_c: &Option<Vec<Vec<f64>>>,
    n_agents: usize,
    ctx: &str,
) -> Result<WiringSpec> {
    let present = [edges.is_some(), r.is_some(), r_a.is_some(), r_c.is_some()];
    let expected = match kind {
        FileKind::Undirected => [true, false, false, false],
        FileKind::Generalized => [false, true, false, false],
        FileKind::Directed => [false, false, true, true],
    };
    if present != expected {
        return Err(bad(format!(
            "{ctx}: undirected wiring takes `edges`, generalized takes `r`, directed takes `r_a` and `r_c`"
        )));
    }
    let empty_ok = |m: DMatrix<f64>| -> DMatrix<f64> {
        if m.nrows() == 0 {
            DMatrix::zeros(n_agents, 0)
        } else {
            m
        }
    };
    Ok(match kind {
        FileKind::Undirected => WiringSpec::Undirected {
            edges: edges.as_ref().unwrap().iter().map(|e| (e[0], e[1])).collect(),
        },
        FileKind::Generalized => WiringSpec::Generalized {
            r: empty_ok(rows_to_matrix(r.as_ref().unwrap(), ctx)?),
        },
        FileKind::Directed => WiringSpec::Directed {
            r_a: empty_ok(rows_to_matrix(r_a.as_ref().unwrap(), ctx)?),
            r_c: empty_ok(rows_to_matrix(r_c.as_ref().unwrap(), ctx)?),
        },
    })
}

fn controllers_from_file(beta: &[f64], feedthrough: &[bool], z0: &Option<Vec<Vec<f64>>>, ctx: &str) -> Result<Vec<ControllerSpec>> {
    if beta.len() != feedthrough.len() {
        return Err(bad(format!(
            "{ctx}: {} beta values but {} feedthrough flags",
            beta.len(),
            feedthrough.len()
        )));
    }
    if let Some(z) = z0 {
        if z.len() != beta.len() {
            return Err(bad(format!("{ctx}: {} initial states for {} controllers", z.len(), beta.len())));
        }
    }
    Ok(beta
        .iter()
        .zip(feedthrough)
        .enumerate()
        .map(|(k, (&beta, &feedthrough))| ControllerSpec {
            beta,
            feedthrough,
            z0: z0.as_ref().map(|z| z[k].clone()).unwrap_or_default(),
        })
        .collect())
}

fn agent_from_file(a: FileAgent, ctx: &str) -> Result<AgentSpec> {
    let need = |v: Option<f64>, name: &str| v.ok_or_else(|| bad(format!("{ctx}: missing `{name}`")));
    let scalar_only = a.hessian.is_none() && a.linear.is_none() && a.constant.is_none();
    let model = match a.model {
        FileModel::Model1 | FileModel::Model2 if scalar_only => {
            let (av, bv) = (need(a.a, "a")?, need(a.b, "b")?);
            if matches!(a.model, FileModel::Model1) {
                ModelSpec::Model1 { a: av, b: bv }
            } else {
                ModelSpec::Model2 { a: av, b: bv }
            }
        }
        FileModel::Model3 if scalar_only && a.a.is_none() => ModelSpec::Model3 { b: need(a.b, "b")? },
        FileModel::Quadratic if a.a.is_none() && a.b.is_none() => {
            let hessian = rows_to_matrix(a.hessian.as_ref().ok_or_else(|| bad(format!("{ctx}: missing `hessian`")))?, ctx)?;
            let linear = DVector::from_vec(a.linear.clone().ok_or_else(|| bad(format!("{ctx}: missing `linear`")))?);
            ModelSpec::Quadratic {
                hessian,
                linear,
                constant: a.constant.unwrap_or(0.0),
            }
        }
        _ => return Err(bad(format!("{ctx}: parameters do not match the model"))),
    };
    let dynamics = match a.dynamics {
        FileDynamics::GradientFlow => AgentKind::GradientFlow { alpha: a.alpha },
        FileDynamics::Feedthrough => AgentKind::Feedthrough {
            alpha: a.alpha,
            gamma: a.gamma.ok_or_else(|| bad(format!("{ctx}: feedthrough dynamics need `gamma`")))?,
        },
        FileDynamics::Constrained => AgentKind::Constrained { alpha: a.alpha },
    };
    if !matches!(a.dynamics, FileDynamics::Feedthrough) && a.gamma.is_some_and(|g| g != 0.0) {
        return Err(bad(format!("{ctx}: only feedthrough dynamics take a nonzero `gamma`")));
    }
    let dim = model.dim();
    let affine = |cs: Vec<FileAffine>| -> Vec<AffineSpec> {
        cs.into_iter()
            .map(|c| AffineSpec {
                normal: c.normal,
                offset: c.offset,
            })
            .collect()
    };
    Ok(AgentSpec {
        model,
        dynamics,
        ineq: affine(a.ineq),
        eq: affine(a.eq),
        x0: a.x0.unwrap_or_else(|| vec![0.0; dim]),
    })
}

/// Global agent ids of a group and its network.
type GroupNetwork = (Vec<usize>, NetworkSystem);

fn group_from_file(g: FileGroup, ctx: &str) -> Result<GroupSpec> {
    if g.agents.contains(&0) {
        return Err(bad(format!("{ctx}: agent ids are 1-based")));
    }
    Ok(GroupSpec {
        wiring: wiring_from_file(g.kind, &g.edges, &g.r, &g.r_a, &g.r_c, g.agents.len(), ctx)?,
        controllers: controllers_from_file(&g.beta, &g.feedthrough, &g.z0, ctx)?,
        agents: g.agents.iter().map(|id| id - 1).collect(),
        density: g.density,
        comm_seed: g.comm_seed,
    })
}

/// Parses scenario text. Syntax errors and unknown keys give
/// [`Error::Parse`]; inconsistent content gives [`Error::InvalidScenario`].
pub fn parse_scenario(text: &str) -> Result<ScenarioSpec> {
    let file: FileScenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let n = file.network.n_agents;
    let network = NetworkSpec {
        n_agents: n,
        dim: file.network.dim,
        wiring: wiring_from_file(
            file.network.kind,
            &file.network.edges,
            &file.network.r,
            &file.network.r_a,
            &file.network.r_c,
            n,
            "network",
        )?,
        density: file.network.density,
        comm_seed: file.network.comm_seed,
    };
    let agents = file
        .agents
        .list
        .into_iter()
        .enumerate()
        .map(|(i, a)| agent_from_file(a, &format!("agent {}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let controllers = controllers_from_file(
        &file.controllers.beta,
        &file.controllers.feedthrough,
        &file.controllers.z0,
        "controllers",
    )?;
    let s = file.simulation;
    let simulation = SimConfig {
        t_end: s.t_end,
        dt: s.dt,
        method: match s.method.unwrap_or(FileMethod::Rk4) {
            FileMethod::Rk4 => Method::Rk4,
            FileMethod::Euler => Method::Euler,
        },
        record_every: s.record_every.unwrap_or(1),
        seed: s.seed.unwrap_or(0),
    };
    let mut events = Vec::with_capacity(file.event.len());
    for (e_idx, ev) in file.event.into_iter().enumerate() {
        let ctx = format!("event {}", e_idx + 1);
        let mut groups = ev
            .group
            .into_iter()
            .enumerate()
            .map(|(g, fg)| group_from_file(fg, &format!("{ctx} group {}", g + 1)))
            .collect::<Result<Vec<_>>>()?;
        let is = |a: FileAction| std::mem::discriminant(&ev.action) == std::mem::discriminant(&a);
        if ev.remove.is_some() && !is(FileAction::Remove) {
            return Err(bad(format!("{ctx}: `remove` belongs to remove events")));
        }
        if ev.add.is_some() && !is(FileAction::Add) {
            return Err(bad(format!("{ctx}: `add` belongs to add events")));
        }
        let one = |groups: &mut Vec<GroupSpec>| -> Result<GroupSpec> {
            if groups.len() != 1 {
                return Err(bad(format!("{ctx}: expected exactly one group, found {}", groups.len())));
            }
            Ok(groups.remove(0))
        };
        let action = match ev.action {
            FileAction::Split => {
                if groups.is_empty() {
                    return Err(bad(format!("{ctx}: split needs at least one group")));
                }
                EventActionSpec::Split { groups }
            }
            FileAction::Replace => EventActionSpec::Replace { group: one(&mut groups)? },
            FileAction::Remove => {
                let ids = ev.remove.ok_or_else(|| bad(format!("{ctx}: missing `remove`")))?;
                if ids.contains(&0) {
                    return Err(bad(format!("{ctx}: agent ids are 1-based")));
                }
                EventActionSpec::Remove {
                    ids: ids.iter().map(|id| id - 1).collect(),
                    group: one(&mut groups)?,
                }
            }
            FileAction::Add => {
                let agents = ev
                    .add
                    .ok_or_else(|| bad(format!("{ctx}: missing `add`")))?
                    .into_iter()
                    .enumerate()
                    .map(|(i, a)| agent_from_file(a, &format!("{ctx} added agent {}", i + 1)))
                    .collect::<Result<Vec<_>>>()?;
                EventActionSpec::Add {
                    agents,
                    group: one(&mut groups)?,
                }
            }
        };
        events.push(EventSpec { time: ev.time, action });
    }
    let spec = ScenarioSpec {
        network,
        agents,
        controllers,
        simulation,
        events,
        notes: text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .map(|l| l.trim_start_matches('#').trim().to_string())
            .filter(|l| !is_file_header(l))
            .collect(),
    };
    spec.check_header()?;
    Ok(spec)
}

pub fn load_scenario(path: &Path) -> Result<ScenarioSpec> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

fn num_list(xs: &[f64]) -> String {
    let items: Vec<String> = xs.iter().map(|&x| num(x)).collect();
    format!("[{}]", items.join(", "))
}

fn matrix_rows(m: &DMatrix<f64>) -> String {
    let mut s = String::from("[\n");
    for row in m.row_iter() {
        let v: Vec<f64> = row.iter().copied().collect();
        let _ = writeln!(s, "  {},", num_list(&v));
    }
    s.push(']');
    s
}

fn write_wiring(out: &mut String, w: &WiringSpec) {
    match w {
        WiringSpec::Undirected { edges } => {
            let _ = writeln!(out, "kind = \"undirected\"");
            out.push_str("edges = [");
            for (k, (i, j)) in edges.iter().enumerate() {
                if k % 10 == 0 {
                    out.push_str("\n ");
                }
                let _ = write!(out, " [{i}, {j}],");
            }
            if !edges.is_empty() {
                out.push('\n');
            }
            out.push_str("]\n");
        }
        WiringSpec::Generalized { r } => {
            let _ = writeln!(out, "kind = \"generalized\"");
            let _ = writeln!(out, "r = {}", matrix_rows(r));
        }
        WiringSpec::Directed { r_a, r_c } => {
            let _ = writeln!(out, "kind = \"directed\"");
            let _ = writeln!(out, "r_a = {}", matrix_rows(r_a));
            let _ = writeln!(out, "r_c = {}", matrix_rows(r_c));
        }
    }
}

fn write_optional_meta(out: &mut String, density: Option<f64>, comm_seed: Option<u64>) {
    if let Some(d) = density {
        let _ = writeln!(out, "density = {}", num(d));
    }
    if let Some(s) = comm_seed {
        let _ = writeln!(out, "comm_seed = {s}");
    }
}

fn write_controllers(out: &mut String, cs: &[ControllerSpec]) {
    let betas: Vec<f64> = cs.iter().map(|c| c.beta).collect();
    let _ = writeln!(out, "beta = {}", num_list(&betas));
    let flags: Vec<&str> = cs.iter().map(|c| if c.feedthrough { "true" } else { "false" }).collect();
    let _ = writeln!(out, "feedthrough = [{}]", flags.join(", "));
    if cs.iter().any(|c| !c.z0.is_empty()) {
        let rows: Vec<String> = cs.iter().map(|c| num_list(&c.z0)).collect();
        let _ = writeln!(out, "z0 = [{}]", rows.join(", "));
    }
}

fn agent_inline(a: &AgentSpec) -> String {
    let mut parts = Vec::new();
    match &a.model {
        ModelSpec::Model1 { a, b } => parts.push(format!("model = \"model1\", a = {}, b = {}", num(*a), num(*b))),
        ModelSpec::Model2 { a, b } => parts.push(format!("model = \"model2\", a = {}, b = {}", num(*a), num(*b))),
        ModelSpec::Model3 { b } => parts.push(format!("model = \"model3\", b = {}", num(*b))),
        ModelSpec::Quadratic {
            hessian,
            linear,
            constant,
        } => {
            let rows: Vec<String> = hessian
                .row_iter()
                .map(|r| num_list(&r.iter().copied().collect::<Vec<_>>()))
                .collect();
            parts.push(format!(
                "model = \"quadratic\", hessian = [{}], linear = {}, constant = {}",
                rows.join(", "),
                num_list(linear.as_slice()),
                num(*constant)
            ));
        }
    }
    let (dyn_name, alpha, gamma) = match a.dynamics {
        AgentKind::GradientFlow { alpha } => ("gradient_flow", alpha, 0.0),
        AgentKind::Feedthrough { alpha, gamma } => ("feedthrough", alpha, gamma),
        AgentKind::Constrained { alpha } => ("constrained", alpha, 0.0),
    };
    parts.push(format!(
        "dynamics = \"{dyn_name}\", alpha = {}, gamma = {}",
        num(alpha),
        num(gamma)
    ));
    let affine = |cs: &[AffineSpec]| -> String {
        let items: Vec<String> = cs
            .iter()
            .map(|c| format!("{{ normal = {}, offset = {} }}", num_list(&c.normal), num(c.offset)))
            .collect();
        format!("[{}]", items.join(", "))
    };
    if !a.ineq.is_empty() {
        parts.push(format!("ineq = {}", affine(&a.ineq)));
    }
    if !a.eq.is_empty() {
        parts.push(format!("eq = {}", affine(&a.eq)));
    }
    parts.push(format!("x0 = {}", num_list(&a.x0)));
    format!("{{ {} }}", parts.join(", "))
}

fn write_agent_list(out: &mut String, agents: &[AgentSpec]) {
    out.push_str("[\n");
    for a in agents {
        let _ = writeln!(out, "  {},", agent_inline(a));
    }
    out.push(']');
}

impl ScenarioSpec {
    /// Normalized, fully expanded scenario text. Deterministic: equal specs
    /// give byte-identical output.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for note in &self.notes {
            let _ = writeln!(out, "# {note}");
        }
        if !self.notes.is_empty() {
            out.push('\n');
        }
        out.push_str("[network]\n");
        let _ = writeln!(out, "n_agents = {}", self.network.n_agents);
        let _ = writeln!(out, "dim = {}", self.network.dim);
        write_wiring(&mut out, &self.network.wiring);
        write_optional_meta(&mut out, self.network.density, self.network.comm_seed);

        out.push_str("\n[agents]\nlist = ");
        write_agent_list(&mut out, &self.agents);
        out.push('\n');

        out.push_str("\n[controllers]\n");
        write_controllers(&mut out, &self.controllers);

        let s = &self.simulation;
        out.push_str("\n[simulation]\n");
        let _ = writeln!(out, "t_end = {}", num(s.t_end));
        let _ = writeln!(out, "dt = {}", num(s.dt));
        let _ = writeln!(
            out,
            "method = \"{}\"",
            match s.method {
                Method::Rk4 => "rk4",
                Method::Euler => "euler",
            }
        );
        let _ = writeln!(out, "record_every = {}", s.record_every);
        let _ = writeln!(out, "seed = {}", s.seed);

        for ev in &self.events {
            out.push_str("\n[[event]]\n");
            let _ = writeln!(out, "time = {}", num(ev.time));
            let groups: Vec<&GroupSpec> = match &ev.action {
                EventActionSpec::Split { groups } => {
                    out.push_str("action = \"split\"\n");
                    groups.iter().collect()
                }
                EventActionSpec::Replace { group } => {
                    out.push_str("action = \"replace\"\n");
                    vec![group]
                }
                EventActionSpec::Remove { ids, group } => {
                    out.push_str("action = \"remove\"\n");
                    let ids: Vec<String> = ids.iter().map(|i| (i + 1).to_string()).collect();
                    let _ = writeln!(out, "remove = [{}]", ids.join(", "));
                    vec![group]
                }
                EventActionSpec::Add { agents, group } => {
                    out.push_str("action = \"add\"\nadd = ");
                    write_agent_list(&mut out, agents);
                    out.push('\n');
                    vec![group]
                }
            };
            for g in groups {
                out.push_str("\n[[event.group]]\n");
                let ids: Vec<String> = g.agents.iter().map(|i| (i + 1).to_string()).collect();
                let _ = writeln!(out, "agents = [{}]", ids.join(", "));
                write_wiring(&mut out, &g.wiring);
                write_optional_meta(&mut out, g.density, g.comm_seed);
                write_controllers(&mut out, &g.controllers);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::components_of;

    fn two_agent() -> ScenarioSpec {
        ScenarioSpec {
            network: NetworkSpec {
                n_agents: 2,
                dim: 1,
                wiring: WiringSpec::Undirected { edges: vec![(1, 2)] },
                density: None,
                comm_seed: None,
            },
            agents: vec![
                AgentSpec::new(ModelSpec::Model1 { a: 1.0, b: -2.0 }, AgentKind::GradientFlow { alpha: 1.0 }),
                AgentSpec::new(ModelSpec::Model1 { a: 1.0, b: 2.0 }, AgentKind::GradientFlow { alpha: 1.0 }),
            ],
            controllers: vec![ControllerSpec::new(5.0, true)],
            simulation: SimConfig {
                t_end: 10.0,
                dt: 1e-3,
                method: Method::Rk4,
                record_every: 10,
                seed: 0,
            },
            events: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn gate<'a>(gates: &'a [GateResult], name: &str) -> &'a GateResult {
        gates.iter().find(|g| g.name == name).unwrap()
    }

    #[test]
    fn default_scenario_structure() {
        let s = generate_default_scenario(1).unwrap();
        assert_eq!(s.agents.len(), 100);
        let comm = s.network.wiring.build(100).unwrap();
        assert!(check_nullspace_property(comm.r_a()).is_ok());
        let EventActionSpec::Split { groups } = &s.events[0].action else {
            panic!("expected a split")
        };
        assert_eq!(groups.len(), 2);
        for g in groups {
            assert_eq!(g.agents.len(), 50);
            let c = g.wiring.build(50).unwrap();
            assert_eq!(components_of(c.r_a()).len(), 1);
        }
        let b_min_top = groups[0].agents.iter().map(|&i| s.agents[i].model.b().unwrap()).fold(f64::INFINITY, f64::min);
        let b_max_bottom = groups[1].agents.iter().map(|&i| s.agents[i].model.b().unwrap()).fold(f64::NEG_INFINITY, f64::max);
        assert!(b_min_top >= b_max_bottom);
    }

    #[test]
    fn default_scenario_parameters_for_several_seeds() {
        for seed in 0..5 {
            let s = generate_default_scenario(seed).unwrap();
            assert!(s.controllers.iter().all(|c| c.beta == 35.0 && c.feedthrough));
            for a in &s.agents {
                assert_eq!(a.dynamics.alpha(), 1.0);
                match a.dynamics {
                    AgentKind::Feedthrough { gamma, .. } => assert_eq!(gamma, 1.0),
                    AgentKind::Constrained { .. } => assert!(matches!(a.model, ModelSpec::Model2 { .. })),
                    AgentKind::GradientFlow { .. } => {}
                }
                match a.model {
                    ModelSpec::Model1 { a, b } | ModelSpec::Model2 { a, b } => {
                        assert!((A_FLOOR..=2.0).contains(&a) && (-2.0..=2.0).contains(&b));
                    }
                    ModelSpec::Model3 { b } => assert!((-2.0..=2.0).contains(&b)),
                    ModelSpec::Quadratic { .. } => panic!("unexpected model"),
                }
            }
            let gates = validate(&s);
            assert!(gates.iter().all(|g| !g.structural || g.pass), "{gates:?}");
            assert!(gate(&gates, "convergence").pass);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_default_scenario(3).unwrap();
        let b = generate_default_scenario(3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_toml(), b.to_toml());
        assert_ne!(a.agents, generate_default_scenario(4).unwrap().agents);
    }

    #[test]
    fn round_trip() {
        let s = generate_default_scenario(1).unwrap();
        let text = s.to_toml();
        let back = parse_scenario(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_toml(), text);
        assert_eq!(back.hash(), s.hash());
        assert_eq!(s.hash().len(), 64);
    }

    #[test]
    fn header_line_is_skipped_and_notes_do_not_change_the_hash() {
        let s = generate_split_scenario(6, 2).unwrap();
        let text = format!("{}\n{}", file_header("scenario", &s.hash()), s.to_toml());
        let back = parse_scenario(&text).unwrap();
        assert_eq!(back, s);
        let mut quiet = s.clone();
        quiet.notes.clear();
        assert_eq!(quiet.hash(), s.hash());
        quiet.agents[0].x0 = vec![1.0];
        assert_ne!(quiet.hash(), s.hash());
    }

    #[test]
    fn round_trip_of_every_construct() {
        let mut s = two_agent();
        s.agents[0].x0 = vec![0.25];
        s.agents.push(
            AgentSpec::new(ModelSpec::Model2 { a: 0.5, b: 0.1 }, AgentKind::Constrained { alpha: 2.0 })
                .with_ineq(vec![1.0], -0.5),
        );
        s.agents[2].eq.push(AffineSpec {
            normal: vec![1.0],
            offset: -0.2,
        });
        s.network.n_agents = 3;
        s.network.wiring = WiringSpec::Generalized {
            r: DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 2.0, -1.0, -1.0, 1.0]),
        };
        s.controllers = vec![ControllerSpec::new(1.0, false), ControllerSpec {
            beta: 2.0,
            feedthrough: true,
            z0: vec![0.5],
        }];
        let group = |agents: Vec<usize>| GroupSpec {
            wiring: WiringSpec::Undirected {
                edges: (1..agents.len()).map(|i| (i, i + 1)).collect(),
            },
            controllers: vec![ControllerSpec::new(1.0, true); agents.len() - 1],
            agents,
            density: None,
            comm_seed: Some(5),
        };
        s.events = vec![
            EventSpec {
                time: 1.0,
                action: EventActionSpec::Replace { group: group(vec![0, 1, 2]) },
            },
            EventSpec {
                time: 2.0,
                action: EventActionSpec::Remove {
                    ids: vec![1],
                    group: group(vec![0, 2]),
                },
            },
            EventSpec {
                time: 3.0,
                action: EventActionSpec::Add {
                    agents: vec![AgentSpec::new(ModelSpec::Model3 { b: -0.3 }, AgentKind::Feedthrough { alpha: 1.0, gamma: 0.2 })],
                    group: group(vec![0, 2, 3]),
                },
            },
            EventSpec {
                time: 4.0,
                action: EventActionSpec::Split {
                    groups: vec![group(vec![0, 3]), GroupSpec {
                        agents: vec![2],
                        wiring: WiringSpec::Undirected { edges: vec![] },
                        controllers: vec![],
                        density: None,
                        comm_seed: None,
                    }],
                },
            },
        ];
        let text = s.to_toml();
        let back = parse_scenario(&text).unwrap();
        assert_eq!(back, s, "{text}");
        let gates = validate(&s);
        assert!(gates.iter().all(|g| g.pass), "{gates:?}");
        let built = back.build().unwrap();
        assert_eq!(built.events.len(), 4);
        crate::simulate::integrate(&built.network, &built.config, &built.events).unwrap();

        let directed = WiringSpec::Directed {
            r_a: DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
            r_c: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        };
        let mut d = two_agent();
        d.network.wiring = directed;
        let back = parse_scenario(&d.to_toml()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn too_few_controllers_fails_gate() {
        let mut s = two_agent();
        s.network.n_agents = 4;
        s.agents = (0..4)
            .map(|i| AgentSpec::new(ModelSpec::Model1 { a: 1.0, b: i as f64 }, AgentKind::GradientFlow { alpha: 1.0 }))
            .collect();
        s.network.wiring = WiringSpec::Undirected {
            edges: vec![(1, 2), (3, 4)],
        };
        s.controllers = vec![ControllerSpec::new(1.0, true); 2];
        let gates = validate(&s);
        let g = gate(&gates, "controller-count");
        assert!(!g.pass && g.structural);
        assert!(g.reason.contains("at least 3"));
        assert!(!gate(&gates, "nullspace").pass);
        assert!(s.build().is_err());
    }

    #[test]
    fn directed_with_equal_matrices_reduces_to_undirected() {
        let e = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 1.0, -1.0, 0.0, 1.0]);
        let mut s = two_agent();
        s.network.n_agents = 3;
        s.agents = (0..3)
            .map(|i| AgentSpec::new(ModelSpec::Model1 { a: 1.0, b: i as f64 }, AgentKind::GradientFlow { alpha: 1.0 }))
            .collect();
        s.network.wiring = WiringSpec::Directed { r_a: e.clone(), r_c: e };
        s.controllers = vec![ControllerSpec::new(1.0, false); 2];
        let gates = validate(&s);
        assert!(gate(&gates, "directed-lmi").pass, "{gates:?}");
        assert!(gate(&gates, "convergence").pass);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_scenario("not toml ["), Err(Error::Parse(_))));
        let mut text = two_agent().to_toml();
        text = text.replace("[simulation]\n", "[simulation]\nbogus = 1\n");
        assert!(matches!(parse_scenario(&text), Err(Error::Parse(_))));
        let text = two_agent().to_toml().replace("n_agents = 2", "n_agents = 3");
        assert!(matches!(parse_scenario(&text), Err(Error::InvalidScenario(_))));
        let text = two_agent().to_toml().replace("model = \"model1\", a = 1.0, ", "model = \"model3\", a = 1.0, ");
        assert!(matches!(parse_scenario(&text), Err(Error::InvalidScenario(_))));
    }

    #[test]
    fn bad_event_fails_events_gate() {
        let mut s = two_agent();
        s.events = vec![EventSpec {
            time: 1.0,
            action: EventActionSpec::Remove {
                ids: vec![5],
                group: GroupSpec {
                    agents: vec![0],
                    wiring: WiringSpec::Undirected { edges: vec![] },
                    controllers: vec![],
                    density: None,
                    comm_seed: None,
                },
            },
        }];
        let gates = validate(&s);
        assert!(!gate(&gates, "events").pass);
        assert!(matches!(s.build(), Err(Error::InvalidEvent { .. })));
    }

    #[test]
    fn advisory_gate_failure_still_builds() {
        // gradient flow on a merely convex (affine) objective
        let mut s = two_agent();
        s.agents = vec![
            AgentSpec::new(ModelSpec::Model1 { a: 0.0, b: 1.0 }, AgentKind::GradientFlow { alpha: 1.0 }),
            AgentSpec::new(ModelSpec::Model1 { a: 0.0, b: -1.0 }, AgentKind::GradientFlow { alpha: 1.0 }),
        ];
        let gates = validate(&s);
        let g = gate(&gates, "convergence");
        assert!(!g.pass && !g.structural);
        assert!(s.build().is_ok());
    }
}
