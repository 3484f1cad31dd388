//! Fixed-step integration of the closed loop with network events.
//!
//! Multipliers are clamped at zero after every accepted step. Events are
//! applied at the step boundary nearest to their timestamp; surviving
//! agents keep their state, controllers created by an event start from
//! their own initial state.

use std::io::Write;

use nalgebra::DVector;

use crate::certify::{centralized_solve, kkt_residual, OracleSolution};
use crate::dynamics::{AgentSystem, ControllerSystem, NetworkSystem};
use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::{ConstraintSet, Objective};
use crate::topology::CommStructure;

/// States whose infinity norm exceeds this are treated as divergent.
pub const DIVERGENCE_BOUND: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Rk4,
    Euler,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub t_end: f64,
    pub dt: f64,
    pub method: Method,
    pub record_every: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            t_end: 10.0,
            dt: 1e-3,
            method: Method::Rk4,
            record_every: 1,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::InvalidParameter(format!("t_end must be >= 0, got {}", self.t_end)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParameter("record_every must be >= 1".into()));
        }
        Ok(())
    }

    fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// Agents and wiring of one connected group after an event.
#[derive(Clone, Debug)]
pub struct Group {
    /// Global agent ids, in the row order of `comm`.
    pub agents: Vec<usize>,
    pub comm: CommStructure,
    pub controllers: Vec<ControllerSystem>,
}

#[derive(Clone, Debug)]
pub enum EventAction {
    /// Partition the active agents into new groups.
    Split { groups: Vec<Group> },
    /// New communication structure for the single active group.
    ReplaceComm {
        comm: CommStructure,
        controllers: Vec<ControllerSystem>,
    },
    /// Drop agents; `comm` wires the remaining agents in their current order.
    RemoveAgents {
        ids: Vec<usize>,
        comm: CommStructure,
        controllers: Vec<ControllerSystem>,
    },
    /// Append agents; `comm` wires the current agents followed by the new ones.
    AddAgents {
        agents: Vec<AgentSystem>,
        comm: CommStructure,
        controllers: Vec<ControllerSystem>,
    },
}

#[derive(Clone, Debug)]
pub struct NetworkEvent {
    pub time: f64,
    pub action: EventAction,
}

/// Recorded samples of one connected component between two events.
#[derive(Clone, Debug)]
pub struct ComponentTrace {
    /// Unique across the trajectory, numbered from 0 in order of creation.
    pub component: usize,
    pub segment: usize,
    /// Global agent ids in network order.
    pub agent_ids: Vec<usize>,
    pub net: NetworkSystem,
    pub oracle: OracleSolution,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Stacked outputs `y` per sample.
    pub outputs: Vec<DVector<f64>>,
    /// `|y_i − ŷ*|` per sample and agent.
    pub errors: Vec<Vec<f64>>,
    /// KKT residual at the mean output with the agents' multipliers.
    pub kkt: Vec<f64>,
}

impl ComponentTrace {
    pub fn max_error(&self, sample: usize) -> f64 {
        self.errors[sample].iter().cloned().fold(0.0, f64::max)
    }

    pub fn terminal_state(&self) -> &DVector<f64> {
        self.states.last().expect("traces hold at least one sample")
    }

    pub fn terminal_max_error(&self) -> f64 {
        self.max_error(self.times.len() - 1)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub components: Vec<ComponentTrace>,
}

impl Trajectory {
    /// Traces active at the end of the run.
    pub fn final_components(&self) -> Vec<&ComponentTrace> {
        let last = self.components.iter().map(|c| c.segment).max().unwrap_or(0);
        self.components.iter().filter(|c| c.segment == last).collect()
    }
}

struct Active {
    agent_ids: Vec<usize>,
    net: NetworkSystem,
    state: DVector<f64>,
    oracle: OracleSolution,
    trace: ComponentTrace,
}

/// Centralized optimum of the agents in `net`.
pub fn component_oracle(net: &NetworkSystem) -> Result<OracleSolution> {
    let objs: Vec<Objective> = net.agents().iter().map(|a| a.objective().clone()).collect();
    let cons: Vec<ConstraintSet> = net.agents().iter().map(|a| a.constraints().clone()).collect();
    centralized_solve(&objs, &cons)
}

fn record(active: &mut Active, t: f64) -> Result<()> {
    let net = &active.net;
    let sig = net.signals(&active.state)?;
    let n = net.dim();
    let lay = net.layout();
    let y_star = &active.oracle.y;
    let errors: Vec<f64> = (0..net.agents().len())
        .map(|i| (sig.y.rows_range(lay.x_range(i)) - y_star).norm())
        .collect();
    let mut mean = DVector::zeros(n);
    for i in 0..net.agents().len() {
        mean += sig.y.rows_range(lay.x_range(i));
    }
    mean /= net.agents().len() as f64;
    let objs: Vec<Objective> = net.agents().iter().map(|a| a.objective().clone()).collect();
    let cons: Vec<ConstraintSet> = net.agents().iter().map(|a| a.constraints().clone()).collect();
    let lambdas: Vec<DVector<f64>> = (0..net.agents().len())
        .map(|i| active.state.rows_range(lay.lambda_range(i)).into_owned())
        .collect();
    let mus: Vec<DVector<f64>> = (0..net.agents().len())
        .map(|i| active.state.rows_range(lay.mu_range(i)).into_owned())
        .collect();
    let kkt = kkt_residual(&objs, &cons, &mean, &lambdas, &mus);
    let tr = &mut active.trace;
    tr.times.push(t);
    tr.states.push(active.state.clone());
    tr.outputs.push(sig.y);
    tr.errors.push(errors);
    tr.kkt.push(kkt);
    Ok(())
}

fn new_active(component: usize, segment: usize, agent_ids: Vec<usize>, net: NetworkSystem, state: DVector<f64>) -> Result<Active> {
    let oracle = component_oracle(&net)?;
    let trace = ComponentTrace {
        component,
        segment,
        agent_ids: agent_ids.clone(),
        net: net.clone(),
        oracle: oracle.clone(),
        times: Vec::new(),
        states: Vec::new(),
        outputs: Vec::new(),
        errors: Vec::new(),
        kkt: Vec::new(),
    };
    Ok(Active {
        agent_ids,
        net,
        state,
        oracle,
        trace,
    })
}

fn step(net: &NetworkSystem, state: &DVector<f64>, dt: f64, method: Method) -> Result<DVector<f64>> {
    let mut next = match method {
        Method::Euler => state + net.closed_loop_rhs(state)? * dt,
        Method::Rk4 => {
            let k1 = net.closed_loop_rhs(state)?;
            let k2 = net.closed_loop_rhs(&(state + &k1 * (0.5 * dt)))?;
            let k3 = net.closed_loop_rhs(&(state + &k2 * (0.5 * dt)))?;
            let k4 = net.closed_loop_rhs(&(state + &k3 * dt))?;
            state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
        }
    };
    let lay = net.layout();
    for idx in lay.lambda_indices() {
        if next[idx] < 0.0 {
            next[idx] = 0.0;
        }
    }
    Ok(next)
}

/// Per-agent block state `(x, λ, μ)` taken from a packed component state.
#[derive(Clone)]
struct Carried {
    agent: AgentSystem,
    x: DVector<f64>,
    lambda: DVector<f64>,
    mu: DVector<f64>,
}

/// Global ids, carried agents, controllers and wiring of a group being formed.
type NewGroup = (Vec<usize>, Vec<Carried>, Vec<ControllerSystem>, CommStructure);

fn carried_agents(actives: &[Active]) -> Vec<(usize, Carried)> {
    let mut out = Vec::new();
    for a in actives {
        let lay = a.net.layout();
        for (i, agent) in a.net.agents().iter().enumerate() {
            out.push((
                a.agent_ids[i],
                Carried {
                    agent: agent.clone(),
                    x: a.state.rows_range(lay.x_range(i)).into_owned(),
                    lambda: a.state.rows_range(lay.lambda_range(i)).into_owned(),
                    mu: a.state.rows_range(lay.mu_range(i)).into_owned(),
                },
            ));
        }
    }
    out
}

fn assemble(carried: Vec<Carried>, controllers: Vec<ControllerSystem>, comm: CommStructure) -> Result<(NetworkSystem, DVector<f64>)> {
    let agents: Vec<AgentSystem> = carried.iter().map(|c| c.agent.clone()).collect();
    let net = NetworkSystem::new(agents, controllers, comm)?;
    let mut state = net.initial_state();
    let lay = net.layout().clone();
    for (i, c) in carried.iter().enumerate() {
        state.rows_range_mut(lay.x_range(i)).copy_from(&c.x);
        state.rows_range_mut(lay.lambda_range(i)).copy_from(&c.lambda);
        state.rows_range_mut(lay.mu_range(i)).copy_from(&c.mu);
    }
    Ok((net, state))
}

fn apply_event(
    actives: Vec<Active>,
    action: &EventAction,
    time: f64,
    segment: usize,
    next_component: &mut usize,
    next_agent_id: &mut usize,
) -> Result<Vec<Active>> {
    let invalid = |reason: String| Error::InvalidEvent { time, reason };
    let carried = carried_agents(&actives);
    let take = |id: usize| -> Result<Carried> {
        carried
            .iter()
            .find(|(gid, _)| *gid == id)
            .map(|(_, c)| c.clone())
            .ok_or_else(|| invalid(format!("agent {} is not active", id + 1)))
    };
    let single = || -> Result<Vec<usize>> {
        if actives.len() != 1 {
            return Err(invalid(format!("event needs one active group, found {}", actives.len())));
        }
        Ok(actives[0].agent_ids.clone())
    };
    let mut groups: Vec<NewGroup> = Vec::new();
    match action {
        EventAction::Split { groups: gs } => {
            let mut seen: Vec<usize> = gs.iter().flat_map(|g| g.agents.iter().copied()).collect();
            seen.sort_unstable();
            let mut all: Vec<usize> = carried.iter().map(|(id, _)| *id).collect();
            all.sort_unstable();
            if seen != all {
                return Err(invalid("split groups must partition the active agents".into()));
            }
            for g in gs {
                let members = g.agents.iter().map(|&id| take(id)).collect::<Result<Vec<_>>>()?;
                groups.push((g.agents.clone(), members, g.controllers.clone(), g.comm.clone()));
            }
        }
        EventAction::ReplaceComm { comm, controllers } => {
            let ids = single()?;
            let members = ids.iter().map(|&id| take(id)).collect::<Result<Vec<_>>>()?;
            groups.push((ids, members, controllers.clone(), comm.clone()));
        }
        EventAction::RemoveAgents { ids, comm, controllers } => {
            let current = single()?;
            for id in ids {
                if !current.contains(id) {
                    return Err(invalid(format!("agent {} is not active", id + 1)));
                }
            }
            let keep: Vec<usize> = current.into_iter().filter(|id| !ids.contains(id)).collect();
            let members = keep.iter().map(|&id| take(id)).collect::<Result<Vec<_>>>()?;
            groups.push((keep, members, controllers.clone(), comm.clone()));
        }
        EventAction::AddAgents { agents, comm, controllers } => {
            let mut ids = single()?;
            let mut members = ids.iter().map(|&id| take(id)).collect::<Result<Vec<_>>>()?;
            for a in agents {
                let init = a.initial_state();
                members.push(Carried {
                    agent: a.clone(),
                    x: init.x.clone(),
                    lambda: init.lambda.clone(),
                    mu: init.mu.clone(),
                });
                ids.push(*next_agent_id);
                *next_agent_id += 1;
            }
            groups.push((ids, members, controllers.clone(), comm.clone()));
        }
    }
    let mut out = Vec::with_capacity(groups.len());
    for (ids, members, controllers, comm) in groups {
        let (net, state) = assemble(members, controllers, comm).map_err(|e| invalid(e.to_string()))?;
        out.push(new_active(*next_component, segment, ids, net, state)?);
        *next_component += 1;
    }
    Ok(out)
}

fn check_finite(state: &DVector<f64>, t: f64) -> Result<()> {
    if state.iter().any(|v| !v.is_finite()) || linalg::inf_norm(state) > DIVERGENCE_BOUND {
        return Err(Error::Diverged { t });
    }
    Ok(())
}

/// Integrates the closed loop from the blocks' initial states.
///
/// Samples are recorded every `record_every` steps, at the final step and on
/// both sides of every event. Errors are measured against each component's
/// oracle optimum, recomputed after every event.
pub fn integrate(net: &NetworkSystem, cfg: &SimConfig, events: &[NetworkEvent]) -> Result<Trajectory> {
    cfg.validate()?;
    for w in events.windows(2) {
        if w[1].time < w[0].time {
            return Err(Error::InvalidEvent {
                time: w[1].time,
                reason: "events must be sorted by time".into(),
            });
        }
    }
    let n_steps = cfg.n_steps();
    let mut event_steps = Vec::with_capacity(events.len());
    for e in events {
        if !(e.time >= 0.0) || e.time > cfg.t_end {
            return Err(Error::InvalidEvent {
                time: e.time,
                reason: format!("outside [0, {}]", cfg.t_end),
            });
        }
        event_steps.push((e.time / cfg.dt).round() as usize);
    }

    let mut traj = Trajectory::default();
    let mut next_component = 1;
    let mut next_agent_id = net.agents().len();
    let mut segment = 0;
    let mut actives = vec![new_active(0, 0, (0..net.agents().len()).collect(), net.clone(), net.initial_state())?];
    for a in actives.iter_mut() {
        check_finite(&a.state, 0.0)?;
        record(a, 0.0)?;
    }
    let mut next_event = 0;
    let mut since_record = 0;
    for k in 0..=n_steps {
        let t = k as f64 * cfg.dt;
        while next_event < events.len() && event_steps[next_event] == k {
            for a in actives.iter_mut() {
                if a.trace.times.last() != Some(&t) {
                    record(a, t)?;
                }
            }
            segment += 1;
            let old = std::mem::take(&mut actives);
            let finished: Vec<ComponentTrace> = old.iter().map(|a| a.trace.clone()).collect();
            actives = apply_event(
                old,
                &events[next_event].action,
                events[next_event].time,
                segment,
                &mut next_component,
                &mut next_agent_id,
            )?;
            traj.components.extend(finished);
            for a in actives.iter_mut() {
                record(a, t)?;
            }
            since_record = 0;
            next_event += 1;
        }
        if k == n_steps {
            break;
        }
        let t_next = (k + 1) as f64 * cfg.dt;
        for a in actives.iter_mut() {
            a.state = step(&a.net, &a.state, cfg.dt, cfg.method)?;
            check_finite(&a.state, t_next)?;
        }
        since_record += 1;
        if since_record == cfg.record_every || k + 1 == n_steps {
            for a in actives.iter_mut() {
                record(a, t_next)?;
            }
            since_record = 0;
        }
    }
    traj.components.extend(actives.into_iter().map(|a| a.trace));
    traj.components.sort_by_key(|c| c.component);
    Ok(traj)
}

/// Packed equilibrium state of one component.
#[derive(Clone, Debug, PartialEq)]
pub struct Equilibrium {
    pub state: DVector<f64>,
}

impl Equilibrium {
    /// Builds the equilibrium from the oracle optimum and a (terminal) state
    /// supplying `z̄`, `λ̄` and `μ̄`: `ū = −(R_C ⊗ I) z̄` and
    /// `x̄_i = ŷ* − γ_i ū_i`.
    pub fn from_oracle(net: &NetworkSystem, y_star: &DVector<f64>, terminal: &DVector<f64>) -> Result<Self> {
        let lay = net.layout();
        if terminal.len() != lay.len() {
            return Err(Error::DimensionMismatch {
                expected: lay.len(),
                got: terminal.len(),
            });
        }
        if y_star.len() != net.dim() {
            return Err(Error::DimensionMismatch {
                expected: net.dim(),
                got: y_star.len(),
            });
        }
        let n = net.dim();
        let mut state = terminal.clone();
        let z = terminal.rows_range(lay.z_all()).into_owned();
        let r_c = linalg::kron_identity(net.comm().r_c(), n);
        let u = -(r_c * z);
        for (i, a) in net.agents().iter().enumerate() {
            let range = lay.x_range(i);
            let x_bar = y_star - u.rows_range(range.clone()) * a.kind().gamma();
            state.rows_range_mut(range).copy_from(&x_bar);
        }
        Ok(Equilibrium { state })
    }
}

/// `V(t) = Σ S_i + Σ W_k` about `equilibrium` for every sample of a trace.
pub fn lyapunov_series(trace: &ComponentTrace, equilibrium: &Equilibrium) -> Result<Vec<f64>> {
    trace.states.iter().map(|s| trace.net.storage(s, &equilibrium.state)).collect()
}

/// Lyapunov series of a trace about its oracle optimum and terminal state.
pub fn lyapunov_about_terminal(trace: &ComponentTrace) -> Result<Vec<f64>> {
    let eq = Equilibrium::from_oracle(&trace.net, &trace.oracle.y, trace.terminal_state())?;
    lyapunov_series(trace, &eq)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateFit {
    /// Slope of `log10(max_i error_i)` against time.
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
    /// The window was cut short because the error reached its floor.
    pub truncated: bool,
}

/// Least-squares slope of `log10(max_i error_i)` over `window`, or over the
/// last half of the trace when `window` is `None`.
///
/// The fit stops at the first sample whose error is zero or below
/// `1e3 · ε · max(|state|∞, |ŷ*|∞)`; fewer than three usable points is an
/// error.
pub fn convergence_rate(trace: &ComponentTrace, window: Option<(f64, f64)>) -> Result<RateFit> {
    let (t0, t1) = match window {
        Some(w) => w,
        None => {
            let start = trace.times[0];
            let end = *trace.times.last().unwrap();
            (start + 0.5 * (end - start), end)
        }
    };
    let mut ts = Vec::new();
    let mut ls = Vec::new();
    let mut truncated = false;
    let y_scale = linalg::inf_norm(&trace.oracle.y);
    for (s, &t) in trace.times.iter().enumerate() {
        if t < t0 || t > t1 {
            continue;
        }
        let err = trace.max_error(s);
        let floor = 1e3 * f64::EPSILON * linalg::inf_norm(&trace.states[s]).max(y_scale);
        if err == 0.0 || err <= floor {
            truncated = true;
            break;
        }
        ts.push(t);
        ls.push(err.log10());
    }
    if ts.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "fit window [{t0}, {t1}] holds {} usable samples{}",
            ts.len(),
            if truncated { " (error reached its floor)" } else { "" }
        )));
    }
    let n = ts.len() as f64;
    let mt = ts.iter().sum::<f64>() / n;
    let ml = ls.iter().sum::<f64>() / n;
    let sxx: f64 = ts.iter().map(|t| (t - mt) * (t - mt)).sum();
    let sxy: f64 = ts.iter().zip(&ls).map(|(t, l)| (t - mt) * (l - ml)).sum();
    let slope = sxy / sxx;
    Ok(RateFit {
        slope,
        intercept: ml - slope * mt,
        points: ts.len(),
        truncated,
    })
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

pub const TRAJECTORY_CSV_HEADER: &str = "t,component,agent_id,dim,y,error";
pub const LYAPUNOV_CSV_HEADER: &str = "t,component,V,kkt_residual";

/// Writes `t,component,agent_id,dim,y,error` rows (ids and dims 1-based).
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{TRAJECTORY_CSV_HEADER}")?;
    for c in &traj.components {
        let n = c.net.dim();
        for (s, &t) in c.times.iter().enumerate() {
            for (i, &id) in c.agent_ids.iter().enumerate() {
                for j in 0..n {
                    writeln!(
                        w,
                        "{},{},{},{},{},{}",
                        fmt17(t),
                        c.component,
                        id + 1,
                        j + 1,
                        fmt17(c.outputs[s][i * n + j]),
                        fmt17(c.errors[s][i])
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Writes `t,component,V,kkt_residual` rows; `lyapunov[c]` belongs to
/// `traj.components[c]`.
pub fn write_lyapunov_csv<W: Write>(traj: &Trajectory, lyapunov: &[Vec<f64>], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{LYAPUNOV_CSV_HEADER}")?;
    for (c, v) in traj.components.iter().zip(lyapunov) {
        for (s, &t) in c.times.iter().enumerate() {
            writeln!(w, "{},{},{},{}", fmt17(t), c.component, fmt17(v[s]), fmt17(c.kkt[s]))?;
        }
    }
    Ok(())
}
