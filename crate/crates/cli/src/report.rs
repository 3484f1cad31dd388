use std::fmt;
use std::time::Duration;

use eipnet::{ComponentTrace, GateResult, RateFit};

/// Per-component results of one run.
#[derive(Clone, Debug)]
pub struct ComponentSummary {
    pub component: usize,
    pub segment: usize,
    /// 0-based global ids.
    pub agent_ids: Vec<usize>,
    pub t_start: f64,
    pub t_end: f64,
    pub oracle_y: Vec<f64>,
    pub terminal_max_error: f64,
    /// Slope of `log10` of the max error over the whole segment, cut at the
    /// error floor, or the reason no fit was possible.
    pub slope: std::result::Result<RateFit, String>,
    /// Largest step-to-step increase of `V`, relative to `V` at the start.
    pub lyapunov_max_rise: f64,
}

impl ComponentSummary {
    pub fn new(trace: &ComponentTrace, lyapunov: &[f64]) -> Self {
        let t_start = trace.times[0];
        let t_end = *trace.times.last().expect("traces hold at least one sample");
        let v0 = lyapunov.first().copied().unwrap_or(0.0);
        let rise = lyapunov.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        ComponentSummary {
            component: trace.component,
            segment: trace.segment,
            agent_ids: trace.agent_ids.clone(),
            t_start,
            t_end,
            oracle_y: trace.oracle.y.iter().copied().collect(),
            terminal_max_error: trace.terminal_max_error(),
            slope: eipnet::convergence_rate(trace, Some((t_start, t_end))).map_err(|e| e.to_string()),
            lyapunov_max_rise: if v0 > 0.0 { rise / v0 } else { rise },
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub scenario_hash: String,
    pub dt: f64,
    pub t_end: f64,
    pub gates: Vec<GateResult>,
    /// Names of failed gates the run was forced past.
    pub forced_past: Vec<&'static str>,
    pub components: Vec<ComponentSummary>,
    pub wall_time: Duration,
}

impl RunSummary {
    pub fn sound(&self) -> bool {
        self.forced_past.is_empty()
    }
}

/// `[0, 1, 2, 5]` becomes `1-3,6`.
pub fn id_ranges(ids: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        let mut j = i;
        while j + 1 < ids.len() && ids[j + 1] == ids[j] + 1 {
            j += 1;
        }
        if j > i {
            parts.push(format!("{}-{}", ids[i] + 1, ids[j] + 1));
        } else {
            parts.push(format!("{}", ids[i] + 1));
        }
        i = j + 1;
    }
    parts.join(",")
}

fn vec17(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
    format!("[{}]", items.join(", "))
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", eipnet::file_header("summary", &self.scenario_hash))?;
        writeln!(f, "sound = {}", self.sound())?;
        if !self.sound() {
            writeln!(f, "unsound = \"forced past failed gates: {}\"", self.forced_past.join(", "))?;
        }
        writeln!(f, "dt = {:?}", self.dt)?;
        writeln!(f, "t_end = {:?}", self.t_end)?;
        writeln!(f, "wall_time_s = {:.3}", self.wall_time.as_secs_f64())?;
        for g in &self.gates {
            writeln!(
                f,
                "gate.{} = \"{}{}: {}\"",
                g.name,
                if g.pass { "pass" } else { "fail" },
                if g.structural { "" } else { " (advisory)" },
                g.reason.replace('"', "'")
            )?;
        }
        for c in &self.components {
            writeln!(f)?;
            writeln!(f, "[component.{}]", c.component)?;
            writeln!(f, "segment = {}", c.segment)?;
            writeln!(f, "agents = \"{}\"", id_ranges(&c.agent_ids))?;
            writeln!(f, "t = [{:?}, {:?}]", c.t_start, c.t_end)?;
            writeln!(f, "oracle_y = {}", vec17(&c.oracle_y))?;
            writeln!(f, "terminal_max_error = {:.16e}", c.terminal_max_error)?;
            match &c.slope {
                Ok(fit) => {
                    writeln!(f, "log10_error_slope = {:.16e}", fit.slope)?;
                    writeln!(f, "slope_points = {}", fit.points)?;
                    writeln!(f, "slope_reached_floor = {}", fit.truncated)?;
                }
                Err(why) => writeln!(f, "log10_error_slope = \"unavailable: {why}\"")?,
            }
            writeln!(f, "lyapunov_max_relative_rise = {:.3e}", c.lyapunov_max_rise)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_are_compressed() {
        assert_eq!(id_ranges(&[0, 1, 2, 5]), "1-3,6");
        assert_eq!(id_ranges(&[4]), "5");
        assert_eq!(id_ranges(&[]), "");
        assert_eq!(id_ranges(&[0, 2, 3]), "1,3-4");
    }
}
