use std::fmt::{self, Write as _};
use std::path::Path;
use std::time::Instant;

use eipnet::{file_header, load_scenario, validate, Error, GateResult, ScenarioSpec};

use crate::output::write_atomic;
use crate::report::{id_ranges, ComponentSummary, RunSummary};

/// Reason a command did not succeed, mapped onto the exit status.
#[derive(Debug)]
pub enum Failure {
    Gate(String),
    Config(String),
    Numerical(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Gate(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Gate(m) | Failure::Config(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } | Error::OracleNonConvergence { .. } | Error::SingularLoop => {
                Failure::Numerical(e.to_string())
            }
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Writes command output in one piece; a closed pipe is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn load(path: &Path) -> std::result::Result<ScenarioSpec, Failure> {
    load_scenario(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

pub fn generate(seed: u64, agents: usize, out: &Path) -> CmdResult {
    let spec = eipnet::generate_split_scenario(agents, seed)?;
    let text = spec.to_toml();
    write_atomic(out, |w| {
        writeln!(w, "{}", file_header("generated", &spec.hash()))?;
        w.write_all(text.as_bytes())
    })
    .map_err(|e| Failure::Config(format!("{}: {e}", out.display())))?;
    emit(&format!("wrote {} (scenario={})\n", out.display(), spec.hash()));
    Ok(())
}

fn gate_line(g: &GateResult) -> String {
    format!(
        "{:<4}  {:<16} {:<10}  {}",
        if g.pass { "PASS" } else { "FAIL" },
        g.name,
        if g.structural { "structural" } else { "advisory" },
        g.reason
    )
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn certify(path: &Path, csv: Option<&Path>) -> CmdResult {
    let spec = load(path)?;
    let hash = spec.hash();
    let gates = validate(&spec);
    let mut text = file_header("certify", &hash) + "\n";
    for g in &gates {
        text += &gate_line(g);
        text.push('\n');
    }
    emit(&text);
    if let Some(csv) = csv {
        write_atomic(csv, |w| {
            writeln!(w, "{}", file_header("certify", &hash))?;
            writeln!(w, "gate,structural,verdict,reason")?;
            for g in &gates {
                writeln!(
                    w,
                    "{},{},{},{}",
                    g.name,
                    g.structural,
                    if g.pass { "pass" } else { "fail" },
                    csv_field(&g.reason)
                )?;
            }
            Ok(())
        })?;
    }
    let failed: Vec<&str> = gates.iter().filter(|g| !g.pass).map(|g| g.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gate(format!("failed gates: {}", failed.join(", "))))
    }
}

pub fn run(path: &Path, out: &Path, force: bool, dt: Option<f64>, t_end: Option<f64>) -> CmdResult {
    let mut spec = load(path)?;
    let hash = spec.hash();
    if let Some(dt) = dt {
        spec.simulation.dt = dt;
    }
    if let Some(t_end) = t_end {
        spec.simulation.t_end = t_end;
    }
    spec.simulation.validate()?;

    let gates = validate(&spec);
    let structural: Vec<&GateResult> = gates.iter().filter(|g| g.structural && !g.pass).collect();
    if !structural.is_empty() {
        for g in &structural {
            eprintln!("{}", gate_line(g));
        }
        let names: Vec<&str> = structural.iter().map(|g| g.name).collect();
        return Err(Failure::Gate(format!("structural gates failed: {}", names.join(", "))));
    }
    let advisory: Vec<&GateResult> = gates.iter().filter(|g| !g.structural && !g.pass).collect();
    if !advisory.is_empty() && !force {
        for g in &advisory {
            eprintln!("{}", gate_line(g));
        }
        let names: Vec<&str> = advisory.iter().map(|g| g.name).collect();
        return Err(Failure::Gate(format!(
            "gates failed: {} (use --force to run anyway)",
            names.join(", ")
        )));
    }

    let built = spec.build()?;
    let started = Instant::now();
    let traj = eipnet::integrate(&built.network, &built.config, &built.events)?;
    let wall_time = started.elapsed();
    let lyapunov = traj
        .components
        .iter()
        .map(eipnet::lyapunov_about_terminal)
        .collect::<eipnet::Result<Vec<_>>>()?;

    let summary = RunSummary {
        scenario_hash: hash.clone(),
        dt: spec.simulation.dt,
        t_end: spec.simulation.t_end,
        forced_past: advisory.iter().map(|g| g.name).collect(),
        gates,
        components: traj
            .components
            .iter()
            .zip(&lyapunov)
            .map(|(c, v)| ComponentSummary::new(c, v))
            .collect(),
        wall_time,
    };

    std::fs::create_dir_all(out).map_err(|e| Failure::Config(format!("{}: {e}", out.display())))?;
    write_atomic(&out.join("trajectory.csv"), |w| {
        writeln!(w, "{}", file_header("trajectory", &hash))?;
        eipnet::simulate::write_trajectory_csv(&traj, w)
    })?;
    write_atomic(&out.join("lyapunov.csv"), |w| {
        writeln!(w, "{}", file_header("lyapunov", &hash))?;
        eipnet::simulate::write_lyapunov_csv(&traj, &lyapunov, w)
    })?;
    let text = summary.to_string();
    write_atomic(&out.join("summary.txt"), |w| w.write_all(text.as_bytes()))?;
    emit(&text);
    Ok(())
}

fn vec17<'a>(v: impl IntoIterator<Item = &'a f64>) -> String {
    let items: Vec<String> = v.into_iter().map(|x| format!("{x:.16e}")).collect();
    format!("[{}]", items.join(", "))
}

pub fn oracle(path: &Path) -> CmdResult {
    let spec = load(path)?;
    let comps = spec.component_oracles()?;
    let mut text = file_header("oracle", &spec.hash()) + "\n";
    for c in &comps {
        let sol = &c.solution;
        let _ = writeln!(text);
        let _ = writeln!(text, "[{}]", c.label);
        let _ = writeln!(text, "agents = \"{}\"", id_ranges(&c.agent_ids));
        let _ = writeln!(text, "y = {}", vec17(sol.y.iter()));
        for (k, &id) in c.agent_ids.iter().enumerate() {
            if !sol.lambda[k].is_empty() {
                let _ = writeln!(text, "lambda.{} = {}", id + 1, vec17(sol.lambda[k].iter()));
            }
            if !sol.mu[k].is_empty() {
                let _ = writeln!(text, "mu.{} = {}", id + 1, vec17(sol.mu[k].iter()));
            }
        }
        let _ = writeln!(text, "iterations = {}", sol.iterations);
        let _ = writeln!(text, "residual = {:.3e}", sol.residual);
    }
    emit(&text);
    Ok(())
}
