use std::path::Path;
use std::process::{Command, Output};

use eipnet::{generate_default_scenario, load_scenario};

fn eipnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eipnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

/// Values of every `key = number` line in `text`.
fn numbers(text: &str, key: &str) -> Vec<f64> {
    let prefix = format!("{key} = ");
    text.lines()
        .filter_map(|l| l.strip_prefix(&prefix))
        .map(|v| v.trim_matches(['[', ']']).parse().unwrap())
        .collect()
}

const SYMMETRIC_PAIR: &str = r#"
[network]
n_agents = 2
dim = 1
kind = "undirected"
edges = [[1, 2]]

[agents]
list = [
  { model = "quadratic", hessian = [[2.0]], linear = [-2.0], dynamics = "gradient_flow", alpha = 1.0, gamma = 0.0, x0 = [3.0] },
  { model = "quadratic", hessian = [[2.0]], linear = [2.0], dynamics = "gradient_flow", alpha = 1.0, gamma = 0.0, x0 = [-1.0] },
]

[controllers]
beta = [2.0]
feedthrough = [false]

[simulation]
t_end = 20.0
dt = 0.001
method = "rk4"
record_every = 100
seed = 0
"#;

const SHIFTED_PAIR: &str = r#"
[network]
n_agents = 2
dim = 1
kind = "undirected"
edges = [[1, 2]]

[agents]
list = [
  { model = "quadratic", hessian = [[2.0]], linear = [0.0], dynamics = "gradient_flow", alpha = 1.0, gamma = 0.0 },
  { model = "quadratic", hessian = [[2.0]], linear = [-4.0], constant = 4.0, dynamics = "gradient_flow", alpha = 1.0, gamma = 0.0 },
]

[controllers]
beta = [1.0]
feedthrough = [false]

[simulation]
t_end = 10.0
dt = 0.01
method = "rk4"
record_every = 10
seed = 0
"#;

const MODEL2_SINGLE: &str = r#"
[network]
n_agents = 1
dim = 1
kind = "undirected"
edges = []

[agents]
list = [
  { model = "model2", a = 1.0, b = -2.0, dynamics = "constrained", alpha = 1.0, gamma = 0.0, ineq = [{ normal = [1.0], offset = -0.5 }] },
]

[controllers]
beta = []
feedthrough = []

[simulation]
t_end = 10.0
dt = 0.01
method = "rk4"
record_every = 10
seed = 0
"#;

/// Four agents, two controllers: not enough to connect them.
const SPARSE_WIRING: &str = r#"
[network]
n_agents = 4
dim = 1
kind = "undirected"
edges = [[1, 2], [3, 4]]

[agents]
list = [
  { model = "model1", a = 1.0, b = 0.0, dynamics = "gradient_flow", alpha = 1.0, gamma = 0.0 },
  { model = "model1", a = 1.0, b = 1.0, dynamics = "gradient_flow", alpha = 1.0, gamma = 0.0 },
  { model = "model1", a = 1.0, b = 2.0, dynamics = "gradient_flow", alpha = 1.0, gamma = 0.0 },
  { model = "model1", a = 1.0, b = 3.0, dynamics = "gradient_flow", alpha = 1.0, gamma = 0.0 },
]

[controllers]
beta = [1.0, 1.0]
feedthrough = [false, false]

[simulation]
t_end = 10.0
dt = 0.01
method = "rk4"
record_every = 10
seed = 0
"#;

/// Linear objectives: the sum is not strictly convex.
const FLAT: &str = r#"
[network]
n_agents = 2
dim = 1
kind = "undirected"
edges = [[1, 2]]

[agents]
list = [
  { model = "quadratic", hessian = [[0.0]], linear = [1.0], dynamics = "constrained", alpha = 1.0, gamma = 0.0, ineq = [{ normal = [-1.0], offset = -1.0 }] },
  { model = "quadratic", hessian = [[0.0]], linear = [0.0], dynamics = "gradient_flow", alpha = 1.0, gamma = 0.0 },
]

[controllers]
beta = [1.0]
feedthrough = [false]

[simulation]
t_end = 5.0
dt = 0.01
method = "rk4"
record_every = 10
seed = 0
"#;

#[test]
fn generate_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.toml");
    let b = dir.path().join("b.toml");
    let c = dir.path().join("c.toml");
    for (seed, p) in [("1", &a), ("1", &b), ("2", &c)] {
        let out = eipnet(&["generate", "--seed", seed, "--out", p.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let ta = std::fs::read(&a).unwrap();
    assert_eq!(ta, std::fs::read(&b).unwrap());

    let loaded = load_scenario(&a).unwrap();
    let expected = generate_default_scenario(1).unwrap();
    assert_eq!(loaded, expected);
    let first = String::from_utf8(ta).unwrap().lines().next().unwrap().to_string();
    assert!(first.starts_with("# eipnet "));
    assert!(first.ends_with(&format!("scenario={}", expected.hash())));

    let other = load_scenario(&c).unwrap();
    assert_ne!(other.agents, loaded.agents);
}

#[test]
fn generate_into_missing_directory_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("missing").join("s.toml");
    assert_eq!(code(&eipnet(&["generate", "--seed", "1", "--out", p.to_str().unwrap()])), 2);
}

#[test]
fn certify_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let default = dir.path().join("default.toml");
    eipnet(&["generate", "--seed", "1", "--out", default.to_str().unwrap()]);
    let csv = dir.path().join("gates.csv");
    let ok = eipnet(&["certify", default.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    let table = std::fs::read_to_string(&csv).unwrap();
    let mut lines = table.lines();
    assert!(lines.next().unwrap().starts_with("# eipnet "));
    assert_eq!(lines.next().unwrap(), "gate,structural,verdict,reason");
    assert!(lines.all(|l| l.contains(",pass,")));

    let sparse = write(dir.path(), "sparse.toml", SPARSE_WIRING);
    let fail = eipnet(&["certify", &sparse]);
    assert_eq!(code(&fail), 1);
    let report = stdout(&fail);
    let line = report.lines().find(|l| l.contains("controller-count")).unwrap();
    assert!(line.starts_with("FAIL"));
    assert!(line.contains("at least 3 are required"), "{line}");

    let bad = write(dir.path(), "bad.toml", "[network]\nn_agents = \"two\"\n");
    assert_eq!(code(&eipnet(&["certify", &bad])), 2);
    let unknown = write(dir.path(), "unknown.toml", &SYMMETRIC_PAIR.replace("seed = 0", "seed = 0\nspeed = 1"));
    assert_eq!(code(&eipnet(&["certify", &unknown])), 2);
    assert_eq!(code(&eipnet(&["certify", "/nonexistent/s.toml"])), 2);
}

#[test]
fn run_symmetric_pair() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(dir.path(), "pair.toml", SYMMETRIC_PAIR);
    let out_dir = dir.path().join("out");
    let out = eipnet(&["run", &s, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let summary = std::fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("sound = true"));
    let err = numbers(&summary, "terminal_max_error");
    assert_eq!(err.len(), 1);
    assert!(err[0] < 1e-6, "{}", err[0]);
    assert!(numbers(&summary, "oracle_y")[0].abs() < 1e-12);
    assert!(numbers(&summary, "log10_error_slope")[0] < 0.0);

    let hash = load_scenario(Path::new(&s)).unwrap().hash();
    for f in ["trajectory.csv", "lyapunov.csv", "summary.txt"] {
        let text = std::fs::read_to_string(out_dir.join(f)).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with(&format!("# eipnet {}", env!("CARGO_PKG_VERSION"))), "{f}: {first}");
        assert!(first.ends_with(&format!("scenario={hash}")), "{f}: {first}");
    }

    let traj = std::fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    let mut lines = traj.lines().skip(1);
    assert_eq!(lines.next().unwrap(), "t,component,agent_id,dim,y,error");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows[0], vec![0.0, 0.0, 1.0, 1.0, 3.0, 3.0]);
    assert_eq!(rows[1], vec![0.0, 0.0, 2.0, 1.0, -1.0, 1.0]);
    // the summary's terminal error is the last recorded error
    let last_t = rows.last().unwrap()[0];
    let terminal = rows.iter().filter(|r| r[0] == last_t).map(|r| r[5]).fold(0.0, f64::max);
    assert_eq!(terminal, err[0]);

    let lyap = std::fs::read_to_string(out_dir.join("lyapunov.csv")).unwrap();
    let v: Vec<f64> = lyap
        .lines()
        .skip(2)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(v.windows(2).all(|w| w[1] <= w[0] + 1e-9 * v[0]));
}

#[test]
fn run_overrides_and_gate_handling() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(dir.path(), "pair.toml", SYMMETRIC_PAIR);
    let out_dir = dir.path().join("o");
    let out = eipnet(&["run", &s, "--out", out_dir.to_str().unwrap(), "--t-end", "1", "--dt", "0.01"]);
    assert_eq!(code(&out), 0);
    let summary = std::fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    assert_eq!(numbers(&summary, "dt"), vec![0.01]);
    assert_eq!(numbers(&summary, "t_end"), vec![1.0]);
    assert_eq!(
        code(&eipnet(&["run", &s, "--out", out_dir.to_str().unwrap(), "--dt", "-1"])),
        2
    );

    let flat = write(dir.path(), "flat.toml", FLAT);
    let refused = dir.path().join("refused");
    assert_eq!(code(&eipnet(&["run", &flat, "--out", refused.to_str().unwrap()])), 1);
    assert!(!refused.exists());
    let forced = dir.path().join("forced");
    let out = eipnet(&["run", &flat, "--out", forced.to_str().unwrap(), "--force"]);
    assert_eq!(code(&out), 0);
    let summary = std::fs::read_to_string(forced.join("summary.txt")).unwrap();
    assert!(summary.contains("sound = false"));
    assert!(summary.contains("forced past failed gates: convergence"));

    let sparse = write(dir.path(), "sparse.toml", SPARSE_WIRING);
    let out = eipnet(&["run", &sparse, "--out", forced.to_str().unwrap(), "--force"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn run_divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(
        dir.path(),
        "euler.toml",
        &SYMMETRIC_PAIR.replace("rk4", "euler").replace("beta = [2.0]", "beta = [35.0]"),
    );
    let out = eipnet(&["run", &s, "--out", dir.path().join("o").to_str().unwrap(), "--dt", "0.5"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn oracle_values() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(dir.path(), "shifted.toml", SHIFTED_PAIR);
    let out = eipnet(&["oracle", &s]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let y = numbers(&text, "y");
    assert_eq!(y.len(), 1, "{text}");
    assert!((y[0] - 1.0).abs() < 1e-12, "{text}");
    // 17 significant digits
    let line = text.lines().find(|l| l.starts_with("y = ")).unwrap();
    assert_eq!(line.trim_start_matches("y = [").split('e').next().unwrap().len(), 18);

    let s = write(dir.path(), "m2.toml", MODEL2_SINGLE);
    let text = stdout(&eipnet(&["oracle", &s]));
    assert_eq!(numbers(&text, "y"), vec![0.5]);
    // stationarity 2y − 2 + λ = 0 at y = 0.5
    assert!((numbers(&text, "lambda.1")[0] - 1.0).abs() < 1e-12);
}

#[test]
fn default_scenario_reduced_runs_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s.toml");
    let s = s.to_str().unwrap();
    assert_eq!(code(&eipnet(&["generate", "--seed", "1", "--agents", "20", "--out", s])), 0);

    let oracle = stdout(&eipnet(&["oracle", s]));
    let y = numbers(&oracle, "y");
    assert_eq!(y.len(), 3);
    assert!(oracle.contains("[network]") && oracle.contains("[group 1]") && oracle.contains("[group 2]"));

    let out_dir = dir.path().join("out");
    let out = eipnet(&["run", s, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    assert_eq!(numbers(&summary, "oracle_y"), y);
    assert_eq!(numbers(&summary, "segment"), vec![0.0, 1.0, 1.0]);
    for e in numbers(&summary, "terminal_max_error") {
        assert!(e < 1e-6, "{e}");
    }
}
