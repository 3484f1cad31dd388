//! Benchmark fixtures for the closed-loop simulator.

use eipnet::{generate_split_scenario, NetworkSystem, SimConfig};

/// Initial network of the randomized split experiment with `n_agents`
/// agents, plus its simulation settings.
pub fn split_network(n_agents: usize, seed: u64) -> (NetworkSystem, SimConfig) {
    let built = generate_split_scenario(n_agents, seed)
        .and_then(|s| s.build())
        .expect("generated scenarios build");
    (built.network, built.config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_builds() {
        let (net, cfg) = split_network(10, 1);
        assert_eq!(net.agents().len(), 10);
        assert!(net.closed_loop_rhs(&net.initial_state()).is_ok());
        assert!(cfg.dt > 0.0);
    }
}
