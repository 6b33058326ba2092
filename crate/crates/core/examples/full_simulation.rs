//! End-to-end run: 20 devices, 4 poisoners, 2 stragglers, one offline
//! device, PoET sealing. Writes metrics and chain exports to a directory.
//!
//! ```text
//! cargo run --release --example full_simulation -- [out-dir]
//! ```

use std::path::PathBuf;

use fedchain::chain::ConsensusKind;
use fedchain::registry::{ResourceProfile, SimulatedProbe};
use fedchain::sim::{generate_roster, run_state, write_outputs, DataSource, SimConfig, SimState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("fedchain-full-simulation"));
    let cfg = SimConfig {
        seed: 2024,
        n_clients: 20,
        n_rounds: 40,
        data: DataSource::Synthetic { rows: 30_000 },
        poisoner_fraction: 0.2,
        straggler_fraction: 0.1,
        noise_level: 20.0,
        consensus: ConsensusKind::Poet,
        dp_sigma: 0.001,
        ..SimConfig::default()
    };

    let mut roster = generate_roster(&cfg);
    roster[5].device.offline = true;
    let mut probe = SimulatedProbe::new(ResourceProfile::default());
    for e in &roster {
        probe.configure(&e.device_id, e.device.clone());
    }
    let state = SimState::with_probe(cfg, &roster, Box::new(probe))?;
    let outcome = run_state(state)?;

    println!("{:>5} {:>9} {:>8} {:>8} {:>9}  excluded", "round", "loss", "accepted", "rejected", "clock s");
    for r in &outcome.reports {
        println!(
            "{:>5} {:>9.5} {:>8} {:>8} {:>9.2}  {}",
            r.round,
            r.global_loss,
            r.accepted.len(),
            r.rejected.len(),
            r.clock_s,
            r.excluded.join(",")
        );
    }
    let roles = outcome.state.roles();
    println!("\nfinal reputation:");
    for (d, s) in outcome.state.ledger().scores() {
        println!("  {d} {:<9} {s}", roles[d].as_str());
    }
    outcome.state.verify_chains()?;
    write_outputs(&outcome, &out)?;
    println!(
        "\n{} rounds{}, outputs in {}",
        outcome.reports.len(),
        if outcome.converged { " (converged)" } else { "" },
        out.display()
    );
    Ok(())
}
