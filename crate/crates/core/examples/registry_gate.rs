//! Registers a small fleet from a roster, issues tokens, pings each device
//! through its token and applies the resource gate.
//!
//! Run with `cargo run --example registry_gate`.

use fedchain::registry::{
    check_eligibility, parse_roster, EligibilityPolicy, HostProbe, Registry, ResourceProbe, SimulatedProbe,
};

const ROSTER: &str = "\
# id, role, resource overrides
cam-01, honest
cam-02, honest, power=mobile_unplugged, battery_pct=12
gw-01,  straggler, cpu_util_pct=97
gw-02,  honest, disk_free_gb=0.4
phone-1, poisoner, power=mobile_unplugged, battery_pct=64, packets_sent=1000, packet_drop=250
sensor-9, honest, offline=true
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let roster = parse_roster(ROSTER)?;
    let mut probe = SimulatedProbe::default();
    for e in &roster {
        probe.configure(&e.device_id, e.device.clone());
    }
    let mut registry = Registry::new(7, Box::new(probe));
    let policy = EligibilityPolicy::default();

    println!("{:<9} {:<10} {:<18} verdict", "device", "role", "token");
    for e in &roster {
        let (_, token) = registry.register(&e.device_id, e.role, 0)?;
        let verdict = match registry.ping_device(&token.token) {
            Ok(profile) => format!("{:?}", check_eligibility(&profile, &policy)),
            Err(err) => format!("unreachable ({err})"),
        };
        println!("{:<9} {:<10} {:<18} {verdict}", e.device_id, e.role, &token.to_hex()[..16]);
    }

    // Registering twice is refused, unknown tokens are rejected.
    assert!(registry.register("cam-01", roster[0].role, 1).is_err());
    let forged = fedchain::chain::Digest::of(b"forged");
    println!("forged token -> {}", registry.ping_device(&forged).unwrap_err());

    // The host backend reads this machine's own counters.
    let host = HostProbe.probe("localhost")?;
    println!(
        "\nthis host: {} cpus, {:.0}% load, {:.1} GB free disk, {:.1} GB available memory -> {:?}",
        host.logical_cpus,
        host.cpu_util_pct,
        host.disk_free_gb,
        host.virtual_mem_gb,
        check_eligibility(&host, &policy)
    );
    Ok(())
}
