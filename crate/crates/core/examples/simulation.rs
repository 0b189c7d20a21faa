// Deterministic simulation: run a bundled four-tier scenario with link
// outages, then drive a custom topology step by step.

use microdb::harness::{bundled, Simulation, TopologySpec};

pub fn run() -> microdb::Result<()> {
    let report = Simulation::load_topology(bundled("outage-heal").expect("bundled scenario"))?.run();
    println!("{}\tpassed={}\trounds={}\trounds_down={}", report.name, report.passed, report.counters.rounds, report.counters.rounds_down);
    for a in &report.assertions {
        println!("  {}\t{}\t{}", a.action, if a.passed { "ok" } else { "FAIL" }, a.detail);
    }

    let spec = TopologySpec::from_json(
        r#"{
          "name": "two-tier",
          "seed": 7,
          "tiers": [{"replica": "dev", "tier": "device"}, {"replica": "plant", "tier": "local"}],
          "links": [{"a": "dev", "b": "plant", "period_ms": 100, "outages": [[0, 300000000]]}],
          "stores": [{"name": "temp"}],
          "steps": [
            {"at": 0, "action": "append", "replica": "dev", "store": "temp", "count": 50},
            {"at": 1000000000, "action": "assert_converged", "stores": ["temp"], "replicas": ["dev", "plant"]}
          ]
        }"#,
    )?;
    let mut sim = Simulation::load_topology(spec)?;
    sim.step(250_000_000)?;
    println!("t=250ms\tplant temp={}", sim.replica("plant").expect("replica").record_count("temp")?);
    sim.step(500_000_000)?;
    println!("t=500ms\tplant temp={}", sim.replica("plant").expect("replica").record_count("temp")?);
    let report = sim.run();
    println!("{}\tpassed={}\tsent={}", report.name, report.passed, report.counters.records_sent);
    Ok(())
}

#[allow(dead_code)]
fn main() -> microdb::Result<()> {
    run()
}
