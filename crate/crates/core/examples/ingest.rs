// Data ingest: a pushing device and a polled scripted source, driven by a
// manual clock, with duplicate suppression and outage handling.

use std::sync::Arc;

use microdb::{
    Clock, ColumnStoreConfig, IngestBinding, KeyRange, ManualClock, Microdb, Options, PushOutcome,
    Reading, ScriptResolver, ScriptedSource, TierKind,
};

const MS: i64 = 1_000_000;

pub fn run() -> microdb::Result<()> {
    let clock = Arc::new(ManualClock::new(0));
    let resolver = Arc::new(ScriptResolver::default());
    resolver.register(
        "plc-1",
        ScriptedSource::new(
            (1..=10)
                .map(|i| Reading::new(i * 100 * MS, i as f64))
                .collect(),
        )
        .outage(300 * MS, 600 * MS),
    );
    let db = Microdb::open(
        Options::new("edge-1", TierKind::Device)
            .clock(clock.clone())
            .resolver(resolver.clone()),
    )?;
    let owner = db.owner();

    db.create_store(ColumnStoreConfig::new("vibration"), &owner)?;
    db.create_store(ColumnStoreConfig::new("plc"), &owner)?;
    db.bind_source(IngestBinding::push("accel-1", "vibration"), &owner)?;
    db.bind_source(
        IngestBinding::poll("plc-1", "plc", "memory:plc-1", 100),
        &owner,
    )?;

    for (ts, v) in [(1, 0.5), (2, 0.6), (2, 0.6), (3, 0.7)] {
        let outcome = match db.on_push("accel-1", Reading::new(ts, v)) {
            PushOutcome::Appended(r) => format!("appended origin_seq={}", r.prov.origin_seq),
            other => format!("{other:?}"),
        };
        println!("push\t{ts}\t{outcome}");
    }
    println!(
        "push unbound\t{:?}",
        db.on_push("ghost", Reading::new(1, 1.0))
    );

    while clock.now_ns() < 1_100 * MS {
        clock.advance(100 * MS);
        db.poll_tick(clock.now_ns());
    }
    let polled: Vec<_> = db
        .read_range("plc", KeyRange::ALL, 100, &owner)?
        .iter()
        .map(|r| r.key.ts / MS)
        .collect();
    println!("polled ts (ms)\t{polled:?}");
    for status in db.ingest_status() {
        println!(
            "{}",
            serde_json::to_string(&status).expect("status serializes")
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> microdb::Result<()> {
    run()
}
