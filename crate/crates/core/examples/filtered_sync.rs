// Filtered two-way sync between a plant (local tier) and a region: only
// the selected stores and key range cross the link, concurrent updates
// resolve to the same winner on both sides, and every frame after HELLO
// is sealed.

use std::sync::Arc;

use parking_lot::Mutex;

use microdb::sync::wire::{decode_frame, FrameType};
use microdb::{
    ColumnStoreConfig, KeyRange, MemoryTransport, Microdb, Mutation, RecordKey, SyncFilter, SyncLinkConfig, TierKind,
};

pub fn run() -> microdb::Result<()> {
    let plant = Microdb::in_memory("plant-a", TierKind::Local);
    let region = Arc::new(Microdb::in_memory("region-eu", TierKind::Regional));
    for db in [&plant, &*region] {
        db.create_store(ColumnStoreConfig::new("temp"), &db.owner())?;
        db.create_store(ColumnStoreConfig::new("setpoints").mutable(), &db.owner())?;
        db.create_store(ColumnStoreConfig::new("scratch"), &db.owner())?;
    }
    let filter = SyncFilter::stores(["temp", "setpoints"]).range(KeyRange::ts(0, 1_000));
    plant.configure_link(SyncLinkConfig::new("a-eu", "region-eu", TierKind::Regional, filter.clone()), &plant.owner())?;
    region.configure_link(SyncLinkConfig::new("a-eu", "plant-a", TierKind::Local, filter), &region.owner())?;

    let owner = plant.owner();
    for ts in [10, 20, 30, 5_000] {
        plant.append("temp", ts, ts as f64 / 10.0, &owner)?;
    }
    plant.append("scratch", 1, "local only", &owner)?;
    let k = plant.append("setpoints", 1, 50.0, &owner)?.key;

    let frames = Arc::new(Mutex::new(Vec::new()));
    let mut transport = MemoryTransport::new(region.clone()).capture_into(frames.clone());
    let report = plant.sync_round("a-eu", &mut transport)?;
    println!("round 1\tsent={:?}\treceived={:?}", report.sent, report.received);
    for f in frames.lock().iter() {
        let (ty, payload) = decode_frame(&f.bytes)?;
        let sealed = ty != FrameType::Hello;
        println!("frame\t{:?}\t{ty:?}\t{} bytes\tsealed={sealed}", f.direction, payload.len());
    }
    println!("region temp\t{}", region.record_count("temp")?);
    println!("region scratch\t{}", region.record_count("scratch")?);

    // Concurrent edits of the same setpoint on both sides.
    region.mutate("setpoints", k, Mutation::Set(52.0.into()), &region.owner())?;
    plant.mutate("setpoints", k, Mutation::Set(51.0.into()), &owner)?;
    let report = microdb::sync_pair(&plant, &region, "a-eu")?;
    println!("round 2\tsent={}\treceived={}", report.records_sent(), report.records_received());
    for db in [&plant, &*region] {
        let winner = db.read_range("setpoints", KeyRange::new(k, RecordKey::new(k.ts, k.seq + 1)), 1, &db.owner())?;
        let hash = hex::encode(db.content_hash("setpoints", &KeyRange::ALL)?);
        println!("{}\tsetpoint={}\thash={}", db.replica_id(), winner[0].value.as_ref().expect("live"), &hash[..16]);
    }

    let report = microdb::sync_pair(&plant, &region, "a-eu")?;
    println!("quiescent round\trecords={}", report.records_sent() + report.records_received());
    Ok(())
}

#[allow(dead_code)]
fn main() -> microdb::Result<()> {
    run()
}
