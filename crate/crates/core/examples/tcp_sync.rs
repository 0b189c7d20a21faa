// Sync over TCP: a regional replica serves rounds on a loopback socket and
// a plant replica initiates them.

use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use microdb::sync::{serve, TcpTransport};
use microdb::{ColumnStoreConfig, KeyRange, Microdb, SecretKey, SyncFilter, SyncLinkConfig, TierKind};

pub fn run() -> microdb::Result<()> {
    let key = SecretKey::derive("example:tcp-link");
    let region = Arc::new(Microdb::in_memory("region-eu", TierKind::Regional));
    let plant = Microdb::in_memory("plant-a", TierKind::Local);
    for db in [&plant, &*region] {
        db.create_store(ColumnStoreConfig::new("temp"), &db.owner())?;
    }
    let filter = SyncFilter::stores(["temp"]);
    region.configure_link(
        SyncLinkConfig::new("a-eu", "plant-a", TierKind::Local, filter.clone()).key(key.clone()),
        &region.owner(),
    )?;

    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();
    plant.configure_link(
        SyncLinkConfig::new("a-eu", "region-eu", TierKind::Regional, filter).key(key).peer_addr(addr.clone()),
        &plant.owner(),
    )?;
    let stop = Arc::new(AtomicBool::new(false));
    let server = {
        let (region, stop) = (region.clone(), stop.clone());
        std::thread::spawn(move || serve(region, listener, stop))
    };

    for ts in 0..500 {
        plant.append("temp", ts, ts as f64, &plant.owner())?;
    }
    region.append("temp", 10_000, -1.0, &region.owner())?;
    let report = plant.sync_round("a-eu", &mut TcpTransport::connect(&addr)?)?;
    println!("tcp round\tsent={}\treceived={}\tframes={}", report.records_sent(), report.records_received(), report.frames_sent);

    let same = plant.content_hash("temp", &KeyRange::ALL)? == region.content_hash("temp", &KeyRange::ALL)?;
    println!("converged\t{same}");
    stop.store(true, Ordering::SeqCst);
    server.join().expect("server thread")?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> microdb::Result<()> {
    run()
}
