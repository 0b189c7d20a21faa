// Manifest registry: publish a versioned manifest on one tier, let the
// registry log replicate over a link, and deploy the same configuration
// on both ends.

use std::sync::Arc;

use microdb::{
    ColumnStoreConfig, Grant, Interface, Manifest, ManifestLink, MemoryTransport, Microdb, Role, SyncFilter, TierKind,
};

fn manifest(version: u64) -> Manifest {
    let mut m = Manifest::new("line-3", version, "ops");
    m.stores.push(ColumnStoreConfig::new("line3-temp"));
    m.stores.push(ColumnStoreConfig::new("line3-setpoints").mutable());
    m.roles.push(Role::new("line3-reader", vec![Grant::new(Interface::ExchangeRead, "line3-*")]).into());
    m.roles[0].subjects.push("hmi-3".into());
    let link = ManifestLink::new(
        "plant-eu",
        ("plant-a", TierKind::Local),
        ("region-eu", TierKind::Regional),
        SyncFilter::stores(["line3-*"]),
    );
    m.sync.push(link);
    if version > 1 {
        m.stores.push(ColumnStoreConfig::new("line3-alarms"));
    }
    m
}

pub fn run() -> microdb::Result<()> {
    let plant = Microdb::in_memory("plant-a", TierKind::Local);
    let region = Arc::new(Microdb::in_memory("region-eu", TierKind::Regional));

    let pos = region.publish_manifest(&manifest(1), &region.owner())?;
    println!("published v1 at {}:{}", pos.origin, pos.seq);
    let stale = region.publish_manifest(&manifest(1), &region.owner()).unwrap_err();
    println!("republish v1\t{}", stale.code());

    let report = region.deploy("line-3", 1, &region.owner())?;
    println!("region deploy v1\tcreated={:?}", report.created);

    // Bootstrap link so the plant can pull the log; deploy then replaces
    // it with the manifest's own half.
    let boot = manifest(1).sync[0].clone();
    plant.configure_link(boot.half_for("plant-a").expect("endpoint"), &plant.owner())?;
    let (moved, _) = plant.reconcile_registry("plant-eu", &mut MemoryTransport::new(region.clone()))?;
    println!("registry entries pulled\t{moved}");
    let report = plant.deploy("line-3", 1, &plant.owner())?;
    println!("plant deploy v1\tcreated={}\tskipped={}", report.created.len(), report.skipped.len());

    plant.publish_manifest(&manifest(2), &plant.owner())?;
    let report = plant.deploy("line-3", 2, &plant.owner())?;
    println!("plant deploy v2\tcreated={:?}", report.created);
    let again = plant.deploy("line-3", 2, &plant.owner())?;
    println!("redeploy v2\tchanged={}", again.changed());

    plant.reconcile_registry("plant-eu", &mut MemoryTransport::new(region.clone()))?;
    region.deploy("line-3", 2, &region.owner())?;
    for entry in region.registry_log() {
        println!("log\t{}:{}\t{} v{}", entry.position.origin, entry.position.seq, entry.manifest.manifest_id, entry.manifest.version);
    }
    let same_roles = plant.config_dump().roles == region.config_dump().roles;
    let same_stores = plant.config_dump().stores == region.config_dump().stores;
    println!("same roles\t{same_roles}\tsame stores\t{same_stores}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> microdb::Result<()> {
    run()
}
