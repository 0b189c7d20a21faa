// Column stores: append, range reads, the write-once rule, mutable
// stores with tombstones, and replay of the on-disk log after a restart.

use microdb::{ColumnStoreConfig, KeyRange, Microdb, Mutation, Options, RecordKey, TierKind};

pub fn run() -> microdb::Result<()> {
    let dir = tempfile::tempdir()?;
    let opts = || Options::new("plant-a", TierKind::Local).data_dir(dir.path());
    let db = Microdb::open(opts())?;
    let owner = db.owner();

    db.create_store(ColumnStoreConfig::new("temp"), &owner)?;
    db.create_store(ColumnStoreConfig::new("setpoints").mutable(), &owner)?;

    for (ts, v) in [(100, 20.5), (200, 20.7), (200, 20.8), (300, 21.1)] {
        let r = db.append("temp", ts, v, &owner)?;
        println!(
            "append\t{}\t{}\torigin_seq={}",
            r.store, r.key, r.prov.origin_seq
        );
    }
    for rec in db.read_range("temp", KeyRange::ts(150, 301), 10, &owner)? {
        println!("read\t{}\t{}", rec.key, rec.value.expect("live record"));
    }

    // Write-once: the default store refuses mutation.
    let err = db
        .mutate(
            "temp",
            RecordKey::at(100),
            Mutation::Set(0.0.into()),
            &owner,
        )
        .unwrap_err();
    println!("mutate temp\t{}", err.code());

    let k = db.append("setpoints", 1, 55.0, &owner)?.key;
    db.mutate("setpoints", k, Mutation::Set(56.0.into()), &owner)?;
    db.mutate("setpoints", k, Mutation::Delete, &owner)?;
    println!("setpoints versions\t{}", db.versions("setpoints", k)?.len());
    println!("setpoints visible\t{}", db.record_count("setpoints")?);

    let before = hex::encode(db.content_hash("temp", &KeyRange::ALL)?);
    db.sync_to_disk()?;
    drop(db);

    let db = Microdb::open(opts())?;
    let after = hex::encode(db.content_hash("temp", &KeyRange::ALL)?);
    println!("hash before restart\t{before}");
    println!("hash after restart\t{after}");
    assert_eq!(before, after);
    Ok(())
}

#[allow(dead_code)]
fn main() -> microdb::Result<()> {
    run()
}
