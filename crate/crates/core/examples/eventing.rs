// Publish/subscribe and callbacks: filtered subscriptions, a host-code
// exchange callback that rejects bad values, and built-in transforms.

use microdb::{
    BuiltinCallback, CallbackOutcome, CallbackSpec, ColumnStoreConfig, KeyRange, Microdb, Mutation,
    Stage, SubscriptionFilter, TierKind, TxnKind, Value,
};

pub fn run() -> microdb::Result<()> {
    let db = Microdb::in_memory("plant-a", TierKind::Local);
    let owner = db.owner();

    let all = db.subscribe(SubscriptionFilter::store("*"), &owner)?;
    let updates = db.subscribe(
        SubscriptionFilter::store("line-*").txns([TxnKind::Update, TxnKind::Delete]),
        &owner,
    )?;

    db.create_store(ColumnStoreConfig::new("line-1").mutable(), &owner)?;
    db.create_store(ColumnStoreConfig::new("line-2"), &owner)?;

    db.register_callback(
        CallbackSpec::new("no-negative", Stage::Exchange, "line-*", |rec| {
            match rec.value.as_ref().and_then(Value::as_f64) {
                Some(v) if v < 0.0 => CallbackOutcome::Reject(format!("negative reading {v}")),
                _ => CallbackOutcome::Accept,
            }
        }),
        &owner,
    )?;
    db.register_callback(
        CallbackSpec::builtin(
            "clamp",
            Stage::Exchange,
            "line-2",
            BuiltinCallback::RangeClamp {
                field: None,
                min: 0.0,
                max: 100.0,
            },
        ),
        &owner,
    )?;

    let k = db.append("line-1", 1, 10.0, &owner)?.key;
    db.mutate("line-1", k, Mutation::Set(11.0.into()), &owner)?;
    db.mutate("line-1", k, Mutation::Delete, &owner)?;
    let rejected = db.append("line-2", 1, -5.0, &owner).unwrap_err();
    println!("rejected append\t{}", rejected.code());
    db.append("line-2", 2, 250.0, &owner)?;

    for rec in db.read_range("line-2", KeyRange::ALL, 10, &owner)? {
        println!("line-2\t{}\t{}", rec.key, rec.value.expect("live"));
    }
    println!("-- all events");
    for ev in all.drain() {
        let key = ev.key.map(|k| k.to_string()).unwrap_or_default();
        println!(
            "{}\t{}\t{}\t{}\t{}",
            ev.event_seq, ev.txn, ev.store, key, ev.actor
        );
    }
    println!("-- update/delete only: {}", updates.drain().len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> microdb::Result<()> {
    run()
}
