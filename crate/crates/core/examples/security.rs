// Access control: roles with key-range grants, signed bearer tokens,
// sharing policies and an encrypted store whose log is unreadable
// without the owner key.

use microdb::security::issue_token;
use microdb::{
    ColumnStoreConfig, Grant, Interface, KeyRange, Microdb, Options, Role, SecretKey,
    SharingPolicy, TierKind,
};

pub fn run() -> microdb::Result<()> {
    let dir = tempfile::tempdir()?;
    let issuer_key = SecretKey::derive("example:registry");
    let owner_key = SecretKey::derive("example:owner");
    let db = Microdb::open(
        Options::new("plant-a", TierKind::Local)
            .data_dir(dir.path())
            .owner_key(owner_key.clone())
            .trust("registry", issuer_key.clone()),
    )?;
    let owner = db.owner();

    db.create_store(ColumnStoreConfig::new("temp"), &owner)?;
    db.create_store(ColumnStoreConfig::new("recipes").encrypted(), &owner)?;

    db.define_role(
        Role::new(
            "night-shift",
            vec![
                Grant::new(Interface::ExchangeRead, "temp").range(KeyRange::ts(0, 1_000)),
                Grant::new(Interface::ExchangeCreate, "temp"),
            ],
        ),
        &owner,
    )?;
    db.provision("alice", "night-shift", &owner)?;

    let token = issue_token(&issuer_key, "alice", "registry", i64::MAX);
    let alice = db.authenticate(token.as_bytes())?;
    println!("authenticated\t{}\tissuer={}", alice.subject, alice.issuer);

    db.append("temp", 10, 20.0, &alice)?;
    db.append("temp", 5_000, 21.0, &owner)?;
    for (label, range) in [
        ("inside", KeyRange::ts(0, 1_000)),
        ("outside", KeyRange::ts(0, 10_000)),
    ] {
        let decision = db.authorize(&alice, Interface::ExchangeRead, "temp", &range);
        println!("read {label}\t{decision:?}");
    }
    let denied = db
        .read_range("recipes", KeyRange::ALL, 10, &alice)
        .unwrap_err();
    println!("read recipes\t{}", denied.code());

    let forged = issue_token(
        &SecretKey::derive("someone-else"),
        "alice",
        "registry",
        i64::MAX,
    );
    println!(
        "forged token\t{}",
        db.authenticate(forged.as_bytes()).unwrap_err().code()
    );

    db.define_policy(
        SharingPolicy {
            name: "plant-only".into(),
            eula_digest: [7; 32],
            allow_synchronization: false,
            allowed_tiers: [TierKind::Local].into(),
        },
        &owner,
    )?;
    db.define_role(
        Role::new(
            "recipe-reader",
            vec![Grant::new(Interface::ExchangeRead, "recipes").policy("plant-only")],
        ),
        &owner,
    )?;
    println!(
        "recipes policies\t{}",
        db.policy_set().sharing_policies("recipes").len()
    );

    db.append("recipes", 1, "SECRET-RECIPE-42", &owner)?;
    db.sync_to_disk()?;
    let mut leaked = false;
    let mut pending = vec![dir.path().to_path_buf()];
    while let Some(path) = pending.pop() {
        if path.is_dir() {
            for entry in std::fs::read_dir(&path)? {
                pending.push(entry?.path());
            }
        } else {
            leaked |= std::fs::read(&path)?
                .windows(16)
                .any(|w| w == b"SECRET-RECIPE-42");
        }
    }
    println!("plaintext on disk\t{leaked}");
    assert!(!leaked);
    drop(db);

    let err =
        Microdb::open(Options::new("plant-a", TierKind::Local).data_dir(dir.path())).unwrap_err();
    println!("reopen without owner key\t{}", err.code());
    Ok(())
}

#[allow(dead_code)]
fn main() -> microdb::Result<()> {
    run()
}
