// Information model: types with single inheritance, instances bound to
// stores, classification tags, typed stores and federated browsing.

use microdb::{
    ColumnStoreConfig, InstanceDef, Microdb, Object, PropertyDef, PropertyType, SubjectKind, Tag,
    TierKind, TypeDef,
};

pub fn run() -> microdb::Result<()> {
    let db = Microdb::in_memory("plant-a", TierKind::Local);
    let owner = db.owner();

    db.define_types(
        &[
            TypeDef::new("plant", "Asset").property(PropertyDef::new("serial", PropertyType::Str)),
            TypeDef::new("plant", "Pump")
                .extends("Asset")
                .property(PropertyDef::new("flow", PropertyType::Float).unit("m3/h")),
        ],
        &owner,
    )?;
    db.define_type(
        TypeDef::new("vendor", "Pump").property(PropertyDef::new("rpm", PropertyType::Int)),
        &owner,
    )?;

    db.create_store(
        ColumnStoreConfig::new("pump-1").value_type("plant:Pump"),
        &owner,
    )?;
    db.define_instance(
        InstanceDef {
            model_id: "plant".into(),
            name: "p1".into(),
            type_name: "Pump".into(),
            store: "pump-1".into(),
        },
        &owner,
    )?;
    db.classify(
        Tag::new("plant", SubjectKind::Type, "Pump", "rotating"),
        &owner,
    )?;
    db.classify(
        Tag::new("plant", SubjectKind::Instance, "p1", "line-3"),
        &owner,
    )?;

    let good = Object::typed("plant:Pump")
        .with("serial", "SN-1")
        .with("flow", 12.5);
    db.append("pump-1", 1, good, &owner)?;
    let bad = Object::typed("plant:Pump").with("flow", 12.5);
    println!(
        "untyped append\t{}",
        db.append("pump-1", 2, bad, &owner).unwrap_err().code()
    );

    println!("-- plant:/types/Pump");
    for node in db.browse(Some("plant"), "/types/Pump", None)? {
        println!("{node}");
    }
    println!("-- federated, tag rotating");
    for node in db.browse(None, "/types", Some("rotating"))? {
        println!("{node}");
    }
    println!("-- federated models");
    for node in db.browse(None, "/", None)? {
        println!("{node}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> microdb::Result<()> {
    run()
}
