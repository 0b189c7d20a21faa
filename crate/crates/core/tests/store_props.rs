// Properties of a single replica: column stores, the information model,
// authorization and eventing. Oracles here are computed from the generated
// scripts, not from engine state.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use microdb::{
    BuiltinCallback, CallbackOutcome, CallbackSpec, ColumnStoreConfig, Grant, InstanceDef, Interface, KeyRange,
    ManualClock, Microdb, Mutation, Options, Principal, PropertyDef, PropertyType, RecordKey, Role, Stage,
    SubjectKind, SubscriptionFilter, Tag, TierKind, TxnKind, TypeDef, Value,
};
use proptest::prelude::*;

fn fixed_clock_db(id: &str) -> Microdb {
    Microdb::open(Options::new(id, TierKind::Local).clock(Arc::new(ManualClock::new(1_000)))).unwrap()
}

#[derive(Debug, Clone)]
enum Op {
    Append(i64, i64),
    Mutate(i64, u32, Option<i64>),
    Read(i64, i64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0i64..8, -50i64..50).prop_map(|(ts, v)| Op::Append(ts, v)),
        2 => (0i64..8, 0u32..3, proptest::option::of(-50i64..50)).prop_map(|(ts, s, v)| Op::Mutate(ts, s, v)),
        1 => (0i64..8, 0i64..9).prop_map(|(a, b)| Op::Read(a.min(b), a.max(b))),
    ]
}

fn assert_strictly_increasing(keys: &[RecordKey]) {
    for w in keys.windows(2) {
        assert!(w[0] < w[1], "{:?} then {:?}", w[0], w[1]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn immutable_store_is_write_once(ops in proptest::collection::vec(op(), 1..60)) {
        let db = fixed_clock_db("r");
        let owner = db.owner();
        db.create_store(ColumnStoreConfig::new("s"), &owner).unwrap();
        let mut first_seen: BTreeMap<RecordKey, (Option<Value>, u64)> = BTreeMap::new();
        for op in ops {
            match op {
                Op::Append(ts, v) => { db.append("s", ts, v, &owner).unwrap(); }
                Op::Mutate(ts, seq, v) => {
                    let m = v.map_or(Mutation::Delete, |v| Mutation::Set(v.into()));
                    let err = db.mutate("s", RecordKey::new(ts, seq), m, &owner).unwrap_err();
                    prop_assert!(matches!(err.code(), "immutable-store" | "not-found"), "{}", err.code());
                }
                Op::Read(lo, hi) => {
                    let recs = db.read_range("s", KeyRange::ts(lo, hi), usize::MAX, &owner).unwrap();
                    assert_strictly_increasing(&recs.iter().map(|r| r.key).collect::<Vec<_>>());
                    prop_assert!(recs.iter().all(|r| (lo..hi).contains(&r.key.ts)));
                }
            }
            for rec in db.read_range("s", KeyRange::ALL, usize::MAX, &owner).unwrap() {
                let seen = first_seen.entry(rec.key).or_insert((rec.value.clone(), rec.prov.origin_seq));
                prop_assert_eq!(seen, &(rec.value.clone(), rec.prov.origin_seq));
            }
        }
    }

    #[test]
    fn origin_sequence_is_gapless(ops in proptest::collection::vec(op(), 1..60)) {
        let db = fixed_clock_db("r");
        let owner = db.owner();
        db.create_store(ColumnStoreConfig::new("m").mutable(), &owner).unwrap();
        let mut committed = 0u64;
        for op in ops {
            let ok = match op {
                Op::Append(ts, v) => db.append("m", ts, v, &owner).is_ok(),
                Op::Mutate(ts, seq, v) => {
                    let m = v.map_or(Mutation::Delete, |v| Mutation::Set(v.into()));
                    db.mutate("m", RecordKey::new(ts, seq), m, &owner).is_ok()
                }
                Op::Read(..) => false,
            };
            committed += ok as u64;
        }
        let mut seqs = Vec::new();
        for rec in db.visible_records("m", &KeyRange::ALL).unwrap() {
            for v in db.versions("m", rec.key).unwrap() {
                prop_assert_eq!(v.prov.origin_id.as_str(), "r");
                seqs.push(v.prov.origin_seq);
            }
        }
        seqs.sort_unstable();
        prop_assert_eq!(seqs, (1..=committed).collect::<Vec<_>>());
    }

    #[test]
    fn content_hash_matches_multiset_equality(
        a in proptest::collection::vec((0i64..4, 0i64..3), 0..12),
        b in proptest::collection::vec((0i64..4, 0i64..3), 0..12),
        lo in 0i64..4,
        hi in 0i64..5,
    ) {
        // Independent model of what a fixed-clock replica stores: key seq is
        // the count of earlier appends at that ts, origin_seq the position.
        fn oracle(script: &[(i64, i64)], range: (i64, i64)) -> BTreeSet<(i64, u32, i64, u64)> {
            let mut per_ts: BTreeMap<i64, u32> = BTreeMap::new();
            let mut out = BTreeSet::new();
            for (i, &(ts, v)) in script.iter().enumerate() {
                let seq = per_ts.entry(ts).or_default();
                if (range.0..range.1).contains(&ts) {
                    out.insert((ts, *seq, v, i as u64 + 1));
                }
                *seq += 1;
            }
            out
        }
        let build = |script: &[(i64, i64)]| {
            let db = fixed_clock_db("r");
            db.create_store(ColumnStoreConfig::new("s"), &db.owner()).unwrap();
            for &(ts, v) in script {
                db.append("s", ts, v, &db.owner()).unwrap();
            }
            db
        };
        let range = KeyRange::ts(lo, hi.max(lo));
        let (da, db) = (build(&a), build(&b));
        let same_hash = da.content_hash("s", &range).unwrap() == db.content_hash("s", &range).unwrap();
        prop_assert_eq!(same_hash, oracle(&a, (lo, hi.max(lo))) == oracle(&b, (lo, hi.max(lo))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn restart_replays_the_log(ops in proptest::collection::vec(op(), 1..40), encrypted in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let open = || Microdb::open(
            Options::new("r", TierKind::Local)
                .data_dir(dir.path())
                .owner_key(microdb::SecretKey::derive("owner"))
                .clock(Arc::new(ManualClock::new(5))),
        ).unwrap();
        let db = open();
        let owner = db.owner();
        let mut cfg = ColumnStoreConfig::new("m").mutable();
        if encrypted {
            cfg = cfg.encrypted();
        }
        db.create_store(cfg, &owner).unwrap();
        for op in ops {
            match op {
                Op::Append(ts, v) => { db.append("m", ts, v, &owner).unwrap(); }
                Op::Mutate(ts, seq, v) => {
                    let m = v.map_or(Mutation::Delete, |v| Mutation::Set(v.into()));
                    let _ = db.mutate("m", RecordKey::new(ts, seq), m, &owner);
                }
                Op::Read(..) => {}
            }
        }
        let before = db.read_range("m", KeyRange::ALL, usize::MAX, &owner).unwrap();
        let versions_before = db.visible_records("m", &KeyRange::ALL).unwrap();
        db.sync_to_disk().unwrap();
        drop(db);
        let db = open();
        prop_assert_eq!(db.read_range("m", KeyRange::ALL, usize::MAX, &owner).unwrap(), before);
        prop_assert_eq!(db.visible_records("m", &KeyRange::ALL).unwrap(), versions_before);
    }
}

// ---- eventing ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_event_per_committed_transaction(ops in proptest::collection::vec(op(), 1..60)) {
        let db = fixed_clock_db("r");
        let owner = db.owner();
        let sub = db.subscribe(SubscriptionFilter::store("*"), &owner).unwrap();
        db.create_store(ColumnStoreConfig::new("m").mutable(), &owner).unwrap();
        db.register_callback(
            CallbackSpec::new("no-negative", Stage::Exchange, "m", |rec| {
                match rec.value.as_ref().and_then(Value::as_f64) {
                    Some(v) if v < 0.0 => CallbackOutcome::Reject("negative".into()),
                    _ => CallbackOutcome::Accept,
                }
            }),
            &owner,
        ).unwrap();
        let mut expected: BTreeMap<TxnKind, u64> = BTreeMap::new();
        *expected.entry(TxnKind::CreateStore).or_default() += 1;
        for op in ops {
            let result = match op {
                Op::Append(ts, v) => db.append("m", ts, v, &owner).map(|_| TxnKind::Create),
                Op::Mutate(ts, seq, v) => {
                    let (m, kind) = match v {
                        Some(v) => (Mutation::Set(v.into()), TxnKind::Update),
                        None => (Mutation::Delete, TxnKind::Delete),
                    };
                    db.mutate("m", RecordKey::new(ts, seq), m, &owner).map(|_| kind)
                }
                Op::Read(..) => continue,
            };
            if let Ok(kind) = result {
                *expected.entry(kind).or_default() += 1;
            }
        }
        let events = sub.drain();
        prop_assert!(!sub.has_gap());
        let mut seen: BTreeMap<TxnKind, u64> = BTreeMap::new();
        for ev in &events {
            *seen.entry(ev.txn).or_default() += 1;
        }
        prop_assert_eq!(seen, expected);
        for w in events.windows(2) {
            prop_assert!(w[0].event_seq < w[1].event_seq);
        }
        let stats = db.store_stats("m").unwrap();
        let creates = events.iter().filter(|e| e.txn == TxnKind::Create).count() as u64;
        prop_assert_eq!(creates, stats.creates);
    }

    #[test]
    fn events_carry_no_value_bytes(values in proptest::collection::vec("[A-Z]{12,20}", 1..10)) {
        let db = fixed_clock_db("r");
        let owner = db.owner();
        db.create_store(ColumnStoreConfig::new("s"), &owner).unwrap();
        let sub = db.subscribe(SubscriptionFilter::store("s"), &owner).unwrap();
        for (i, v) in values.iter().enumerate() {
            db.append("s", i as i64, v.as_str(), &owner).unwrap();
        }
        for ev in sub.drain() {
            let bytes = ev.encode();
            for v in &values {
                prop_assert!(!bytes.windows(v.len()).any(|w| w == v.as_bytes()));
            }
        }
    }

    #[test]
    fn builtin_chain_is_deterministic(values in proptest::collection::vec(-1000.0f64..1000.0, 1..20)) {
        let run = || {
            let db = fixed_clock_db("r");
            let owner = db.owner();
            db.create_store(ColumnStoreConfig::new("s"), &owner).unwrap();
            for (id, b) in [
                ("scale", BuiltinCallback::UnitScale { field: None, factor: 1.8, offset: 32.0 }),
                ("clamp", BuiltinCallback::RangeClamp { field: None, min: -100.0, max: 500.0 }),
            ] {
                db.register_callback(CallbackSpec::builtin(id, Stage::Exchange, "s", b), &owner).unwrap();
            }
            for (i, v) in values.iter().enumerate() {
                db.append("s", i as i64, *v, &owner).unwrap();
            }
            db.read_range("s", KeyRange::ALL, usize::MAX, &owner).unwrap()
        };
        let (a, b) = (run(), run());
        for (r, v) in a.iter().zip(&values) {
            let expect = (v * 1.8 + 32.0).clamp(-100.0, 500.0);
            prop_assert_eq!(r.value.as_ref().and_then(Value::as_f64), Some(expect));
        }
        prop_assert_eq!(a, b);
    }
}

// ---- information model ----

#[derive(Debug, Clone)]
struct ModelScript {
    parents: Vec<Option<usize>>,
    type_tags: Vec<(usize, u8)>,
    instances: Vec<usize>,
    instance_tags: Vec<(usize, u8)>,
}

fn model_script() -> impl Strategy<Value = ModelScript> {
    (1usize..30).prop_flat_map(|n| {
        let parents = (0..n)
            .map(|i| if i == 0 { Just(None).boxed() } else { proptest::option::of(0..i).boxed() })
            .collect::<Vec<_>>();
        (
            parents,
            proptest::collection::vec((0..n, 0u8..6), 0..20),
            proptest::collection::vec(0..n, 1..8),
        )
            .prop_flat_map(|(parents, type_tags, instances)| {
                let m = instances.len();
                (
                    Just(parents),
                    Just(type_tags),
                    Just(instances),
                    proptest::collection::vec((0..m, 0u8..6), 0..10),
                )
            })
            .prop_map(|(parents, type_tags, instances, instance_tags)| ModelScript {
                parents,
                type_tags,
                instances,
                instance_tags,
            })
    })
}

fn build_model(s: &ModelScript) -> Microdb {
    let db = Microdb::in_memory("r", TierKind::Local);
    let owner = db.owner();
    let defs: Vec<TypeDef> = s
        .parents
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d = TypeDef::new("m", format!("T{i}")).property(PropertyDef::new(format!("p{i}"), PropertyType::Float));
            if let Some(p) = p {
                d = d.extends(format!("T{p}"));
            }
            d
        })
        .collect();
    db.define_types(&defs, &owner).unwrap();
    for (j, &t) in s.instances.iter().enumerate() {
        db.create_store(ColumnStoreConfig::new(format!("st{j}")), &owner).unwrap();
        db.define_instance(
            InstanceDef { model_id: "m".into(), name: format!("i{j}"), type_name: format!("T{t}"), store: format!("st{j}") },
            &owner,
        )
        .unwrap();
    }
    for &(t, l) in s.type_tags.iter().collect::<BTreeSet<_>>() {
        db.classify(Tag::new("m", SubjectKind::Type, &format!("T{t}"), &format!("L{l}")), &owner).unwrap();
    }
    for &(j, l) in s.instance_tags.iter().collect::<BTreeSet<_>>() {
        db.classify(Tag::new("m", SubjectKind::Instance, &format!("i{j}"), &format!("L{l}")), &owner).unwrap();
    }
    db
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn instance_tags_follow_the_type_lineage(s in model_script()) {
        let db = build_model(&s);
        let nodes = db.browse(Some("m"), "/instances", None).unwrap();
        prop_assert_eq!(nodes.len(), s.instances.len());
        for (j, &t) in s.instances.iter().enumerate() {
            let mut lineage = vec![t];
            while let Some(p) = s.parents[*lineage.last().unwrap()] {
                lineage.push(p);
            }
            let mut expect: BTreeSet<String> = s.instance_tags.iter().filter(|x| x.0 == j).map(|x| format!("L{}", x.1)).collect();
            expect.extend(s.type_tags.iter().filter(|x| lineage.contains(&x.0)).map(|x| format!("L{}", x.1)));
            let node = nodes.iter().find(|n| n.name == format!("i{j}")).expect("instance listed");
            prop_assert_eq!(node.tags.iter().cloned().collect::<BTreeSet<_>>(), expect.clone());
            for label in 0u8..6 {
                let label = format!("L{label}");
                let hit = db.browse(Some("m"), "/instances", Some(&label)).unwrap().iter().any(|n| n.name == format!("i{j}"));
                prop_assert_eq!(hit, expect.contains(&label));
            }
        }
    }

    #[test]
    fn browse_is_deterministic(s in model_script()) {
        let (a, b) = (build_model(&s), build_model(&s));
        for path in ["/models", "/types", "/instances", "/types/T0", "/instances/i0"] {
            let render = |db: &Microdb| db.browse(None, &path.replace("/T0", "/m:T0").replace("/i0", "/m:i0"), None)
                .unwrap().iter().map(|n| n.to_string()).collect::<Vec<_>>().join("\n");
            prop_assert_eq!(render(&a), render(&b));
        }
    }

    #[test]
    fn append_validation_matches_standalone_validation(
        fields in proptest::collection::btree_map("[abcz]", prop_oneof![
            any::<f64>().prop_map(Value::Float),
            any::<i64>().prop_map(Value::Int),
            "[a-z]{0,4}".prop_map(Value::Str),
        ], 0..4),
        typed in any::<bool>(),
    ) {
        let db = Microdb::in_memory("r", TierKind::Local);
        let owner = db.owner();
        db.define_types(&[
            TypeDef::new("m", "Base").property(PropertyDef::new("a", PropertyType::Float)),
            TypeDef::new("m", "Sub").extends("Base").property(PropertyDef::new("b", PropertyType::Int))
                .property(PropertyDef::new("c", PropertyType::Str)),
        ], &owner).unwrap();
        db.create_store(ColumnStoreConfig::new("s").value_type("m:Sub"), &owner).unwrap();
        let mut obj = if typed { microdb::Object::typed("m:Sub") } else { microdb::Object::default() };
        obj.fields = fields;
        let value = Value::Object(obj);
        let standalone = db.info_model().validate("m:Sub", &value).is_ok();
        let appended = db.append("s", 1, value, &owner).is_ok();
        prop_assert_eq!(standalone, appended);
    }
}

// ---- authorization ----

fn pattern_matches(p: &str, s: &str) -> bool {
    match p.strip_suffix('*') {
        Some(prefix) => s.starts_with(prefix),
        None => p == s,
    }
}

const IFACES: [Interface; 6] = [
    Interface::ExchangeCreate,
    Interface::ExchangeRead,
    Interface::ExchangeUpdate,
    Interface::ExchangeDelete,
    Interface::Subscribe,
    Interface::Admin,
];

type GrantSpec = (usize, &'static str, Option<(i64, i64)>);

fn grant() -> impl Strategy<Value = GrantSpec> {
    (
        0usize..6,
        prop::sample::select(vec!["a", "b", "a*", "*", "zz"]),
        proptest::option::of((0i64..10, 1i64..10).prop_map(|(lo, w)| (lo, lo + w))),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn authorize_matches_grant_oracle(
        roles in proptest::collection::vec(proptest::collection::vec(grant(), 1..4), 1..4),
        bindings in proptest::collection::vec((0usize..3, 0usize..4), 0..6),
        queries in proptest::collection::vec((0usize..3, 0usize..6, prop::sample::select(vec!["a", "ab", "b", "c"]), 0i64..12, 0i64..12), 1..40),
    ) {
        let db = Microdb::in_memory("r", TierKind::Local);
        let owner = db.owner();
        for (i, grants) in roles.iter().enumerate() {
            let gs = grants.iter().map(|&(iface, store, range)| {
                let g = Grant::new(IFACES[iface], store);
                match range { Some((lo, hi)) => g.range(KeyRange::ts(lo, hi)), None => g }
            }).collect();
            db.define_role(Role::new(format!("role{i}"), gs), &owner).unwrap();
        }
        let mut bound: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for &(subject, role) in &bindings {
            if role < roles.len() {
                // Re-provisioning replaces the subject's previous role.
                db.provision(&format!("u{subject}"), &format!("role{role}"), &owner).unwrap();
                bound.insert(subject, BTreeSet::from([role]));
            }
        }
        for (subject, iface, store, a, b) in queries {
            let (lo, hi) = (a.min(b), a.max(b));
            let p = Principal::local(format!("u{subject}"));
            let range = KeyRange::ts(lo, hi);
            let expect = bound.get(&subject).into_iter().flatten().any(|&r| roles[r].iter().any(|&(gi, gs, gr)| {
                gi == iface && pattern_matches(gs, store) && match gr {
                    None => true,
                    Some((glo, ghi)) => lo >= hi || (glo <= lo && hi <= ghi),
                }
            }));
            let d1 = db.authorize(&p, IFACES[iface], store, &range);
            let d2 = db.authorize(&p, IFACES[iface], store, &range);
            prop_assert_eq!(d1, d2);
            prop_assert_eq!(d1.is_allow(), expect, "u{} {:?} {} [{}, {})", subject, IFACES[iface], store, lo, hi);
        }
    }

    #[test]
    fn unbound_subjects_are_denied(subject in "[a-z]{1,8}", iface in 0usize..6, store in "[a-z]{1,4}") {
        let db = Microdb::in_memory("r", TierKind::Local);
        db.define_role(Role::new("any", vec![Grant::new(IFACES[iface], "*")]), &db.owner()).unwrap();
        let p = Principal::local(format!("x-{subject}"));
        prop_assert!(!db.authorize(&p, IFACES[iface], &store, &KeyRange::ALL).is_allow());
    }
}
