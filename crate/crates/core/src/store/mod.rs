//! Column stores: append-mostly collections of timestamped records with a
//! per-store mutability policy.

mod log;
mod state;

use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::db::Microdb;
use crate::error::{Error, Result};
use crate::eventbus::{run_chain, ChainOutcome, Event, Stage, TxnKind};
use crate::security::{CryptoProvider, Interface, Principal, SecretKey};
use crate::value::{KeyRange, Provenance, Record, RecordKey, Value};

pub(crate) use self::log::StoreLog;
pub use self::state::StoreStats;
pub(crate) use self::state::{Applied, StoreState};

/// Names starting with this prefix belong to the engine.
pub const RESERVED_PREFIX: &str = "__";
pub const MAX_NAME_LEN: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mutability {
    #[default]
    Immutable,
    Mutable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnStoreConfig {
    pub name: String,
    #[serde(default)]
    pub mutability: Mutability,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_type: Option<String>,
    #[serde(default)]
    pub encrypted: bool,
    /// Maximum number of keys kept; the oldest are evicted beyond it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention: Option<u64>,
}

impl ColumnStoreConfig {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            mutability: Mutability::Immutable,
            value_type: None,
            encrypted: false,
            retention: None,
        }
    }

    pub fn mutable(mut self) -> Self {
        self.mutability = Mutability::Mutable;
        self
    }

    pub fn value_type(mut self, type_ref: impl Into<String>) -> Self {
        self.value_type = Some(type_ref.into());
        self
    }

    pub fn encrypted(mut self) -> Self {
        self.encrypted = true;
        self
    }

    pub fn retention(mut self, max_records: u64) -> Self {
        self.retention = Some(max_records);
        self
    }
}

/// `[a-z0-9_-]{1,64}`.
pub fn valid_store_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= MAX_NAME_LEN
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

/// Returned by committing operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Receipt {
    pub store: String,
    pub key: RecordKey,
    pub prov: Provenance,
    pub event_seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mutation {
    Set(Value),
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreHandle {
    name: String,
}

impl StoreHandle {
    pub fn name(&self) -> &str {
        &self.name
    }
}

pub(crate) struct Store {
    pub name: String,
    pub state: RwLock<StoreState>,
    pub log: Mutex<Option<StoreLog>>,
}

impl Store {
    /// Build a store, replaying its log when `dir` is set. `event_base` is
    /// the event_seq preceding the store's create-store event.
    pub fn open(
        config: ColumnStoreConfig,
        dir: Option<&Path>,
        crypto: Arc<dyn CryptoProvider>,
        owner_key: Option<&SecretKey>,
        event_base: u64,
    ) -> Result<Self> {
        let name = config.name.clone();
        let mut state = StoreState::new(config);
        let log = match dir {
            Some(dir) => {
                let (log, records) =
                    StoreLog::open(dir, &name, state.config.encrypted, crypto, owner_key)?;
                for rec in records {
                    state.apply(rec);
                    state.event_seq += 1;
                }
                Some(log)
            }
            None => None,
        };
        state.event_seq += event_base + 1;
        Ok(Self {
            name,
            state: RwLock::new(state),
            log: Mutex::new(log),
        })
    }
}

/// A record that made it through the write path.
#[derive(Debug, Clone)]
pub(crate) struct Committed {
    pub record: Record,
    pub conflict: bool,
    pub event_seq: u64,
}

impl Microdb {
    pub(crate) fn store(&self, name: &str) -> Result<Arc<Store>> {
        self.stores
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("store {name}")))
    }

    pub fn has_store(&self, name: &str) -> bool {
        self.stores.read().contains_key(name)
    }

    /// Names of user stores, sorted.
    pub fn store_names(&self) -> Vec<String> {
        self.stores
            .read()
            .keys()
            .filter(|n| !n.starts_with(RESERVED_PREFIX))
            .cloned()
            .collect()
    }

    pub fn store_config(&self, name: &str) -> Result<ColumnStoreConfig> {
        Ok(self.store(name)?.state.read().config.clone())
    }

    pub fn store_stats(&self, name: &str) -> Result<StoreStats> {
        Ok(self.store(name)?.state.read().stats)
    }

    /// Number of keys whose visible version is not a tombstone.
    pub fn record_count(&self, name: &str) -> Result<usize> {
        Ok(self.store(name)?.state.read().live_count())
    }

    fn publish_event(
        &self,
        store: &str,
        event_seq: u64,
        txn: TxnKind,
        key: Option<RecordKey>,
        actor: &str,
    ) {
        self.bus.publish(&Event {
            event_seq,
            txn,
            store: store.to_string(),
            key,
            actor: actor.to_string(),
            emit_ts: self.clock.now_ns(),
        });
    }

    pub fn create_store(
        &self,
        config: ColumnStoreConfig,
        principal: &Principal,
    ) -> Result<StoreHandle> {
        self.require_admin(principal, &config.name)?;
        if config.name.starts_with(RESERVED_PREFIX) {
            return Err(Error::InvalidConfig(format!(
                "store name {} uses the reserved prefix",
                config.name
            )));
        }
        self.create_store_unchecked(config, &principal.subject)
    }

    pub(crate) fn create_store_unchecked(
        &self,
        config: ColumnStoreConfig,
        actor: &str,
    ) -> Result<StoreHandle> {
        if !valid_store_name(&config.name) && !config.name.starts_with(RESERVED_PREFIX) {
            return Err(Error::InvalidConfig(format!(
                "store name {:?} must match [a-z0-9_-]{{1,64}}",
                config.name
            )));
        }
        if let Some(t) = &config.value_type {
            self.model
                .read()
                .resolve_type(t)
                .map_err(|e| Error::InvalidConfig(format!("value_type {t}: {e}")))?;
        }
        if config.retention == Some(0) {
            return Err(Error::InvalidConfig("retention must be positive".into()));
        }
        let _g = self.admin.lock();
        if self.stores.read().contains_key(&config.name) {
            return Err(Error::DuplicateName(config.name));
        }
        let name = config.name.clone();
        let base = self.event_base.lock().get(&name).copied().unwrap_or(0);
        if let Some(dir) = &self.dir {
            StoreLog::remove(dir, &name)?;
        }
        let store = Store::open(
            config,
            self.dir.as_deref(),
            self.crypto.clone(),
            self.owner_key.as_ref(),
            base,
        )?;
        let seq = store.state.read().event_seq;
        self.event_base.lock().insert(name.clone(), base);
        self.stores.write().insert(name.clone(), Arc::new(store));
        self.save_catalog()?;
        self.publish_event(&name, seq, TxnKind::CreateStore, None, actor);
        Ok(StoreHandle { name })
    }

    /// Remove a store with all its records. Ingest bindings on it are
    /// removed and sync state for it is discarded.
    pub fn drop_store(&self, name: &str, principal: &Principal) -> Result<()> {
        self.require_admin(principal, name)?;
        if name.starts_with(RESERVED_PREFIX) {
            return Err(Error::InvalidConfig(format!("store {name} is reserved")));
        }
        let _g = self.admin.lock();
        let store = self
            .stores
            .write()
            .remove(name)
            .ok_or_else(|| Error::NotFound(format!("store {name}")))?;
        let seq = {
            let mut st = store.state.write();
            st.event_seq += 1;
            st.event_seq
        };
        *store.log.lock() = None;
        if let Some(dir) = &self.dir {
            StoreLog::remove(dir, name)?;
        }
        self.event_base.lock().insert(name.to_string(), seq);
        self.ingest.lock().remove_store(name);
        for link in self.links.lock().values_mut() {
            link.forget_store(name);
        }
        self.save_catalog()?;
        self.publish_event(name, seq, TxnKind::DeleteStore, None, &principal.subject);
        Ok(())
    }

    /// The single-writer commit path shared by local writes, ingest and
    /// sync. `make` builds the record under the store's write lock; the
    /// event is emitted before the lock is released so per-store delivery
    /// order equals commit order.
    pub(crate) fn commit_with(
        &self,
        store: &Store,
        actor: &str,
        make: impl FnOnce(&StoreState, i64) -> Result<Record>,
    ) -> Result<Option<Committed>> {
        let mut st = store.state.write();
        let now = self.clock.now_ns();
        let rec = make(&st, now)?;
        if st.has_version(&rec.prov.origin_id, rec.prov.origin_seq) {
            return Ok(None);
        }
        if let Some(log) = store.log.lock().as_mut() {
            log.append(&rec)?;
        }
        match st.apply(rec.clone()) {
            Applied::Duplicate => Ok(None),
            Applied::Committed { txn, conflict } => {
                st.event_seq += 1;
                let event_seq = st.event_seq;
                self.publish_event(&store.name, event_seq, txn, Some(rec.key), actor);
                Ok(Some(Committed {
                    record: rec,
                    conflict,
                    event_seq,
                }))
            }
        }
    }

    fn validate_value(&self, store: &str, config: &ColumnStoreConfig, value: &Value) -> Result<()> {
        match &config.value_type {
            Some(t) => self
                .model
                .read()
                .validate(t, value)
                .map_err(|e| Error::SchemaViolation(format!("store {store}: {e}"))),
            None => Ok(()),
        }
    }

    /// Exchange or ingest write of a new record at `ts`. The callback chain
    /// runs on a provisional record; sequence numbers are assigned at commit.
    pub(crate) fn append_as(
        &self,
        store_name: &str,
        ts: i64,
        value: Value,
        principal: &Principal,
        actor: &str,
        stage: Stage,
    ) -> Result<Receipt> {
        let store = self.store(store_name)?;
        self.require(
            principal,
            Interface::ExchangeCreate,
            store_name,
            &KeyRange::ts(ts, ts.saturating_add(1)),
        )?;
        let config = store.state.read().config.clone();
        self.validate_value(store_name, &config, &value)?;
        let provisional = Record {
            key: RecordKey::at(ts),
            value: Some(value),
            prov: Provenance {
                origin_id: self.replica_id.clone(),
                origin_seq: 0,
                write_ts: 0,
            },
        };
        let roles = self.roles_of(&principal.subject);
        let value = match run_chain(&self.callbacks(), stage, store_name, provisional, &roles)? {
            ChainOutcome::Accept(r) => r
                .value
                .ok_or_else(|| Error::SchemaViolation("callback produced a tombstone".into()))?,
            ChainOutcome::Reject {
                callback_id,
                reason,
            } => {
                return Err(Error::RejectedByCallback {
                    callback_id,
                    reason,
                })
            }
        };
        self.validate_value(store_name, &config, &value)?;
        let origin = self.replica_id.clone();
        let committed = self
            .commit_with(&store, actor, |st, now| {
                Ok(Record {
                    key: RecordKey::new(ts, st.next_seq_for_ts(ts)),
                    value: Some(value),
                    prov: Provenance {
                        origin_seq: st.next_origin_seq(&origin),
                        origin_id: origin.clone(),
                        write_ts: now,
                    },
                })
            })?
            .expect("fresh origin_seq cannot be a duplicate");
        Ok(Receipt {
            store: store_name.to_string(),
            key: committed.record.key,
            prov: committed.record.prov,
            event_seq: committed.event_seq,
        })
    }

    /// Append a record at timestamp `ts`. If the store already holds keys at
    /// `ts`, the next free `seq` is used.
    pub fn append(
        &self,
        store: &str,
        ts: i64,
        value: impl Into<Value>,
        principal: &Principal,
    ) -> Result<Receipt> {
        self.append_as(
            store,
            ts,
            value.into(),
            principal,
            &principal.subject,
            Stage::Exchange,
        )
    }

    /// Live records with `range.lo <= key < range.hi`, in key order.
    pub fn read_range(
        &self,
        store: &str,
        range: KeyRange,
        limit: usize,
        principal: &Principal,
    ) -> Result<Vec<Record>> {
        let s = self.store(store)?;
        self.require(principal, Interface::ExchangeRead, store, &range)?;
        let records = s.state.read().range(&range, limit);
        Ok(records)
    }

    /// Replace or tombstone the record at `key` in a mutable store.
    pub fn mutate(
        &self,
        store_name: &str,
        key: RecordKey,
        mutation: Mutation,
        principal: &Principal,
    ) -> Result<Receipt> {
        let store = self.store(store_name)?;
        let config = store.state.read().config.clone();
        if config.mutability == Mutability::Immutable {
            return Err(Error::ImmutableStore(store_name.to_string()));
        }
        let interface = match mutation {
            Mutation::Set(_) => Interface::ExchangeUpdate,
            Mutation::Delete => Interface::ExchangeDelete,
        };
        let point = KeyRange::new(key, RecordKey::new(key.ts, key.seq.saturating_add(1)));
        self.require(principal, interface, store_name, &point)?;
        let exists = store
            .state
            .read()
            .winner(&key)
            .is_some_and(|r| !r.is_tombstone());
        if !exists {
            return Err(Error::KeyNotFound {
                store: store_name.to_string(),
                key,
            });
        }
        let value = match mutation {
            Mutation::Set(v) => {
                self.validate_value(store_name, &config, &v)?;
                Some(v)
            }
            Mutation::Delete => None,
        };
        let provisional = Record {
            key,
            value,
            prov: Provenance {
                origin_id: self.replica_id.clone(),
                origin_seq: 0,
                write_ts: 0,
            },
        };
        let roles = self.roles_of(&principal.subject);
        let value = match run_chain(
            &self.callbacks(),
            Stage::Exchange,
            store_name,
            provisional,
            &roles,
        )? {
            ChainOutcome::Accept(r) => r.value,
            ChainOutcome::Reject {
                callback_id,
                reason,
            } => {
                return Err(Error::RejectedByCallback {
                    callback_id,
                    reason,
                })
            }
        };
        if let Some(v) = &value {
            self.validate_value(store_name, &config, v)?;
        }
        let origin = self.replica_id.clone();
        let committed = self
            .commit_with(&store, &principal.subject, |st, now| {
                let winner = st.winner(&key).filter(|r| !r.is_tombstone());
                let Some(winner) = winner else {
                    return Err(Error::KeyNotFound {
                        store: store_name.to_string(),
                        key,
                    });
                };
                Ok(Record {
                    key,
                    value,
                    prov: Provenance {
                        origin_seq: st.next_origin_seq(&origin),
                        origin_id: origin.clone(),
                        write_ts: now.max(winner.prov.write_ts.saturating_add(1)),
                    },
                })
            })?
            .expect("fresh origin_seq cannot be a duplicate");
        Ok(Receipt {
            store: store_name.to_string(),
            key,
            prov: committed.record.prov,
            event_seq: committed.event_seq,
        })
    }

    /// SHA-256 over the canonical framing of every visible version
    /// (tombstones included) inside `filter`, in key order.
    pub fn content_hash(&self, store: &str, filter: &KeyRange) -> Result<[u8; 32]> {
        Ok(self.store(store)?.state.read().content_hash(filter))
    }

    /// Every retained version of `key`, current winner first.
    pub fn versions(&self, store: &str, key: RecordKey) -> Result<Vec<Record>> {
        Ok(self
            .store(store)?
            .state
            .read()
            .versions_of(&key)
            .into_iter()
            .cloned()
            .collect())
    }

    /// Visible versions including tombstones, key order. Intended for
    /// diagnostics and tests; no authorization check.
    pub fn visible_records(&self, store: &str, range: &KeyRange) -> Result<Vec<Record>> {
        Ok(self
            .store(store)?
            .state
            .read()
            .visible(range)
            .cloned()
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::security::TierKind;

    #[test]
    fn name_rules() {
        assert!(valid_store_name("temp_01-a"));
        assert!(!valid_store_name(""));
        assert!(!valid_store_name("Temp"));
        assert!(!valid_store_name(&"a".repeat(65)));
        assert!(valid_store_name(&"a".repeat(64)));
    }

    #[test]
    fn append_read_roundtrip() {
        let db = Microdb::in_memory("r", TierKind::Local);
        let o = db.owner();
        db.create_store(ColumnStoreConfig::new("temp"), &o).unwrap();
        db.append("temp", 100, 42.0, &o).unwrap();
        let got = db
            .read_range("temp", KeyRange::ts(100, 101), 10, &o)
            .unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].value, Some(Value::Float(42.0)));
    }

    #[test]
    fn same_ts_gets_next_seq() {
        let db = Microdb::in_memory("r", TierKind::Local);
        let o = db.owner();
        db.create_store(ColumnStoreConfig::new("temp"), &o).unwrap();
        let a = db.append("temp", 100, 1i64, &o).unwrap();
        let b = db.append("temp", 100, 2i64, &o).unwrap();
        assert_eq!(
            (a.key, b.key),
            (RecordKey::new(100, 0), RecordKey::new(100, 1))
        );
        assert_eq!((a.prov.origin_seq, b.prov.origin_seq), (1, 2));
    }

    #[test]
    fn mutate_rules() {
        let db = Microdb::in_memory("r", TierKind::Local);
        let o = db.owner();
        db.create_store(ColumnStoreConfig::new("imm"), &o).unwrap();
        db.create_store(ColumnStoreConfig::new("mut").mutable(), &o)
            .unwrap();
        let r = db.append("imm", 1, 1i64, &o).unwrap();
        let before = db.content_hash("imm", &KeyRange::ALL).unwrap();
        assert!(matches!(
            db.mutate("imm", r.key, Mutation::Set(2i64.into()), &o),
            Err(Error::ImmutableStore(_))
        ));
        assert_eq!(db.content_hash("imm", &KeyRange::ALL).unwrap(), before);

        let r = db.append("mut", 1, 1i64, &o).unwrap();
        db.mutate("mut", r.key, Mutation::Set(2i64.into()), &o)
            .unwrap();
        assert_eq!(
            db.read_range("mut", KeyRange::ALL, 10, &o).unwrap()[0].value,
            Some(Value::Int(2))
        );
        db.mutate("mut", r.key, Mutation::Delete, &o).unwrap();
        assert!(db
            .read_range("mut", KeyRange::ALL, 10, &o)
            .unwrap()
            .is_empty());
        assert!(matches!(
            db.mutate("mut", r.key, Mutation::Delete, &o),
            Err(Error::KeyNotFound { .. })
        ));
        assert_eq!(db.versions("mut", r.key).unwrap().len(), 3);
    }

    #[test]
    fn drop_then_recreate_is_empty() {
        let db = Microdb::in_memory("r", TierKind::Local);
        let o = db.owner();
        db.create_store(ColumnStoreConfig::new("t"), &o).unwrap();
        db.append("t", 1, 1i64, &o).unwrap();
        assert!(matches!(
            db.create_store(ColumnStoreConfig::new("t"), &o),
            Err(Error::DuplicateName(_))
        ));
        db.drop_store("t", &o).unwrap();
        assert!(matches!(db.drop_store("t", &o), Err(Error::NotFound(_))));
        db.create_store(ColumnStoreConfig::new("t"), &o).unwrap();
        assert_eq!(db.record_count("t").unwrap(), 0);
    }

    #[test]
    fn bad_configs() {
        let db = Microdb::in_memory("r", TierKind::Local);
        let o = db.owner();
        assert!(matches!(
            db.create_store(ColumnStoreConfig::new("Bad Name"), &o),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            db.create_store(ColumnStoreConfig::new("t").value_type("m:Nope"), &o),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            db.create_store(ColumnStoreConfig::new("__x"), &o),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn restart_replays_log() {
        let dir = tempfile::tempdir().unwrap();
        let opts = crate::db::Options::new("r", TierKind::Local).data_dir(dir.path());
        let before = {
            let db = Microdb::open(opts.clone()).unwrap();
            let o = db.owner();
            db.create_store(ColumnStoreConfig::new("t").mutable(), &o)
                .unwrap();
            for i in 0..20 {
                db.append("t", i % 7, i, &o).unwrap();
            }
            db.mutate("t", RecordKey::new(3, 0), Mutation::Delete, &o)
                .unwrap();
            db.read_range("t", KeyRange::ALL, usize::MAX, &o).unwrap()
        };
        let db = Microdb::open(opts).unwrap();
        let after = db
            .read_range("t", KeyRange::ALL, usize::MAX, &db.owner())
            .unwrap();
        assert_eq!(before, after);
        let next = db.append("t", 100, 1i64, &db.owner()).unwrap();
        assert_eq!(next.prov.origin_seq, 22);
    }
}
