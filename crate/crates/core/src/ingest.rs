//! Ingest bindings: turn readings from an upstream source into appends, by
//! push or by periodic poll.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::db::Microdb;
use crate::error::{Error, Result};
use crate::eventbus::Stage;
use crate::security::{Decision, Interface, Principal};
use crate::store::{Mutability, Receipt};
use crate::value::{Provenance, Record, RecordKey, Value};

pub const MIN_POLL_PERIOD_MS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum IngestMode {
    Push,
    Poll { period_ms: u64 },
}

/// Which parts of a reading become the record key and value. With no
/// fields set the reading's own `ts` and `value` are used; otherwise the
/// named fields are taken out of an object-valued reading.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadingMapping {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts_field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_field: Option<String>,
}

impl ReadingMapping {
    pub fn apply(&self, reading: &Reading) -> std::result::Result<(i64, Value), String> {
        let field = |name: &str| match &reading.value {
            Value::Object(o) => o
                .fields
                .get(name)
                .cloned()
                .ok_or_else(|| format!("reading has no field {name}")),
            other => Err(format!(
                "field {name} requested from {} reading",
                other.kind()
            )),
        };
        let ts = match &self.ts_field {
            None => reading.ts,
            Some(f) => match field(f)? {
                Value::Int(ts) => ts,
                other => return Err(format!("ts field {f} is {}", other.kind())),
            },
        };
        let value = match &self.value_field {
            None => reading.value.clone(),
            Some(f) => field(f)?,
        };
        Ok((ts, value))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestBinding {
    pub source_id: String,
    pub store: String,
    #[serde(flatten)]
    pub mode: IngestMode,
    /// Resolved by the instance's [`SourceResolver`], e.g. `script:<path>`
    /// or `memory:<name>`.
    #[serde(default)]
    pub address: String,
    #[serde(default)]
    pub mapping: ReadingMapping,
}

impl IngestBinding {
    pub fn push(source_id: impl Into<String>, store: impl Into<String>) -> Self {
        Self {
            source_id: source_id.into(),
            store: store.into(),
            mode: IngestMode::Push,
            address: String::new(),
            mapping: ReadingMapping::default(),
        }
    }

    pub fn poll(
        source_id: impl Into<String>,
        store: impl Into<String>,
        address: impl Into<String>,
        period_ms: u64,
    ) -> Self {
        Self {
            source_id: source_id.into(),
            store: store.into(),
            mode: IngestMode::Poll { period_ms },
            address: address.into(),
            mapping: ReadingMapping::default(),
        }
    }

    pub fn mapping(mut self, mapping: ReadingMapping) -> Self {
        self.mapping = mapping;
        self
    }

    pub fn actor(&self) -> String {
        format!("ingest:{}", self.source_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    pub ts: i64,
    pub value: Value,
}

impl Reading {
    pub fn new(ts: i64, value: impl Into<Value>) -> Self {
        Self {
            ts,
            value: value.into(),
        }
    }
}

/// An upstream data source.
pub trait Source: Send {
    /// Readings with `ts > after` that are available at `now`, in any
    /// order. `Err` means the source could not be reached.
    fn fetch(&mut self, after: Option<i64>, now: i64) -> std::result::Result<Vec<Reading>, String>;
}

pub trait SourceResolver: Send + Sync {
    fn resolve(&self, address: &str) -> Result<Box<dyn Source>>;
}

#[derive(Debug, Default)]
struct ScriptInner {
    readings: Vec<Reading>,
    outages: Vec<(i64, i64)>,
}

/// Replays a fixed script. A reading becomes available once the clock
/// reaches its timestamp, and the source is unreachable inside any outage
/// window `[start, end)`. Clones share the same script, so readings can be
/// added while a binding is active.
#[derive(Debug, Clone, Default)]
pub struct ScriptedSource {
    inner: Arc<Mutex<ScriptInner>>,
}

impl ScriptedSource {
    pub fn new(readings: Vec<Reading>) -> Self {
        let s = Self::default();
        s.inner.lock().readings = readings;
        s
    }

    pub fn outage(self, start: i64, end: i64) -> Self {
        self.inner.lock().outages.push((start, end));
        self
    }

    pub fn add(&self, reading: Reading) {
        self.inner.lock().readings.push(reading);
    }

    pub fn readings(&self) -> Vec<Reading> {
        self.inner.lock().readings.clone()
    }

    /// Parse the line format `ts_ns<TAB>value_literal`. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Vec<Reading>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (ts, lit) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected ts<TAB>value".into(),
            })?;
            let ts = ts.trim().parse::<i64>().map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("bad timestamp: {e}"),
            })?;
            out.push(Reading {
                ts,
                value: Value::parse_literal(lit),
            });
        }
        Ok(out)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::new(Self::parse(&std::fs::read_to_string(path)?)?))
    }
}

impl Source for ScriptedSource {
    fn fetch(&mut self, after: Option<i64>, now: i64) -> std::result::Result<Vec<Reading>, String> {
        let inner = self.inner.lock();
        if inner.outages.iter().any(|&(s, e)| s <= now && now < e) {
            return Err("source unreachable".into());
        }
        Ok(inner
            .readings
            .iter()
            .filter(|r| r.ts <= now && after.map_or(true, |a| r.ts > a))
            .cloned()
            .collect())
    }
}

/// Resolves `script:<path>` to a [`ScriptedSource`] read from a file and
/// `memory:<name>` to a source registered in-process.
#[derive(Debug, Default)]
pub struct ScriptResolver {
    memory: Mutex<BTreeMap<String, ScriptedSource>>,
}

impl ScriptResolver {
    pub fn register(&self, name: impl Into<String>, source: ScriptedSource) {
        self.memory.lock().insert(name.into(), source);
    }
}

impl SourceResolver for ScriptResolver {
    fn resolve(&self, address: &str) -> Result<Box<dyn Source>> {
        if let Some(path) = address.strip_prefix("script:") {
            return Ok(Box::new(ScriptedSource::from_file(Path::new(path))?));
        }
        if let Some(name) = address.strip_prefix("memory:") {
            return match self.memory.lock().get(name) {
                Some(s) => Ok(Box::new(s.clone())),
                None => Err(Error::InvalidConfig(format!(
                    "no in-memory source named {name}"
                ))),
            };
        }
        Err(Error::InvalidConfig(format!(
            "unsupported source address {address:?}"
        )))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestCounters {
    pub appended: u64,
    /// Every dropped reading; the fields below break this down.
    pub dropped: u64,
    pub duplicate: u64,
    pub unreachable: u64,
    pub rejected: u64,
    pub unauthorized: u64,
    pub conflict: u64,
    pub invalid: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DropReason {
    Unbound,
    Unauthorized,
    RejectedByCallback { callback_id: String },
    Conflict,
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PushOutcome {
    Appended(Receipt),
    Duplicate,
    Dropped(DropReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestStatus {
    pub binding: IngestBinding,
    pub counters: IngestCounters,
    pub last_seen: Option<i64>,
    pub next_deadline: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct PersistedBinding {
    binding: IngestBinding,
    #[serde(default)]
    last_seen: Option<i64>,
    #[serde(default)]
    counters: IngestCounters,
}

struct BindingState {
    binding: IngestBinding,
    source: Option<Box<dyn Source>>,
    counters: IngestCounters,
    last_seen: Option<i64>,
    next_deadline: Option<i64>,
}

pub(crate) struct IngestState {
    bindings: BTreeMap<String, BindingState>,
    implicit_grants: bool,
    orphan_drops: u64,
}

impl Default for IngestState {
    fn default() -> Self {
        Self {
            bindings: BTreeMap::new(),
            implicit_grants: true,
            orphan_drops: 0,
        }
    }
}

impl IngestState {
    /// The implicit exchange-create grant an ingest actor holds on its bound
    /// store. `None` when the subject is not an active ingest actor.
    pub fn implicit_decision(
        &self,
        subject: &str,
        interface: Interface,
        store: &str,
    ) -> Option<Decision> {
        if !self.implicit_grants || interface != Interface::ExchangeCreate {
            return None;
        }
        let source = subject.strip_prefix("ingest:")?;
        self.bindings
            .get(store)
            .filter(|b| b.binding.source_id == source)
            .map(|_| Decision::Allow)
    }

    pub fn remove_store(&mut self, store: &str) {
        self.bindings.remove(store);
    }

    pub fn persisted(&self) -> Vec<PersistedBinding> {
        self.bindings
            .values()
            .map(|b| PersistedBinding {
                binding: b.binding.clone(),
                last_seen: b.last_seen,
                counters: b.counters,
            })
            .collect()
    }

    /// Reinstate persisted bindings; poll bindings resume one period after
    /// `now`.
    pub fn restore(
        &mut self,
        bindings: Vec<PersistedBinding>,
        resolver: &dyn SourceResolver,
        now: i64,
    ) {
        for pb in bindings {
            let source = match pb.binding.mode {
                IngestMode::Push => None,
                IngestMode::Poll { .. } => match resolver.resolve(&pb.binding.address) {
                    Ok(s) => Some(s),
                    Err(e) => {
                        log::warn!(
                            "ingest {}: source {} unavailable after restart: {e}",
                            pb.binding.source_id,
                            pb.binding.address
                        );
                        None
                    }
                },
            };
            let next_deadline = period_ns(pb.binding.mode).map(|p| now + p);
            self.bindings.insert(
                pb.binding.store.clone(),
                BindingState {
                    binding: pb.binding,
                    source,
                    counters: pb.counters,
                    last_seen: pb.last_seen,
                    next_deadline,
                },
            );
        }
    }
}

fn period_ns(mode: IngestMode) -> Option<i64> {
    match mode {
        IngestMode::Push => None,
        IngestMode::Poll { period_ms } => Some(period_ms as i64 * 1_000_000),
    }
}

impl Microdb {
    /// Attach an upstream source to a store. The binding's actor
    /// `ingest:<source_id>` may then append to that store.
    pub fn bind_source(&self, binding: IngestBinding, principal: &Principal) -> Result<()> {
        self.require_admin(principal, &binding.store)?;
        if !self.has_store(&binding.store) {
            return Err(Error::UnknownStore(binding.store));
        }
        let source = match binding.mode {
            IngestMode::Push => None,
            IngestMode::Poll { period_ms } if period_ms < MIN_POLL_PERIOD_MS => {
                return Err(Error::InvalidConfig(format!(
                    "poll period {period_ms}ms is below {MIN_POLL_PERIOD_MS}ms"
                )));
            }
            IngestMode::Poll { .. } => Some(self.resolver.resolve(&binding.address)?),
        };
        {
            let _g = self.admin.lock();
            let mut ingest = self.ingest.lock();
            if ingest.bindings.contains_key(&binding.store) {
                return Err(Error::AlreadyBound(binding.store));
            }
            if ingest
                .bindings
                .values()
                .any(|b| b.binding.source_id == binding.source_id)
            {
                return Err(Error::DuplicateName(format!(
                    "ingest source {}",
                    binding.source_id
                )));
            }
            let next_deadline = period_ns(binding.mode).map(|p| self.now() + p);
            ingest.bindings.insert(
                binding.store.clone(),
                BindingState {
                    binding,
                    source,
                    counters: IngestCounters::default(),
                    last_seen: None,
                    next_deadline,
                },
            );
        }
        self.save_catalog()
    }

    pub fn unbind(&self, store: &str, principal: &Principal) -> Result<()> {
        self.require_admin(principal, store)?;
        if !self.has_store(store) {
            return Err(Error::UnknownStore(store.to_string()));
        }
        {
            let _g = self.admin.lock();
            if self.ingest.lock().bindings.remove(store).is_none() {
                return Err(Error::NotFound(format!("ingest binding on {store}")));
            }
        }
        self.save_catalog()
    }

    /// Turn the implicit ingest grants on or off. With them off, ingest
    /// actors need an explicit role like any other subject.
    pub fn set_implicit_ingest_grants(&self, enabled: bool) {
        self.ingest.lock().implicit_grants = enabled;
    }

    pub fn ingest_status(&self) -> Vec<IngestStatus> {
        self.ingest
            .lock()
            .bindings
            .values()
            .map(|b| IngestStatus {
                binding: b.binding.clone(),
                counters: b.counters,
                last_seen: b.last_seen,
                next_deadline: b.next_deadline,
            })
            .collect()
    }

    /// Readings pushed for sources with no active binding.
    pub fn orphan_drops(&self) -> u64 {
        self.ingest.lock().orphan_drops
    }

    fn count(&self, store: &str, f: impl FnOnce(&mut IngestCounters)) {
        if let Some(b) = self.ingest.lock().bindings.get_mut(store) {
            f(&mut b.counters);
        }
    }

    /// Map, filter and append one reading for `binding`. Never fails; the
    /// outcome is counted.
    fn ingest_reading(&self, binding: &IngestBinding, reading: &Reading) -> PushOutcome {
        let store_name = binding.store.as_str();
        let outcome = self.ingest_reading_inner(binding, reading);
        self.count(store_name, |c| match &outcome {
            PushOutcome::Appended(_) => c.appended += 1,
            PushOutcome::Duplicate => c.duplicate += 1,
            PushOutcome::Dropped(reason) => {
                c.dropped += 1;
                match reason {
                    DropReason::Unauthorized => c.unauthorized += 1,
                    DropReason::RejectedByCallback { .. } => c.rejected += 1,
                    DropReason::Conflict => c.conflict += 1,
                    DropReason::Invalid(_) | DropReason::Unbound => c.invalid += 1,
                }
            }
        });
        if let PushOutcome::Dropped(reason) = &outcome {
            log::warn!(
                "ingest {} -> {store_name}: dropped reading at {}: {reason:?}",
                binding.source_id,
                reading.ts
            );
        }
        outcome
    }

    fn ingest_reading_inner(&self, binding: &IngestBinding, reading: &Reading) -> PushOutcome {
        let (ts, value) = match binding.mapping.apply(reading) {
            Ok(m) => m,
            Err(e) => return PushOutcome::Dropped(DropReason::Invalid(e)),
        };
        let actor = binding.actor();
        let principal = Principal::local(actor.clone());
        let store = match self.store(&binding.store) {
            Ok(s) => s,
            Err(_) => return PushOutcome::Dropped(DropReason::Unbound),
        };
        let (existing, mutability) = {
            let st = store.state.read();
            (
                st.winner(&RecordKey::at(ts))
                    .filter(|r| !r.is_tombstone())
                    .cloned(),
                st.config.mutability,
            )
        };
        if let Some(existing) = existing {
            if existing.value.as_ref() == Some(&value) {
                return PushOutcome::Duplicate;
            }
            if mutability == Mutability::Immutable {
                return PushOutcome::Dropped(DropReason::Conflict);
            }
            return self.ingest_update(binding, &principal, existing, value);
        }
        match self.append_as(&binding.store, ts, value, &principal, &actor, Stage::Ingest) {
            Ok(r) => PushOutcome::Appended(r),
            Err(Error::Unauthorized(_) | Error::UnauthorizedRange(_)) => {
                PushOutcome::Dropped(DropReason::Unauthorized)
            }
            Err(Error::RejectedByCallback { callback_id, .. }) => {
                PushOutcome::Dropped(DropReason::RejectedByCallback { callback_id })
            }
            Err(e) => PushOutcome::Dropped(DropReason::Invalid(e.to_string())),
        }
    }

    /// A changed reading for an already-stored timestamp in a mutable store
    /// becomes a new version of that key.
    fn ingest_update(
        &self,
        binding: &IngestBinding,
        principal: &Principal,
        existing: Record,
        value: Value,
    ) -> PushOutcome {
        let store_name = &binding.store;
        let key = existing.key;
        if !self
            .authorize(
                principal,
                Interface::ExchangeCreate,
                store_name,
                &crate::value::KeyRange::ts(key.ts, key.ts + 1),
            )
            .is_allow()
        {
            return PushOutcome::Dropped(DropReason::Unauthorized);
        }
        let provisional = Record {
            key,
            value: Some(value),
            prov: existing.prov.clone(),
        };
        let roles = self.roles_of(&principal.subject);
        let rec = match crate::eventbus::run_chain(
            &self.callbacks(),
            Stage::Ingest,
            store_name,
            provisional,
            &roles,
        ) {
            Ok(crate::eventbus::ChainOutcome::Accept(r)) => r,
            Ok(crate::eventbus::ChainOutcome::Reject { callback_id, .. }) => {
                return PushOutcome::Dropped(DropReason::RejectedByCallback { callback_id })
            }
            Err(e) => return PushOutcome::Dropped(DropReason::Invalid(e.to_string())),
        };
        let Ok(store) = self.store(store_name) else {
            return PushOutcome::Dropped(DropReason::Unbound);
        };
        let origin = self.replica_id.clone();
        let result = self.commit_with(&store, &principal.subject, |st, now| {
            let floor = st
                .winner(&key)
                .map_or(i64::MIN, |w| w.prov.write_ts.saturating_add(1));
            Ok(Record {
                key,
                value: rec.value,
                prov: Provenance {
                    origin_seq: st.next_origin_seq(&origin),
                    origin_id: origin.clone(),
                    write_ts: now.max(floor),
                },
            })
        });
        match result {
            Ok(Some(c)) => PushOutcome::Appended(Receipt {
                store: store_name.clone(),
                key,
                prov: c.record.prov,
                event_seq: c.event_seq,
            }),
            Ok(None) => PushOutcome::Duplicate,
            Err(e) => PushOutcome::Dropped(DropReason::Invalid(e.to_string())),
        }
    }

    /// Deliver a reading from a push-mode source.
    pub fn on_push(&self, source_id: &str, reading: Reading) -> PushOutcome {
        let binding = {
            let mut ingest = self.ingest.lock();
            let found = ingest
                .bindings
                .values()
                .find(|b| b.binding.source_id == source_id && b.binding.mode == IngestMode::Push)
                .map(|b| b.binding.clone());
            if found.is_none() {
                ingest.orphan_drops += 1;
            }
            found
        };
        match binding {
            Some(b) => self.ingest_reading(&b, &reading),
            None => {
                log::warn!("push from unbound source {source_id} dropped");
                PushOutcome::Dropped(DropReason::Unbound)
            }
        }
    }

    /// Query every poll binding whose deadline is at or before `now` and
    /// append readings newer than the binding's last-seen timestamp, in ts
    /// order. Returns the number appended.
    pub fn poll_tick(&self, now: i64) -> usize {
        let due: Vec<String> = self
            .ingest
            .lock()
            .bindings
            .values()
            .filter(|b| b.next_deadline.is_some_and(|d| d <= now))
            .map(|b| b.binding.store.clone())
            .collect();
        let mut appended = 0;
        for store in due {
            let fetched = {
                let mut ingest = self.ingest.lock();
                let Some(b) = ingest.bindings.get_mut(&store) else {
                    continue;
                };
                let period = period_ns(b.binding.mode).expect("only poll bindings have deadlines");
                let mut next = b.next_deadline.unwrap_or(now) + period;
                if next <= now {
                    next = now + period - (now - next).rem_euclid(period);
                }
                b.next_deadline = Some(next);
                let fetched = match b.source.as_mut() {
                    Some(src) => src.fetch(b.last_seen, now),
                    None => Err("source not resolved".into()),
                };
                if fetched.is_err() {
                    b.counters.unreachable += 1;
                }
                fetched.map(|r| (b.binding.clone(), b.last_seen, r))
            };
            let (binding, last_seen, mut readings) = match fetched {
                Ok(x) => x,
                Err(e) => {
                    log::info!("ingest poll on {store}: {e}");
                    continue;
                }
            };
            readings.sort_by_key(|r| r.ts);
            let mut seen = last_seen;
            for r in readings
                .iter()
                .filter(|r| last_seen.map_or(true, |l| r.ts > l))
            {
                if let PushOutcome::Appended(_) = self.ingest_reading(&binding, r) {
                    appended += 1;
                }
                seen = Some(seen.map_or(r.ts, |s| s.max(r.ts)));
            }
            if let Some(b) = self.ingest.lock().bindings.get_mut(&store) {
                b.last_seen = seen;
            }
        }
        if appended > 0 {
            if let Err(e) = self.save_catalog() {
                log::warn!("saving ingest progress failed: {e}");
            }
        }
        appended
    }

    /// Earliest poll deadline across all bindings.
    pub fn next_poll_deadline(&self) -> Option<i64> {
        self.ingest
            .lock()
            .bindings
            .values()
            .filter_map(|b| b.next_deadline)
            .min()
    }
}
