//! Tier-local publish/subscribe hub and the callback pipeline that runs at
//! the ingest, exchange and sync boundaries.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::codec::Encoder;
use crate::error::{Error, Result};
use crate::pattern::Pattern;
use crate::value::{KeyRange, Record, RecordKey, Value};

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TxnKind {
    Create,
    Update,
    Delete,
    CreateStore,
    DeleteStore,
}

impl TxnKind {
    pub const ALL: [TxnKind; 5] = [
        TxnKind::Create,
        TxnKind::Update,
        TxnKind::Delete,
        TxnKind::CreateStore,
        TxnKind::DeleteStore,
    ];
}

impl fmt::Display for TxnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TxnKind::Create => "create",
            TxnKind::Update => "update",
            TxnKind::Delete => "delete",
            TxnKind::CreateStore => "create-store",
            TxnKind::DeleteStore => "delete-store",
        })
    }
}

impl std::str::FromStr for TxnKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TxnKind::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown txn kind {s}")))
    }
}

/// Notification of one committed transaction. Carries no record value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub event_seq: u64,
    pub txn: TxnKind,
    pub store: String,
    pub key: Option<RecordKey>,
    pub actor: String,
    pub emit_ts: i64,
}

impl Event {
    /// Canonical form: `event_seq u64, txn u8, store str, key flag + key,
    /// actor str, emit_ts i64`.
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u64(self.event_seq).u8(self.txn as u8).str(&self.store);
        match &self.key {
            Some(k) => {
                enc.u8(1);
                k.encode(&mut enc);
            }
            None => {
                enc.u8(0);
            }
        }
        enc.str(&self.actor).i64(self.emit_ts);
        enc.finish()
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let key = self
            .key
            .map(|k| k.to_string())
            .unwrap_or_else(|| "-".into());
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.event_seq, self.txn, self.store, key, self.actor
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriptionFilter {
    pub store: Pattern,
    /// Empty means every transaction kind.
    #[serde(default)]
    pub txns: BTreeSet<TxnKind>,
    #[serde(default)]
    pub range: Option<KeyRange>,
}

impl SubscriptionFilter {
    pub fn store(store: impl Into<Pattern>) -> Self {
        Self {
            store: store.into(),
            txns: BTreeSet::new(),
            range: None,
        }
    }

    pub fn txns(mut self, txns: impl IntoIterator<Item = TxnKind>) -> Self {
        self.txns = txns.into_iter().collect();
        self
    }

    pub fn range(mut self, range: KeyRange) -> Self {
        self.range = Some(range);
        self
    }

    pub fn matches(&self, ev: &Event) -> bool {
        if !self.store.matches(&ev.store) {
            return false;
        }
        if !self.txns.is_empty() && !self.txns.contains(&ev.txn) {
            return false;
        }
        match (&self.range, &ev.key) {
            (Some(r), Some(k)) => r.contains(k),
            _ => true,
        }
    }
}

#[derive(Debug)]
struct Queue {
    events: VecDeque<Event>,
    capacity: usize,
    gap: bool,
    dropped: u64,
}

/// Receiving end of a subscription. Bounded: on overflow the oldest event is
/// dropped and the gap flag is raised until read with [`take_gap`].
///
/// [`take_gap`]: Subscription::take_gap
#[derive(Debug, Clone)]
pub struct Subscription {
    id: u64,
    queue: Arc<Mutex<Queue>>,
}

impl Subscription {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn try_next(&self) -> Option<Event> {
        self.queue.lock().events.pop_front()
    }

    pub fn drain(&self) -> Vec<Event> {
        self.queue.lock().events.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.queue.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_gap(&self) -> bool {
        self.queue.lock().gap
    }

    pub fn take_gap(&self) -> bool {
        std::mem::take(&mut self.queue.lock().gap)
    }

    pub fn dropped(&self) -> u64 {
        self.queue.lock().dropped
    }
}

struct Entry {
    filter: SubscriptionFilter,
    queue: Arc<Mutex<Queue>>,
}

#[derive(Default)]
pub struct EventBus {
    subs: Mutex<(u64, BTreeMap<u64, Entry>)>,
}

impl fmt::Debug for EventBus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventBus")
            .field("subscriptions", &self.subs.lock().1.len())
            .finish()
    }
}

impl EventBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, filter: SubscriptionFilter, capacity: usize) -> Subscription {
        let queue = Arc::new(Mutex::new(Queue {
            events: VecDeque::new(),
            capacity: capacity.max(1),
            gap: false,
            dropped: 0,
        }));
        let mut guard = self.subs.lock();
        guard.0 += 1;
        let id = guard.0;
        guard.1.insert(
            id,
            Entry {
                filter,
                queue: queue.clone(),
            },
        );
        Subscription { id, queue }
    }

    pub fn remove(&self, id: u64) -> Result<()> {
        self.subs
            .lock()
            .1
            .remove(&id)
            .map(|_| ())
            .ok_or(Error::UnknownSubscription(id))
    }

    /// Deliver to every matching subscription. Never fails the caller.
    pub fn publish(&self, event: &Event) {
        let guard = self.subs.lock();
        for entry in guard.1.values() {
            if !entry.filter.matches(event) {
                continue;
            }
            let mut q = entry.queue.lock();
            if q.events.len() >= q.capacity {
                q.events.pop_front();
                q.gap = true;
                q.dropped += 1;
            }
            q.events.push_back(event.clone());
        }
    }

    pub fn len(&self) -> usize {
        self.subs.lock().1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Exchange,
    SyncIn,
    SyncOut,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CallbackOutcome {
    Accept,
    Reject(String),
    Transform(Record),
}

pub type CallbackFn = Arc<dyn Fn(&Record) -> CallbackOutcome + Send + Sync>;

/// Callbacks that manifests can declare without host code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinCallback {
    /// Clamp a numeric value (or object field) into `[min, max]`; NaN and
    /// non-numeric values are rejected.
    RangeClamp {
        #[serde(default)]
        field: Option<String>,
        min: f64,
        max: f64,
    },
    /// `v * factor + offset` on a numeric value or field; result is a float.
    UnitScale {
        #[serde(default)]
        field: Option<String>,
        factor: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Remove one field from object values.
    RedactField { field: String },
}

fn numeric_slot<'a>(
    rec: &'a mut Record,
    field: &Option<String>,
) -> std::result::Result<&'a mut Value, String> {
    let value = rec.value.as_mut().ok_or("tombstone has no value")?;
    match field {
        None => Ok(value),
        Some(f) => match value {
            Value::Object(o) => o
                .fields
                .get_mut(f)
                .ok_or_else(|| format!("missing field {f}")),
            _ => Err(format!("field {f} on non-object value")),
        },
    }
}

impl BuiltinCallback {
    pub fn action(&self) -> CallbackFn {
        match self.clone() {
            BuiltinCallback::RangeClamp { field, min, max } => Arc::new(move |rec: &Record| {
                if rec.is_tombstone() {
                    return CallbackOutcome::Accept;
                }
                let mut out = rec.clone();
                let slot = match numeric_slot(&mut out, &field) {
                    Ok(s) => s,
                    Err(e) => return CallbackOutcome::Reject(e),
                };
                match slot {
                    Value::Float(x) if x.is_nan() => CallbackOutcome::Reject("NaN".into()),
                    Value::Float(x) => {
                        let c = x.clamp(min, max);
                        if c == *x {
                            CallbackOutcome::Accept
                        } else {
                            *x = c;
                            CallbackOutcome::Transform(out)
                        }
                    }
                    Value::Int(i) => {
                        let c = (*i as f64).clamp(min, max);
                        if c == *i as f64 {
                            CallbackOutcome::Accept
                        } else {
                            *slot = Value::Float(c);
                            CallbackOutcome::Transform(out)
                        }
                    }
                    other => CallbackOutcome::Reject(format!("non-numeric {}", other.kind())),
                }
            }),
            BuiltinCallback::UnitScale {
                field,
                factor,
                offset,
            } => Arc::new(move |rec: &Record| {
                if rec.is_tombstone() {
                    return CallbackOutcome::Accept;
                }
                let mut out = rec.clone();
                let slot = match numeric_slot(&mut out, &field) {
                    Ok(s) => s,
                    Err(e) => return CallbackOutcome::Reject(e),
                };
                match slot.as_f64() {
                    Some(x) => {
                        *slot = Value::Float(x * factor + offset);
                        CallbackOutcome::Transform(out)
                    }
                    None => CallbackOutcome::Reject(format!("non-numeric {}", slot.kind())),
                }
            }),
            BuiltinCallback::RedactField { field } => {
                Arc::new(move |rec: &Record| match &rec.value {
                    Some(Value::Object(o)) if o.fields.contains_key(&field) => {
                        let mut out = rec.clone();
                        if let Some(Value::Object(o)) = &mut out.value {
                            o.fields.remove(&field);
                        }
                        CallbackOutcome::Transform(out)
                    }
                    _ => CallbackOutcome::Accept,
                })
            }
        }
    }
}

#[derive(Clone)]
pub struct CallbackSpec {
    pub id: String,
    pub stage: Stage,
    pub store: Pattern,
    /// When set, the callback only runs for actors holding a matching role.
    pub role: Option<Pattern>,
    pub action: CallbackFn,
    /// Declarative origin, kept so the callback can be persisted.
    pub builtin: Option<BuiltinCallback>,
}

impl fmt::Debug for CallbackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CallbackSpec")
            .field("id", &self.id)
            .field("stage", &self.stage)
            .field("store", &self.store)
            .field("role", &self.role)
            .field("builtin", &self.builtin)
            .finish()
    }
}

impl CallbackSpec {
    pub fn new(
        id: impl Into<String>,
        stage: Stage,
        store: impl Into<Pattern>,
        action: impl Fn(&Record) -> CallbackOutcome + Send + Sync + 'static,
    ) -> Self {
        Self {
            id: id.into(),
            stage,
            store: store.into(),
            role: None,
            action: Arc::new(action),
            builtin: None,
        }
    }

    pub fn builtin(
        id: impl Into<String>,
        stage: Stage,
        store: impl Into<Pattern>,
        builtin: BuiltinCallback,
    ) -> Self {
        Self {
            id: id.into(),
            stage,
            store: store.into(),
            role: None,
            action: builtin.action(),
            builtin: Some(builtin),
        }
    }

    pub fn for_role(mut self, role: impl Into<Pattern>) -> Self {
        self.role = Some(role.into());
        self
    }

    fn applies(&self, stage: Stage, store: &str, roles: &BTreeSet<String>) -> bool {
        self.stage == stage
            && self.store.matches(store)
            && self
                .role
                .as_ref()
                .map_or(true, |p| roles.iter().any(|r| p.matches(r)))
    }
}

/// Declarative form of a built-in callback, as written in manifests and the
/// catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallbackDecl {
    pub id: String,
    pub stage: Stage,
    pub store: Pattern,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Pattern>,
    pub builtin: BuiltinCallback,
}

impl CallbackDecl {
    pub fn to_spec(&self) -> CallbackSpec {
        let spec = CallbackSpec::builtin(
            self.id.clone(),
            self.stage,
            self.store.clone(),
            self.builtin.clone(),
        );
        match &self.role {
            Some(r) => spec.for_role(r.clone()),
            None => spec,
        }
    }
}

impl CallbackSpec {
    pub fn decl(&self) -> Option<CallbackDecl> {
        self.builtin.as_ref().map(|b| CallbackDecl {
            id: self.id.clone(),
            stage: self.stage,
            store: self.store.clone(),
            role: self.role.clone(),
            builtin: b.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChainOutcome {
    Accept(Record),
    Reject { callback_id: String, reason: String },
}

/// Run every applicable callback in registration order. Transforms compose;
/// the first reject stops the chain. A transform that alters the key is an
/// error.
pub fn run_chain(
    callbacks: &[CallbackSpec],
    stage: Stage,
    store: &str,
    record: Record,
    roles: &BTreeSet<String>,
) -> Result<ChainOutcome> {
    let mut current = record;
    for cb in callbacks
        .iter()
        .filter(|cb| cb.applies(stage, store, roles))
    {
        match (cb.action)(&current) {
            CallbackOutcome::Accept => {}
            CallbackOutcome::Reject(reason) => {
                return Ok(ChainOutcome::Reject {
                    callback_id: cb.id.clone(),
                    reason,
                });
            }
            CallbackOutcome::Transform(next) => {
                if next.key != current.key {
                    return Err(Error::KeyMutation(cb.id.clone()));
                }
                current = next;
            }
        }
    }
    Ok(ChainOutcome::Accept(current))
}
