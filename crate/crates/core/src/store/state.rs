use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use super::{ColumnStoreConfig, Mutability};
use crate::eventbus::TxnKind;
use crate::value::{KeyRange, Record, RecordKey};

/// Set of origin sequence numbers seen, kept as a contiguous prefix plus
/// the sparse remainder above it.
#[derive(Debug, Clone, Default)]
pub(crate) struct SeqSet {
    contiguous: u64,
    above: BTreeSet<u64>,
}

impl SeqSet {
    pub fn insert(&mut self, seq: u64) -> bool {
        if self.contains(seq) {
            return false;
        }
        if seq == self.contiguous + 1 {
            self.contiguous = seq;
            while self.above.remove(&(self.contiguous + 1)) {
                self.contiguous += 1;
            }
        } else {
            self.above.insert(seq);
        }
        true
    }

    pub fn contains(&self, seq: u64) -> bool {
        seq <= self.contiguous || self.above.contains(&seq)
    }

    pub fn contiguous(&self) -> u64 {
        self.contiguous
    }

    pub fn max(&self) -> u64 {
        self.above.last().copied().unwrap_or(self.contiguous)
    }
}

type VersionId = (String, u64);

#[derive(Debug, Clone)]
struct KeySlot {
    winner: VersionId,
    losers: Vec<VersionId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreStats {
    /// Committed create transactions, local and sync-applied.
    pub creates: u64,
    pub updates: u64,
    pub deletes: u64,
    /// Second versions of one key arriving in an immutable store.
    pub conflicts: u64,
    pub evicted: u64,
    pub records: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Applied {
    Duplicate,
    Committed { txn: TxnKind, conflict: bool },
}

/// In-memory image of one column store: every committed version, the
/// visible winner per key, and per-origin sequence bookkeeping.
#[derive(Debug)]
pub(crate) struct StoreState {
    pub config: ColumnStoreConfig,
    slots: BTreeMap<RecordKey, KeySlot>,
    versions: BTreeMap<String, BTreeMap<u64, Record>>,
    received: BTreeMap<String, SeqSet>,
    pub stats: StoreStats,
    pub event_seq: u64,
}

impl StoreState {
    pub fn new(config: ColumnStoreConfig) -> Self {
        Self {
            config,
            slots: BTreeMap::new(),
            versions: BTreeMap::new(),
            received: BTreeMap::new(),
            stats: StoreStats::default(),
            event_seq: 0,
        }
    }

    fn record(&self, id: &VersionId) -> &Record {
        &self.versions[&id.0][&id.1]
    }

    pub fn has_version(&self, origin: &str, seq: u64) -> bool {
        self.received.get(origin).is_some_and(|s| s.contains(seq))
    }

    /// Insert one version. Duplicates by `(origin_id, origin_seq)` are
    /// ignored; otherwise the version joins its key's version list and the
    /// winner is recomputed.
    pub fn apply(&mut self, rec: Record) -> Applied {
        let origin = rec.prov.origin_id.clone();
        let seq = rec.prov.origin_seq;
        if !self.received.entry(origin.clone()).or_default().insert(seq) {
            return Applied::Duplicate;
        }
        let key = rec.key;
        let id = (origin.clone(), seq);
        let tombstone = rec.is_tombstone();
        self.versions.entry(origin).or_default().insert(seq, rec);

        let immutable = self.config.mutability == Mutability::Immutable;
        let (txn, conflict) = match self.slots.get(&key).cloned() {
            None => {
                self.slots.insert(
                    key,
                    KeySlot {
                        winner: id,
                        losers: Vec::new(),
                    },
                );
                (
                    if tombstone {
                        TxnKind::Delete
                    } else {
                        TxnKind::Create
                    },
                    false,
                )
            }
            Some(mut slot) => {
                let incoming = self.record(&id);
                if incoming.version_cmp(self.record(&slot.winner)).is_gt() {
                    let old = std::mem::replace(&mut slot.winner, id);
                    slot.losers.push(old);
                } else {
                    slot.losers.push(id);
                }
                self.slots.insert(key, slot);
                let txn = if tombstone {
                    TxnKind::Delete
                } else if immutable {
                    TxnKind::Create
                } else {
                    TxnKind::Update
                };
                (txn, immutable)
            }
        };
        match txn {
            TxnKind::Create => self.stats.creates += 1,
            TxnKind::Update => self.stats.updates += 1,
            TxnKind::Delete => self.stats.deletes += 1,
            _ => {}
        }
        if conflict {
            self.stats.conflicts += 1;
        }
        self.stats.records += 1;
        self.enforce_retention();
        Applied::Committed { txn, conflict }
    }

    /// Ring-buffer eviction of the oldest keys. Local capacity management
    /// only: no events, no tombstones, and the sequence bookkeeping keeps the
    /// evicted versions marked as received.
    fn enforce_retention(&mut self) {
        let Some(max) = self.config.retention else {
            return;
        };
        while self.slots.len() as u64 > max {
            let Some((_, slot)) = self.slots.pop_first() else {
                break;
            };
            for (origin, seq) in std::iter::once(slot.winner).chain(slot.losers) {
                if let Some(m) = self.versions.get_mut(&origin) {
                    m.remove(&seq);
                }
                self.stats.evicted += 1;
            }
        }
    }

    /// Visible version of `key`, tombstones included.
    pub fn winner(&self, key: &RecordKey) -> Option<&Record> {
        self.slots.get(key).map(|s| self.record(&s.winner))
    }

    /// Every retained version of `key`, winner first.
    pub fn versions_of(&self, key: &RecordKey) -> Vec<&Record> {
        match self.slots.get(key) {
            None => Vec::new(),
            Some(s) => std::iter::once(&s.winner)
                .chain(&s.losers)
                .map(|id| self.record(id))
                .collect(),
        }
    }

    pub fn next_seq_for_ts(&self, ts: i64) -> u32 {
        self.slots
            .range(RecordKey::at(ts)..=RecordKey::new(ts, u32::MAX))
            .next_back()
            .map_or(0, |(k, _)| k.seq + 1)
    }

    pub fn next_origin_seq(&self, origin: &str) -> u64 {
        self.received.get(origin).map_or(0, SeqSet::max) + 1
    }

    /// Live records in `[lo, hi)`, tombstones skipped, at most `limit`.
    pub fn range(&self, range: &KeyRange, limit: usize) -> Vec<Record> {
        if range.is_empty() {
            return Vec::new();
        }
        let upper = match range.hi {
            Some(hi) => std::ops::Bound::Excluded(hi),
            None => std::ops::Bound::Unbounded,
        };
        self.slots
            .range((std::ops::Bound::Included(range.lo), upper))
            .map(|(_, s)| self.record(&s.winner))
            .filter(|r| !r.is_tombstone())
            .take(limit)
            .cloned()
            .collect()
    }

    /// Visible records (tombstones included) in `range`, key order.
    pub fn visible<'a>(&'a self, range: &'a KeyRange) -> impl Iterator<Item = &'a Record> + 'a {
        self.slots
            .values()
            .map(|s| self.record(&s.winner))
            .filter(move |r| range.contains(&r.key))
    }

    pub fn live_count(&self) -> usize {
        self.slots
            .values()
            .filter(|s| !self.record(&s.winner).is_tombstone())
            .count()
    }

    /// SHA-256 over `kind u8 ‖ len u32 ‖ payload` of every visible record in
    /// `range`, in `(key, origin_id, origin_seq)` order.
    pub fn content_hash(&self, range: &KeyRange) -> [u8; 32] {
        let mut h = Sha256::new();
        for rec in self.visible(range) {
            let payload = rec.payload();
            h.update([rec.frame_kind() as u8]);
            h.update((payload.len() as u32).to_be_bytes());
            h.update(&payload);
        }
        h.finalize().into()
    }

    pub fn origins(&self) -> impl Iterator<Item = &str> {
        self.received.keys().map(String::as_str)
    }

    /// Highest `n` such that `1..=n` have all been received from `origin`.
    pub fn watermark(&self, origin: &str) -> u64 {
        self.received.get(origin).map_or(0, SeqSet::contiguous)
    }

    pub fn max_seq(&self, origin: &str) -> u64 {
        self.received.get(origin).map_or(0, SeqSet::max)
    }

    pub fn versions_after(&self, origin: &str, after: u64) -> impl Iterator<Item = &Record> {
        self.versions
            .get(origin)
            .into_iter()
            .flat_map(move |m| m.range(after + 1..).map(|(_, r)| r))
    }

    pub fn version(&self, origin: &str, seq: u64) -> Option<&Record> {
        self.versions.get(origin).and_then(|m| m.get(&seq))
    }

    /// Every retained version from every origin, ordered by `(origin, seq)`.
    pub fn all_versions(&self) -> impl Iterator<Item = &Record> {
        self.versions.values().flat_map(|m| m.values())
    }
}
