//! Filtered, bidirectional anti-entropy between instances in adjacent
//! tiers.
//!
//! A round is HELLO (watermarks), POLICY (newer policy bundle, if any),
//! DELTA (versions the peer lacks, at most 1000 per frame) and ACK. Each
//! side tracks, per link and per `(store, origin)`, the highest origin_seq
//! the peer has acknowledged; it only advances on ACK, so an interrupted
//! round simply repeats and duplicates are dropped by
//! `(origin_id, origin_seq)`.

pub mod transport;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::db::Microdb;
use crate::error::{Error, Result};
use crate::eventbus::{run_chain, ChainOutcome, Stage};
use crate::pattern::Pattern;
use crate::registry::REGISTRY_STORE;
use crate::security::{Interface, PolicyVersion, Principal, SecretKey, TierKind};
use crate::value::{KeyRange, Record, RecordKey};

pub use transport::{
    serve, CapturedFrame, Direction, LinkSwitch, MemoryTransport, TcpTransport, Transport,
};
pub use wire::{Ack, Delta, DeltaSection, FrameType, Hello, WatermarkEntry, MAX_RECORDS_PER_FRAME};

use wire::{decode_frame, decode_policy, encode_frame, encode_policy, open_frame, seal_frame};

/// Which records a link carries. An empty store list selects every store;
/// the tag, when set, must be carried by the instance bound to the store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncFilter {
    #[serde(default)]
    pub stores: Vec<Pattern>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<KeyRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl SyncFilter {
    pub fn stores<P: Into<Pattern>>(stores: impl IntoIterator<Item = P>) -> Self {
        Self {
            stores: stores.into_iter().map(Into::into).collect(),
            range: None,
            tag: None,
        }
    }

    pub fn range(mut self, range: KeyRange) -> Self {
        self.range = Some(range);
        self
    }

    pub fn tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn has_selector(&self) -> bool {
        !self.stores.is_empty() || self.range.is_some() || self.tag.is_some()
    }

    pub fn key_range(&self) -> KeyRange {
        self.range.unwrap_or(KeyRange::ALL)
    }

    pub fn selects(&self, store: &str, tags: &BTreeSet<String>) -> bool {
        (self.stores.is_empty() || self.stores.iter().any(|p| p.matches(store)))
            && self.tag.as_ref().map_or(true, |t| tags.contains(t))
    }

    pub fn contains(&self, store: &str, tags: &BTreeSet<String>, key: &RecordKey) -> bool {
        self.selects(store, tags) && self.key_range().contains(key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncLinkConfig {
    pub link_id: String,
    pub peer_id: String,
    pub peer_tier: TierKind,
    pub filter: SyncFilter,
    /// Scheduled period; `None` means rounds are run manually.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_ms: Option<u64>,
    /// Link credential: authenticates HELLO and seals every later frame.
    pub key: SecretKey,
    /// `host:port` of the peer's `serve` listener, for TCP rounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer_addr: Option<String>,
}

impl SyncLinkConfig {
    pub fn new(
        link_id: impl Into<String>,
        peer_id: impl Into<String>,
        peer_tier: TierKind,
        filter: SyncFilter,
    ) -> Self {
        let link_id = link_id.into();
        Self {
            key: SecretKey::derive(&format!("link:{link_id}")),
            link_id,
            peer_id: peer_id.into(),
            peer_tier,
            filter,
            period_ms: None,
            peer_addr: None,
        }
    }

    pub fn key(mut self, key: SecretKey) -> Self {
        self.key = key;
        self
    }

    pub fn period_ms(mut self, ms: u64) -> Self {
        self.period_ms = Some(ms);
        self
    }

    pub fn peer_addr(mut self, addr: impl Into<String>) -> Self {
        self.peer_addr = Some(addr.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SyncWarning {
    /// A store named by the filter, or carried by a DELTA, does not exist here.
    FilterMiss {
        store: String,
    },
    PolicyBlocked {
        store: String,
        policy: String,
    },
    /// Two different versions of one key arrived in an immutable store.
    Conflict {
        store: String,
        key: String,
    },
    /// The peer sent a store this side's filter does not carry.
    OutOfFilter {
        store: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub link_id: String,
    pub sent: BTreeMap<String, u64>,
    pub received: BTreeMap<String, u64>,
    pub duplicates: u64,
    pub rejected: u64,
    pub conflicts: u64,
    pub policy_bundles_sent: u64,
    pub policy_bundles_received: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
    pub warnings: Vec<SyncWarning>,
}

impl SyncReport {
    fn new(link_id: &str) -> Self {
        Self {
            link_id: link_id.to_string(),
            ..Default::default()
        }
    }

    pub fn records_sent(&self) -> u64 {
        self.sent.values().sum()
    }

    pub fn records_received(&self) -> u64 {
        self.received.values().sum()
    }

    fn warn(&mut self, w: SyncWarning) {
        if !self.warnings.contains(&w) {
            self.warnings.push(w);
        }
    }
}

/// Winner between two versions of one key: the greater `(write_ts,
/// origin_id, origin_seq)`. Both replicas evaluate the same total order, so
/// they agree regardless of arrival order.
pub fn resolve_conflict<'a>(local: &'a Record, remote: &'a Record) -> &'a Record {
    if remote.version_cmp(local).is_gt() {
        remote
    } else {
        local
    }
}

type PairKey = (String, String);

#[derive(Debug, Clone, Default)]
struct Pending {
    through: u64,
    backfill: Vec<u64>,
}

/// Per-link replication state held by each endpoint.
#[derive(Debug, Clone)]
pub(crate) struct LinkState {
    pub config: SyncLinkConfig,
    /// Highest origin_seq per `(store, origin)` the peer acknowledged.
    acked: BTreeMap<PairKey, u64>,
    /// Versions at or below the acked cursor that reached this side after
    /// the cursor moved past them (they came in over another link).
    backfill: BTreeMap<PairKey, BTreeSet<u64>>,
    pending: BTreeMap<PairKey, Pending>,
    pub rounds: u64,
    pub last_report: Option<SyncReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct PersistedLink {
    config: SyncLinkConfig,
    #[serde(default)]
    acked: Vec<(String, String, u64)>,
    #[serde(default)]
    backfill: Vec<(String, String, Vec<u64>)>,
    #[serde(default)]
    rounds: u64,
}

impl LinkState {
    fn new(config: SyncLinkConfig) -> Self {
        Self {
            config,
            acked: BTreeMap::new(),
            backfill: BTreeMap::new(),
            pending: BTreeMap::new(),
            rounds: 0,
            last_report: None,
        }
    }

    pub fn restore(p: PersistedLink) -> Result<Self> {
        let mut s = Self::new(p.config);
        s.rounds = p.rounds;
        s.acked = p.acked.into_iter().map(|(st, o, n)| ((st, o), n)).collect();
        s.backfill = p
            .backfill
            .into_iter()
            .map(|(st, o, v)| ((st, o), v.into_iter().collect()))
            .collect();
        Ok(s)
    }

    pub fn persisted(&self) -> PersistedLink {
        PersistedLink {
            config: self.config.clone(),
            acked: self
                .acked
                .iter()
                .map(|((s, o), n)| (s.clone(), o.clone(), *n))
                .collect(),
            backfill: self
                .backfill
                .iter()
                .filter(|(_, v)| !v.is_empty())
                .map(|((s, o), v)| (s.clone(), o.clone(), v.iter().copied().collect()))
                .collect(),
            rounds: self.rounds,
        }
    }

    pub fn forget_store(&mut self, store: &str) {
        self.acked.retain(|(s, _), _| s != store);
        self.backfill.retain(|(s, _), _| s != store);
        self.pending.retain(|(s, _), _| s != store);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LinkStatus {
    pub config: SyncLinkConfig,
    pub rounds: u64,
    pub acked: Vec<WatermarkEntry>,
}

/// Responder half of a round, fed one frame at a time.
#[derive(Debug, Default)]
pub struct Responder {
    link_id: Option<String>,
    peer_policy: PolicyVersion,
    peer_watermarks: Option<Hello>,
    acks: Vec<PairKey>,
    report: SyncReport,
    done: bool,
}

impl Responder {
    pub fn is_done(&self) -> bool {
        self.done
    }
}

impl Microdb {
    /// Register (or reconfigure) a sync link. Stores named literally in the
    /// filter must be shareable with the peer's tier.
    pub fn configure_link(&self, config: SyncLinkConfig, principal: &Principal) -> Result<()> {
        self.require_admin(principal, &config.link_id)?;
        for p in &config.filter.stores {
            self.require(
                principal,
                Interface::Sync,
                p.as_str(),
                &config.filter.key_range(),
            )?;
        }
        if config.filter.stores.is_empty() {
            self.require(principal, Interface::Sync, "*", &config.filter.key_range())?;
        }
        if !self.tier.is_adjacent(config.peer_tier) {
            return Err(Error::NonAdjacentTier(format!(
                "{} -> {}",
                self.tier, config.peer_tier
            )));
        }
        if !config.filter.has_selector() {
            return Err(Error::InvalidConfig(format!(
                "link {} has an empty filter",
                config.link_id
            )));
        }
        if config.peer_id == self.replica_id {
            return Err(Error::InvalidConfig(format!(
                "link {} points at this replica",
                config.link_id
            )));
        }
        {
            let ps = self.policy.read();
            for name in config.filter.stores.iter().filter_map(Pattern::literal) {
                if let Err(policy) = ps.check_sharing(name, config.peer_tier) {
                    return Err(Error::PolicyBlocked {
                        store: name.to_string(),
                        policy,
                    });
                }
            }
        }
        {
            let _g = self.admin.lock();
            let mut links = self.links.lock();
            match links.get_mut(&config.link_id) {
                Some(existing) => existing.config = config,
                None => {
                    links.insert(config.link_id.clone(), LinkState::new(config));
                }
            }
        }
        self.save_catalog()
    }

    pub fn remove_link(&self, link_id: &str, principal: &Principal) -> Result<()> {
        self.require_admin(principal, link_id)?;
        {
            let _g = self.admin.lock();
            self.links
                .lock()
                .remove(link_id)
                .ok_or_else(|| Error::NotFound(format!("link {link_id}")))?;
        }
        self.save_catalog()
    }

    pub fn link_config(&self, link_id: &str) -> Result<SyncLinkConfig> {
        self.links
            .lock()
            .get(link_id)
            .map(|l| l.config.clone())
            .ok_or_else(|| Error::NotFound(format!("link {link_id}")))
    }

    pub fn link_status(&self) -> Vec<LinkStatus> {
        self.links
            .lock()
            .values()
            .map(|l| LinkStatus {
                config: l.config.clone(),
                rounds: l.rounds,
                acked: l
                    .acked
                    .iter()
                    .map(|((s, o), n)| WatermarkEntry {
                        store: s.clone(),
                        origin: o.clone(),
                        seq: *n,
                    })
                    .collect(),
            })
            .collect()
    }

    /// The report of the most recent round on `link_id`, from either side.
    pub fn last_sync_report(&self, link_id: &str) -> Option<SyncReport> {
        self.links
            .lock()
            .get(link_id)
            .and_then(|l| l.last_report.clone())
    }

    /// Stores this side carries over the link, plus filter-miss and
    /// policy-blocked warnings for the ones it cannot.
    fn link_stores(&self, cfg: &SyncLinkConfig, report: &mut SyncReport) -> Vec<String> {
        let names: Vec<String> = self.stores.read().keys().cloned().collect();
        for lit in cfg.filter.stores.iter().filter_map(Pattern::literal) {
            if !names.iter().any(|n| n == lit) {
                report.warn(SyncWarning::FilterMiss {
                    store: lit.to_string(),
                });
            }
        }
        let model = self.model.read();
        let ps = self.policy.read();
        let mut out = Vec::new();
        for name in names {
            if name == REGISTRY_STORE {
                out.push(name);
                continue;
            }
            if name.starts_with(crate::store::RESERVED_PREFIX)
                || !cfg.filter.selects(&name, &model.store_tags(&name))
            {
                continue;
            }
            if let Err(policy) = ps.check_sharing(&name, cfg.peer_tier) {
                report.warn(SyncWarning::PolicyBlocked {
                    store: name,
                    policy,
                });
                continue;
            }
            out.push(name);
        }
        out
    }

    fn receive_selects(&self, cfg: &SyncLinkConfig, store: &str) -> bool {
        store == REGISTRY_STORE
            || (!store.starts_with(crate::store::RESERVED_PREFIX)
                && cfg
                    .filter
                    .selects(store, &self.model.read().store_tags(store)))
    }

    fn make_hello(&self, cfg: &SyncLinkConfig) -> Hello {
        let mut scratch = SyncReport::default();
        let mut watermarks = Vec::new();
        for name in self.link_stores(cfg, &mut scratch) {
            let Ok(store) = self.store(&name) else {
                continue;
            };
            let st = store.state.read();
            for origin in st.origins() {
                watermarks.push(WatermarkEntry {
                    store: name.clone(),
                    origin: origin.to_string(),
                    seq: st.watermark(origin),
                });
            }
        }
        Hello {
            link_id: cfg.link_id.clone(),
            replica_id: self.replica_id.clone(),
            tier: self.tier,
            policy_version: self.policy.read().version.clone(),
            watermarks,
        }
    }

    fn check_peer_hello(&self, cfg: &SyncLinkConfig, hello: &Hello) -> Result<()> {
        if hello.link_id != cfg.link_id
            || hello.replica_id != cfg.peer_id
            || hello.tier != cfg.peer_tier
        {
            return Err(Error::AuthFailure(format!(
                "link {} expects {}@{}, peer introduced itself as {}@{} on link {}",
                cfg.link_id,
                cfg.peer_id,
                cfg.peer_tier,
                hello.replica_id,
                hello.tier,
                hello.link_id
            )));
        }
        Ok(())
    }

    /// Build this side's sealed DELTA frames for the peer and remember what
    /// they cover until the peer acknowledges them.
    fn plan_deltas(
        &self,
        cfg: &SyncLinkConfig,
        peer: &Hello,
        report: &mut SyncReport,
    ) -> Result<Vec<Vec<u8>>> {
        let stores = self.link_stores(cfg, report);
        let range = cfg.filter.key_range();
        let callbacks = self.callbacks();
        let no_roles = BTreeSet::new();
        let mut sections = Vec::new();
        let mut pending = BTreeMap::new();
        {
            let mut links = self.links.lock();
            let link = links
                .get_mut(&cfg.link_id)
                .ok_or_else(|| Error::NotFound(format!("link {}", cfg.link_id)))?;
            for name in &stores {
                let Ok(store) = self.store(name) else {
                    continue;
                };
                let st = store.state.read();
                let in_range = |r: &Record| name == REGISTRY_STORE || range.contains(&r.key);
                for origin in st.origins() {
                    let pair = (name.clone(), origin.to_string());
                    let peer_wm = peer.watermark(name, origin);
                    let cursor = link.acked.get(&pair).copied().unwrap_or(0);
                    let from = peer_wm.max(cursor);
                    let through = st.max_seq(origin);
                    let backfill: Vec<u64> = match link.backfill.get_mut(&pair) {
                        Some(set) => {
                            set.retain(|&s| s > peer_wm);
                            set.iter().copied().filter(|&s| s <= from).collect()
                        }
                        None => Vec::new(),
                    };
                    if through <= cursor && backfill.is_empty() {
                        continue;
                    }
                    let mut records: Vec<Record> = backfill
                        .iter()
                        .filter_map(|&s| st.version(origin, s))
                        .chain(st.versions_after(origin, from))
                        .filter(|r| in_range(r))
                        .cloned()
                        .collect();
                    if name != REGISTRY_STORE {
                        let mut kept = Vec::with_capacity(records.len());
                        for r in records {
                            match run_chain(&callbacks, Stage::SyncOut, name, r, &no_roles)? {
                                ChainOutcome::Accept(r) => kept.push(r),
                                ChainOutcome::Reject { .. } => report.rejected += 1,
                            }
                        }
                        records = kept;
                    }
                    *report.sent.entry(name.clone()).or_default() += records.len() as u64;
                    pending.insert(
                        pair,
                        Pending {
                            through: through.max(cursor),
                            backfill,
                        },
                    );
                    sections.push(DeltaSection {
                        store: name.clone(),
                        origin: origin.to_string(),
                        through,
                        records,
                    });
                }
            }
            link.pending = pending;
        }
        let crypto = self.crypto.as_ref();
        Ok(Delta::chunk(sections)
            .into_iter()
            .map(|d| seal_frame(crypto, &cfg.key, FrameType::Delta, &d.encode()))
            .collect())
    }

    /// Commit one received DELTA. Returns the `(store, origin)` sections to
    /// acknowledge.
    fn apply_delta(
        &self,
        cfg: &SyncLinkConfig,
        delta: Delta,
        report: &mut SyncReport,
    ) -> Result<Vec<PairKey>> {
        let range = cfg.filter.key_range();
        let callbacks = self.callbacks();
        let no_roles = BTreeSet::new();
        let mut acks = Vec::new();
        for sec in delta.sections {
            let Ok(store) = self.store(&sec.store) else {
                report.warn(SyncWarning::FilterMiss {
                    store: sec.store.clone(),
                });
                continue;
            };
            let pair = (sec.store.clone(), sec.origin.clone());
            if !self.receive_selects(cfg, &sec.store) {
                report.warn(SyncWarning::OutOfFilter {
                    store: sec.store.clone(),
                });
                acks.push(pair);
                continue;
            }
            let registry = sec.store == REGISTRY_STORE;
            for rec in sec.records {
                if rec.prov.origin_id != sec.origin {
                    return Err(Error::Decode(format!(
                        "record from origin {} inside section for {}",
                        rec.prov.origin_id, sec.origin
                    )));
                }
                if !registry && !range.contains(&rec.key) {
                    continue;
                }
                let rec = if registry {
                    rec
                } else {
                    match run_chain(&callbacks, Stage::SyncIn, &sec.store, rec, &no_roles)? {
                        ChainOutcome::Accept(r) => r,
                        ChainOutcome::Reject { .. } => {
                            report.rejected += 1;
                            continue;
                        }
                    }
                };
                let actor = format!("sync:{}", rec.prov.origin_id);
                let (origin, seq) = (rec.prov.origin_id.clone(), rec.prov.origin_seq);
                match self.commit_with(&store, &actor, move |_, _| Ok(rec))? {
                    Some(c) => {
                        *report.received.entry(sec.store.clone()).or_default() += 1;
                        if c.conflict && !registry {
                            report.conflicts += 1;
                            log::warn!(
                                "conflicting versions of {} {} (immutable store)",
                                sec.store,
                                c.record.key
                            );
                            report.warn(SyncWarning::Conflict {
                                store: sec.store.clone(),
                                key: c.record.key.to_string(),
                            });
                        }
                        self.note_arrival(&cfg.link_id, &sec.store, &origin, seq);
                    }
                    None => report.duplicates += 1,
                }
            }
            acks.push(pair);
        }
        Ok(acks)
    }

    /// A version that arrives below some other link's acknowledged cursor
    /// must still be offered on that link.
    fn note_arrival(&self, via_link: &str, store: &str, origin: &str, seq: u64) {
        let mut links = self.links.lock();
        for (id, link) in links.iter_mut() {
            if id == via_link {
                continue;
            }
            let pair = (store.to_string(), origin.to_string());
            let cursor = link.acked.get(&pair).copied().unwrap_or(0);
            let pending = link.pending.get(&pair).map_or(0, |p| p.through);
            if seq <= cursor.max(pending) {
                link.backfill.entry(pair).or_default().insert(seq);
            }
        }
    }

    /// Advance cursors for the acknowledged pairs and persist them at once,
    /// so a round cut after the ACK cannot roll them back.
    fn process_ack(&self, link_id: &str, ack: &Ack) -> Result<()> {
        {
            let mut links = self.links.lock();
            let Some(link) = links.get_mut(link_id) else {
                return Ok(());
            };
            for pair in &ack.entries {
                let Some(p) = link.pending.remove(pair) else {
                    continue;
                };
                let cursor = link.acked.entry(pair.clone()).or_default();
                *cursor = (*cursor).max(p.through);
                if let Some(set) = link.backfill.get_mut(pair) {
                    for s in &p.backfill {
                        set.remove(s);
                    }
                }
            }
        }
        self.save_catalog()
    }

    fn finish_round(&self, link_id: &str, report: &SyncReport) -> Result<()> {
        if let Some(link) = self.links.lock().get_mut(link_id) {
            link.rounds += 1;
            link.last_report = Some(report.clone());
        }
        self.save_catalog()
    }

    /// Run one round as the initiating side.
    pub fn sync_round(&self, link_id: &str, transport: &mut dyn Transport) -> Result<SyncReport> {
        let cfg = self.link_config(link_id)?;
        let crypto = self.crypto.as_ref();
        let mut report = SyncReport::new(link_id);

        transport.send(encode_frame(
            FrameType::Hello,
            &self.make_hello(&cfg).encode_signed(&cfg.key),
        ))?;
        report.frames_sent += 1;
        let frame = transport.recv()?;
        report.frames_received += 1;
        let (ty, payload) = decode_frame(&frame)?;
        if ty != FrameType::Hello {
            return Err(Error::Decode(format!("expected HELLO, got {ty:?}")));
        }
        let peer = Hello::decode_verified(payload, &cfg.key)?;
        self.check_peer_hello(&cfg, &peer)?;

        let own_policy = self.policy.read().clone();
        if own_policy.version > peer.policy_version {
            transport.send(seal_frame(
                crypto,
                &cfg.key,
                FrameType::Policy,
                &encode_policy(&own_policy),
            ))?;
            report.frames_sent += 1;
            report.policy_bundles_sent += 1;
        }
        for f in self.plan_deltas(&cfg, &peer, &mut report)? {
            transport.send(f)?;
            report.frames_sent += 1;
        }

        let mut acks = Vec::new();
        let (mut peer_done, mut acked) = (false, false);
        while !(peer_done && acked) {
            let frame = transport.recv()?;
            report.frames_received += 1;
            let (ty, plain) = open_frame(crypto, &cfg.key, &frame)?;
            match ty {
                FrameType::Policy => {
                    report.policy_bundles_received += 1;
                    self.adopt_policy(decode_policy(&plain)?)?;
                }
                FrameType::Delta => {
                    let delta = Delta::decode(&plain)?;
                    peer_done |= delta.last;
                    acks.extend(self.apply_delta(&cfg, delta, &mut report)?);
                }
                FrameType::Ack => {
                    self.process_ack(link_id, &Ack::decode(&plain)?)?;
                    acked = true;
                }
                FrameType::Hello => return Err(Error::Decode("unexpected HELLO mid-round".into())),
            }
        }
        transport.send(seal_frame(
            crypto,
            &cfg.key,
            FrameType::Ack,
            &Ack { entries: acks }.encode(),
        ))?;
        report.frames_sent += 1;
        self.finish_round(link_id, &report)?;
        Ok(report)
    }

    /// Feed one frame from an initiator into the responder state machine;
    /// returns the frames to send back.
    pub fn respond(&self, session: &mut Responder, frame: &[u8]) -> Result<Vec<Vec<u8>>> {
        let (ty, payload) = decode_frame(frame)?;
        if ty == FrameType::Hello {
            let link_id = {
                let mut dec = crate::codec::Decoder::new(payload);
                dec.str()?
            };
            let cfg = self
                .link_config(&link_id)
                .map_err(|_| Error::AuthFailure(format!("no link {link_id} configured here")))?;
            let peer = Hello::decode_verified(payload, &cfg.key)?;
            self.check_peer_hello(&cfg, &peer)?;
            *session = Responder {
                link_id: Some(link_id.clone()),
                peer_policy: peer.policy_version.clone(),
                peer_watermarks: Some(peer),
                report: SyncReport::new(&link_id),
                ..Default::default()
            };
            session.report.frames_received += 1;
            session.report.frames_sent += 1;
            return Ok(vec![encode_frame(
                FrameType::Hello,
                &self.make_hello(&cfg).encode_signed(&cfg.key),
            )]);
        }
        let link_id = session
            .link_id
            .clone()
            .ok_or_else(|| Error::Decode("frame before HELLO".into()))?;
        let cfg = self.link_config(&link_id)?;
        let crypto = self.crypto.as_ref();
        let (ty, plain) = open_frame(crypto, &cfg.key, frame)?;
        session.report.frames_received += 1;
        let mut out = Vec::new();
        match ty {
            FrameType::Policy => {
                let bundle = decode_policy(&plain)?;
                session.peer_policy = bundle.version.clone();
                session.report.policy_bundles_received += 1;
                self.adopt_policy(bundle)?;
            }
            FrameType::Delta => {
                let delta = Delta::decode(&plain)?;
                let last = delta.last;
                let acks = self.apply_delta(&cfg, delta, &mut session.report)?;
                session.acks.extend(acks);
                if last {
                    let own_policy = self.policy.read().clone();
                    if own_policy.version > session.peer_policy {
                        out.push(seal_frame(
                            crypto,
                            &cfg.key,
                            FrameType::Policy,
                            &encode_policy(&own_policy),
                        ));
                        session.report.policy_bundles_sent += 1;
                    }
                    let peer = session.peer_watermarks.take().expect("set by HELLO");
                    out.extend(self.plan_deltas(&cfg, &peer, &mut session.report)?);
                    let ack = Ack {
                        entries: std::mem::take(&mut session.acks),
                    };
                    out.push(seal_frame(crypto, &cfg.key, FrameType::Ack, &ack.encode()));
                }
            }
            FrameType::Ack => {
                self.process_ack(&link_id, &Ack::decode(&plain)?)?;
                session.done = true;
                self.finish_round(&link_id, &session.report)?;
            }
            FrameType::Hello => unreachable!("handled above"),
        }
        session.report.frames_sent += out.len() as u64;
        Ok(out)
    }
}

/// Run one in-process round from `initiator` to `responder` over a fresh
/// [`MemoryTransport`].
pub fn sync_pair(
    initiator: &Microdb,
    responder: &Arc<Microdb>,
    link_id: &str,
) -> Result<SyncReport> {
    initiator.sync_round(link_id, &mut MemoryTransport::new(responder.clone()))
}
