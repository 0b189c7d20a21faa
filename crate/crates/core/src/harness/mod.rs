//! Deterministic multi-tier simulator.
//!
//! One in-process [`Microdb`] per tier entry, all sharing a virtual
//! [`ManualClock`]. Links run over [`MemoryTransport`] so every round goes
//! through the real wire format. Scenario steps, poll deadlines and
//! scheduled sync rounds are executed in `(time, kind, index)` order on a
//! single thread.

mod spec;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use spec::{Action, LinkSpec, ScenarioStep, SourceSpec, StoreSpec, TierSpec, TopologySpec};

use crate::clock::ManualClock;
use crate::db::{Microdb, Options};
use crate::error::{Error, Result};
use crate::eventbus::{Subscription, SubscriptionFilter, TxnKind};
use crate::ingest::{IngestBinding, Reading, ScriptResolver, ScriptedSource};
use crate::pattern::Pattern;
use crate::security::{Principal, SecretKey};
use crate::store::Mutation;
use crate::sync::{LinkSwitch, MemoryTransport, SyncFilter, SyncLinkConfig, SyncReport};
use crate::value::{KeyRange, RecordKey, Value};

const SIM_QUEUE_CAPACITY: usize = 1 << 22;

/// Bundled scenario files, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    (
        "outage-heal",
        include_str!("../../scenarios/outage-heal.json"),
    ),
    (
        "policy-blocked",
        include_str!("../../scenarios/policy-blocked.json"),
    ),
    ("empty", include_str!("../../scenarios/empty.json")),
    ("four-tier", include_str!("../../scenarios/four-tier.json")),
];

pub fn bundled(name: &str) -> Option<TopologySpec> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| TopologySpec::from_json(text).expect("bundled scenarios parse"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub step: usize,
    pub at: i64,
    pub action: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub appended: u64,
    pub polled: u64,
    pub rounds: u64,
    pub rounds_down: u64,
    pub records_sent: u64,
    pub records_received: u64,
    pub duplicates: u64,
    pub conflicts: u64,
    pub sync_rejected: u64,
    pub policy_bundles: u64,
    pub step_errors: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub horizon_ns: i64,
    pub passed: bool,
    pub assertions: Vec<AssertionResult>,
    pub counters: Counters,
    pub warnings: BTreeSet<String>,
    /// replica → store → hex content hash over all keys.
    pub final_hashes: BTreeMap<String, BTreeMap<String, String>>,
}

impl ScenarioReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssertionResult> {
        self.assertions.iter().filter(|a| !a.passed)
    }
}

#[derive(Debug, Default)]
struct EventTally {
    creates: u64,
    last_seq: u64,
    out_of_order: u64,
}

struct SimLink {
    spec: LinkSpec,
    id: String,
    switch: LinkSwitch,
    next_round: Option<i64>,
}

pub struct Simulation {
    spec: TopologySpec,
    clock: ManualClock,
    now: i64,
    horizon: i64,
    replicas: BTreeMap<String, Arc<Microdb>>,
    links: Vec<SimLink>,
    next_step: usize,
    subs: BTreeMap<String, Subscription>,
    tallies: BTreeMap<(String, String), EventTally>,
    assertions: Vec<AssertionResult>,
    counters: Counters,
    warnings: BTreeSet<String>,
    last_reports: BTreeMap<String, SyncReport>,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("name", &self.spec.name)
            .field("now", &self.now)
            .field("replicas", &self.replicas.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

fn owner() -> Principal {
    Principal::local("owner")
}

impl Simulation {
    /// Instantiate every tier, store, source and link of `spec` at t = 0.
    pub fn load_topology(spec: TopologySpec) -> Result<Self> {
        spec.validate()?;
        let clock = ManualClock::new(0);
        let mut replicas = BTreeMap::new();
        let mut subs = BTreeMap::new();
        for t in &spec.tiers {
            let resolver = Arc::new(ScriptResolver::default());
            for s in spec.sources.iter().filter(|s| s.replica == t.replica) {
                let readings = s
                    .readings
                    .iter()
                    .map(|(ts, v)| {
                        Ok(Reading {
                            ts: *ts,
                            value: Value::from_json(v)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let src = s
                    .outages
                    .iter()
                    .fold(ScriptedSource::new(readings), |src, &(a, b)| {
                        src.outage(a, b)
                    });
                resolver.register(s.source_id.clone(), src);
            }
            let db = Microdb::open(
                Options::new(t.replica.clone(), t.tier)
                    .clock(Arc::new(clock.clone()))
                    .queue_capacity(SIM_QUEUE_CAPACITY)
                    .resolver(resolver),
            )?;
            subs.insert(
                t.replica.clone(),
                db.subscribe(SubscriptionFilter::store(Pattern::any()), &owner())?,
            );
            replicas.insert(t.replica.clone(), Arc::new(db));
        }
        for s in &spec.stores {
            for (id, db) in &replicas {
                if s.replicas.is_empty() || s.replicas.contains(id) {
                    db.create_store(s.config.clone(), &owner())?;
                }
            }
        }
        for s in &spec.sources {
            let binding = IngestBinding::poll(
                &s.source_id,
                &s.store,
                format!("memory:{}", s.source_id),
                s.period_ms,
            );
            replicas[&s.replica].bind_source(binding, &owner())?;
        }
        let mut links = Vec::new();
        for l in &spec.links {
            let id = l.link_id();
            let mut filter = SyncFilter::stores(l.stores.iter().map(String::as_str));
            if filter.stores.is_empty() {
                filter.stores.push(Pattern::any());
            }
            filter.range = l.range;
            filter.tag = l.tag.clone();
            let key = SecretKey::derive(&format!("sim:{}:{id}", spec.seed));
            for (me, peer) in [(&l.a, &l.b), (&l.b, &l.a)] {
                let cfg = SyncLinkConfig::new(
                    id.clone(),
                    peer.clone(),
                    spec.tier_of(peer).expect("validated"),
                    filter.clone(),
                )
                .key(key.clone());
                replicas[me].configure_link(cfg, &owner())?;
            }
            let switch = LinkSwitch::default();
            switch.set_up(l.is_up(0));
            let next_round = l.period_ms.map(|p| p as i64 * 1_000_000);
            links.push(SimLink {
                spec: l.clone(),
                id,
                switch,
                next_round,
            });
        }
        let horizon = spec.horizon();
        let mut sim = Simulation {
            spec,
            clock,
            now: 0,
            horizon,
            replicas,
            links,
            next_step: 0,
            subs,
            tallies: BTreeMap::new(),
            assertions: Vec::new(),
            counters: Counters::default(),
            warnings: BTreeSet::new(),
            last_reports: BTreeMap::new(),
        };
        sim.drain_events();
        Ok(sim)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::load_topology(TopologySpec::from_file(path)?)
    }

    pub fn now(&self) -> i64 {
        self.now
    }

    pub fn horizon(&self) -> i64 {
        self.horizon
    }

    pub fn replica(&self, id: &str) -> Option<&Arc<Microdb>> {
        self.replicas.get(id)
    }

    pub fn replicas(&self) -> impl Iterator<Item = (&str, &Arc<Microdb>)> {
        self.replicas.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn link_ids(&self) -> Vec<String> {
        self.links.iter().map(|l| l.id.clone()).collect()
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn assertions(&self) -> &[AssertionResult] {
        &self.assertions
    }

    pub fn last_sync_report(&self, link: &str) -> Option<&SyncReport> {
        self.last_reports.get(link)
    }

    /// Create events observed so far for `(replica, store)`.
    pub fn create_events(&self, replica: &str, store: &str) -> u64 {
        self.tallies
            .get(&(replica.to_string(), store.to_string()))
            .map_or(0, |t| t.creates)
    }

    /// Events that arrived with an event_seq not above the previous one.
    pub fn out_of_order_events(&self) -> u64 {
        self.tallies.values().map(|t| t.out_of_order).sum()
    }

    /// Run everything due at or before `until`. Stops at the first failing
    /// assertion or unexpected step outcome.
    pub fn step(&mut self, until: i64) -> Result<()> {
        self.advance(until, true)
    }

    /// Run to the horizon, recording every assertion, and report.
    pub fn run(mut self) -> ScenarioReport {
        let horizon = self.horizon;
        self.advance(horizon, false)
            .expect("non-stopping run records failures instead of returning them");
        self.report()
    }

    fn advance(&mut self, until: i64, stop_on_failure: bool) -> Result<()> {
        if until < self.now {
            return Err(Error::InvalidConfig(format!(
                "cannot step back from {} to {until}",
                self.now
            )));
        }
        loop {
            let step_t = self.spec.steps.get(self.next_step).map(|s| s.at);
            let poll_t = self
                .replicas
                .values()
                .filter_map(|d| d.next_poll_deadline())
                .min();
            let sync_t = self.links.iter().filter_map(|l| l.next_round).min();
            let Some(t) = [step_t, poll_t, sync_t].into_iter().flatten().min() else {
                break;
            };
            if t > until {
                break;
            }
            self.set_time(t);
            while self
                .spec
                .steps
                .get(self.next_step)
                .is_some_and(|s| s.at == t)
            {
                let idx = self.next_step;
                self.next_step += 1;
                let step = self.spec.steps[idx].clone();
                if let Some(failure) = self.exec_step(idx, &step) {
                    if stop_on_failure {
                        return Err(failure);
                    }
                }
            }
            for id in self.replicas.keys().cloned().collect::<Vec<_>>() {
                let db = self.replicas[&id].clone();
                if db.next_poll_deadline().is_some_and(|d| d <= t) {
                    self.counters.polled += db.poll_tick(t) as u64;
                }
            }
            for i in 0..self.links.len() {
                if self.links[i].next_round == Some(t) {
                    let period = self.links[i]
                        .spec
                        .period_ms
                        .expect("scheduled links have a period")
                        as i64
                        * 1_000_000;
                    self.links[i].next_round = Some(t + period);
                    let id = self.links[i].id.clone();
                    self.round(&id);
                }
            }
            self.drain_events();
        }
        self.set_time(until);
        Ok(())
    }

    fn set_time(&mut self, t: i64) {
        self.now = t;
        self.clock.set(t);
        for l in &self.links {
            l.switch.set_up(l.spec.is_up(t));
        }
    }

    fn drain_events(&mut self) {
        for (replica, sub) in &self.subs {
            for ev in sub.drain() {
                let tally = self
                    .tallies
                    .entry((replica.clone(), ev.store.clone()))
                    .or_default();
                if ev.event_seq <= tally.last_seq {
                    tally.out_of_order += 1;
                }
                tally.last_seq = ev.event_seq;
                if ev.txn == TxnKind::Create {
                    tally.creates += 1;
                }
            }
        }
    }

    /// One round on `link`, initiated by its `a` end. Returns whether the
    /// round completed.
    pub fn round(&mut self, link: &str) -> bool {
        let Some(l) = self.links.iter().find(|l| l.id == link) else {
            self.counters.rounds_down += 1;
            self.warnings
                .insert(format!("{link}: transport-down (no such link)"));
            return false;
        };
        let (a, b) = (
            self.replicas[&l.spec.a].clone(),
            self.replicas[&l.spec.b].clone(),
        );
        let mut transport = MemoryTransport::new(b).with_switch(l.switch.clone());
        let outcome = a.sync_round(link, &mut transport);
        self.drain_events();
        match outcome {
            Ok(report) => {
                self.counters.rounds += 1;
                self.counters.records_sent += report.records_sent();
                self.counters.records_received += report.records_received();
                self.counters.duplicates += report.duplicates;
                self.counters.conflicts += report.conflicts;
                self.counters.sync_rejected += report.rejected;
                self.counters.policy_bundles +=
                    report.policy_bundles_sent + report.policy_bundles_received;
                let peer = self.replicas[&self
                    .links
                    .iter()
                    .find(|l| l.id == link)
                    .expect("found above")
                    .spec
                    .b]
                    .last_sync_report(link);
                for w in report
                    .warnings
                    .iter()
                    .chain(peer.iter().flat_map(|r| r.warnings.iter()))
                {
                    self.warnings.insert(format!("{link}: {}", warning_text(w)));
                }
                self.last_reports.insert(link.to_string(), report);
                true
            }
            Err(Error::TransportDown(_)) => {
                self.counters.rounds_down += 1;
                false
            }
            Err(e) => {
                self.counters.step_errors += 1;
                self.warnings.insert(format!("{link}: round failed: {e}"));
                false
            }
        }
    }

    /// Execute one scenario step; returns the failure to stop on, if any.
    fn exec_step(&mut self, idx: usize, step: &ScenarioStep) -> Option<Error> {
        let at = step.at;
        let name = step.action.name();
        if step.action.is_assertion() {
            self.drain_events();
            let (passed, detail) = self.check(&step.action);
            self.assertions.push(AssertionResult {
                step: idx,
                at,
                action: name.into(),
                passed,
                detail: detail.clone(),
            });
            return (!passed).then_some(Error::AssertionFailure {
                step: idx,
                diff: detail,
            });
        }
        let outcome = self.apply(idx, &step.action);
        self.drain_events();
        let failure = match (&outcome, step.expect_error) {
            (Ok(()), false) | (Err(_), true) => None,
            (Ok(()), true) => Some("expected an error, step succeeded".to_string()),
            (Err(e), false) => Some(e.to_string()),
        };
        if let Some(diff) = failure {
            self.counters.step_errors += 1;
            self.assertions.push(AssertionResult {
                step: idx,
                at,
                action: name.into(),
                passed: false,
                detail: diff.clone(),
            });
            return Some(Error::AssertionFailure { step: idx, diff });
        }
        if step.expect_error {
            let detail = format!("failed as expected: {}", outcome.unwrap_err());
            self.assertions.push(AssertionResult {
                step: idx,
                at,
                action: name.into(),
                passed: true,
                detail,
            });
        }
        None
    }

    fn apply(&mut self, idx: usize, action: &Action) -> Result<()> {
        match action {
            Action::Append {
                replica,
                store,
                ts,
                count,
                ts_step,
                value,
                subject,
            } => {
                let db = self.replicas[replica].clone();
                let who = subject.as_deref().map_or_else(owner, Principal::local);
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.spec.seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let fixed = value.as_ref().map(Value::from_json).transpose()?;
                let start = ts.unwrap_or(self.now);
                for i in 0..*count {
                    let v = fixed.clone().unwrap_or_else(|| {
                        Value::Float((rng.gen_range(0.0..1000.0f64) * 100.0).round() / 100.0)
                    });
                    db.append(store, start + i as i64 * ts_step, v, &who)?;
                    self.counters.appended += 1;
                }
                Ok(())
            }
            Action::Mutate {
                replica,
                store,
                ts,
                seq,
                value,
                subject,
            } => {
                let db = &self.replicas[replica];
                let who = subject.as_deref().map_or_else(owner, Principal::local);
                let m = match value {
                    Some(v) => Mutation::Set(Value::from_json(v)?),
                    None => Mutation::Delete,
                };
                db.mutate(store, RecordKey::new(*ts, *seq), m, &who)
                    .map(|_| ())
            }
            Action::Publish { replica, manifest } => self.replicas[replica]
                .publish_manifest(manifest, &owner())
                .map(|_| ()),
            Action::Deploy {
                replica,
                manifest_id,
                version,
            } => self.replicas[replica]
                .deploy(manifest_id, *version, &owner())?
                .check(),
            Action::SyncRound { link } => {
                self.round(link);
                Ok(())
            }
            Action::PollTick { replica } => {
                let now = self.now;
                self.counters.polled += self.replicas[replica].poll_tick(now) as u64;
                Ok(())
            }
            _ => unreachable!("assertions are checked, not applied"),
        }
    }

    fn check(&self, action: &Action) -> (bool, String) {
        match action {
            Action::AssertConverged {
                stores,
                replicas,
                range,
            } => {
                let range = range.unwrap_or(KeyRange::ALL);
                let mut diffs = Vec::new();
                for store in stores {
                    let mut hashes = BTreeMap::new();
                    for r in replicas {
                        let h = self.replicas[r]
                            .content_hash(store, &range)
                            .map(hex::encode)
                            .unwrap_or_else(|e| format!("<{e}>"));
                        hashes.insert(r.as_str(), h);
                    }
                    let distinct: BTreeSet<&String> = hashes.values().collect();
                    if distinct.len() > 1 {
                        let parts: Vec<String> = hashes
                            .iter()
                            .map(|(r, h)| format!("{r}={}", &h[..h.len().min(12)]))
                            .collect();
                        diffs.push(format!("{store}: {}", parts.join(" ")));
                    }
                }
                if diffs.is_empty() {
                    (
                        true,
                        format!(
                            "{} store(s) equal on {} replica(s)",
                            stores.len(),
                            replicas.len()
                        ),
                    )
                } else {
                    (false, diffs.join("; "))
                }
            }
            Action::AssertEventCount {
                replica,
                store,
                expected,
            } => {
                let seen = self.create_events(replica, store);
                let want = match expected {
                    Some(n) => *n,
                    None => match self.replicas[replica].store_stats(store) {
                        Ok(s) => s.creates,
                        Err(e) => return (false, e.to_string()),
                    },
                };
                let disorder = self
                    .tallies
                    .get(&(replica.clone(), store.clone()))
                    .map_or(0, |t| t.out_of_order);
                (
                    seen == want && disorder == 0,
                    format!("{seen} create events, expected {want}, {disorder} out of order"),
                )
            }
            Action::AssertDenied {
                replica,
                subject,
                interface,
                store,
            } => {
                let d = self.replicas[replica].authorize(
                    &Principal::local(subject),
                    *interface,
                    store,
                    &KeyRange::ALL,
                );
                (
                    !d.is_allow(),
                    format!("{subject} {interface} {store}: {d:?}"),
                )
            }
            _ => unreachable!("only assertions are checked"),
        }
    }

    pub fn final_hashes(&self) -> BTreeMap<String, BTreeMap<String, String>> {
        self.replicas
            .iter()
            .map(|(id, db)| {
                let mut names = db.store_names();
                names.push(crate::registry::REGISTRY_STORE.to_string());
                let hashes = names
                    .into_iter()
                    .filter_map(|s| {
                        db.content_hash(&s, &KeyRange::ALL)
                            .ok()
                            .map(|h| (s, hex::encode(h)))
                    })
                    .collect();
                (id.clone(), hashes)
            })
            .collect()
    }

    pub fn report(&self) -> ScenarioReport {
        ScenarioReport {
            name: self.spec.name.clone(),
            seed: self.spec.seed,
            horizon_ns: self.horizon,
            passed: self.assertions.iter().all(|a| a.passed),
            assertions: self.assertions.clone(),
            counters: self.counters.clone(),
            warnings: self.warnings.clone(),
            final_hashes: self.final_hashes(),
        }
    }
}

fn warning_text(w: &crate::sync::SyncWarning) -> String {
    use crate::sync::SyncWarning::*;
    match w {
        FilterMiss { store } => format!("filter-miss {store}"),
        PolicyBlocked { store, policy } => format!("policy-blocked {store} by {policy}"),
        Conflict { store, key } => format!("conflict {store} {key}"),
        OutOfFilter { store } => format!("out-of-filter {store}"),
    }
}

/// Load, run and report a scenario file. `seed` overrides the file's seed.
pub fn run_scenario(path: &Path, seed: Option<u64>) -> Result<ScenarioReport> {
    let mut spec = TopologySpec::from_file(path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(Simulation::load_topology(spec)?.run())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse_and_validate() {
        for (name, _) in BUNDLED {
            bundled(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn non_adjacent_link_is_invalid_spec() {
        let mut spec = bundled("four-tier").unwrap();
        spec.links[0].b = "r1".into();
        match Simulation::load_topology(spec) {
            Err(Error::InvalidSpec(items)) => {
                assert!(items.iter().any(|i| i.contains("adjacent")), "{items:?}")
            }
            other => panic!("expected invalid spec, got {other:?}"),
        }
    }

    #[test]
    fn step_to_zero_is_noop() {
        let mut sim = Simulation::load_topology(bundled("four-tier").unwrap()).unwrap();
        let before = sim.final_hashes();
        sim.step(0).unwrap();
        assert_eq!(sim.final_hashes(), before);
        assert_eq!(sim.counters(), &Counters::default());
    }

    #[test]
    fn four_tier_chain_has_four_instances_three_links() {
        let sim = Simulation::load_topology(bundled("four-tier").unwrap()).unwrap();
        assert_eq!(sim.replicas().count(), 4);
        assert_eq!(sim.link_ids().len(), 3);
    }

    #[test]
    fn isolated_instances_report_transport_down() {
        let mut spec = bundled("four-tier").unwrap();
        spec.links.clear();
        spec.steps
            .retain(|s| matches!(s.action, Action::SyncRound { .. } | Action::Append { .. }));
        let report = Simulation::load_topology(spec).unwrap().run();
        assert!(report.counters.rounds_down > 0);
        assert_eq!(report.counters.rounds, 0);
    }
}
