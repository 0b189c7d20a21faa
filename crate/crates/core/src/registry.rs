//! Manifest registry: a replicated, append-only log of declarative
//! deployment documents, kept in the reserved immutable store
//! `__registry` so ordinary sync links carry it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::db::Microdb;
use crate::error::{Error, Result};
use crate::eventbus::{CallbackDecl, CallbackSpec};
use crate::infomodel::{InfoModel, InstanceDef, SubjectKind, Tag, TypeDef};
use crate::ingest::{IngestBinding, IngestMode, MIN_POLL_PERIOD_MS};
use crate::pattern::Pattern;
use crate::security::{PolicySet, Principal, Role, SecretKey, SharingPolicy, TierKind};
use crate::store::{valid_store_name, ColumnStoreConfig, RESERVED_PREFIX};
use crate::sync::{SyncFilter, SyncLinkConfig, SyncReport, Transport};
use crate::value::{Provenance, Record, RecordKey, Value};

pub const REGISTRY_STORE: &str = "__registry";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default)]
    pub types: Vec<TypeDef>,
    #[serde(default)]
    pub instances: Vec<InstanceDef>,
    #[serde(default)]
    pub tags: Vec<Tag>,
}

impl ModelSection {
    pub fn is_empty(&self) -> bool {
        self.types.is_empty() && self.instances.is_empty() && self.tags.is_empty()
    }
}

/// A role plus the subjects it is provisioned to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRole {
    #[serde(flatten)]
    pub role: Role,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subjects: Vec<String>,
}

impl From<Role> for ManifestRole {
    fn from(role: Role) -> Self {
        Self {
            role,
            subjects: Vec::new(),
        }
    }
}

/// An ingest binding, optionally pinned to one replica. Unpinned bindings
/// deploy wherever the manifest is deployed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestBinding {
    #[serde(flatten)]
    pub binding: IngestBinding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replica: Option<String>,
}

impl From<IngestBinding> for ManifestBinding {
    fn from(binding: IngestBinding) -> Self {
        Self {
            binding,
            replica: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub replica: String,
    pub tier: TierKind,
}

/// A link described from both ends; each endpoint deploys its own half.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLink {
    pub link_id: String,
    pub endpoints: [Endpoint; 2],
    pub filter: SyncFilter,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_ms: Option<u64>,
    /// Defaults to a key derived from the link id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<SecretKey>,
}

impl ManifestLink {
    pub fn new(
        link_id: impl Into<String>,
        a: (&str, TierKind),
        b: (&str, TierKind),
        filter: SyncFilter,
    ) -> Self {
        Self {
            link_id: link_id.into(),
            endpoints: [
                Endpoint {
                    replica: a.0.into(),
                    tier: a.1,
                },
                Endpoint {
                    replica: b.0.into(),
                    tier: b.1,
                },
            ],
            filter,
            period_ms: None,
            key: None,
        }
    }

    /// This replica's half of the link, if it is an endpoint.
    pub fn half_for(&self, replica: &str) -> Option<SyncLinkConfig> {
        let [a, b] = &self.endpoints;
        let peer = if a.replica == replica {
            b
        } else if b.replica == replica {
            a
        } else {
            return None;
        };
        let mut cfg = SyncLinkConfig::new(
            self.link_id.clone(),
            peer.replica.clone(),
            peer.tier,
            self.filter.clone(),
        );
        cfg.period_ms = self.period_ms;
        if let Some(k) = &self.key {
            cfg.key = k.clone();
        }
        Some(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_id: String,
    pub version: u64,
    pub publisher: String,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub stores: Vec<ColumnStoreConfig>,
    #[serde(default)]
    pub roles: Vec<ManifestRole>,
    #[serde(default)]
    pub policies: Vec<SharingPolicy>,
    #[serde(default)]
    pub ingest: Vec<ManifestBinding>,
    #[serde(default)]
    pub sync: Vec<ManifestLink>,
    #[serde(default)]
    pub callbacks: Vec<CallbackDecl>,
}

impl Manifest {
    pub fn new(manifest_id: impl Into<String>, version: u64, publisher: impl Into<String>) -> Self {
        Self {
            manifest_id: manifest_id.into(),
            version,
            publisher: publisher.into(),
            model: ModelSection::default(),
            stores: Vec::new(),
            roles: Vec::new(),
            policies: Vec::new(),
            ingest: Vec::new(),
            sync: Vec::new(),
            callbacks: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Position of an entry in the registry log.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LogPosition {
    pub origin: String,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegistryEntry {
    pub position: LogPosition,
    pub published_at: i64,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Roles,
    Model,
    Stores,
    Callbacks,
    Ingest,
    Sync,
}

impl std::fmt::Display for Section {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Section::Roles => "roles",
            Section::Model => "model",
            Section::Stores => "stores",
            Section::Callbacks => "callbacks",
            Section::Ingest => "ingest",
            Section::Sync => "sync",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DeploymentReport {
    pub manifest_id: String,
    pub version: u64,
    pub created: Vec<String>,
    pub updated: Vec<String>,
    pub skipped: Vec<String>,
    /// Set when a section failed; earlier sections stay applied.
    pub failure: Option<(String, String)>,
}

impl DeploymentReport {
    pub fn partial(&self) -> bool {
        self.failure.is_some()
    }

    pub fn changed(&self) -> usize {
        self.created.len() + self.updated.len()
    }

    /// Turn a partial deployment into an `ApplyFailure` error.
    pub fn check(&self) -> Result<()> {
        match &self.failure {
            Some((section, reason)) => Err(Error::ApplyFailure {
                section: section.clone(),
                reason: reason.clone(),
            }),
            None => Ok(()),
        }
    }
}

/// Configuration state of an instance in comparable form: store configs,
/// roles, policies, bindings, model, callbacks, ingest bindings and links.
/// Policy version and replication progress are left out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigDump {
    pub stores: Vec<ColumnStoreConfig>,
    pub roles: BTreeMap<String, Role>,
    pub policies: BTreeMap<String, SharingPolicy>,
    pub bindings: BTreeMap<String, BTreeSet<String>>,
    pub model: InfoModel,
    pub callbacks: Vec<CallbackDecl>,
    pub ingest: Vec<IngestBinding>,
    pub links: Vec<(String, SyncFilter, Option<u64>)>,
    pub deployed: Vec<(String, u64)>,
}

impl ConfigDump {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dump serializes")
    }
}

fn type_key(def: &TypeDef) -> String {
    format!("type:{}:{}", def.model_id, def.name)
}

fn tag_key(t: &Tag) -> String {
    format!("tag:{}:{}:{}", t.model_id, t.subject, t.label)
}

impl Microdb {
    pub(crate) fn ensure_registry_store(&self) -> Result<()> {
        if !self.has_store(REGISTRY_STORE) {
            self.create_store_unchecked(ColumnStoreConfig::new(REGISTRY_STORE), "registry")?;
        }
        Ok(())
    }

    /// Check a manifest against itself and against what is already
    /// deployed here. Every problem found is listed.
    pub fn validate_manifest(&self, m: &Manifest) -> Result<()> {
        let mut errs = Vec::new();
        if m.manifest_id.is_empty() {
            errs.push("manifest_id is empty".to_string());
        }
        if m.version == 0 {
            errs.push("version must be positive".to_string());
        }
        if m.publisher.is_empty() {
            errs.push("publisher is empty".to_string());
        }

        let mut ps = self.policy.read().clone();
        for p in &m.policies {
            ps.define_policy(p.clone());
        }
        for r in &m.roles {
            if let Err(e) = ps.define_role(r.role.clone()) {
                errs.push(format!("roles: {}: {e}", r.role.name));
            }
        }
        for r in &m.roles {
            for s in &r.subjects {
                if s.is_empty() {
                    errs.push(format!("roles: {}: empty subject", r.role.name));
                }
            }
        }

        let mut model = self.model.read().clone();
        let new_types: Vec<TypeDef> = m
            .model
            .types
            .iter()
            .filter(|t| {
                model
                    .model(&t.model_id)
                    .and_then(|md| md.types.get(&t.name))
                    != Some(t)
            })
            .cloned()
            .collect();
        if let Err(e) = model.define_types(&new_types) {
            errs.push(format!("model: {e}"));
        }

        let existing: BTreeSet<String> = self.stores.read().keys().cloned().collect();
        let mut names = BTreeSet::new();
        for s in &m.stores {
            if !valid_store_name(&s.name) || s.name.starts_with(RESERVED_PREFIX) {
                errs.push(format!("stores: invalid name {:?}", s.name));
            }
            if !names.insert(s.name.clone()) {
                errs.push(format!("stores: {} listed twice", s.name));
            }
            if let Some(t) = &s.value_type {
                if let Err(e) = model.resolve_type(t) {
                    errs.push(format!("stores: {}: value_type {t}: {e}", s.name));
                }
            }
            if s.retention == Some(0) {
                errs.push(format!("stores: {}: retention must be positive", s.name));
            }
        }
        let known_store = |n: &str| names.contains(n) || existing.contains(n);

        for i in &m.model.instances {
            let inst_exists = model
                .model(&i.model_id)
                .and_then(|md| md.instances.get(&i.name))
                == Some(i);
            if inst_exists {
                continue;
            }
            let mut probe = model.clone();
            if let Err(e) = probe.define_instance(i.clone(), known_store(&i.store)) {
                errs.push(format!("model: instance {}: {e}", i.name));
            } else {
                model = probe;
            }
        }
        for t in &m.model.tags {
            if model
                .model(&t.model_id)
                .is_some_and(|md| md.tags.contains(t))
            {
                continue;
            }
            if let Err(e) = model.classify(t.clone()) {
                errs.push(format!("model: {}: {e}", tag_key(t)));
            }
        }

        let mut sources = BTreeSet::new();
        for b in &m.ingest {
            let b = &b.binding;
            if !known_store(&b.store) {
                errs.push(format!(
                    "ingest: {}: unknown store {}",
                    b.source_id, b.store
                ));
            }
            if !sources.insert(b.source_id.clone()) {
                errs.push(format!("ingest: source {} listed twice", b.source_id));
            }
            if let IngestMode::Poll { period_ms } = b.mode {
                if period_ms < MIN_POLL_PERIOD_MS {
                    errs.push(format!(
                        "ingest: {}: poll period below {MIN_POLL_PERIOD_MS}ms",
                        b.source_id
                    ));
                }
                if b.address.is_empty() {
                    errs.push(format!(
                        "ingest: {}: poll binding needs an address",
                        b.source_id
                    ));
                }
            }
        }

        for l in &m.sync {
            let [a, b] = &l.endpoints;
            if !a.tier.is_adjacent(b.tier) {
                errs.push(format!(
                    "sync: {}: {} and {} are not adjacent tiers",
                    l.link_id, a.tier, b.tier
                ));
            }
            if a.replica == b.replica {
                errs.push(format!(
                    "sync: {}: both endpoints are {}",
                    l.link_id, a.replica
                ));
            }
            if !l.filter.has_selector() {
                errs.push(format!("sync: {}: empty filter", l.link_id));
            }
            for (end, peer) in [(a, b), (b, a)] {
                let _ = end;
                for name in l.filter.stores.iter().filter_map(Pattern::literal) {
                    if let Err(policy) = ps.check_sharing(name, peer.tier) {
                        errs.push(format!(
                            "sync: {}: store {name} blocked towards {} by policy {policy}",
                            l.link_id, peer.tier
                        ));
                    }
                }
            }
        }

        let mut ids = BTreeSet::new();
        for c in &m.callbacks {
            if !ids.insert(c.id.clone()) {
                errs.push(format!("callbacks: {} listed twice", c.id));
            }
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::ValidationFailure(errs))
        }
    }

    /// Validate and append a manifest to the local registry log. It is not
    /// deployed.
    pub fn publish_manifest(&self, m: &Manifest, principal: &Principal) -> Result<LogPosition> {
        self.require_admin(principal, REGISTRY_STORE)?;
        self.validate_manifest(m)?;
        let _g = self.registry_lock.lock();
        if let Some(prev) = self
            .registry_log()
            .iter()
            .filter(|e| e.manifest.manifest_id == m.manifest_id)
            .map(|e| e.manifest.version)
            .max()
        {
            if m.version <= prev {
                return Err(Error::StaleVersion(format!(
                    "{} v{} is not above the logged v{prev}",
                    m.manifest_id, m.version
                )));
            }
        }
        let store = self.store(REGISTRY_STORE)?;
        let json = m.to_json();
        let origin = self.replica_id.clone();
        let committed = self
            .commit_with(&store, &principal.subject, |st, now| {
                Ok(Record {
                    key: RecordKey::new(now, st.next_seq_for_ts(now)),
                    value: Some(Value::Str(json)),
                    prov: Provenance {
                        origin_seq: st.next_origin_seq(&origin),
                        origin_id: origin.clone(),
                        write_ts: now,
                    },
                })
            })?
            .expect("fresh origin_seq cannot be a duplicate");
        log::info!(
            "published {} v{} at {}:{}",
            m.manifest_id,
            m.version,
            origin,
            committed.record.prov.origin_seq
        );
        Ok(LogPosition {
            origin,
            seq: committed.record.prov.origin_seq,
        })
    }

    /// Every registry entry, ordered by `(origin, seq)`.
    pub fn registry_log(&self) -> Vec<RegistryEntry> {
        let Ok(store) = self.store(REGISTRY_STORE) else {
            return Vec::new();
        };
        let st = store.state.read();
        let mut out: Vec<RegistryEntry> = st
            .all_versions()
            .filter_map(|r| {
                let Some(Value::Str(json)) = &r.value else {
                    return None;
                };
                match Manifest::from_json(json) {
                    Ok(manifest) => Some(RegistryEntry {
                        position: LogPosition {
                            origin: r.prov.origin_id.clone(),
                            seq: r.prov.origin_seq,
                        },
                        published_at: r.prov.write_ts,
                        manifest,
                    }),
                    Err(e) => {
                        log::warn!(
                            "unreadable registry entry {}:{}: {e}",
                            r.prov.origin_id,
                            r.prov.origin_seq
                        );
                        None
                    }
                }
            })
            .collect();
        out.sort_by(|a, b| a.position.cmp(&b.position));
        out
    }

    fn find_manifest(&self, manifest_id: &str, version: u64) -> Result<Manifest> {
        self.registry_log()
            .into_iter()
            .map(|e| e.manifest)
            .find(|m| m.manifest_id == manifest_id && m.version == version)
            .ok_or_else(|| Error::NotFound(format!("manifest {manifest_id} v{version}")))
    }

    pub fn is_deployed(&self, manifest_id: &str, version: u64) -> bool {
        self.deployed
            .lock()
            .contains(&(manifest_id.to_string(), version))
    }

    /// Apply a logged manifest. Sections go in a fixed order: roles and
    /// policies, model types and tags, stores (then the instances bound to
    /// them), callbacks, ingest, sync. Items already in place are skipped.
    /// A failing section is undone and later sections are not attempted.
    pub fn deploy(
        &self,
        manifest_id: &str,
        version: u64,
        principal: &Principal,
    ) -> Result<DeploymentReport> {
        self.require_admin(principal, REGISTRY_STORE)?;
        let _g = self.registry_lock.lock();
        let m = self.find_manifest(manifest_id, version)?;
        let mut report = DeploymentReport {
            manifest_id: m.manifest_id.clone(),
            version: m.version,
            ..Default::default()
        };
        let sections: [(
            Section,
            fn(&Self, &Manifest, &Principal, &mut DeploymentReport) -> Result<()>,
        ); 6] = [
            (Section::Roles, Self::deploy_roles),
            (Section::Model, Self::deploy_model),
            (Section::Stores, Self::deploy_stores),
            (Section::Callbacks, Self::deploy_callbacks),
            (Section::Ingest, Self::deploy_ingest),
            (Section::Sync, Self::deploy_sync),
        ];
        for (section, apply) in sections {
            let mark = (
                report.created.len(),
                report.updated.len(),
                report.skipped.len(),
            );
            if let Err(e) = apply(self, &m, principal, &mut report) {
                report.created.truncate(mark.0);
                report.updated.truncate(mark.1);
                report.skipped.truncate(mark.2);
                log::warn!(
                    "deploy {} v{}: section {section} failed: {e}",
                    m.manifest_id,
                    m.version
                );
                report.failure = Some((section.to_string(), e.to_string()));
                return Ok(report);
            }
        }
        self.deployed
            .lock()
            .insert((m.manifest_id.clone(), m.version));
        self.save_catalog()?;
        Ok(report)
    }

    fn deploy_roles(
        &self,
        m: &Manifest,
        principal: &Principal,
        report: &mut DeploymentReport,
    ) -> Result<()> {
        let current = self.policy.read().clone();
        let mut next = current.clone();
        for p in &m.policies {
            let key = format!("policy:{}", p.name);
            match current.policies.get(&p.name) {
                Some(old) if old == p => report.skipped.push(key),
                Some(_) => report.updated.push(key),
                None => report.created.push(key),
            }
            next.define_policy(p.clone());
        }
        for r in &m.roles {
            let key = format!("role:{}", r.role.name);
            match current.roles.get(&r.role.name) {
                Some(old) if *old == r.role => report.skipped.push(key),
                Some(_) => report.updated.push(key),
                None => report.created.push(key),
            }
            next.define_role(r.role.clone())?;
            for s in &r.subjects {
                let key = format!("binding:{s}:{}", r.role.name);
                let mut roles = next.roles_of(s);
                if roles.insert(r.role.name.clone()) {
                    next.bind(s, roles)?;
                    report.created.push(key);
                } else {
                    report.skipped.push(key);
                }
            }
        }
        if !same_policy(&current, &next) {
            self.edit_policy_set(principal, next)?;
        }
        Ok(())
    }

    fn deploy_model(
        &self,
        m: &Manifest,
        _principal: &Principal,
        report: &mut DeploymentReport,
    ) -> Result<()> {
        let mut model = self.model.read().clone();
        let mut fresh = Vec::new();
        for t in &m.model.types {
            match model
                .model(&t.model_id)
                .and_then(|md| md.types.get(&t.name))
            {
                Some(old) if old == t => report.skipped.push(type_key(t)),
                Some(_) => {
                    return Err(Error::Duplicate(format!(
                        "{} differs from the deployed definition",
                        type_key(t)
                    )))
                }
                None => {
                    report.created.push(type_key(t));
                    fresh.push(t.clone());
                }
            }
        }
        model.define_types(&fresh)?;
        for t in m
            .model
            .tags
            .iter()
            .filter(|t| t.subject_kind != SubjectKind::Instance)
        {
            if model
                .model(&t.model_id)
                .is_some_and(|md| md.tags.contains(t))
            {
                report.skipped.push(tag_key(t));
            } else {
                model.classify(t.clone())?;
                report.created.push(tag_key(t));
            }
        }
        let _a = self.admin.lock();
        *self.model.write() = model;
        drop(_a);
        self.save_catalog()
    }

    fn deploy_stores(
        &self,
        m: &Manifest,
        principal: &Principal,
        report: &mut DeploymentReport,
    ) -> Result<()> {
        let mut made = Vec::new();
        let result = (|| {
            for s in &m.stores {
                let key = format!("store:{}", s.name);
                match self.store_config(&s.name) {
                    Ok(old) if old == *s => report.skipped.push(key),
                    Ok(_) => {
                        return Err(Error::DuplicateName(format!(
                            "store {} exists with a different config",
                            s.name
                        )))
                    }
                    Err(_) => {
                        self.create_store(s.clone(), principal)?;
                        made.push(s.name.clone());
                        report.created.push(key);
                    }
                }
            }
            let mut model = self.model.read().clone();
            for i in &m.model.instances {
                let key = format!("instance:{}:{}", i.model_id, i.name);
                if model
                    .model(&i.model_id)
                    .and_then(|md| md.instances.get(&i.name))
                    == Some(i)
                {
                    report.skipped.push(key);
                } else {
                    model.define_instance(i.clone(), self.has_store(&i.store))?;
                    report.created.push(key);
                }
            }
            for t in m
                .model
                .tags
                .iter()
                .filter(|t| t.subject_kind == SubjectKind::Instance)
            {
                if model
                    .model(&t.model_id)
                    .is_some_and(|md| md.tags.contains(t))
                {
                    report.skipped.push(tag_key(t));
                } else {
                    model.classify(t.clone())?;
                    report.created.push(tag_key(t));
                }
            }
            let _a = self.admin.lock();
            *self.model.write() = model;
            Ok(())
        })();
        if result.is_err() {
            for name in made.iter().rev() {
                if let Err(e) = self.drop_store(name, principal) {
                    log::warn!("rollback of store {name}: {e}");
                }
            }
        }
        result?;
        self.save_catalog()
    }

    fn deploy_callbacks(
        &self,
        m: &Manifest,
        principal: &Principal,
        report: &mut DeploymentReport,
    ) -> Result<()> {
        let current = self.callbacks();
        let mut fresh = Vec::new();
        for c in &m.callbacks {
            let key = format!("callback:{}", c.id);
            match current.iter().find(|s| s.id == c.id) {
                Some(s) if s.decl().as_ref() == Some(c) => report.skipped.push(key),
                Some(_) => {
                    return Err(Error::DuplicateName(format!(
                        "callback {} exists with a different definition",
                        c.id
                    )))
                }
                None => {
                    fresh.push(c.to_spec());
                    report.created.push(key);
                }
            }
        }
        if fresh.is_empty() {
            return Ok(());
        }
        for c in &m.callbacks {
            self.require_admin(principal, c.store.as_str())?;
        }
        {
            let _a = self.admin.lock();
            let mut cbs = self.callbacks.write();
            let mut next: Vec<CallbackSpec> = (**cbs).clone();
            next.extend(fresh);
            *cbs = std::sync::Arc::new(next);
        }
        self.save_catalog()
    }

    fn deploy_ingest(
        &self,
        m: &Manifest,
        principal: &Principal,
        report: &mut DeploymentReport,
    ) -> Result<()> {
        let current: BTreeMap<String, IngestBinding> = self
            .ingest_status()
            .into_iter()
            .map(|s| (s.binding.store.clone(), s.binding))
            .collect();
        let mut made = Vec::new();
        let mut result = Ok(());
        for mb in &m.ingest {
            let b = &mb.binding;
            let key = format!("ingest:{}", b.source_id);
            if mb.replica.as_deref().is_some_and(|r| r != self.replica_id) {
                report.skipped.push(key);
                continue;
            }
            match current.get(&b.store) {
                Some(old) if old == b => report.skipped.push(key),
                Some(_) => {
                    result = Err(Error::AlreadyBound(b.store.clone()));
                    break;
                }
                None => match self.bind_source(b.clone(), principal) {
                    Ok(()) => {
                        made.push(b.store.clone());
                        report.created.push(key);
                    }
                    Err(e) => {
                        result = Err(e);
                        break;
                    }
                },
            }
        }
        if result.is_err() {
            for store in made {
                let _ = self.unbind(&store, principal);
            }
        }
        result
    }

    fn deploy_sync(
        &self,
        m: &Manifest,
        principal: &Principal,
        report: &mut DeploymentReport,
    ) -> Result<()> {
        let mut made = Vec::new();
        let mut result = Ok(());
        for l in &m.sync {
            let key = format!("sync:{}", l.link_id);
            let Some(cfg) = l.half_for(&self.replica_id) else {
                report.skipped.push(key);
                continue;
            };
            match self.link_config(&l.link_id) {
                Ok(old) if old == cfg => report.skipped.push(key),
                Ok(_) => {
                    result = Err(Error::DuplicateName(format!(
                        "link {} exists with a different config",
                        l.link_id
                    )));
                    break;
                }
                Err(_) => match self.configure_link(cfg, principal) {
                    Ok(()) => {
                        made.push(l.link_id.clone());
                        report.created.push(key);
                    }
                    Err(e) => {
                        result = Err(e);
                        break;
                    }
                },
            }
        }
        if result.is_err() {
            for id in made {
                let _ = self.remove_link(&id, principal);
            }
        }
        result
    }

    /// Exchange registry entries (and everything else the link carries)
    /// with the peer. Returns the number of registry entries that moved.
    pub fn reconcile_registry(
        &self,
        link_id: &str,
        transport: &mut dyn Transport,
    ) -> Result<(u64, SyncReport)> {
        let report = self.sync_round(link_id, transport)?;
        let moved = report.sent.get(REGISTRY_STORE).copied().unwrap_or(0)
            + report.received.get(REGISTRY_STORE).copied().unwrap_or(0);
        Ok((moved, report))
    }

    pub fn config_dump(&self) -> ConfigDump {
        let ps = self.policy.read().clone();
        let mut links: Vec<(String, SyncFilter, Option<u64>)> = self
            .link_status()
            .into_iter()
            .map(|l| (l.config.link_id, l.config.filter, l.config.period_ms))
            .collect();
        links.sort_by(|a, b| a.0.cmp(&b.0));
        ConfigDump {
            stores: self
                .store_names()
                .iter()
                .filter_map(|n| self.store_config(n).ok())
                .collect(),
            roles: ps.roles,
            policies: ps.policies,
            bindings: ps.bindings,
            model: self.info_model(),
            callbacks: self
                .callbacks()
                .iter()
                .filter_map(CallbackSpec::decl)
                .collect(),
            ingest: self
                .ingest_status()
                .into_iter()
                .map(|s| s.binding)
                .collect(),
            links,
            deployed: self.deployed.lock().iter().cloned().collect(),
        }
    }
}

fn same_policy(a: &PolicySet, b: &PolicySet) -> bool {
    a.roles == b.roles && a.policies == b.policies && a.bindings == b.bindings
}
