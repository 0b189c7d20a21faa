//! The microdatabase facade: one tier-local data vault owning its column
//! stores, information model, security domain, event bus, ingest bindings
//! and sync links.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};
use crate::error::{Error, Result};
use crate::eventbus::{
    CallbackDecl, CallbackSpec, EventBus, Subscription, SubscriptionFilter, DEFAULT_QUEUE_CAPACITY,
};
use crate::infomodel::{FederatedView, InfoModel, InstanceDef, Node, Tag, TypeDef};
use crate::ingest::{IngestState, PersistedBinding, ScriptResolver, SourceResolver};
use crate::security::{
    authenticate, ChaChaProvider, CryptoProvider, Decision, DenyReason, Interface, PolicySet,
    Principal, Role, SecretKey, SharingPolicy, TierKind, TrustedKeys,
};
use crate::store::{ColumnStoreConfig, Store};
use crate::sync::{LinkState, PersistedLink};
use crate::value::KeyRange;

pub const DATA_DIR_ENV: &str = "MICRODB_DATA_DIR";
const CATALOG_FILE: &str = "catalog.json";

/// Construction parameters for [`Microdb::open`].
#[derive(Clone)]
pub struct Options {
    pub replica_id: String,
    pub tier: TierKind,
    /// Subject that administers this instance without needing a role.
    pub owner: String,
    /// Root data directory; `None` keeps everything in memory. The instance
    /// lives in `<data_dir>/<replica_id>/`.
    pub data_dir: Option<PathBuf>,
    pub clock: Arc<dyn Clock>,
    pub crypto: Arc<dyn CryptoProvider>,
    /// Wraps per-store data keys of encrypted stores.
    pub owner_key: Option<SecretKey>,
    pub trusted_keys: TrustedKeys,
    pub queue_capacity: usize,
    pub resolver: Arc<dyn SourceResolver>,
}

impl std::fmt::Debug for Options {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Options")
            .field("replica_id", &self.replica_id)
            .field("tier", &self.tier)
            .field("owner", &self.owner)
            .field("data_dir", &self.data_dir)
            .field("crypto", &self.crypto.name())
            .finish_non_exhaustive()
    }
}

impl Options {
    pub fn new(replica_id: impl Into<String>, tier: TierKind) -> Self {
        Self {
            replica_id: replica_id.into(),
            tier,
            owner: "owner".into(),
            data_dir: None,
            clock: Arc::new(SystemClock),
            crypto: Arc::new(ChaChaProvider),
            owner_key: None,
            trusted_keys: TrustedKeys::new(),
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            resolver: Arc::new(ScriptResolver::default()),
        }
    }

    pub fn owner(mut self, subject: impl Into<String>) -> Self {
        self.owner = subject.into();
        self
    }

    pub fn data_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.data_dir = Some(dir.into());
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn crypto(mut self, crypto: Arc<dyn CryptoProvider>) -> Self {
        self.crypto = crypto;
        self
    }

    pub fn owner_key(mut self, key: SecretKey) -> Self {
        self.owner_key = Some(key);
        self
    }

    pub fn trust(mut self, issuer: impl Into<String>, key: SecretKey) -> Self {
        self.trusted_keys.insert(issuer, key);
        self
    }

    pub fn queue_capacity(mut self, capacity: usize) -> Self {
        self.queue_capacity = capacity;
        self
    }

    pub fn resolver(mut self, resolver: Arc<dyn SourceResolver>) -> Self {
        self.resolver = resolver;
        self
    }
}

/// Everything about an instance that is not record data, persisted as
/// `catalog.json` next to the store logs.
#[derive(Debug, Default, Serialize, Deserialize)]
struct Catalog {
    stores: Vec<ColumnStoreConfig>,
    policy: PolicySet,
    model: InfoModel,
    callbacks: Vec<CallbackDecl>,
    ingest: Vec<PersistedBinding>,
    links: Vec<PersistedLink>,
    deployed: BTreeSet<(String, u64)>,
    /// Per store name: the event_seq preceding the store's create-store
    /// event (live stores) or the last event_seq issued (dropped stores).
    event_base: BTreeMap<String, u64>,
}

pub struct Microdb {
    pub(crate) replica_id: String,
    pub(crate) tier: TierKind,
    pub(crate) owner: String,
    pub(crate) dir: Option<PathBuf>,
    pub(crate) clock: Arc<dyn Clock>,
    pub(crate) crypto: Arc<dyn CryptoProvider>,
    pub(crate) owner_key: Option<SecretKey>,
    pub(crate) trusted: RwLock<TrustedKeys>,
    pub(crate) queue_capacity: usize,
    pub(crate) resolver: Arc<dyn SourceResolver>,

    pub(crate) stores: RwLock<BTreeMap<String, Arc<Store>>>,
    pub(crate) policy: RwLock<PolicySet>,
    pub(crate) model: RwLock<InfoModel>,
    pub(crate) bus: EventBus,
    pub(crate) callbacks: RwLock<Arc<Vec<CallbackSpec>>>,
    pub(crate) ingest: Mutex<IngestState>,
    pub(crate) links: Mutex<BTreeMap<String, LinkState>>,
    pub(crate) deployed: Mutex<BTreeSet<(String, u64)>>,
    pub(crate) event_base: Mutex<BTreeMap<String, u64>>,
    /// Serializes administrative operations and catalog writes.
    pub(crate) admin: Mutex<()>,
    /// Serializes publishes and deployments.
    pub(crate) registry_lock: Mutex<()>,
}

impl std::fmt::Debug for Microdb {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Microdb")
            .field("replica_id", &self.replica_id)
            .field("tier", &self.tier)
            .field("dir", &self.dir)
            .field("stores", &self.stores.read().keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl Microdb {
    /// Open an instance, replaying its catalog and store logs when a data
    /// directory is configured. `MICRODB_DATA_DIR` overrides the configured
    /// directory of persistent instances.
    pub fn open(opts: Options) -> Result<Self> {
        if opts.replica_id.is_empty() {
            return Err(Error::InvalidConfig("replica id is empty".into()));
        }
        let root = opts.data_dir.clone().map(|d| {
            std::env::var_os(DATA_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or(d)
        });
        let dir = root.map(|r| r.join(&opts.replica_id));
        let db = Microdb {
            replica_id: opts.replica_id,
            tier: opts.tier,
            owner: opts.owner,
            dir,
            clock: opts.clock,
            crypto: opts.crypto,
            owner_key: opts.owner_key,
            trusted: RwLock::new(opts.trusted_keys),
            queue_capacity: opts.queue_capacity,
            resolver: opts.resolver,
            stores: RwLock::new(BTreeMap::new()),
            policy: RwLock::new(PolicySet::default()),
            model: RwLock::new(InfoModel::default()),
            bus: EventBus::new(),
            callbacks: RwLock::new(Arc::new(Vec::new())),
            ingest: Mutex::new(IngestState::default()),
            links: Mutex::new(BTreeMap::new()),
            deployed: Mutex::new(BTreeSet::new()),
            event_base: Mutex::new(BTreeMap::new()),
            admin: Mutex::new(()),
            registry_lock: Mutex::new(()),
        };
        if let Some(dir) = db.dir.clone() {
            fs::create_dir_all(&dir)?;
            db.load_catalog(&dir)?;
        }
        db.ensure_registry_store()?;
        Ok(db)
    }

    pub fn in_memory(replica_id: impl Into<String>, tier: TierKind) -> Self {
        Self::open(Options::new(replica_id, tier))
            .expect("in-memory open does not touch the filesystem")
    }

    fn load_catalog(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CATALOG_FILE);
        if !path.exists() {
            return Ok(());
        }
        let text = fs::read_to_string(&path)?;
        let cat: Catalog = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })?;
        *self.policy.write() = cat.policy;
        *self.model.write() = cat.model;
        *self.event_base.lock() = cat.event_base;
        *self.deployed.lock() = cat.deployed;
        *self.callbacks.write() =
            Arc::new(cat.callbacks.iter().map(CallbackDecl::to_spec).collect());
        for cfg in cat.stores {
            let base = self.event_base.lock().get(&cfg.name).copied().unwrap_or(0);
            let store = Store::open(
                cfg,
                Some(dir),
                self.crypto.clone(),
                self.owner_key.as_ref(),
                base,
            )?;
            self.stores
                .write()
                .insert(store.name.clone(), Arc::new(store));
        }
        let now = self.now();
        self.ingest
            .lock()
            .restore(cat.ingest, self.resolver.as_ref(), now);
        let mut links = self.links.lock();
        for pl in cat.links {
            let state = LinkState::restore(pl)?;
            links.insert(state.config.link_id.clone(), state);
        }
        Ok(())
    }

    /// Write `catalog.json` atomically. No-op for in-memory instances.
    pub(crate) fn save_catalog(&self) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let cat = Catalog {
            stores: self
                .stores
                .read()
                .values()
                .map(|s| s.state.read().config.clone())
                .collect(),
            policy: self.policy.read().clone(),
            model: self.model.read().clone(),
            callbacks: self
                .callbacks
                .read()
                .iter()
                .filter_map(CallbackSpec::decl)
                .collect(),
            ingest: self.ingest.lock().persisted(),
            links: self
                .links
                .lock()
                .values()
                .map(LinkState::persisted)
                .collect(),
            deployed: self.deployed.lock().clone(),
            event_base: self.event_base.lock().clone(),
        };
        let text =
            serde_json::to_string_pretty(&cat).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let tmp = dir.join(format!("{CATALOG_FILE}.tmp"));
        fs::write(&tmp, text)?;
        fs::rename(&tmp, dir.join(CATALOG_FILE))?;
        Ok(())
    }

    pub fn replica_id(&self) -> &str {
        &self.replica_id
    }

    pub fn tier(&self) -> TierKind {
        self.tier
    }

    pub fn owner(&self) -> Principal {
        Principal::local(self.owner.clone())
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn now(&self) -> i64 {
        self.clock.now_ns()
    }

    pub fn crypto(&self) -> &dyn CryptoProvider {
        self.crypto.as_ref()
    }

    /// Flush store logs to stable storage.
    pub fn sync_to_disk(&self) -> Result<()> {
        for store in self.stores.read().values() {
            if let Some(log) = store.log.lock().as_mut() {
                log.sync()?;
            }
        }
        Ok(())
    }

    // ---- security ----

    pub fn trust_issuer(&self, issuer: impl Into<String>, key: SecretKey) {
        self.trusted.write().insert(issuer, key);
    }

    pub fn authenticate(&self, token: &[u8]) -> Result<Principal> {
        authenticate(token, &self.trusted.read(), self.now())
    }

    /// Pure authorization decision. The instance owner is always allowed;
    /// everyone else needs a grant from the replicated policy set or, for
    /// ingest actors, the local implicit grant of their binding.
    pub fn authorize(
        &self,
        principal: &Principal,
        interface: Interface,
        store: &str,
        range: &KeyRange,
    ) -> Decision {
        let decision =
            if principal.subject == self.owner {
                Decision::Allow
            } else {
                match self
                    .policy
                    .read()
                    .authorize(&principal.subject, interface, store, range)
                {
                    Decision::Allow => Decision::Allow,
                    deny => match self.ingest.lock().implicit_decision(
                        &principal.subject,
                        interface,
                        store,
                    ) {
                        Some(d) => d,
                        None => deny,
                    },
                }
            };
        log::debug!(
            "authorize {} {interface} {store} {range} -> {decision:?}",
            principal.subject
        );
        decision
    }

    pub(crate) fn require(
        &self,
        principal: &Principal,
        interface: Interface,
        store: &str,
        range: &KeyRange,
    ) -> Result<()> {
        match self.authorize(principal, interface, store, range) {
            Decision::Allow => Ok(()),
            Decision::Deny(DenyReason::RangeNotCovered) => Err(Error::UnauthorizedRange(format!(
                "{} {interface} {store} {range}",
                principal.subject
            ))),
            Decision::Deny(_) => Err(Error::Unauthorized(format!(
                "{} {interface} {store}",
                principal.subject
            ))),
        }
    }

    pub(crate) fn require_admin(&self, principal: &Principal, target: &str) -> Result<()> {
        self.require(principal, Interface::Admin, target, &KeyRange::ALL)
    }

    fn edit_policy(
        &self,
        principal: &Principal,
        target: &str,
        f: impl FnOnce(&mut PolicySet) -> Result<()>,
    ) -> Result<()> {
        self.require_admin(principal, target)?;
        let _g = self.admin.lock();
        {
            let mut ps = self.policy.write();
            let mut next = ps.clone();
            f(&mut next)?;
            next.version.seq = ps.version.seq + 1;
            next.version.origin = self.replica_id.clone();
            *ps = next;
        }
        self.save_catalog()
    }

    /// Replace roles, sharing policies and bindings in one versioned edit.
    pub(crate) fn edit_policy_set(&self, principal: &Principal, next: PolicySet) -> Result<()> {
        self.edit_policy(principal, "policy", |ps| {
            *ps = next;
            Ok(())
        })
    }

    pub fn define_role(&self, role: Role, principal: &Principal) -> Result<()> {
        let name = role.name.clone();
        self.edit_policy(principal, &name, |ps| ps.define_role(role))
    }

    pub fn define_policy(&self, policy: SharingPolicy, principal: &Principal) -> Result<()> {
        let name = policy.name.clone();
        self.edit_policy(principal, &name, |ps| {
            ps.define_policy(policy);
            Ok(())
        })
    }

    /// Replace all role bindings of `subject` with `role`.
    pub fn provision(&self, subject: &str, role: &str, principal: &Principal) -> Result<()> {
        self.edit_policy(principal, role, |ps| ps.provision(subject, role))
    }

    pub fn bind_roles(
        &self,
        subject: &str,
        roles: BTreeSet<String>,
        principal: &Principal,
    ) -> Result<()> {
        self.edit_policy(principal, subject, |ps| ps.bind(subject, roles))
    }

    pub fn policy_set(&self) -> PolicySet {
        self.policy.read().clone()
    }

    /// Install a policy bundle received from a peer if it is newer.
    pub(crate) fn adopt_policy(&self, bundle: PolicySet) -> Result<bool> {
        let adopted = {
            let mut ps = self.policy.write();
            if bundle.version > ps.version {
                *ps = bundle;
                true
            } else {
                false
            }
        };
        if adopted {
            self.save_catalog()?;
        }
        Ok(adopted)
    }

    // ---- information model ----

    pub fn define_types(&self, defs: &[TypeDef], principal: &Principal) -> Result<()> {
        self.require_admin(principal, "model")?;
        let _g = self.admin.lock();
        self.model.write().define_types(defs)?;
        self.save_catalog()
    }

    pub fn define_type(&self, def: TypeDef, principal: &Principal) -> Result<()> {
        self.define_types(std::slice::from_ref(&def), principal)
    }

    pub fn define_instance(&self, def: InstanceDef, principal: &Principal) -> Result<()> {
        self.require_admin(principal, "model")?;
        let _g = self.admin.lock();
        let exists = self.stores.read().contains_key(&def.store);
        self.model.write().define_instance(def, exists)?;
        self.save_catalog()
    }

    pub fn classify(&self, tag: Tag, principal: &Principal) -> Result<()> {
        self.require_admin(principal, "model")?;
        let _g = self.admin.lock();
        self.model.write().classify(tag)?;
        self.save_catalog()
    }

    pub fn unclassify(&self, tag: &Tag, principal: &Principal) -> Result<()> {
        self.require_admin(principal, "model")?;
        let _g = self.admin.lock();
        self.model.write().unclassify(tag)?;
        self.save_catalog()
    }

    pub fn info_model(&self) -> InfoModel {
        self.model.read().clone()
    }

    /// Browse one model, or every model through a federated view when
    /// `model_id` is `None`.
    pub fn browse(
        &self,
        model_id: Option<&str>,
        path: &str,
        tag: Option<&str>,
    ) -> Result<Vec<Node>> {
        let model = self.model.read();
        match model_id {
            Some(id) => model.browse_model(id, path, tag),
            None => model.browse(&model.federate_all(), path, tag),
        }
    }

    pub fn federate(&self, ids: &[String]) -> Result<FederatedView> {
        self.model.read().federate(ids)
    }

    pub fn browse_view(
        &self,
        view: &FederatedView,
        path: &str,
        tag: Option<&str>,
    ) -> Result<Vec<Node>> {
        self.model.read().browse(view, path, tag)
    }

    // ---- eventing ----

    /// Subscribe to future committed transactions matching `filter`.
    pub fn subscribe(
        &self,
        filter: SubscriptionFilter,
        principal: &Principal,
    ) -> Result<Subscription> {
        self.require(
            principal,
            Interface::Subscribe,
            filter.store.as_str(),
            &filter.range.unwrap_or(KeyRange::ALL),
        )?;
        Ok(self.bus.add(filter, self.queue_capacity))
    }

    pub fn unsubscribe(&self, id: u64) -> Result<()> {
        self.bus.remove(id)
    }

    /// Append a callback to the chain. Callbacks run in registration order.
    pub fn register_callback(&self, spec: CallbackSpec, principal: &Principal) -> Result<()> {
        self.require_admin(principal, spec.store.as_str())?;
        let _g = self.admin.lock();
        {
            let mut cbs = self.callbacks.write();
            if cbs.iter().any(|c| c.id == spec.id) {
                return Err(Error::DuplicateName(format!("callback {}", spec.id)));
            }
            if spec.builtin.is_none() {
                log::info!(
                    "callback {} is host code and will not survive a restart",
                    spec.id
                );
            }
            let mut next = (**cbs).clone();
            next.push(spec);
            *cbs = Arc::new(next);
        }
        self.save_catalog()
    }

    pub fn unregister_callback(&self, id: &str, principal: &Principal) -> Result<()> {
        self.require_admin(principal, "callbacks")?;
        let _g = self.admin.lock();
        {
            let mut cbs = self.callbacks.write();
            if !cbs.iter().any(|c| c.id == id) {
                return Err(Error::NotFound(format!("callback {id}")));
            }
            *cbs = Arc::new(cbs.iter().filter(|c| c.id != id).cloned().collect());
        }
        self.save_catalog()
    }

    pub fn callbacks(&self) -> Arc<Vec<CallbackSpec>> {
        self.callbacks.read().clone()
    }

    pub(crate) fn roles_of(&self, subject: &str) -> BTreeSet<String> {
        self.policy.read().roles_of(subject)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::security::Grant;

    #[test]
    fn policy_edits_bump_version() {
        let db = Microdb::in_memory("r1", TierKind::Local);
        let owner = db.owner();
        db.define_role(
            Role::new("reader", vec![Grant::new(Interface::ExchangeRead, "*")]),
            &owner,
        )
        .unwrap();
        db.provision("alice", "reader", &owner).unwrap();
        let v = db.policy_set().version;
        assert_eq!((v.seq, v.origin.as_str()), (2, "r1"));
    }

    #[test]
    fn non_owner_needs_admin() {
        let db = Microdb::in_memory("r1", TierKind::Local);
        let bob = Principal::local("bob");
        assert!(matches!(
            db.define_role(Role::new("x", vec![]), &bob),
            Err(Error::Unauthorized(_))
        ));
        assert_eq!(db.policy_set().version.seq, 0);
    }

    #[test]
    fn adopt_only_newer() {
        let db = Microdb::in_memory("r1", TierKind::Local);
        let mut bundle = PolicySet::default();
        bundle.version.seq = 3;
        bundle.version.origin = "r0".into();
        assert!(db.adopt_policy(bundle.clone()).unwrap());
        assert!(!db.adopt_policy(bundle).unwrap());
    }
}
