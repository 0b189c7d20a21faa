//! Roles, grants, sharing policies and the authorization decision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::pattern::Pattern;
use crate::value::KeyRange;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interface {
    ExchangeCreate,
    ExchangeRead,
    ExchangeUpdate,
    ExchangeDelete,
    Subscribe,
    Admin,
    Sync,
}

impl Interface {
    pub const ALL: [Interface; 7] = [
        Interface::ExchangeCreate,
        Interface::ExchangeRead,
        Interface::ExchangeUpdate,
        Interface::ExchangeDelete,
        Interface::Subscribe,
        Interface::Admin,
        Interface::Sync,
    ];

    fn to_byte(self) -> u8 {
        self as u8
    }

    fn from_byte(b: u8) -> Result<Self> {
        Interface::ALL
            .get(b as usize)
            .copied()
            .ok_or_else(|| Error::Decode(format!("bad interface {b}")))
    }
}

impl fmt::Display for Interface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Interface::ExchangeCreate => "exchange-create",
            Interface::ExchangeRead => "exchange-read",
            Interface::ExchangeUpdate => "exchange-update",
            Interface::ExchangeDelete => "exchange-delete",
            Interface::Subscribe => "subscribe",
            Interface::Admin => "admin",
            Interface::Sync => "sync",
        };
        f.write_str(s)
    }
}

/// Position in the tier chain device ↔ local ↔ regional ↔ global.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TierKind {
    Device,
    Local,
    Regional,
    Global,
}

impl TierKind {
    pub const ALL: [TierKind; 4] = [
        TierKind::Device,
        TierKind::Local,
        TierKind::Regional,
        TierKind::Global,
    ];

    pub fn is_adjacent(self, other: TierKind) -> bool {
        (self as i8 - other as i8).abs() == 1
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for TierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TierKind::Device => "device",
            TierKind::Local => "local",
            TierKind::Regional => "regional",
            TierKind::Global => "global",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TierKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "device" => Ok(TierKind::Device),
            "local" => Ok(TierKind::Local),
            "regional" => Ok(TierKind::Regional),
            "global" => Ok(TierKind::Global),
            _ => Err(Error::InvalidConfig(format!("unknown tier kind {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grant {
    pub interface: Interface,
    pub store: Pattern,
    #[serde(default, skip_serializing_if = "KeyRange::is_all")]
    pub range: KeyRange,
    #[serde(default, rename = "policy", skip_serializing_if = "Option::is_none")]
    pub policy_ref: Option<String>,
}

impl Grant {
    pub fn new(interface: Interface, store: impl Into<Pattern>) -> Self {
        Self {
            interface,
            store: store.into(),
            range: KeyRange::ALL,
            policy_ref: None,
        }
    }

    pub fn range(mut self, range: KeyRange) -> Self {
        self.range = range;
        self
    }

    pub fn policy(mut self, name: impl Into<String>) -> Self {
        self.policy_ref = Some(name.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub name: String,
    pub grants: Vec<Grant>,
}

impl Role {
    pub fn new(name: impl Into<String>, grants: Vec<Grant>) -> Self {
        Self {
            name: name.into(),
            grants,
        }
    }
}

mod hex32 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let raw = hex::decode(&s).map_err(serde::de::Error::custom)?;
        raw.try_into()
            .map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))
    }
}

/// EULA terms in machine-checkable form. The legal text itself travels only
/// as its digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingPolicy {
    pub name: String,
    #[serde(with = "hex32")]
    pub eula_digest: [u8; 32],
    pub allow_synchronization: bool,
    pub allowed_tiers: BTreeSet<TierKind>,
}

impl SharingPolicy {
    pub fn permits(&self, tier: TierKind) -> bool {
        self.allow_synchronization && self.allowed_tiers.contains(&tier)
    }
}

/// Version of a policy set; the greater version wins when two replicas
/// exchange bundles. The origin breaks ties between equal sequence numbers.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PolicyVersion {
    pub seq: u64,
    pub origin: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenyReason {
    NoRoles,
    NoMatchingGrant,
    /// A grant matched interface and store but did not contain the range.
    RangeNotCovered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

impl Decision {
    pub fn is_allow(&self) -> bool {
        matches!(self, Decision::Allow)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySet {
    #[serde(default)]
    pub version: PolicyVersion,
    pub roles: BTreeMap<String, Role>,
    pub policies: BTreeMap<String, SharingPolicy>,
    pub bindings: BTreeMap<String, BTreeSet<String>>,
}

impl PolicySet {
    pub fn validate_role(&self, role: &Role) -> Result<()> {
        if role.name.is_empty() {
            return Err(Error::InvalidGrant("role name is empty".into()));
        }
        if role.grants.is_empty() {
            return Err(Error::InvalidGrant(format!(
                "role {} has no grants",
                role.name
            )));
        }
        for g in &role.grants {
            if g.range.is_empty() {
                return Err(Error::InvalidGrant(format!(
                    "role {}: empty key range {}",
                    role.name, g.range
                )));
            }
            if let Some(p) = &g.policy_ref {
                if !self.policies.contains_key(p) {
                    return Err(Error::InvalidGrant(format!(
                        "role {}: unknown sharing policy {p}",
                        role.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn define_role(&mut self, role: Role) -> Result<()> {
        self.validate_role(&role)?;
        self.roles.insert(role.name.clone(), role);
        Ok(())
    }

    pub fn define_policy(&mut self, policy: SharingPolicy) {
        self.policies.insert(policy.name.clone(), policy);
    }

    /// Replace every role binding of `subject` with `role`.
    pub fn provision(&mut self, subject: &str, role: &str) -> Result<()> {
        if !self.roles.contains_key(role) {
            return Err(Error::UnknownRole(role.into()));
        }
        self.bindings
            .insert(subject.to_string(), BTreeSet::from([role.to_string()]));
        Ok(())
    }

    pub fn bind(&mut self, subject: &str, roles: BTreeSet<String>) -> Result<()> {
        if let Some(missing) = roles.iter().find(|r| !self.roles.contains_key(*r)) {
            return Err(Error::UnknownRole(missing.clone()));
        }
        self.bindings.insert(subject.to_string(), roles);
        Ok(())
    }

    pub fn roles_of(&self, subject: &str) -> BTreeSet<String> {
        self.bindings.get(subject).cloned().unwrap_or_default()
    }

    pub fn authorize(
        &self,
        subject: &str,
        interface: Interface,
        store: &str,
        range: &KeyRange,
    ) -> Decision {
        let Some(bound) = self.bindings.get(subject).filter(|b| !b.is_empty()) else {
            return Decision::Deny(DenyReason::NoRoles);
        };
        evaluate(
            bound
                .iter()
                .filter_map(|r| self.roles.get(r))
                .flat_map(|r| r.grants.iter()),
            interface,
            store,
            range,
        )
    }

    /// Sharing policies referenced by any grant whose store pattern matches
    /// `store`.
    pub fn sharing_policies(&self, store: &str) -> Vec<&SharingPolicy> {
        let names: BTreeSet<&str> = self
            .roles
            .values()
            .flat_map(|r| &r.grants)
            .filter(|g| g.store.matches(store))
            .filter_map(|g| g.policy_ref.as_deref())
            .collect();
        names
            .into_iter()
            .filter_map(|n| self.policies.get(n))
            .collect()
    }

    /// `Err(policy name)` when some sharing policy on `store` forbids
    /// replication towards `tier`.
    pub fn check_sharing(&self, store: &str, tier: TierKind) -> std::result::Result<(), String> {
        match self
            .sharing_policies(store)
            .into_iter()
            .find(|p| !p.permits(tier))
        {
            Some(p) => Err(p.name.clone()),
            None => Ok(()),
        }
    }

    /// Canonical form carried in POLICY frames.
    pub fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.version.seq).str(&self.version.origin);
        enc.u32(self.roles.len() as u32);
        for role in self.roles.values() {
            enc.str(&role.name).u32(role.grants.len() as u32);
            for g in &role.grants {
                enc.u8(g.interface.to_byte()).str(g.store.as_str());
                g.range.encode(enc);
                enc.opt_str(g.policy_ref.as_deref());
            }
        }
        enc.u32(self.policies.len() as u32);
        for p in self.policies.values() {
            let tiers = p.allowed_tiers.iter().fold(0u8, |acc, t| acc | t.bit());
            enc.str(&p.name)
                .raw(&p.eula_digest)
                .bool(p.allow_synchronization)
                .u8(tiers);
        }
        enc.u32(self.bindings.len() as u32);
        for (subject, roles) in &self.bindings {
            enc.str(subject).u32(roles.len() as u32);
            for r in roles {
                enc.str(r);
            }
        }
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let version = PolicyVersion {
            seq: dec.u64()?,
            origin: dec.str()?,
        };
        let mut roles = BTreeMap::new();
        for _ in 0..dec.u32()? {
            let name = dec.str()?;
            let mut grants = Vec::new();
            for _ in 0..dec.u32()? {
                let interface = Interface::from_byte(dec.u8()?)?;
                let store = Pattern::from(dec.str()?);
                let range = KeyRange::decode(dec)?;
                let policy_ref = dec.opt_str()?;
                grants.push(Grant {
                    interface,
                    store,
                    range,
                    policy_ref,
                });
            }
            roles.insert(name.clone(), Role { name, grants });
        }
        let mut policies = BTreeMap::new();
        for _ in 0..dec.u32()? {
            let name = dec.str()?;
            let eula_digest: [u8; 32] = dec.raw(32)?.try_into().unwrap();
            let allow_synchronization = dec.bool()?;
            let bits = dec.u8()?;
            let allowed_tiers = TierKind::ALL
                .into_iter()
                .filter(|t| bits & t.bit() != 0)
                .collect();
            policies.insert(
                name.clone(),
                SharingPolicy {
                    name,
                    eula_digest,
                    allow_synchronization,
                    allowed_tiers,
                },
            );
        }
        let mut bindings = BTreeMap::new();
        for _ in 0..dec.u32()? {
            let subject = dec.str()?;
            let mut set = BTreeSet::new();
            for _ in 0..dec.u32()? {
                set.insert(dec.str()?);
            }
            bindings.insert(subject, set);
        }
        Ok(PolicySet {
            version,
            roles,
            policies,
            bindings,
        })
    }
}

/// Allow iff some grant covers the interface, matches the store and
/// contains the requested range.
pub(crate) fn evaluate<'a>(
    grants: impl Iterator<Item = &'a Grant>,
    interface: Interface,
    store: &str,
    range: &KeyRange,
) -> Decision {
    let mut range_miss = false;
    for g in grants {
        if g.interface != interface || !g.store.matches(store) {
            continue;
        }
        if g.range.covers(range) {
            return Decision::Allow;
        }
        range_miss = true;
    }
    Decision::Deny(if range_miss {
        DenyReason::RangeNotCovered
    } else {
        DenyReason::NoMatchingGrant
    })
}
