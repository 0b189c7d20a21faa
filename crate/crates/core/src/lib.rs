//! Embedded tier-local microdatabase.
//!
//! A [`Microdb`] owns named column stores of timestamped records, an
//! information model that types and tags them, a role-based security
//! domain, an event bus with callback chains, ingest bindings to upstream
//! sources, and sync links to instances in adjacent tiers. Manifests in the
//! replicated [registry](registry) deploy all of that declaratively, and
//! the [harness] runs whole multi-tier topologies against a virtual clock.

pub mod cli;
pub mod clock;
pub mod codec;
pub mod db;
pub mod error;
pub mod eventbus;
pub mod harness;
pub mod infomodel;
pub mod ingest;
pub mod pattern;
pub mod registry;
pub mod security;
pub mod store;
pub mod sync;
pub mod value;

pub use clock::{Clock, ManualClock, SystemClock};
pub use db::{Microdb, Options, DATA_DIR_ENV};
pub use error::{Error, Result};
pub use eventbus::{
    BuiltinCallback, CallbackDecl, CallbackOutcome, CallbackSpec, Event, Stage, Subscription,
    SubscriptionFilter, TxnKind,
};
pub use infomodel::{InstanceDef, PropertyDef, PropertyType, SubjectKind, Tag, TypeDef};
pub use ingest::{IngestBinding, IngestMode, PushOutcome, Reading, ScriptResolver, ScriptedSource};
pub use pattern::Pattern;
pub use registry::{DeploymentReport, Manifest, ManifestLink, REGISTRY_STORE};
pub use security::{Grant, Interface, Principal, Role, SecretKey, SharingPolicy, TierKind};
pub use store::{ColumnStoreConfig, Mutability, Mutation, Receipt};
pub use sync::{sync_pair, MemoryTransport, SyncFilter, SyncLinkConfig, SyncReport, SyncWarning};
pub use value::{KeyRange, Object, Provenance, Record, RecordKey, Value};
