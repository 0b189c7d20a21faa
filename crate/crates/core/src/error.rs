use thiserror::Error;

use crate::value::RecordKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can surface. Deny decisions from `authorize` are
/// values, not errors; operations that need a grant map them to
/// [`Error::Unauthorized`] or [`Error::UnauthorizedRange`].
#[derive(Debug, Error)]
pub enum Error {
    // store
    #[error("duplicate name: {0}")]
    DuplicateName(String),
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("unauthorized range: {0}")]
    UnauthorizedRange(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("rejected by callback {callback_id}: {reason}")]
    RejectedByCallback { callback_id: String, reason: String },
    #[error("store {0} is immutable")]
    ImmutableStore(String),
    #[error("key not found: {store} {key}")]
    KeyNotFound { store: String, key: RecordKey },

    // infomodel
    #[error("duplicate definition: {0}")]
    Duplicate(String),
    #[error("cyclic inheritance: {0}")]
    CyclicInheritance(String),
    #[error("unknown parent type: {0}")]
    UnknownParent(String),
    #[error("unknown subject: {0}")]
    UnknownSubject(String),
    #[error("duplicate tag: {0}")]
    DuplicateTag(String),
    #[error("bad browse path: {0}")]
    BadPath(String),
    #[error("unknown model: {0}")]
    UnknownModel(String),

    // security
    #[error("bad token signature")]
    BadSignature,
    #[error("token expired")]
    Expired,
    #[error("malformed token: {0}")]
    Malformed(String),
    #[error("unknown role: {0}")]
    UnknownRole(String),
    #[error("invalid grant: {0}")]
    InvalidGrant(String),
    #[error("no key material for {0}")]
    NoKey(String),
    #[error("authentication failure: {0}")]
    AuthFailure(String),

    // eventbus
    #[error("unknown subscription: {0}")]
    UnknownSubscription(u64),
    #[error("callback {0} changed the record key")]
    KeyMutation(String),

    // ingest
    #[error("store {0} already has an ingest binding")]
    AlreadyBound(String),
    #[error("unknown store: {0}")]
    UnknownStore(String),

    // sync
    #[error("tiers are not adjacent: {0}")]
    NonAdjacentTier(String),
    #[error("store {store} blocked by sharing policy {policy}")]
    PolicyBlocked { store: String, policy: String },
    #[error("transport down: {0}")]
    TransportDown(String),
    #[error("decode error: {0}")]
    Decode(String),

    // registry
    #[error("manifest validation failed: {}", .0.join("; "))]
    ValidationFailure(Vec<String>),
    #[error("stale manifest version: {0}")]
    StaleVersion(String),
    #[error("apply failure in section {section}: {reason}")]
    ApplyFailure { section: String, reason: String },

    // harness
    #[error("invalid topology: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),
    #[error("assertion failed at step {step}: {diff}")]
    AssertionFailure { step: usize, diff: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable short code, used by the command line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DuplicateName(_) => "duplicate-name",
            Error::Unauthorized(_) => "unauthorized",
            Error::UnauthorizedRange(_) => "unauthorized-range",
            Error::InvalidConfig(_) => "invalid-config",
            Error::NotFound(_) => "not-found",
            Error::SchemaViolation(_) => "schema-violation",
            Error::RejectedByCallback { .. } => "rejected-by-callback",
            Error::ImmutableStore(_) => "immutable-store",
            Error::KeyNotFound { .. } => "key-not-found",
            Error::Duplicate(_) => "duplicate",
            Error::CyclicInheritance(_) => "cyclic-inheritance",
            Error::UnknownParent(_) => "unknown-parent",
            Error::UnknownSubject(_) => "unknown-subject",
            Error::DuplicateTag(_) => "duplicate-tag",
            Error::BadPath(_) => "bad-path",
            Error::UnknownModel(_) => "unknown-model",
            Error::BadSignature => "bad-signature",
            Error::Expired => "expired",
            Error::Malformed(_) => "malformed",
            Error::UnknownRole(_) => "unknown-role",
            Error::InvalidGrant(_) => "invalid-grant",
            Error::NoKey(_) => "no-key",
            Error::AuthFailure(_) => "auth-failure",
            Error::UnknownSubscription(_) => "unknown-subscription",
            Error::KeyMutation(_) => "key-mutation",
            Error::AlreadyBound(_) => "already-bound",
            Error::UnknownStore(_) => "unknown-store",
            Error::NonAdjacentTier(_) => "non-adjacent-tier",
            Error::PolicyBlocked { .. } => "policy-blocked",
            Error::TransportDown(_) => "transport-down",
            Error::Decode(_) => "decode-error",
            Error::ValidationFailure(_) => "validation-failure",
            Error::StaleVersion(_) => "stale-version",
            Error::ApplyFailure { .. } => "apply-failure",
            Error::InvalidSpec(_) => "invalid-spec",
            Error::AssertionFailure { .. } => "assertion-failure",
            Error::Parse { .. } => "parse-error",
            Error::Io(_) => "io-error",
        }
    }
}
