//! Security domain: principals, roles and grants, sharing policies, and the
//! crypto provider for records at rest and frames in transfer.

pub mod crypto;
pub mod policy;
pub mod token;

pub use crypto::{
    open_record, seal_record, unwrap_key, wrap_key, ChaChaProvider, CryptoProvider, SecretKey,
    XorMacProvider,
};
pub use policy::{
    Decision, DenyReason, Grant, Interface, PolicySet, PolicyVersion, Role, SharingPolicy, TierKind,
};
pub use token::{authenticate, issue_token, Principal, TrustedKeys};
