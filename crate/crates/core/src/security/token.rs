//! Signed bearer tokens: `base64(payload ‖ HMAC-SHA256(payload))`.
//!
//! Payload is the canonical serialization of `subject str, issuer str,
//! expiry_ns i64`.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use hmac::Mac;

use super::crypto::{HmacSha256, SecretKey};
use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

const MAC_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Principal {
    pub subject: String,
    pub issuer: String,
    pub expiry_ns: i64,
}

impl Principal {
    /// Principal that never expires, for in-process callers that already
    /// hold the subject's identity (tests, the local CLI).
    pub fn local(subject: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            issuer: "local".into(),
            expiry_ns: i64::MAX,
        }
    }
}

/// Verification keys by registry id.
#[derive(Debug, Clone, Default)]
pub struct TrustedKeys {
    keys: BTreeMap<String, SecretKey>,
}

impl TrustedKeys {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, issuer: impl Into<String>, key: SecretKey) {
        self.keys.insert(issuer.into(), key);
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn issuers(&self) -> impl Iterator<Item = &str> {
        self.keys.keys().map(String::as_str)
    }
}

fn mac(key: &SecretKey, payload: &[u8]) -> HmacSha256 {
    let mut m = HmacSha256::new_from_slice(key.as_bytes()).expect("hmac accepts any key length");
    m.update(payload);
    m
}

pub fn issue_token(key: &SecretKey, subject: &str, issuer: &str, expiry_ns: i64) -> String {
    let mut enc = Encoder::new();
    enc.str(subject).str(issuer).i64(expiry_ns);
    let mut raw = enc.finish();
    let tag = mac(key, &raw).finalize().into_bytes();
    raw.extend_from_slice(&tag);
    STANDARD.encode(raw)
}

/// Verify a token. The MAC is checked against the issuer named in the
/// payload; a payload that no trusted key authenticates is a bad signature
/// even when it no longer parses.
pub fn authenticate(token: &[u8], keys: &TrustedKeys, now_ns: i64) -> Result<Principal> {
    let text = std::str::from_utf8(token).map_err(|_| Error::Malformed("not utf-8".into()))?;
    let raw = STANDARD
        .decode(text.trim())
        .map_err(|e| Error::Malformed(format!("base64: {e}")))?;
    if raw.len() <= MAC_LEN {
        return Err(Error::Malformed("token too short".into()));
    }
    let (payload, tag) = raw.split_at(raw.len() - MAC_LEN);

    let signer = keys
        .keys
        .iter()
        .find(|(_, k)| mac(k, payload).verify_slice(tag).is_ok())
        .map(|(issuer, _)| issuer.clone())
        .ok_or(Error::BadSignature)?;

    let mut dec = Decoder::new(payload);
    let subject = dec.str().map_err(|e| Error::Malformed(e.to_string()))?;
    let issuer = dec.str().map_err(|e| Error::Malformed(e.to_string()))?;
    let expiry_ns = dec.i64().map_err(|e| Error::Malformed(e.to_string()))?;
    dec.finish().map_err(|e| Error::Malformed(e.to_string()))?;
    if issuer != signer {
        return Err(Error::BadSignature);
    }
    if expiry_ns <= now_ns {
        return Err(Error::Expired);
    }
    Ok(Principal {
        subject,
        issuer,
        expiry_ns,
    })
}
