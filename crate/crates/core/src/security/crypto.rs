//! Crypto provider for data at rest (store logs) and in transfer (sync frames).

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::value::{FrameKind, Record};

pub(crate) type HmacSha256 = Hmac<Sha256>;

/// 256-bit symmetric key.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey([u8; 32]);

impl SecretKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn random() -> Self {
        Self(rand::random())
    }

    /// Deterministic key from a label; for fixtures and simulations.
    pub fn derive(label: &str) -> Self {
        Self(Sha256::digest(label.as_bytes()).into())
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let raw =
            hex::decode(s.trim()).map_err(|e| Error::InvalidConfig(format!("bad key hex: {e}")))?;
        let arr: [u8; 32] = raw
            .try_into()
            .map_err(|_| Error::InvalidConfig("key must be 32 bytes".into()))?;
        Ok(Self(arr))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

/// Serialized as a hex string.
impl serde::Serialize for SecretKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> serde::Deserialize<'de> for SecretKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = <String as serde::Deserialize>::deserialize(d)?;
        SecretKey::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Authenticated encryption. `open` must fail on any modification of the
/// sealed bytes or the associated data, and on a wrong key.
pub trait CryptoProvider: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn seal(&self, key: &SecretKey, aad: &[u8], plaintext: &[u8]) -> Vec<u8>;
    fn open(&self, key: &SecretKey, aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>>;
}

/// ChaCha20-Poly1305 with a random 96-bit nonce prepended to the ciphertext.
#[derive(Debug, Default, Clone, Copy)]
pub struct ChaChaProvider;

const NONCE_LEN: usize = 12;

impl CryptoProvider for ChaChaProvider {
    fn name(&self) -> &'static str {
        "chacha20poly1305"
    }

    fn seal(&self, key: &SecretKey, aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        let cipher = ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()));
        let nonce: [u8; NONCE_LEN] = rand::random();
        let ct = cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: plaintext,
                    aad,
                },
            )
            .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
        let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        out
    }

    fn open(&self, key: &SecretKey, aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>> {
        if sealed.len() < NONCE_LEN + 16 {
            return Err(Error::AuthFailure("sealed buffer too short".into()));
        }
        let (nonce, ct) = sealed.split_at(NONCE_LEN);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()));
        cipher
            .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad })
            .map_err(|_| Error::AuthFailure("tag mismatch".into()))
    }
}

/// Deterministic stand-in: SHA-256 counter keystream XOR plus an
/// HMAC-SHA256 tag. Same input, same output. Not confidential against a
/// real adversary; meant for reproducible fixtures only.
#[derive(Debug, Default, Clone, Copy)]
pub struct XorMacProvider;

const TAG_LEN: usize = 32;

fn xor_keystream(key: &SecretKey, data: &mut [u8]) {
    for (block, chunk) in data.chunks_mut(32).enumerate() {
        let mut h = Sha256::new();
        h.update(b"xor-stream");
        h.update(key.as_bytes());
        h.update((block as u64).to_be_bytes());
        let ks = h.finalize();
        for (b, k) in chunk.iter_mut().zip(ks.iter()) {
            *b ^= k;
        }
    }
}

fn xor_tag(key: &SecretKey, aad: &[u8], ct: &[u8]) -> HmacSha256 {
    let mut mac =
        <HmacSha256 as Mac>::new_from_slice(key.as_bytes()).expect("hmac accepts any key length");
    mac.update(&(aad.len() as u64).to_be_bytes());
    mac.update(aad);
    mac.update(ct);
    mac
}

impl CryptoProvider for XorMacProvider {
    fn name(&self) -> &'static str {
        "xor-mac"
    }

    fn seal(&self, key: &SecretKey, aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        let mut ct = plaintext.to_vec();
        xor_keystream(key, &mut ct);
        let tag = xor_tag(key, aad, &ct).finalize().into_bytes();
        ct.extend_from_slice(&tag);
        ct
    }

    fn open(&self, key: &SecretKey, aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>> {
        if sealed.len() < TAG_LEN {
            return Err(Error::AuthFailure("sealed buffer too short".into()));
        }
        let (ct, tag) = sealed.split_at(sealed.len() - TAG_LEN);
        xor_tag(key, aad, ct)
            .verify_slice(tag)
            .map_err(|_| Error::AuthFailure("tag mismatch".into()))?;
        let mut pt = ct.to_vec();
        xor_keystream(key, &mut pt);
        Ok(pt)
    }
}

const WRAP_AAD: &[u8] = b"microdb/data-key";

/// Encrypt a per-store data key under the owner key.
pub fn wrap_key(provider: &dyn CryptoProvider, owner: &SecretKey, data_key: &SecretKey) -> Vec<u8> {
    provider.seal(owner, WRAP_AAD, data_key.as_bytes())
}

pub fn unwrap_key(
    provider: &dyn CryptoProvider,
    owner: &SecretKey,
    wrapped: &[u8],
) -> Result<SecretKey> {
    let raw = provider.open(owner, WRAP_AAD, wrapped)?;
    let arr: [u8; 32] = raw
        .try_into()
        .map_err(|_| Error::AuthFailure("unwrapped key has wrong length".into()))?;
    Ok(SecretKey(arr))
}

fn record_aad(kind: FrameKind) -> [u8; 15] {
    let mut aad = *b"microdb/record\0";
    aad[14] = kind as u8;
    aad
}

/// Seal a record's canonical payload with a store data key. The frame kind
/// is bound in as associated data.
pub fn seal_record(
    provider: &dyn CryptoProvider,
    key: Option<&SecretKey>,
    record: &Record,
) -> Result<(FrameKind, Vec<u8>)> {
    let key = key.ok_or_else(|| Error::NoKey("store data key".into()))?;
    let kind = record.frame_kind();
    Ok((
        kind,
        provider.seal(key, &record_aad(kind), &record.payload()),
    ))
}

pub fn open_record(
    provider: &dyn CryptoProvider,
    key: Option<&SecretKey>,
    kind: FrameKind,
    sealed: &[u8],
) -> Result<Record> {
    let key = key.ok_or_else(|| Error::NoKey("store data key".into()))?;
    let payload = provider.open(key, &record_aad(kind), sealed)?;
    Record::decode_payload(kind, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::{Provenance, RecordKey, Value};

    fn sample() -> Record {
        Record {
            key: RecordKey::new(100, 0),
            value: Some(Value::Str("sentinel-0123456".into())),
            prov: Provenance {
                origin_id: "dev1".into(),
                origin_seq: 1,
                write_ts: 7,
            },
        }
    }

    fn providers() -> Vec<Box<dyn CryptoProvider>> {
        vec![Box::new(ChaChaProvider), Box::new(XorMacProvider)]
    }

    #[test]
    fn seal_open_roundtrip() {
        let key = SecretKey::derive("store");
        for p in providers() {
            let (kind, sealed) = seal_record(p.as_ref(), Some(&key), &sample()).unwrap();
            assert_eq!(
                open_record(p.as_ref(), Some(&key), kind, &sealed).unwrap(),
                sample()
            );
        }
    }

    #[test]
    fn every_flipped_byte_fails_authentication() {
        let key = SecretKey::derive("store");
        for p in providers() {
            let (kind, sealed) = seal_record(p.as_ref(), Some(&key), &sample()).unwrap();
            for i in 0..sealed.len() {
                let mut bad = sealed.clone();
                bad[i] ^= 0x01;
                let err = open_record(p.as_ref(), Some(&key), kind, &bad).unwrap_err();
                assert!(
                    matches!(err, Error::AuthFailure(_)),
                    "{} byte {i}",
                    p.name()
                );
            }
        }
    }

    #[test]
    fn wrong_key_and_missing_key() {
        let key = SecretKey::derive("a");
        let p = ChaChaProvider;
        let (kind, sealed) = seal_record(&p, Some(&key), &sample()).unwrap();
        assert!(matches!(
            open_record(&p, Some(&SecretKey::derive("b")), kind, &sealed),
            Err(Error::AuthFailure(_))
        ));
        assert!(matches!(
            seal_record(&p, None, &sample()),
            Err(Error::NoKey(_))
        ));
    }

    #[test]
    fn ciphertext_hides_sentinel() {
        let key = SecretKey::derive("store");
        for p in providers() {
            let (_, sealed) = seal_record(p.as_ref(), Some(&key), &sample()).unwrap();
            assert!(!sealed.windows(16).any(|w| w == b"sentinel-0123456"));
        }
    }

    #[test]
    fn key_wrap_roundtrip() {
        let owner = SecretKey::derive("owner");
        let dek = SecretKey::random();
        let wrapped = wrap_key(&ChaChaProvider, &owner, &dek);
        assert_eq!(unwrap_key(&ChaChaProvider, &owner, &wrapped).unwrap(), dek);
        assert!(unwrap_key(&ChaChaProvider, &SecretKey::derive("other"), &wrapped).is_err());
    }
}
