//! Sync wire format.
//!
//! Frame: `len u32` (payload bytes), `type u8`, `version u8`, payload.
//! HELLO payloads travel in the clear but carry an HMAC under the link key;
//! every later frame's payload is sealed with the link key, with the type
//! and version bytes as associated data.

use hmac::Mac;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::security::crypto::HmacSha256;
use crate::security::{CryptoProvider, PolicySet, PolicyVersion, SecretKey, TierKind};
use crate::value::Record;

pub const PROTOCOL_VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 6;
/// Upper bound on records carried by one DELTA frame.
pub const MAX_RECORDS_PER_FRAME: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum FrameType {
    Hello = 0x10,
    Delta = 0x11,
    Policy = 0x12,
    Ack = 0x13,
}

impl FrameType {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0x10 => Ok(FrameType::Hello),
            0x11 => Ok(FrameType::Delta),
            0x12 => Ok(FrameType::Policy),
            0x13 => Ok(FrameType::Ack),
            _ => Err(Error::Decode(format!("unknown frame type {b:#04x}"))),
        }
    }
}

pub fn encode_frame(ty: FrameType, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.push(ty as u8);
    out.push(PROTOCOL_VERSION);
    out.extend_from_slice(payload);
    out
}

/// Split a complete frame into its type and payload.
pub fn decode_frame(frame: &[u8]) -> Result<(FrameType, &[u8])> {
    if frame.len() < HEADER_LEN {
        return Err(Error::Decode(format!(
            "frame of {} bytes is shorter than its header",
            frame.len()
        )));
    }
    let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
    let ty = FrameType::from_byte(frame[4])?;
    if frame[5] != PROTOCOL_VERSION {
        return Err(Error::Decode(format!(
            "protocol version {:#04x}, expected {PROTOCOL_VERSION:#04x}",
            frame[5]
        )));
    }
    if frame.len() - HEADER_LEN != len {
        return Err(Error::Decode(format!(
            "frame length field {len} but {} payload bytes",
            frame.len() - HEADER_LEN
        )));
    }
    Ok((ty, &frame[HEADER_LEN..]))
}

pub fn seal_frame(
    crypto: &dyn CryptoProvider,
    key: &SecretKey,
    ty: FrameType,
    plaintext: &[u8],
) -> Vec<u8> {
    encode_frame(
        ty,
        &crypto.seal(key, &[ty as u8, PROTOCOL_VERSION], plaintext),
    )
}

pub fn open_frame(
    crypto: &dyn CryptoProvider,
    key: &SecretKey,
    frame: &[u8],
) -> Result<(FrameType, Vec<u8>)> {
    let (ty, payload) = decode_frame(frame)?;
    if ty == FrameType::Hello {
        return Err(Error::Decode("HELLO frames are not sealed".into()));
    }
    Ok((
        ty,
        crypto.open(key, &[ty as u8, PROTOCOL_VERSION], payload)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct WatermarkEntry {
    pub store: String,
    pub origin: String,
    pub seq: u64,
}

/// Canonical HELLO payload: `link_id str, replica_id str, tier u8,
/// policy seq u64, policy origin str, u32 count, (store str, origin str,
/// seq u64)*, mac [32]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub link_id: String,
    pub replica_id: String,
    pub tier: TierKind,
    pub policy_version: PolicyVersion,
    pub watermarks: Vec<WatermarkEntry>,
}

fn tier_byte(t: TierKind) -> u8 {
    match t {
        TierKind::Device => 0,
        TierKind::Local => 1,
        TierKind::Regional => 2,
        TierKind::Global => 3,
    }
}

fn hello_mac(key: &SecretKey, body: &[u8]) -> HmacSha256 {
    let mut m = HmacSha256::new_from_slice(key.as_bytes()).expect("hmac accepts any key length");
    m.update(b"microdb/hello");
    m.update(body);
    m
}

impl Hello {
    fn encode_body(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str(&self.link_id)
            .str(&self.replica_id)
            .u8(tier_byte(self.tier));
        enc.u64(self.policy_version.seq)
            .str(&self.policy_version.origin);
        enc.u32(self.watermarks.len() as u32);
        for w in &self.watermarks {
            enc.str(&w.store).str(&w.origin).u64(w.seq);
        }
        enc.finish()
    }

    pub fn encode_signed(&self, key: &SecretKey) -> Vec<u8> {
        let mut body = self.encode_body();
        let tag = hello_mac(key, &body).finalize().into_bytes();
        body.extend_from_slice(&tag);
        body
    }

    /// Decode and verify the link-key MAC.
    pub fn decode_verified(payload: &[u8], key: &SecretKey) -> Result<Self> {
        if payload.len() < 32 {
            return Err(Error::Decode("HELLO shorter than its MAC".into()));
        }
        let (body, tag) = payload.split_at(payload.len() - 32);
        hello_mac(key, body).verify_slice(tag).map_err(|_| {
            Error::AuthFailure("HELLO MAC does not verify under the link key".into())
        })?;
        let mut dec = Decoder::new(body);
        let link_id = dec.str()?;
        let replica_id = dec.str()?;
        let tier = match dec.u8()? {
            0 => TierKind::Device,
            1 => TierKind::Local,
            2 => TierKind::Regional,
            3 => TierKind::Global,
            b => return Err(Error::Decode(format!("bad tier byte {b}"))),
        };
        let policy_version = PolicyVersion {
            seq: dec.u64()?,
            origin: dec.str()?,
        };
        let n = dec.u32()? as usize;
        let mut watermarks = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            watermarks.push(WatermarkEntry {
                store: dec.str()?,
                origin: dec.str()?,
                seq: dec.u64()?,
            });
        }
        dec.finish()?;
        Ok(Hello {
            link_id,
            replica_id,
            tier,
            policy_version,
            watermarks,
        })
    }

    pub fn watermark(&self, store: &str, origin: &str) -> u64 {
        self.watermarks
            .iter()
            .find(|w| w.store == store && w.origin == origin)
            .map_or(0, |w| w.seq)
    }
}

/// Versions of one `(store, origin)` pair. `through` is the highest
/// origin_seq the sender considered; versions at or below it that are not
/// listed were outside the filter or rejected before sending.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSection {
    pub store: String,
    pub origin: String,
    pub through: u64,
    pub records: Vec<Record>,
}

/// Canonical DELTA payload: `last u8, u32 count, (store str, origin str,
/// through u64, u32 n, framed record*)*`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Delta {
    pub last: bool,
    pub sections: Vec<DeltaSection>,
}

impl Delta {
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.bool(self.last).u32(self.sections.len() as u32);
        for s in &self.sections {
            enc.str(&s.store)
                .str(&s.origin)
                .u64(s.through)
                .u32(s.records.len() as u32);
            for r in &s.records {
                r.encode_framed(&mut enc);
            }
        }
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        let last = dec.bool()?;
        let n = dec.u32()? as usize;
        let mut sections = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let store = dec.str()?;
            let origin = dec.str()?;
            let through = dec.u64()?;
            let m = dec.u32()? as usize;
            if m > MAX_RECORDS_PER_FRAME {
                return Err(Error::Decode(format!(
                    "{m} records in one section exceeds the frame limit"
                )));
            }
            let mut records = Vec::with_capacity(m);
            for _ in 0..m {
                records.push(Record::decode_framed(&mut dec)?);
            }
            sections.push(DeltaSection {
                store,
                origin,
                through,
                records,
            });
        }
        dec.finish()?;
        Ok(Delta { last, sections })
    }

    pub fn record_count(&self) -> usize {
        self.sections.iter().map(|s| s.records.len()).sum()
    }

    /// Pack sections into frames of at most [`MAX_RECORDS_PER_FRAME`]
    /// records, splitting large sections. The final frame has `last` set;
    /// an empty input still yields one (empty, last) frame.
    pub fn chunk(sections: Vec<DeltaSection>) -> Vec<Delta> {
        let mut frames = Vec::new();
        let mut cur = Delta::default();
        let mut count = 0;
        for s in sections {
            let mut records = s.records.into_iter().peekable();
            loop {
                let room = MAX_RECORDS_PER_FRAME - count;
                if room == 0 {
                    frames.push(std::mem::take(&mut cur));
                    count = 0;
                    continue;
                }
                let part: Vec<Record> = records.by_ref().take(room).collect();
                count += part.len();
                cur.sections.push(DeltaSection {
                    store: s.store.clone(),
                    origin: s.origin.clone(),
                    through: s.through,
                    records: part,
                });
                if records.peek().is_none() {
                    break;
                }
            }
        }
        cur.last = true;
        frames.push(cur);
        frames
    }
}

/// Canonical POLICY payload: the policy set's canonical encoding.
pub fn encode_policy(ps: &PolicySet) -> Vec<u8> {
    let mut enc = Encoder::new();
    ps.encode(&mut enc);
    enc.finish()
}

pub fn decode_policy(bytes: &[u8]) -> Result<PolicySet> {
    let mut dec = Decoder::new(bytes);
    let ps = PolicySet::decode(&mut dec)?;
    dec.finish()?;
    Ok(ps)
}

/// Canonical ACK payload: `u32 count, (store str, origin str)*` naming the
/// sections the receiver committed (or deliberately discarded).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Ack {
    pub entries: Vec<(String, String)>,
}

impl Ack {
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u32(self.entries.len() as u32);
        for (s, o) in &self.entries {
            enc.str(s).str(o);
        }
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        let n = dec.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            entries.push((dec.str()?, dec.str()?));
        }
        dec.finish()?;
        Ok(Ack { entries })
    }
}
