//! Records and their parts: keys, values, provenance.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

/// Composite record key. Ordered by `(ts, seq)`; `seq` only becomes non-zero
/// when several records land on the same timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub ts: i64,
    pub seq: u32,
}

impl RecordKey {
    pub const MIN: RecordKey = RecordKey {
        ts: i64::MIN,
        seq: 0,
    };
    pub const MAX: RecordKey = RecordKey {
        ts: i64::MAX,
        seq: u32::MAX,
    };

    pub const fn new(ts: i64, seq: u32) -> Self {
        Self { ts, seq }
    }

    pub const fn at(ts: i64) -> Self {
        Self { ts, seq: 0 }
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.i64(self.ts).u32(self.seq);
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        Ok(Self {
            ts: dec.i64()?,
            seq: dec.u32()?,
        })
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.ts, self.seq)
    }
}

/// Half-open key interval `[lo, hi)`. `hi = None` is unbounded above;
/// `lo = RecordKey::MIN` is the lowest possible key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyRange {
    pub lo: RecordKey,
    pub hi: Option<RecordKey>,
}

impl KeyRange {
    pub const ALL: KeyRange = KeyRange {
        lo: RecordKey::MIN,
        hi: None,
    };

    pub fn new(lo: RecordKey, hi: RecordKey) -> Self {
        Self { lo, hi: Some(hi) }
    }

    /// `[lo_ts, hi_ts)` over timestamps, every seq included.
    pub fn ts(lo_ts: i64, hi_ts: i64) -> Self {
        Self::new(RecordKey::at(lo_ts), RecordKey::at(hi_ts))
    }

    pub fn from(lo: RecordKey) -> Self {
        Self { lo, hi: None }
    }

    pub fn is_all(&self) -> bool {
        self.lo == RecordKey::MIN && self.hi.is_none()
    }

    pub fn is_empty(&self) -> bool {
        matches!(self.hi, Some(hi) if hi <= self.lo)
    }

    pub fn contains(&self, key: &RecordKey) -> bool {
        *key >= self.lo && self.hi.map_or(true, |hi| *key < hi)
    }

    /// True when every key of `other` is also in `self`. Empty ranges are
    /// contained in anything.
    pub fn covers(&self, other: &KeyRange) -> bool {
        if other.is_empty() {
            return true;
        }
        if other.lo < self.lo {
            return false;
        }
        match (self.hi, other.hi) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(a), Some(b)) => b <= a,
        }
    }

    pub fn intersect(&self, other: &KeyRange) -> KeyRange {
        let lo = self.lo.max(other.lo);
        let hi = match (self.hi, other.hi) {
            (None, h) | (h, None) => h,
            (Some(a), Some(b)) => Some(a.min(b)),
        };
        KeyRange { lo, hi }
    }

    pub fn encode(&self, enc: &mut Encoder) {
        self.lo.encode(enc);
        match self.hi {
            Some(hi) => {
                enc.u8(1);
                hi.encode(enc);
            }
            None => {
                enc.u8(0);
            }
        }
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let lo = RecordKey::decode(dec)?;
        let hi = if dec.bool()? {
            Some(RecordKey::decode(dec)?)
        } else {
            None
        };
        Ok(Self { lo, hi })
    }
}

impl Default for KeyRange {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for KeyRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lo = if self.lo == RecordKey::MIN {
            "-inf".to_string()
        } else {
            self.lo.to_string()
        };
        match self.hi {
            Some(hi) => write!(f, "[{lo}; {hi})"),
            None => write!(f, "[{lo}; +inf)"),
        }
    }
}

/// JSON form: `{"lo": 10, "hi": [20, 1]}`; a bare integer bound means `(ts, 0)`.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BoundRepr {
    Ts(i64),
    Key(i64, u32),
}

#[derive(Serialize, Deserialize)]
struct KeyRangeRepr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lo: Option<BoundRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hi: Option<BoundRepr>,
}

fn bound_key(b: BoundRepr) -> RecordKey {
    match b {
        BoundRepr::Ts(ts) => RecordKey::at(ts),
        BoundRepr::Key(ts, seq) => RecordKey::new(ts, seq),
    }
}

impl Serialize for KeyRange {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let lo = (self.lo != RecordKey::MIN).then_some(BoundRepr::Key(self.lo.ts, self.lo.seq));
        let hi = self.hi.map(|h| BoundRepr::Key(h.ts, h.seq));
        KeyRangeRepr { lo, hi }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for KeyRange {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = KeyRangeRepr::deserialize(d)?;
        Ok(KeyRange {
            lo: repr.lo.map(bound_key).unwrap_or(RecordKey::MIN),
            hi: repr.hi.map(bound_key),
        })
    }
}

/// Structured value: named fields in name order, optionally typed by an
/// information-model type.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Object {
    pub type_ref: Option<String>,
    pub fields: BTreeMap<String, Value>,
}

impl Object {
    pub fn typed(type_ref: impl Into<String>) -> Self {
        Self {
            type_ref: Some(type_ref.into()),
            fields: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<Value>) -> Self {
        self.fields.insert(name.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Bytes(Vec<u8>),
    Object(Object),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Bool,
    Int,
    Float,
    Str,
    Bytes,
    Object,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueKind::Bool => "bool",
            ValueKind::Int => "int",
            ValueKind::Float => "float",
            ValueKind::Str => "str",
            ValueKind::Bytes => "bytes",
            ValueKind::Object => "object",
        };
        f.write_str(s)
    }
}

const TAG_BOOL: u8 = 0x01;
const TAG_INT: u8 = 0x02;
const TAG_FLOAT: u8 = 0x03;
const TAG_STR: u8 = 0x04;
const TAG_BYTES: u8 = 0x05;
const TAG_OBJECT: u8 = 0x06;

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Bool(_) => ValueKind::Bool,
            Value::Int(_) => ValueKind::Int,
            Value::Float(_) => ValueKind::Float,
            Value::Str(_) => ValueKind::Str,
            Value::Bytes(_) => ValueKind::Bytes,
            Value::Object(_) => ValueKind::Object,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            _ => None,
        }
    }

    /// Tag byte followed by the payload:
    /// bool `u8`, int `i64`, float IEEE-754 bits as `u64`, str/bytes
    /// length-prefixed, object `type_ref` (flag + str), field count `u32`,
    /// then `(name, value)` pairs in name order.
    pub fn encode(&self, enc: &mut Encoder) {
        match self {
            Value::Bool(b) => {
                enc.u8(TAG_BOOL).bool(*b);
            }
            Value::Int(i) => {
                enc.u8(TAG_INT).i64(*i);
            }
            Value::Float(x) => {
                enc.u8(TAG_FLOAT).f64(*x);
            }
            Value::Str(s) => {
                enc.u8(TAG_STR).str(s);
            }
            Value::Bytes(b) => {
                enc.u8(TAG_BYTES).bytes(b);
            }
            Value::Object(o) => {
                enc.u8(TAG_OBJECT)
                    .opt_str(o.type_ref.as_deref())
                    .u32(o.fields.len() as u32);
                for (name, v) in &o.fields {
                    enc.str(name);
                    v.encode(enc);
                }
            }
        }
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        Ok(match dec.u8()? {
            TAG_BOOL => Value::Bool(dec.bool()?),
            TAG_INT => Value::Int(dec.i64()?),
            TAG_FLOAT => Value::Float(dec.f64()?),
            TAG_STR => Value::Str(dec.str()?),
            TAG_BYTES => Value::Bytes(dec.bytes()?.to_vec()),
            TAG_OBJECT => {
                let type_ref = dec.opt_str()?;
                let n = dec.u32()?;
                let mut fields = BTreeMap::new();
                for _ in 0..n {
                    let name = dec.str()?;
                    let v = Value::decode(dec)?;
                    if fields.insert(name.clone(), v).is_some() {
                        return Err(Error::Decode(format!("duplicate object field {name}")));
                    }
                }
                Value::Object(Object { type_ref, fields })
            }
            t => return Err(Error::Decode(format!("unknown value tag {t:#04x}"))),
        })
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    /// Literal syntax of scripted source files: `true`/`false`, integers,
    /// floats (including `NaN`), `"quoted strings"`, anything else is a
    /// bare string.
    pub fn parse_literal(s: &str) -> Value {
        let t = s.trim();
        match t {
            "true" => return Value::Bool(true),
            "false" => return Value::Bool(false),
            _ => {}
        }
        if let Ok(i) = t.parse::<i64>() {
            return Value::Int(i);
        }
        if let Ok(f) = t.parse::<f64>() {
            return Value::Float(f);
        }
        if t.len() >= 2 && t.starts_with('"') && t.ends_with('"') {
            return Value::Str(t[1..t.len() - 1].to_string());
        }
        Value::Str(t.to_string())
    }

    /// JSON mapping used by manifests and scenarios. Objects may carry a
    /// `"$type"` member; `{"$bytes": "<hex>"}` is a byte string.
    pub fn from_json(v: &serde_json::Value) -> Result<Value> {
        use serde_json::Value as J;
        Ok(match v {
            J::Bool(b) => Value::Bool(*b),
            J::Number(n) => match n.as_i64() {
                Some(i) => Value::Int(i),
                None => Value::Float(n.as_f64().unwrap_or(f64::NAN)),
            },
            J::String(s) => Value::Str(s.clone()),
            J::Object(map) => {
                if let (1, Some(J::String(h))) = (map.len(), map.get("$bytes")) {
                    let raw = hex::decode(h)
                        .map_err(|e| Error::InvalidConfig(format!("bad $bytes hex: {e}")))?;
                    return Ok(Value::Bytes(raw));
                }
                let mut obj = Object::default();
                for (k, v) in map {
                    if k == "$type" {
                        match v {
                            J::String(s) => obj.type_ref = Some(s.clone()),
                            _ => return Err(Error::InvalidConfig("$type must be a string".into())),
                        }
                    } else {
                        obj.fields.insert(k.clone(), Value::from_json(v)?);
                    }
                }
                Value::Object(obj)
            }
            J::Null | J::Array(_) => {
                return Err(Error::InvalidConfig(format!("unsupported JSON value {v}")))
            }
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::Value as J;
        match self {
            Value::Bool(b) => J::Bool(*b),
            Value::Int(i) => J::from(*i),
            Value::Float(f) => serde_json::Number::from_f64(*f)
                .map(J::Number)
                .unwrap_or(J::Null),
            Value::Str(s) => J::String(s.clone()),
            Value::Bytes(b) => serde_json::json!({ "$bytes": hex::encode(b) }),
            Value::Object(o) => {
                let mut map = serde_json::Map::new();
                if let Some(t) = &o.type_ref {
                    map.insert("$type".into(), J::String(t.clone()));
                }
                for (k, v) in &o.fields {
                    map.insert(k.clone(), v.to_json());
                }
                J::Object(map)
            }
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Str(s) => write!(f, "{s:?}"),
            Value::Bytes(b) => write!(f, "0x{}", hex::encode(b)),
            Value::Object(_) => write!(f, "{}", self.to_json()),
        }
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}
impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}
impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}
impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}
impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}
impl From<Vec<u8>> for Value {
    fn from(v: Vec<u8>) -> Self {
        Value::Bytes(v)
    }
}
impl From<Object> for Value {
    fn from(v: Object) -> Self {
        Value::Object(v)
    }
}

/// Where a record version came from. `(origin_id, origin_seq)` identifies a
/// version across every replica of a store.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub origin_id: String,
    pub origin_seq: u64,
    pub write_ts: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    Record = 0x01,
    Tombstone = 0x02,
}

impl FrameKind {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0x01 => Ok(FrameKind::Record),
            0x02 => Ok(FrameKind::Tombstone),
            _ => Err(Error::Decode(format!("unknown frame kind {b:#04x}"))),
        }
    }
}

/// One committed version of a key. `value = None` is a tombstone.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub key: RecordKey,
    pub value: Option<Value>,
    pub prov: Provenance,
}

impl Record {
    pub fn is_tombstone(&self) -> bool {
        self.value.is_none()
    }

    pub fn frame_kind(&self) -> FrameKind {
        if self.value.is_some() {
            FrameKind::Record
        } else {
            FrameKind::Tombstone
        }
    }

    /// Canonical payload: `ts i64, seq u32, origin_id str, origin_seq u64,
    /// write_ts i64`, then the value for record frames. Tombstones stop
    /// after `write_ts`; the frame kind says which.
    pub fn encode_payload(&self, enc: &mut Encoder) {
        self.key.encode(enc);
        enc.str(&self.prov.origin_id)
            .u64(self.prov.origin_seq)
            .i64(self.prov.write_ts);
        if let Some(v) = &self.value {
            v.encode(enc);
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut enc = Encoder::with_capacity(64);
        self.encode_payload(&mut enc);
        enc.finish()
    }

    pub fn decode_payload(kind: FrameKind, bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        let key = RecordKey::decode(&mut dec)?;
        let prov = Provenance {
            origin_id: dec.str()?,
            origin_seq: dec.u64()?,
            write_ts: dec.i64()?,
        };
        let value = match kind {
            FrameKind::Record => Some(Value::decode(&mut dec)?),
            FrameKind::Tombstone => None,
        };
        dec.finish()?;
        Ok(Record { key, value, prov })
    }

    /// Kind byte, `u32` payload length, payload. Used inside DELTA frames and
    /// as the unit hashed by content hashes.
    pub fn encode_framed(&self, enc: &mut Encoder) {
        let payload = self.payload();
        enc.u8(self.frame_kind() as u8).bytes(&payload);
    }

    pub fn decode_framed(dec: &mut Decoder<'_>) -> Result<Self> {
        let kind = FrameKind::from_byte(dec.u8()?)?;
        Record::decode_payload(kind, dec.bytes()?)
    }

    /// Total order used to pick a winner among versions of one key:
    /// greater `(write_ts, origin_id, origin_seq)` wins.
    pub fn version_cmp(&self, other: &Record) -> Ordering {
        (
            self.prov.write_ts,
            &self.prov.origin_id,
            self.prov.origin_seq,
        )
            .cmp(&(
                other.prov.write_ts,
                &other.prov.origin_id,
                other.prov.origin_seq,
            ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn key_order_is_ts_then_seq() {
        assert!(RecordKey::new(1, 5) < RecordKey::new(2, 0));
        assert!(RecordKey::new(2, 0) < RecordKey::new(2, 1));
    }

    #[test]
    fn half_open_ranges() {
        let r = KeyRange::ts(2, 3);
        assert!(r.contains(&RecordKey::at(2)));
        assert!(r.contains(&RecordKey::new(2, 7)));
        assert!(!r.contains(&RecordKey::at(3)));
        assert!(KeyRange::ts(0, 100).covers(&KeyRange::ts(10, 20)));
        assert!(!KeyRange::ts(0, 100).covers(&KeyRange::ts(50, 150)));
        assert!(!KeyRange::ts(0, 100).covers(&KeyRange::from(RecordKey::at(50))));
        assert!(KeyRange::ALL.covers(&KeyRange::ts(-5, 5)));
        assert!(KeyRange::ts(0, 1).covers(&KeyRange::ts(7, 7)));
    }

    #[test]
    fn literals() {
        assert_eq!(Value::parse_literal("42"), Value::Int(42));
        assert_eq!(Value::parse_literal("1.5"), Value::Float(1.5));
        assert_eq!(Value::parse_literal("true"), Value::Bool(true));
        assert_eq!(Value::parse_literal("\"a b\""), Value::Str("a b".into()));
        assert!(matches!(Value::parse_literal("NaN"), Value::Float(f) if f.is_nan()));
    }

    #[test]
    fn key_range_json() {
        let r: KeyRange = serde_json::from_str(r#"{"lo": 10, "hi": [20, 1]}"#).unwrap();
        assert_eq!(r, KeyRange::new(RecordKey::at(10), RecordKey::new(20, 1)));
        let all: KeyRange = serde_json::from_str("{}").unwrap();
        assert!(all.is_all());
        let back: KeyRange = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(Value::Int),
            any::<f64>()
                .prop_filter("nan breaks PartialEq", |f| !f.is_nan())
                .prop_map(Value::Float),
            ".{0,12}".prop_map(Value::Str),
            proptest::collection::vec(any::<u8>(), 0..16).prop_map(Value::Bytes),
        ];
        leaf.prop_recursive(3, 16, 4, |inner| {
            (
                proptest::option::of("[A-Z][a-z]{0,5}"),
                proptest::collection::btree_map("[a-z]{1,6}", inner, 0..4),
            )
                .prop_map(|(type_ref, fields)| Value::Object(Object { type_ref, fields }))
        })
    }

    proptest! {
        #[test]
        fn record_payload_roundtrip(ts in any::<i64>(), seq in any::<u32>(), origin in "[a-z]{1,8}",
                                    oseq in 1u64.., wts in any::<i64>(), value in proptest::option::of(arb_value())) {
            let rec = Record { key: RecordKey::new(ts, seq), value, prov: Provenance { origin_id: origin, origin_seq: oseq, write_ts: wts } };
            let back = Record::decode_payload(rec.frame_kind(), &rec.payload()).unwrap();
            prop_assert_eq!(back, rec);
        }

        #[test]
        fn covers_matches_pointwise_containment(a in -20i64..20, b in -20i64..20, c in -20i64..20, d in -20i64..20) {
            let outer = KeyRange::ts(a, b);
            let inner = KeyRange::ts(c, d);
            let brute = (c..d).all(|t| outer.contains(&RecordKey::at(t)) && outer.contains(&RecordKey::new(t, u32::MAX)));
            prop_assert_eq!(outer.covers(&inner), brute);
        }
    }
}
