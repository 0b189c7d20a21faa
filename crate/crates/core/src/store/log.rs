//! Append-only per-store log file.
//!
//! Each frame is a 4-byte big-endian payload length, a 1-byte frame kind and
//! the payload: the canonical record payload, or its sealed form when the
//! store is encrypted. Encrypted stores keep their data key next to the log
//! in `<store>.key`, wrapped by the owner key.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::security::{open_record, seal_record, unwrap_key, wrap_key, CryptoProvider, SecretKey};
use crate::value::{FrameKind, Record};

pub(crate) struct StoreLog {
    path: PathBuf,
    file: File,
    data_key: Option<SecretKey>,
    crypto: Arc<dyn CryptoProvider>,
}

impl std::fmt::Debug for StoreLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StoreLog")
            .field("path", &self.path)
            .field("encrypted", &self.data_key.is_some())
            .finish()
    }
}

pub(crate) fn log_path(dir: &Path, store: &str) -> PathBuf {
    dir.join(format!("{store}.log"))
}

pub(crate) fn key_path(dir: &Path, store: &str) -> PathBuf {
    dir.join(format!("{store}.key"))
}

fn load_or_create_key(
    dir: &Path,
    store: &str,
    crypto: &dyn CryptoProvider,
    owner_key: Option<&SecretKey>,
) -> Result<SecretKey> {
    let owner =
        owner_key.ok_or_else(|| Error::NoKey(format!("owner key for encrypted store {store}")))?;
    let path = key_path(dir, store);
    if path.exists() {
        return unwrap_key(crypto, owner, &fs::read(&path)?);
    }
    let data_key = SecretKey::random();
    fs::write(&path, wrap_key(crypto, owner, &data_key))?;
    Ok(data_key)
}

impl StoreLog {
    /// Open (creating if needed) the log for `store` and replay it. A torn
    /// final frame from an interrupted write is truncated away.
    pub fn open(
        dir: &Path,
        store: &str,
        encrypted: bool,
        crypto: Arc<dyn CryptoProvider>,
        owner_key: Option<&SecretKey>,
    ) -> Result<(Self, Vec<Record>)> {
        fs::create_dir_all(dir)?;
        let data_key = if encrypted {
            Some(load_or_create_key(dir, store, crypto.as_ref(), owner_key)?)
        } else {
            None
        };
        let path = log_path(dir, store);
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;

        let mut records = Vec::new();
        let mut pos = 0usize;
        while buf.len() - pos >= 5 {
            let len = u32::from_be_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
            if buf.len() - pos - 5 < len {
                break;
            }
            let kind = FrameKind::from_byte(buf[pos + 4])?;
            let body = &buf[pos + 5..pos + 5 + len];
            let rec = match &data_key {
                Some(k) => open_record(crypto.as_ref(), Some(k), kind, body)?,
                None => Record::decode_payload(kind, body)?,
            };
            records.push(rec);
            pos += 5 + len;
        }
        if pos != buf.len() {
            log::warn!(
                "{}: truncating {} bytes of torn frame",
                path.display(),
                buf.len() - pos
            );
            file.set_len(pos as u64)?;
        }
        Ok((
            Self {
                path,
                file,
                data_key,
                crypto,
            },
            records,
        ))
    }

    pub fn append(&mut self, rec: &Record) -> Result<()> {
        let (kind, body) = match &self.data_key {
            Some(k) => seal_record(self.crypto.as_ref(), Some(k), rec)?,
            None => (rec.frame_kind(), rec.payload()),
        };
        let mut frame = Vec::with_capacity(body.len() + 5);
        frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
        frame.push(kind as u8);
        frame.extend_from_slice(&body);
        self.file.write_all(&frame)?;
        Ok(())
    }

    pub fn sync(&mut self) -> Result<()> {
        self.file.sync_data()?;
        Ok(())
    }

    pub fn remove(dir: &Path, store: &str) -> Result<()> {
        for p in [log_path(dir, store), key_path(dir, store)] {
            match fs::remove_file(&p) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::security::{ChaChaProvider, XorMacProvider};
    use crate::value::{Provenance, RecordKey, Value};

    fn rec(i: u64, v: Option<Value>) -> Record {
        Record {
            key: RecordKey::at(i as i64),
            value: v,
            prov: Provenance {
                origin_id: "r".into(),
                origin_seq: i,
                write_ts: 0,
            },
        }
    }

    #[test]
    fn replay_after_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let crypto: Arc<dyn CryptoProvider> = Arc::new(XorMacProvider);
        let (mut log, existing) =
            StoreLog::open(dir.path(), "t", false, crypto.clone(), None).unwrap();
        assert!(existing.is_empty());
        let written = vec![rec(1, Some(Value::Int(5))), rec(2, None)];
        for r in &written {
            log.append(r).unwrap();
        }
        drop(log);
        let (_, replayed) = StoreLog::open(dir.path(), "t", false, crypto, None).unwrap();
        assert_eq!(replayed, written);
    }

    #[test]
    fn torn_tail_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let crypto: Arc<dyn CryptoProvider> = Arc::new(XorMacProvider);
        let (mut log, _) = StoreLog::open(dir.path(), "t", false, crypto.clone(), None).unwrap();
        log.append(&rec(1, Some(Value::Int(5)))).unwrap();
        drop(log);
        let p = log_path(dir.path(), "t");
        let good = fs::metadata(&p).unwrap().len();
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(&[0, 0, 0, 50, 1, 2, 3]).unwrap();
        drop(f);
        let (_, replayed) = StoreLog::open(dir.path(), "t", false, crypto, None).unwrap();
        assert_eq!(replayed.len(), 1);
        assert_eq!(fs::metadata(&p).unwrap().len(), good);
    }

    #[test]
    fn encrypted_log_hides_plaintext_and_needs_owner_key() {
        let dir = tempfile::tempdir().unwrap();
        let crypto: Arc<dyn CryptoProvider> = Arc::new(ChaChaProvider);
        let owner = SecretKey::derive("owner");
        let sentinel = "SENTINEL-9f8e7d6c";
        let (mut log, _) =
            StoreLog::open(dir.path(), "t", true, crypto.clone(), Some(&owner)).unwrap();
        log.append(&rec(1, Some(Value::Str(sentinel.into()))))
            .unwrap();
        drop(log);
        let bytes = fs::read(log_path(dir.path(), "t")).unwrap();
        assert!(!bytes
            .windows(sentinel.len())
            .any(|w| w == sentinel.as_bytes()));
        assert!(matches!(
            StoreLog::open(dir.path(), "t", true, crypto.clone(), None),
            Err(Error::NoKey(_))
        ));
        let (_, replayed) = StoreLog::open(dir.path(), "t", true, crypto, Some(&owner)).unwrap();
        assert_eq!(replayed[0].value, Some(Value::Str(sentinel.into())));
    }
}
