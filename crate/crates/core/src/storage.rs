//! Append-only JSON document store backing the tweet index and image index.
//!
//! File layout:
//!
//! ```text
//! magic   8 bytes  "SSDOCLOG"
//! version u32 LE   1
//! record* u32 LE payload length, then payload bytes
//! ```
//!
//! Each payload is a JSON object `{"id": <string>, "doc": <document>}`. The
//! id map is rebuilt on open by replaying the log; a torn tail record (short
//! length prefix or short payload) is truncated away.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SSDOCLOG";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 12;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} is not a document log (bad magic or version)")]
    BadHeader { path: PathBuf },
    #[error("document id must not be empty")]
    EmptyId,
    #[error("document for `{id}` is not valid JSON: {source}")]
    InvalidDoc { id: String, source: serde_json::Error },
    #[error("corrupt record at offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    id: &'a str,
    doc: &'a RawValue,
}

#[derive(Deserialize)]
struct EnvelopeIn<'a> {
    id: String,
    #[serde(borrow)]
    doc: &'a RawValue,
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    offset: u64,
    len: u32,
}

struct Index {
    slots: HashMap<String, Slot>,
    // First-write order of ids.
    order: Vec<String>,
}

pub struct DocStore {
    name: String,
    path: PathBuf,
    writer: Mutex<File>,
    reader: File,
    index: RwLock<Index>,
    sync_writes: bool,
}

impl std::fmt::Debug for DocStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DocStore").field("name", &self.name).field("path", &self.path).finish()
    }
}

impl DocStore {
    /// Opens or creates the log at `path`, replaying it into the id map.
    pub fn open(name: impl Into<String>, path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| StoreError::Io { path: path.clone(), source };
        let mut file =
            OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&path).map_err(io_err)?;
        let file_len = file.metadata().map_err(io_err)?.len();

        let mut index = Index { slots: HashMap::new(), order: Vec::new() };
        if file_len == 0 {
            let mut header = Vec::with_capacity(HEADER_LEN as usize);
            header.extend_from_slice(MAGIC);
            header.extend_from_slice(&VERSION.to_le_bytes());
            file.write_all(&header).map_err(io_err)?;
            file.sync_all().map_err(io_err)?;
        } else {
            let good_end = replay(&mut file, file_len, &path, &mut index)?;
            if good_end < file_len {
                log::warn!(
                    "{}: truncating torn tail ({} bytes) at offset {good_end}",
                    path.display(),
                    file_len - good_end
                );
                file.set_len(good_end).map_err(io_err)?;
                file.sync_all().map_err(io_err)?;
            }
        }
        file.seek(SeekFrom::End(0)).map_err(io_err)?;
        let reader = File::open(&path).map_err(io_err)?;

        Ok(DocStore {
            name: name.into(),
            path,
            writer: Mutex::new(file),
            reader,
            index: RwLock::new(index),
            sync_writes: false,
        })
    }

    /// Forces an fsync after every put.
    pub fn with_sync_writes(mut self, sync: bool) -> Self {
        self.sync_writes = sync;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap_or_else(|e| e.into_inner()).order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.read().unwrap_or_else(|e| e.into_inner()).slots.contains_key(id)
    }

    /// Appends a JSON document under `id`. A repeated id is a new version;
    /// `get_doc` returns the latest.
    pub fn put_doc(&self, id: &str, doc: &str) -> Result<(), StoreError> {
        if id.is_empty() {
            return Err(StoreError::EmptyId);
        }
        let raw: &RawValue =
            serde_json::from_str(doc).map_err(|source| StoreError::InvalidDoc { id: id.to_string(), source })?;
        let payload = serde_json::to_vec(&EnvelopeOut { id, doc: raw }).expect("envelope serializes");
        let len = u32::try_from(payload.len()).map_err(|_| StoreError::InvalidDoc {
            id: id.to_string(),
            source: serde::de::Error::custom("document exceeds 4 GiB"),
        })?;

        let mut record = Vec::with_capacity(4 + payload.len());
        record.extend_from_slice(&len.to_le_bytes());
        record.extend_from_slice(&payload);

        let io_err = |source| StoreError::Io { path: self.path.clone(), source };
        let mut writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let offset = writer.stream_position().map_err(io_err)?;
        if let Err(e) = writer.write_all(&record) {
            // Roll back a partial append so the log stays at its last good state.
            let _ = writer.set_len(offset);
            let _ = writer.seek(SeekFrom::Start(offset));
            return Err(io_err(e));
        }
        if self.sync_writes {
            writer.sync_data().map_err(io_err)?;
        }
        let mut index = self.index.write().unwrap_or_else(|e| e.into_inner());
        if index.slots.insert(id.to_string(), Slot { offset: offset + 4, len }).is_none() {
            index.order.push(id.to_string());
        }
        Ok(())
    }

    pub fn put<T: Serialize>(&self, id: &str, doc: &T) -> Result<(), StoreError> {
        let json =
            serde_json::to_string(doc).map_err(|source| StoreError::InvalidDoc { id: id.to_string(), source })?;
        self.put_doc(id, &json)
    }

    /// Latest document bytes for `id`, exactly as they were put.
    pub fn get_doc(&self, id: &str) -> Result<Option<String>, StoreError> {
        let slot = match self.index.read().unwrap_or_else(|e| e.into_inner()).slots.get(id) {
            Some(s) => *s,
            None => return Ok(None),
        };
        self.read_slot(slot).map(|(_, doc)| Some(doc))
    }

    pub fn get<T: DeserializeOwned>(&self, id: &str) -> Result<Option<T>, StoreError> {
        match self.get_doc(id)? {
            Some(doc) => serde_json::from_str(&doc)
                .map(Some)
                .map_err(|source| StoreError::InvalidDoc { id: id.to_string(), source }),
            None => Ok(None),
        }
    }

    fn read_slot(&self, slot: Slot) -> Result<(String, String), StoreError> {
        let mut buf = vec![0u8; slot.len as usize];
        self.reader
            .read_exact_at(&mut buf, slot.offset)
            .map_err(|source| StoreError::Io { path: self.path.clone(), source })?;
        decode_payload(&buf, slot.offset)
    }

    /// Ids in first-write order.
    pub fn ids(&self) -> Vec<String> {
        self.index.read().unwrap_or_else(|e| e.into_inner()).order.clone()
    }

    /// Visits the latest version of every document in first-write order.
    /// Unreadable records surface as `Err` items; the iteration continues.
    pub fn scan(&self) -> impl Iterator<Item = Result<(String, String), StoreError>> + '_ {
        let slots: Vec<Slot> = {
            let index = self.index.read().unwrap_or_else(|e| e.into_inner());
            index.order.iter().map(|id| index.slots[id]).collect()
        };
        slots.into_iter().map(move |slot| self.read_slot(slot))
    }

    /// Decodes every document as `T` and keeps those matching `pred`. Corrupt
    /// or undecodable records are logged and skipped.
    pub fn scan_filter<T, F>(&self, mut pred: F) -> Vec<(String, T)>
    where
        T: DeserializeOwned,
        F: FnMut(&T) -> bool,
    {
        let mut out = Vec::new();
        for item in self.scan() {
            match item {
                Ok((id, doc)) => match serde_json::from_str::<T>(&doc) {
                    Ok(value) if pred(&value) => out.push((id, value)),
                    Ok(_) => {}
                    Err(e) => log::warn!("{}: skipping undecodable document `{id}`: {e}", self.name),
                },
                Err(e) => log::warn!("{}: skipping record: {e}", self.name),
            }
        }
        out
    }

    pub fn flush(&self) -> Result<(), StoreError> {
        let writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        writer.sync_all().map_err(|source| StoreError::Io { path: self.path.clone(), source })
    }
}

fn decode_payload(buf: &[u8], offset: u64) -> Result<(String, String), StoreError> {
    let env: EnvelopeIn<'_> =
        serde_json::from_slice(buf).map_err(|e| StoreError::Corrupt { offset, reason: e.to_string() })?;
    Ok((env.id, env.doc.get().to_string()))
}

/// Replays records into `index`; returns the offset just past the last
/// complete record.
fn replay(file: &mut File, file_len: u64, path: &Path, index: &mut Index) -> Result<u64, StoreError> {
    let io_err = |source| StoreError::Io { path: path.to_path_buf(), source };
    file.seek(SeekFrom::Start(0)).map_err(io_err)?;
    let mut reader = BufReader::new(file);
    let mut header = [0u8; HEADER_LEN as usize];
    if file_len < HEADER_LEN {
        return Err(StoreError::BadHeader { path: path.to_path_buf() });
    }
    reader.read_exact(&mut header).map_err(io_err)?;
    if &header[..8] != MAGIC || u32::from_le_bytes(header[8..12].try_into().unwrap()) != VERSION {
        return Err(StoreError::BadHeader { path: path.to_path_buf() });
    }

    let mut pos = HEADER_LEN;
    let mut buf = Vec::new();
    loop {
        if pos + 4 > file_len {
            return Ok(pos);
        }
        let mut len_bytes = [0u8; 4];
        reader.read_exact(&mut len_bytes).map_err(io_err)?;
        let len = u32::from_le_bytes(len_bytes);
        if pos + 4 + len as u64 > file_len {
            return Ok(pos);
        }
        buf.resize(len as usize, 0);
        reader.read_exact(&mut buf).map_err(io_err)?;
        let payload_offset = pos + 4;
        match decode_payload(&buf, payload_offset) {
            Ok((id, _)) => {
                if index.slots.insert(id.clone(), Slot { offset: payload_offset, len }).is_none() {
                    index.order.push(id);
                }
            }
            Err(e) => log::warn!("{}: {e}", path.display()),
        }
        pos = payload_offset + len as u64;
    }
}
