//! Replayable response cache.
//!
//! Append-only JSONL record file plus a `<hash>\t<offset>` index file for
//! request-hash lookup. A raw response is appended before parsing; after a
//! successful parse the entry is appended again with the parsed fragment
//! filled in, and lookups return the last record for a hash. Rebuilding the
//! index from the record file is always safe.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompt::{PromptKind, PromptRecord};
use crate::error::{Error, Result};

/// One cached exchange with the client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    /// Digest of model name, template version, and rendered prompt text.
    pub request_hash: String,
    pub node: usize,
    pub kind: PromptKind,
    pub model: String,
    pub raw_response: String,
    /// Parsed rationale fragment, present once parsing succeeded.
    pub parsed: Option<serde_json::Value>,
    /// Unix seconds at write time.
    pub timestamp: u64,
}

/// Cryptographic digest keying a request; includes the model identifier and
/// template version so prompt edits invalidate stale entries.
pub fn request_hash(model: &str, prompt: &PromptRecord) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model.as_bytes());
    hasher.update([0x1f]);
    hasher.update(prompt.template_version.as_bytes());
    hasher.update([0x1f]);
    hasher.update(prompt.rendered_text.as_bytes());
    hex::encode(hasher.finalize())
}

pub struct RationaleCache {
    records_path: PathBuf,
    index_path: PathBuf,
    /// hash -> byte offset of the latest record.
    index: HashMap<String, u64>,
    file: File,
}

impl RationaleCache {
    /// Opens (or creates) the cache at `records_path`, rebuilding the index
    /// file when it is missing or stale.
    pub fn open(records_path: &Path) -> Result<Self> {
        if let Some(parent) = records_path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        let index_path = records_path.with_extension("idx");
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(records_path)
            .map_err(|e| Error::io(records_path.display().to_string(), e))?;
        let mut cache = RationaleCache {
            records_path: records_path.to_path_buf(),
            index_path,
            index: HashMap::new(),
            file,
        };
        if !cache.load_index()? {
            cache.rebuild_index()?;
        }
        Ok(cache)
    }

    /// Loads the index file; returns false when it is missing or does not
    /// cover the whole record file.
    fn load_index(&mut self) -> Result<bool> {
        let content = match std::fs::read_to_string(&self.index_path) {
            Ok(c) => c,
            Err(_) => return Ok(false),
        };
        let mut index = HashMap::new();
        let mut max_offset = 0u64;
        for line in content.lines() {
            let Some((hash, off)) = line.split_once('\t') else {
                return Ok(false);
            };
            let Ok(off) = off.parse::<u64>() else {
                return Ok(false);
            };
            max_offset = max_offset.max(off);
            index.insert(hash.to_string(), off);
        }
        let len = std::fs::metadata(&self.records_path)
            .map_err(|e| Error::io(self.records_path.display().to_string(), e))?
            .len();
        if len > 0 && (index.is_empty() || max_offset >= len) {
            return Ok(false);
        }
        self.index = index;
        Ok(true)
    }

    fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        let f = File::open(&self.records_path)
            .map_err(|e| Error::io(self.records_path.display().to_string(), e))?;
        let mut reader = BufReader::new(f);
        let mut offset = 0u64;
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| Error::io(self.records_path.display().to_string(), e))?;
            if n == 0 {
                break;
            }
            if let Ok(entry) = serde_json::from_str::<CacheEntry>(line.trim_end()) {
                self.index.insert(entry.request_hash, offset);
            }
            offset += n as u64;
        }
        let mut out = String::new();
        for (hash, off) in &self.index {
            out.push_str(&format!("{hash}\t{off}\n"));
        }
        std::fs::write(&self.index_path, out)
            .map_err(|e| Error::io(self.index_path.display().to_string(), e))?;
        Ok(())
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.index.contains_key(hash)
    }

    /// Latest entry for a request hash.
    pub fn get(&mut self, hash: &str) -> Result<Option<CacheEntry>> {
        let Some(&offset) = self.index.get(hash) else {
            return Ok(None);
        };
        let mut f = File::open(&self.records_path)
            .map_err(|e| Error::io(self.records_path.display().to_string(), e))?;
        f.seek(SeekFrom::Start(offset))
            .map_err(|e| Error::io(self.records_path.display().to_string(), e))?;
        let mut reader = BufReader::new(f);
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::io(self.records_path.display().to_string(), e))?;
        let entry = serde_json::from_str(line.trim_end())?;
        Ok(Some(entry))
    }

    /// Appends an entry and updates the index; later entries shadow earlier
    /// ones with the same hash.
    pub fn put(&mut self, entry: &CacheEntry) -> Result<()> {
        let offset = self
            .file
            .seek(SeekFrom::End(0))
            .map_err(|e| Error::io(self.records_path.display().to_string(), e))?;
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(self.records_path.display().to_string(), e))?;
        self.file
            .flush()
            .map_err(|e| Error::io(self.records_path.display().to_string(), e))?;
        let mut idx = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.index_path)
            .map_err(|e| Error::io(self.index_path.display().to_string(), e))?;
        idx.write_all(format!("{}\t{offset}\n", entry.request_hash).as_bytes())
            .map_err(|e| Error::io(self.index_path.display().to_string(), e))?;
        self.index.insert(entry.request_hash.clone(), offset);
        Ok(())
    }

    /// All entries in file order; used by the exposure audit.
    pub fn entries(&self) -> Result<Vec<CacheEntry>> {
        let mut f = File::open(&self.records_path)
            .map_err(|e| Error::io(self.records_path.display().to_string(), e))?;
        let mut content = String::new();
        f.read_to_string(&mut content)
            .map_err(|e| Error::io(self.records_path.display().to_string(), e))?;
        let mut out = Vec::new();
        for line in content.lines() {
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(line)?);
        }
        Ok(out)
    }
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
