//! Append-only JSON-lines answer cache keyed by (image hash, question id,
//! backend id).

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::PerceptionError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub image_sha256: String,
    pub question_id: u8,
    pub question_text: String,
    pub answer_text: String,
    pub backend_id: String,
    pub created_at: String,
}

type Key = (String, u8, String);

fn key_of(r: &CacheRecord) -> Key {
    (r.image_sha256.clone(), r.question_id, r.backend_id.clone())
}

/// Records read from a cache file plus the number of corrupt lines skipped.
#[derive(Debug, Default)]
pub struct LoadedCache {
    pub records: Vec<CacheRecord>,
    pub skipped: usize,
}

/// Read every well-formed record; corrupt lines are skipped with a warning.
pub fn load_records(path: &Path) -> Result<LoadedCache, PerceptionError> {
    let file = File::open(path)?;
    let mut loaded = LoadedCache::default();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CacheRecord>(&line) {
            Ok(r) => loaded.records.push(r),
            Err(e) => {
                log::warn!("{}:{}: skipping corrupt cache line: {e}", path.display(), n + 1);
                loaded.skipped += 1;
            }
        }
    }
    Ok(loaded)
}

/// One writer, many readers. Writes append a line and flush before the
/// in-memory index is updated.
#[derive(Debug)]
pub struct AnswerCache {
    path: Option<PathBuf>,
    index: RwLock<HashMap<Key, CacheRecord>>,
    order: RwLock<Vec<Key>>,
    writer: Mutex<Option<File>>,
    skipped: usize,
}

impl AnswerCache {
    pub fn in_memory() -> Self {
        Self { path: None, index: RwLock::default(), order: RwLock::default(), writer: Mutex::new(None), skipped: 0 }
    }

    /// Open (or create on first write) a cache file and index its records.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, PerceptionError> {
        let path = path.into();
        let loaded = if path.exists() { load_records(&path)? } else { LoadedCache::default() };
        let mut index = HashMap::new();
        let mut order = Vec::new();
        for r in loaded.records {
            let k = key_of(&r);
            if index.insert(k.clone(), r).is_none() {
                order.push(k);
            }
        }
        Ok(Self {
            path: Some(path),
            index: RwLock::new(index),
            order: RwLock::new(order),
            writer: Mutex::new(None),
            skipped: loaded.skipped,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Corrupt lines skipped when the file was opened.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, image_sha256: &str, question_id: u8, backend_id: &str) -> Option<CacheRecord> {
        let key = (image_sha256.to_owned(), question_id, backend_id.to_owned());
        self.index.read().expect("cache lock").get(&key).cloned()
    }

    pub fn store(&self, record: CacheRecord) -> Result<(), PerceptionError> {
        let mut writer = self.writer.lock().expect("cache writer lock");
        if let Some(path) = &self.path {
            if writer.is_none() {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                *writer = Some(OpenOptions::new().create(true).append(true).open(path)?);
            }
            let file = writer.as_mut().expect("opened above");
            let mut line = serde_json::to_string(&record).expect("record serializes");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        let key = key_of(&record);
        if self.index.write().expect("cache lock").insert(key.clone(), record).is_none() {
            self.order.write().expect("cache lock").push(key);
        }
        Ok(())
    }

    /// Records in first-insertion order.
    pub fn records(&self) -> Vec<CacheRecord> {
        let index = self.index.read().expect("cache lock");
        self.order.read().expect("cache lock").iter().map(|k| index[k].clone()).collect()
    }
}
