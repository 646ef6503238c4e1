use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::CacheKind;
use crate::error::{CoolError, Result};

#[derive(Serialize, Deserialize)]
struct Record {
    key: String,
    body: String,
}

type Entries = BTreeMap<(CacheKind, String), String>;

/// Persistent store of raw knowledge-base responses.
///
/// On disk: one append-only `<kind>.jsonl` file per [`CacheKind`] plus an
/// `index.json` mapping each key to the byte offset of its record. Readers
/// share a lock; appends are serialized through a single writer lock.
#[derive(Debug)]
pub struct KnowledgeCache {
    dir: Option<PathBuf>,
    entries: RwLock<Entries>,
    writer: Mutex<()>,
}

#[derive(Default, Serialize, Deserialize)]
struct Index {
    link: BTreeMap<String, u64>,
    neighbors: BTreeMap<String, u64>,
    description: BTreeMap<String, u64>,
}

impl Index {
    fn of(&mut self, kind: CacheKind) -> &mut BTreeMap<String, u64> {
        match kind {
            CacheKind::Link => &mut self.link,
            CacheKind::Neighbors => &mut self.neighbors,
            CacheKind::Description => &mut self.description,
        }
    }
}

impl KnowledgeCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            entries: RwLock::new(BTreeMap::new()),
            writer: Mutex::new(()),
        }
    }

    /// Opens (creating if needed) a cache directory and loads every record.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut entries = BTreeMap::new();
        for kind in CacheKind::ALL {
            let path = dir.join(kind.file_name());
            if !path.exists() {
                continue;
            }
            let reader = BufReader::new(File::open(&path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let rec: Record = serde_json::from_str(&line).map_err(|e| {
                    CoolError::Format(format!("{}:{}: {e}", path.display(), i + 1))
                })?;
                entries.insert((kind, rec.key), rec.body);
            }
        }
        let cache = Self {
            dir: Some(dir),
            entries: RwLock::new(entries),
            writer: Mutex::new(()),
        };
        cache.write_index()?;
        Ok(cache)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn get(&self, kind: CacheKind, key: &str) -> Option<String> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .get(&(kind, key.to_string()))
            .cloned()
    }

    pub fn contains(&self, kind: CacheKind, key: &str) -> bool {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .contains_key(&(kind, key.to_string()))
    }

    /// Stores a body. Re-storing identical content is a no-op; different
    /// content under an existing key is rejected.
    pub fn put(&self, kind: CacheKind, key: &str, body: &str) -> Result<()> {
        let _w = self.writer.lock().expect("cache writer poisoned");
        if let Some(existing) = self.get(kind, key) {
            if existing == body {
                return Ok(());
            }
            return Err(CoolError::SnapshotConflict(vec![format!("{kind}:{key}")]));
        }
        if let Some(dir) = &self.dir {
            let rec = Record {
                key: key.to_string(),
                body: body.to_string(),
            };
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(kind.file_name()))?;
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        self.entries
            .write()
            .expect("cache lock poisoned")
            .insert((kind, key.to_string()), body.to_string());
        if self.dir.is_some() {
            self.write_index()?;
        }
        Ok(())
    }

    /// Inserts many entries atomically: either all go in or, on any conflict,
    /// none do and every conflicting key is listed.
    pub fn put_all(&self, items: &[(CacheKind, String, String)]) -> Result<()> {
        let conflicts: Vec<String> = {
            let entries = self.entries.read().expect("cache lock poisoned");
            items
                .iter()
                .filter(|(k, key, body)| {
                    entries
                        .get(&(*k, key.clone()))
                        .is_some_and(|existing| existing != body)
                })
                .map(|(k, key, _)| format!("{k}:{key}"))
                .collect()
        };
        if !conflicts.is_empty() {
            return Err(CoolError::SnapshotConflict(conflicts));
        }
        for (kind, key, body) in items {
            self.put(*kind, key, body)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries sorted by `(kind, key)`.
    pub fn entries(&self) -> Vec<(CacheKind, String, String)> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .iter()
            .map(|((k, key), body)| (*k, key.clone(), body.clone()))
            .collect()
    }

    fn write_index(&self) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let mut index = Index::default();
        for kind in CacheKind::ALL {
            let path = dir.join(kind.file_name());
            if !path.exists() {
                continue;
            }
            let content = fs::read_to_string(&path)?;
            let mut offset = 0u64;
            let mut latest: HashMap<String, u64> = HashMap::new();
            for line in content.split_inclusive('\n') {
                if let Ok(rec) = serde_json::from_str::<Record>(line.trim_end()) {
                    latest.insert(rec.key, offset);
                }
                offset += line.len() as u64;
            }
            index.of(kind).extend(latest);
        }
        fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }
}
