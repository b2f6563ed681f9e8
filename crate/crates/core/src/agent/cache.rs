use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

use super::RoleName;

#[derive(Serialize, Deserialize)]
struct Entry {
    cache_key: String,
    role: RoleName,
    reply: String,
}

/// Content-addressed reply store, optionally persisted one file per key
/// under `<dir>/<first two hex chars>/<key>.json`.
pub struct ReplyCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, String>>,
    busy: Mutex<HashSet<String>>,
    released: Condvar,
}

pub(super) struct KeyGuard<'a> {
    cache: &'a ReplyCache,
    key: String,
}

impl Drop for KeyGuard<'_> {
    fn drop(&mut self) {
        self.cache.busy.lock().unwrap().remove(&self.key);
        self.cache.released.notify_all();
    }
}

impl ReplyCache {
    pub fn in_memory() -> Self {
        ReplyCache {
            dir: None,
            memory: Mutex::new(HashMap::new()),
            busy: Mutex::new(HashSet::new()),
            released: Condvar::new(),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        ReplyCache {
            dir: Some(dir.into()),
            ..Self::in_memory()
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        let dir = self.dir.as_ref()?;
        let shard = key.get(..2).unwrap_or("__");
        Some(dir.join(shard).join(format!("{key}.json")))
    }

    /// Serializes lookups and writes for one key.
    pub(super) fn lock_key(&self, key: &str) -> KeyGuard<'_> {
        let mut busy = self.busy.lock().unwrap();
        while busy.contains(key) {
            busy = self.released.wait(busy).unwrap();
        }
        busy.insert(key.to_string());
        KeyGuard {
            cache: self,
            key: key.to_string(),
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(hit) = self.memory.lock().unwrap().get(key) {
            return Some(hit.clone());
        }
        let path = self.path_for(key)?;
        let text = std::fs::read_to_string(&path).ok()?;
        match serde_json::from_str::<Entry>(&text) {
            Ok(entry) if entry.cache_key == key => {
                self.memory.lock().unwrap().insert(key.to_string(), entry.reply.clone());
                Some(entry.reply)
            }
            _ => {
                log::warn!("ignoring corrupt cache entry {}", path.display());
                None
            }
        }
    }

    pub fn put(&self, key: &str, role: RoleName, reply: &str) -> std::io::Result<()> {
        self.memory.lock().unwrap().insert(key.to_string(), reply.to_string());
        let Some(path) = self.path_for(key) else {
            return Ok(());
        };
        let parent = path.parent().expect("sharded path has a parent");
        std::fs::create_dir_all(parent)?;
        let entry = Entry {
            cache_key: key.to_string(),
            role,
            reply: reply.to_string(),
        };
        let tmp = parent.join(format!(".{key}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec(&entry)?)?;
        std::fs::rename(&tmp, &path)
    }

    pub fn len(&self) -> usize {
        self.memory.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
