use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One persisted oracle answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedLabel {
    pub key: String,
    pub r: u8,
    pub raw_response: String,
}

/// Relation labels keyed by `(model, template hash, unordered text pair)`,
/// optionally mirrored to an append-only JSON-lines file so interrupted runs
/// resume without repeating oracle calls.
pub struct LabelCache {
    entries: Mutex<HashMap<String, CachedLabel>>,
    sink: Mutex<Option<(PathBuf, File)>>,
}

impl LabelCache {
    pub fn in_memory() -> Self {
        Self { entries: Mutex::new(HashMap::new()), sink: Mutex::new(None) }
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                // a torn final line from an interrupted run is dropped
                if let Ok(entry) = serde_json::from_str::<CachedLabel>(&line?) {
                    entries.insert(entry.key.clone(), entry);
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        let existing = std::fs::read(path)?;
        if existing.last().is_some_and(|b| *b != b'\n') {
            file.write_all(b"\n")?;
        }
        Ok(Self { entries: Mutex::new(entries), sink: Mutex::new(Some((path.to_path_buf(), file))) })
    }

    pub fn key(model_name: &str, template_hash: &str, text_a: &str, text_b: &str) -> String {
        let ha = hex::encode(Sha256::digest(text_a.as_bytes()));
        let hb = hex::encode(Sha256::digest(text_b.as_bytes()));
        let (lo, hi) = if ha <= hb { (ha, hb) } else { (hb, ha) };
        let mut hasher = Sha256::new();
        for part in [model_name, template_hash, &lo, &hi] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn get(&self, key: &str) -> Option<CachedLabel> {
        self.entries.lock().expect("label cache poisoned").get(key).cloned()
    }

    pub fn insert(&self, entry: CachedLabel) -> std::io::Result<()> {
        let mut sink = self.sink.lock().expect("label cache sink poisoned");
        if let Some((_, file)) = sink.as_mut() {
            writeln!(file, "{}", serde_json::to_string(&entry).expect("cache entry serializes"))?;
        }
        self.entries.lock().expect("label cache poisoned").insert(entry.key.clone(), entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("label cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.sink.lock().expect("label cache sink poisoned").as_ref().map(|(p, _)| p.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_is_unordered_in_the_pair() {
        assert_eq!(LabelCache::key("m", "t", "a", "b"), LabelCache::key("m", "t", "b", "a"));
        assert_ne!(LabelCache::key("m", "t", "a", "b"), LabelCache::key("m2", "t", "a", "b"));
        assert_ne!(LabelCache::key("m", "t", "a", "b"), LabelCache::key("m", "t2", "a", "b"));
    }

    #[test]
    fn persists_and_survives_torn_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        {
            let cache = LabelCache::open(&path).unwrap();
            cache.insert(CachedLabel { key: "k1".into(), r: 1, raw_response: "Yes".into() }).unwrap();
        }
        std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"key\":\"k2\",").unwrap();
        let cache = LabelCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.get("k1").unwrap().r, 1);
    }
}
