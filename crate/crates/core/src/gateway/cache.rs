//! Content-addressed disk cache: one file per request digest holding the
//! raw response plus the request metadata, so runs are resumable and a
//! rerun at temperature 0 makes zero network calls.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RequestKind, Sampling};
use crate::error::{Error, Result};

/// Digest of (model name, conditioning, sampling, stop sequences).
pub fn compute_cache_key(
    model: &str,
    conditioning: &str,
    sampling: &Sampling,
    stop: &[String],
) -> String {
    let payload = serde_json::json!({
        "model": model,
        "conditioning": conditioning,
        "sampling": sampling,
        "stop": stop,
    });
    let mut hasher = Sha256::new();
    hasher.update(payload.to_string().as_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model: String,
    pub kind: RequestKind,
    pub conditioning: String,
    pub sampling: Sampling,
    pub stop: Vec<String>,
    pub response_text: String,
    pub finish_reason: String,
}

#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(DiskCache { dir })
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// A corrupt or unreadable entry is treated as a miss.
    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        let raw = fs::read_to_string(self.path_for(key)).ok()?;
        serde_json::from_str(&raw).ok()
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<()> {
        let path = self.path_for(&entry.key);
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_string(entry).expect("cache entry serializes");
        fs::write(&tmp, body).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
