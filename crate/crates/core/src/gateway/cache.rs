//! Content-addressed response cache: one JSON file per cache key, written
//! atomically (write to temp, then rename) so concurrent writers never
//! expose partial entries.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{ChatResponse, GatewayError};

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn open(dir: &Path) -> Result<Self, GatewayError> {
        fs::create_dir_all(dir)
            .map_err(|e| GatewayError::Cache(format!("create {}: {e}", dir.display())))?;
        Ok(DiskCache {
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<ChatResponse>, GatewayError> {
        let path = self.entry_path(key);
        let data = match fs::read_to_string(&path) {
            Ok(data) => data,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(GatewayError::Cache(format!("read {}: {e}", path.display()))),
        };
        let response = serde_json::from_str(&data)
            .map_err(|e| GatewayError::Cache(format!("parse {}: {e}", path.display())))?;
        Ok(Some(response))
    }

    pub fn put(&self, key: &str, response: &ChatResponse) -> Result<(), GatewayError> {
        let json = serde_json::to_string(response).expect("response serializes");
        let tmp = self.dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, json)
            .map_err(|e| GatewayError::Cache(format!("write {}: {e}", tmp.display())))?;
        let path = self.entry_path(key);
        fs::rename(&tmp, &path)
            .map_err(|e| GatewayError::Cache(format!("rename to {}: {e}", path.display())))?;
        Ok(())
    }
}
