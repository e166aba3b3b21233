use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Disk cache laid out as `{root}/{model_id}/{hash}.json`.
///
/// Path separators in model ids become `__`. Entries are written to a
/// temporary file and renamed into place.
#[derive(Clone, Debug)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, model_id: &str, key: &str) -> PathBuf {
        let model = model_id.replace(['/', '\\', ':'], "__");
        self.root.join(model).join(format!("{key}.json"))
    }

    pub fn get<T: DeserializeOwned>(&self, model_id: &str, key: &str) -> Option<T> {
        let path = self.entry_path(model_id, key);
        let bytes = std::fs::read(&path).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
                None
            }
        }
    }

    pub fn put<T: Serialize>(&self, model_id: &str, key: &str, value: &T) -> std::io::Result<()> {
        let path = self.entry_path(model_id, key);
        let dir = path.parent().expect("entry has a parent");
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer(&mut tmp, value)?;
        tmp.flush()?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }
}
