use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Hex sha256 of the value's JSON encoding.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable cache key");
    hex::encode(Sha256::digest(&bytes))
}

/// Hash of a sequence of files' bytes, in order.
pub fn files_hash<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<String, CliError> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| egoaction::Error::InvalidArgument(format!("{}: {e}", p.display())))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Cache entries are whole directories named by key. A missing entry is
/// built in a scratch directory and renamed into place, so readers never
/// observe a partial entry.
pub struct Cache {
    root: PathBuf,
}

impl Cache {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(stage).join(&key[..key.len().min(24)])
    }

    /// Returns `true` on a hit.
    pub fn ensure<F>(&self, dir: &Path, build: F) -> Result<bool, CliError>
    where
        F: FnOnce(&Path) -> Result<(), CliError>,
    {
        if dir.is_dir() {
            return Ok(true);
        }
        let parent = dir.parent().expect("cache entries have a parent");
        std::fs::create_dir_all(parent)?;
        let name = dir.file_name().expect("named entry").to_string_lossy();
        let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        if let Err(e) = build(&tmp) {
            let _ = std::fs::remove_dir_all(&tmp);
            return Err(e);
        }
        if std::fs::rename(&tmp, dir).is_err() {
            // Another process finished the same entry first.
            let _ = std::fs::remove_dir_all(&tmp);
            if !dir.is_dir() {
                return Err(CliError::Pipeline(egoaction::Error::InvalidArgument(format!(
                    "could not publish cache entry {}",
                    dir.display()
                ))));
            }
        }
        Ok(false)
    }
}

/// Hit/miss tally reported by every caching command.
#[derive(Debug, Default, Clone, Copy, Serialize)]
pub struct CacheTally {
    pub items: usize,
    pub hits: usize,
}

impl CacheTally {
    pub fn record(&mut self, hit: bool) {
        self.items += 1;
        self.hits += usize::from(hit);
    }

    pub fn hit_rate(&self) -> f64 {
        if self.items == 0 {
            1.0
        } else {
            self.hits as f64 / self.items as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_ensure_is_a_hit() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path().to_path_buf());
        let e = cache.entry("s", &content_hash(&[1, 2, 3]));
        let mut built = 0;
        assert!(!cache
            .ensure(&e, |d| {
                built += 1;
                std::fs::write(d.join("x"), b"1")?;
                Ok(())
            })
            .unwrap());
        assert!(cache.ensure(&e, |_| panic!("rebuilt")).unwrap());
        assert_eq!(built, 1);
        assert_eq!(std::fs::read(e.join("x")).unwrap(), b"1");
    }

    #[test]
    fn failed_build_leaves_no_entry() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path().to_path_buf());
        let e = cache.entry("s", "abc");
        let r = cache.ensure(&e, |_| Err(CliError::missing("flow", "nope")));
        assert!(r.is_err());
        assert!(!e.exists());
        assert_eq!(std::fs::read_dir(dir.path().join("s")).unwrap().count(), 0);
    }

    #[test]
    fn key_tracks_content() {
        assert_eq!(content_hash(&("a", 1)), content_hash(&("a", 1)));
        assert_ne!(content_hash(&("a", 1)), content_hash(&("a", 2)));
    }
}
