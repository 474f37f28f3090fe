//! Versioned object storage for datasets, models and reports.
//!
//! The filesystem backend lays objects out as
//!
//! ```text
//! <root>/<namespace>/<name>/versions/<version-id>
//! <root>/<namespace>/<name>/index.json
//! ```
//!
//! where `index.json` is `{"versions": [{"id", "size", "created_at"}]}` in
//! ascending version order. Version ids are a zero-padded counter followed by
//! a content-hash prefix, so they sort in write order and never repeat.
//! Version files are immutable once the index lists them.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid object key {0:?}")]
    InvalidKey(String),
    #[error("object {0} not found")]
    NotFound(String),
    #[error("object {key} has no version {version}")]
    VersionNotFound { key: String, version: String },
    #[error("{0} is not in the {1} namespace")]
    WrongNamespace(String, Namespace),
    #[error("corrupt index for {key}: {message}")]
    CorruptIndex { key: String, message: String },
    #[error("{key} is at version {actual}, expected {expected}")]
    Conflict { key: String, expected: u64, actual: u64 },
    #[error("storage I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Namespace {
    Datasets,
    Models,
    Reports,
}

impl Namespace {
    pub const ALL: [Namespace; 3] = [Namespace::Datasets, Namespace::Models, Namespace::Reports];

    pub fn as_str(self) -> &'static str {
        match self {
            Namespace::Datasets => "datasets",
            Namespace::Models => "models",
            Namespace::Reports => "reports",
        }
    }
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Namespace {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Namespace::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| StoreError::InvalidKey(s.to_string()))
    }
}

const RESERVED_SEGMENTS: [&str; 4] = [".", "..", "versions", "index.json"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectKey {
    pub namespace: Namespace,
    pub name: String,
}

impl ObjectKey {
    /// Validates `name`: one or more `[A-Za-z0-9._-]+` segments joined by `/`.
    pub fn new(namespace: Namespace, name: impl Into<String>) -> Result<Self, StoreError> {
        let name = name.into();
        let ok = !name.is_empty()
            && name.split('/').all(|seg| {
                !seg.is_empty()
                    && !RESERVED_SEGMENTS.contains(&seg)
                    && seg.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
            });
        if !ok {
            return Err(StoreError::InvalidKey(name));
        }
        Ok(ObjectKey { namespace, name })
    }

    pub fn dataset(name: impl Into<String>) -> Result<Self, StoreError> {
        ObjectKey::new(Namespace::Datasets, name)
    }

    pub fn model(name: impl Into<String>) -> Result<Self, StoreError> {
        ObjectKey::new(Namespace::Models, name)
    }

    pub fn report(name: impl Into<String>) -> Result<Self, StoreError> {
        ObjectKey::new(Namespace::Reports, name)
    }
}

impl fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.namespace, self.name)
    }
}

impl FromStr for ObjectKey {
    type Err = StoreError;

    /// Parses `namespace/name`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (ns, name) = s.split_once('/').ok_or_else(|| StoreError::InvalidKey(s.to_string()))?;
        ObjectKey::new(ns.parse()?, name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VersionId(String);

impl VersionId {
    fn new(counter: u64, data: &[u8]) -> Self {
        let digest = hex::encode(Sha256::digest(data));
        VersionId(format!("{counter:08}-{}", &digest[..12]))
    }

    /// The 1-based write counter embedded in the id.
    pub fn counter(&self) -> u64 {
        self.0
            .split('-')
            .next()
            .and_then(|c| c.parse().ok())
            .unwrap_or(0)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VersionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VersionId {
    fn from(s: &str) -> Self {
        VersionId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionInfo {
    pub id: VersionId,
    pub size: u64,
    pub created_at: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Index {
    versions: Vec<VersionInfo>,
}

/// Object-store semantics: versioned put/get/list. Implementations must
/// serialize concurrent puts to one key and never change stored bytes.
pub trait ObjectStore: Send + Sync {
    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<VersionId, StoreError>;
    /// Like `put`, but fails with `Conflict` unless the latest version's
    /// counter equals `expected` (0 means the key must not exist yet).
    fn put_expecting(&self, key: &ObjectKey, data: &[u8], expected: u64) -> Result<VersionId, StoreError>;
    fn get(&self, key: &ObjectKey, version: Option<&VersionId>) -> Result<Vec<u8>, StoreError>;
    fn list_versions(&self, key: &ObjectKey) -> Result<Vec<VersionInfo>, StoreError>;
    fn list_keys(&self, namespace: Namespace) -> Result<Vec<ObjectKey>, StoreError>;

    fn latest(&self, key: &ObjectKey) -> Result<Option<VersionInfo>, StoreError> {
        Ok(self.list_versions(key)?.pop())
    }
}

/// The exact stored archive of a trained model.
pub fn download_model(store: &dyn ObjectStore, key: &ObjectKey, version: Option<&VersionId>) -> Result<Vec<u8>, StoreError> {
    if key.namespace != Namespace::Models {
        return Err(StoreError::WrongNamespace(key.to_string(), Namespace::Models));
    }
    store.get(key, version)
}

#[derive(Debug, Clone)]
pub struct FsStore {
    root: PathBuf,
}

impl FsStore {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(FsStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Fails unless the root directory accepts writes.
    pub fn check_writable(&self) -> Result<(), StoreError> {
        let probe = self.root.join(".write-probe");
        fs::write(&probe, b"ok")?;
        fs::remove_file(probe)?;
        Ok(())
    }

    fn key_dir(&self, key: &ObjectKey) -> PathBuf {
        let mut dir = self.root.join(key.namespace.as_str());
        for seg in key.name.split('/') {
            dir.push(seg);
        }
        dir
    }

    fn read_index(&self, key: &ObjectKey) -> Result<Index, StoreError> {
        let path = self.key_dir(key).join("index.json");
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptIndex {
                key: key.to_string(),
                message: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Index::default()),
            Err(e) => Err(e.into()),
        }
    }
}

fn write_atomic(path: &Path, data: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(data)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

impl FsStore {
    fn put_inner(&self, key: &ObjectKey, data: &[u8], expected: Option<u64>) -> Result<VersionId, StoreError> {
        let dir = self.key_dir(key);
        fs::create_dir_all(dir.join("versions"))?;
        // Per-key advisory lock; also excludes other processes sharing the root.
        let lock = OpenOptions::new().create(true).truncate(false).write(true).open(dir.join(".lock"))?;
        lock.lock()?;

        let mut index = self.read_index(key)?;
        let latest = index.versions.last().map_or(0, |v| v.id.counter());
        if let Some(expected) = expected.filter(|e| *e != latest) {
            lock.unlock()?;
            return Err(StoreError::Conflict {
                key: key.to_string(),
                expected,
                actual: latest,
            });
        }
        let counter = latest + 1;
        let id = VersionId::new(counter, data);
        write_atomic(&dir.join("versions").join(id.as_str()), data)?;
        index.versions.push(VersionInfo {
            id: id.clone(),
            size: data.len() as u64,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        });
        let bytes = serde_json::to_vec_pretty(&index).expect("index serializes");
        write_atomic(&dir.join("index.json"), &bytes)?;
        lock.unlock()?;
        Ok(id)
    }
}

impl ObjectStore for FsStore {
    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<VersionId, StoreError> {
        self.put_inner(key, data, None)
    }

    fn put_expecting(&self, key: &ObjectKey, data: &[u8], expected: u64) -> Result<VersionId, StoreError> {
        self.put_inner(key, data, Some(expected))
    }

    fn get(&self, key: &ObjectKey, version: Option<&VersionId>) -> Result<Vec<u8>, StoreError> {
        let index = self.read_index(key)?;
        let info = match version {
            None => index.versions.last(),
            Some(v) => index.versions.iter().find(|i| &i.id == v),
        };
        let Some(info) = info else {
            return Err(match version {
                Some(v) if !index.versions.is_empty() => StoreError::VersionNotFound {
                    key: key.to_string(),
                    version: v.to_string(),
                },
                _ => StoreError::NotFound(key.to_string()),
            });
        };
        Ok(fs::read(self.key_dir(key).join("versions").join(info.id.as_str()))?)
    }

    fn list_versions(&self, key: &ObjectKey) -> Result<Vec<VersionInfo>, StoreError> {
        Ok(self.read_index(key)?.versions)
    }

    fn list_keys(&self, namespace: Namespace) -> Result<Vec<ObjectKey>, StoreError> {
        fn walk(dir: &Path, prefix: &str, out: &mut Vec<String>) -> std::io::Result<()> {
            let entries = match fs::read_dir(dir) {
                Ok(e) => e,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
                Err(e) => return Err(e),
            };
            for entry in entries {
                let entry = entry?;
                if !entry.file_type()?.is_dir() {
                    continue;
                }
                let name = entry.file_name().to_string_lossy().into_owned();
                if name == "versions" {
                    continue;
                }
                let full = if prefix.is_empty() { name } else { format!("{prefix}/{name}") };
                if entry.path().join("index.json").is_file() {
                    out.push(full.clone());
                }
                walk(&entry.path(), &full, out)?;
            }
            Ok(())
        }
        let mut names = Vec::new();
        walk(&self.root.join(namespace.as_str()), "", &mut names)?;
        names.sort();
        names.into_iter().map(|n| ObjectKey::new(namespace, n)).collect()
    }
}
