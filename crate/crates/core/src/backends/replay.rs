use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Method, Transport, WireRequest};
use crate::datasets::write_atomic;
use crate::error::BackendError;

/// Serves recorded responses from `<dir>/<method>/<digest>.json`.
///
/// Read-only and safe to share between threads. A request with no fixture is
/// an error, never a default response.
#[derive(Debug, Clone)]
pub struct ReplayTransport {
    dir: PathBuf,
    identity: String,
}

impl ReplayTransport {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(BackendError::Unavailable(format!(
                "replay directory {} does not exist",
                dir.display()
            )));
        }
        let identity = format!("replay:{}", fixture_tree_digest(&dir)?);
        Ok(Self { dir, identity })
    }

    pub fn fixture_path(dir: &Path, request: &WireRequest) -> PathBuf {
        let key = request.key();
        dir.join(key.method.as_str())
            .join(format!("{}.json", key.digest))
    }
}

impl Transport for ReplayTransport {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn call(&self, request: &WireRequest) -> Result<Vec<u8>, BackendError> {
        let path = Self::fixture_path(&self.dir, request);
        match fs::read(&path) {
            Ok(bytes) => Ok(bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(BackendError::FixtureMiss(request.key().to_string()))
            }
            Err(source) => Err(BackendError::Io { path, source }),
        }
    }
}

/// SHA-256 over the sorted `(relative path, file hash)` list of every fixture
/// under the four method directories. Other files are ignored.
pub fn fixture_tree_digest(dir: &Path) -> Result<String, BackendError> {
    let mut entries = Vec::new();
    for method in Method::ALL {
        let sub = dir.join(method.as_str());
        if !sub.is_dir() {
            continue;
        }
        let read = fs::read_dir(&sub).map_err(|source| BackendError::Io {
            path: sub.clone(),
            source,
        })?;
        for entry in read {
            let path = entry
                .map_err(|source| BackendError::Io {
                    path: sub.clone(),
                    source,
                })?
                .path();
            if path.extension().is_some_and(|e| e == "json") {
                let bytes = fs::read(&path).map_err(|source| BackendError::Io {
                    path: path.clone(),
                    source,
                })?;
                let name = path.file_name().unwrap().to_string_lossy().into_owned();
                entries.push((
                    format!("{}/{name}", method.as_str()),
                    hex::encode(Sha256::digest(&bytes)),
                ));
            }
        }
    }
    entries.sort();
    let mut hasher = Sha256::new();
    for (name, hash) in entries {
        hasher.update(name.as_bytes());
        hasher.update([0]);
        hasher.update(hash.as_bytes());
        hasher.update(b"\n");
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Forwards to an inner transport and stores every successful response as a
/// replay fixture.
pub struct RecordingTransport<T> {
    inner: T,
    dir: PathBuf,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
        }
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn identity(&self) -> String {
        format!("record:{}", self.inner.identity())
    }

    fn call(&self, request: &WireRequest) -> Result<Vec<u8>, BackendError> {
        let body = self.inner.call(request)?;
        let path = ReplayTransport::fixture_path(&self.dir, request);
        write_atomic(&path, &body).map_err(|e| BackendError::Io {
            path,
            source: std::io::Error::other(e.to_string()),
        })?;
        Ok(body)
    }
}
