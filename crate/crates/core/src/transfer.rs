//! File movement between storage locations, container image export from a
//! registry into image files, and the per-location image cache.
//!
//! Supported URLs are `file://<abs-path>` (read and write) and
//! `http://<host>/<path>` (read only).
//!
//! Cache layout under the cache root:
//!
//! ```text
//! <root>/<location>/<scheme>/<flat-image-name>/image      exported image bytes
//! <root>/<location>/<scheme>/<flat-image-name>/meta.json  size + sha256
//! <root>/.tmp/                                           staging area for atomic publish
//! ```
//!
//! Registry fixture layout: `<registry>/<locator>__<tag>` holds the image
//! bytes and `<registry>/<locator>__<tag>.size` its decimal size.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufReader, Read, Write};
use std::os::unix::fs::MetadataExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::ImageRef;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransferError {
    #[error("unsupported URL `{0}`")]
    UnsupportedUrl(String),
    #[error("source `{url}` is missing: {reason}")]
    SourceMissing { url: String, reason: String },
    #[error("destination `{url}` is not writable: {reason}")]
    DestinationUnwritable { url: String, reason: String },
    #[error("checksum mismatch after copying to `{0}`")]
    ChecksumMismatch(String),
    #[error("`{url}` has {actual} bytes, expected {expected}")]
    SizeMismatch {
        url: String,
        expected: u64,
        actual: u64,
    },
    #[error("image `{0}` cannot be exported to an image file")]
    SchemeNotExportable(String),
    #[error("image `{0}` not found in registry")]
    RegistryMiss(String),
    #[error("image cache: {0}")]
    Cache(String),
    #[error("parallelism must be at least 1")]
    InvalidParallelism,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TransferKind {
    Data,
    ContainerImage,
    Executable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRequest {
    pub src: String,
    pub dst: String,
    pub bytes: u64,
    pub kind: TransferKind,
    pub link_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferMode {
    Copy,
    Link,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferResult {
    pub bytes_moved: u64,
    pub mode: TransferMode,
    pub checksum: Option<String>,
}

/// A parsed transfer endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    File(PathBuf),
    Http(String),
}

impl Location {
    pub fn parse(url: &str) -> Result<Self, TransferError> {
        if let Some(path) = url.strip_prefix("file://") {
            if path.starts_with('/') {
                return Ok(Location::File(PathBuf::from(path)));
            }
        } else if let Some(rest) = url.strip_prefix("http://") {
            if !rest.is_empty() {
                return Ok(Location::Http(url.to_string()));
            }
        }
        Err(TransferError::UnsupportedUrl(url.to_string()))
    }

    fn join(&self, relative: &str) -> Location {
        match self {
            Location::File(p) => Location::File(p.join(relative)),
            Location::Http(u) => {
                Location::Http(format!("{}/{}", u.trim_end_matches('/'), relative))
            }
        }
    }

    fn describe(&self) -> String {
        match self {
            Location::File(p) => format!("file://{}", p.display()),
            Location::Http(u) => u.clone(),
        }
    }
}

/// Tells whether two paths live on the same filesystem.
pub trait FilesystemProbe: Send + Sync {
    fn filesystem_id(&self, path: &Path) -> Option<u64>;
}

/// Uses the device id of the path, or of its nearest existing ancestor.
#[derive(Debug, Default, Clone, Copy)]
pub struct DeviceProbe;

impl FilesystemProbe for DeviceProbe {
    fn filesystem_id(&self, path: &Path) -> Option<u64> {
        path.ancestors()
            .find_map(|p| fs::metadata(p).ok())
            .map(|m| m.dev())
    }
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn temp_sibling(path: &Path) -> PathBuf {
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}-{n}", std::process::id()))
}

fn sha256_file(path: &Path) -> io::Result<String> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Streams `reader` into `dst` through a temp file, returning (bytes, sha256).
fn write_atomically(reader: &mut dyn Read, dst: &Path) -> io::Result<(u64, String)> {
    if let Some(parent) = dst.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = temp_sibling(dst);
    let result = (|| {
        let mut out = fs::File::create(&tmp)?;
        let mut hasher = Sha256::new();
        let mut buf = [0u8; 64 * 1024];
        let mut total = 0u64;
        loop {
            let n = reader.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
            out.write_all(&buf[..n])?;
            total += n as u64;
        }
        out.flush()?;
        Ok((total, hex::encode(hasher.finalize())))
    })();
    match result {
        Ok(v) => {
            fs::rename(&tmp, dst)?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Protocol handlers plus the filesystem probe used for link decisions.
pub struct TransferEngine {
    probe: Box<dyn FilesystemProbe>,
}

impl Default for TransferEngine {
    fn default() -> Self {
        TransferEngine {
            probe: Box::new(DeviceProbe),
        }
    }
}

impl TransferEngine {
    pub fn with_probe(probe: impl FilesystemProbe + 'static) -> Self {
        TransferEngine {
            probe: Box::new(probe),
        }
    }

    fn open(&self, loc: &Location) -> Result<Box<dyn Read + Send>, TransferError> {
        let missing = |reason: String| TransferError::SourceMissing {
            url: loc.describe(),
            reason,
        };
        match loc {
            Location::File(p) => fs::File::open(p)
                .map(|f| Box::new(BufReader::new(f)) as Box<dyn Read + Send>)
                .map_err(|e| missing(e.to_string())),
            Location::Http(url) => ureq::get(url)
                .call()
                .map(|resp| Box::new(resp.into_reader()) as Box<dyn Read + Send>)
                .map_err(|e| missing(e.to_string())),
        }
    }

    /// Moves one file. Links when allowed and both ends share a filesystem,
    /// otherwise copies and verifies the destination checksum.
    pub fn transfer(&self, req: &TransferRequest) -> Result<TransferResult, TransferError> {
        let src = Location::parse(&req.src)?;
        let dst_path = match Location::parse(&req.dst)? {
            Location::File(p) => p,
            Location::Http(_) => {
                return Err(TransferError::DestinationUnwritable {
                    url: req.dst.clone(),
                    reason: "http destinations are read-only".into(),
                })
            }
        };
        let unwritable = |e: io::Error| TransferError::DestinationUnwritable {
            url: req.dst.clone(),
            reason: e.to_string(),
        };

        if let (true, Location::File(src_path)) = (req.link_ok, &src) {
            if !src_path.exists() {
                return Err(TransferError::SourceMissing {
                    url: req.src.clone(),
                    reason: "no such file".into(),
                });
            }
            let same_fs = self.probe.filesystem_id(src_path).is_some()
                && self.probe.filesystem_id(src_path) == self.probe.filesystem_id(&dst_path);
            if same_fs {
                if let Some(parent) = dst_path.parent() {
                    fs::create_dir_all(parent).map_err(unwritable)?;
                }
                if dst_path.symlink_metadata().is_ok() {
                    fs::remove_file(&dst_path).map_err(unwritable)?;
                }
                std::os::unix::fs::symlink(src_path, &dst_path).map_err(unwritable)?;
                return Ok(TransferResult {
                    bytes_moved: 0,
                    mode: TransferMode::Link,
                    checksum: None,
                });
            }
        }

        let mut reader = self.open(&src)?;
        let (bytes, digest) = write_atomically(&mut reader, &dst_path).map_err(unwritable)?;
        let written = sha256_file(&dst_path).map_err(unwritable)?;
        if written != digest {
            return Err(TransferError::ChecksumMismatch(req.dst.clone()));
        }
        if req.kind == TransferKind::ContainerImage && bytes != req.bytes {
            return Err(TransferError::SizeMismatch {
                url: req.src.clone(),
                expected: req.bytes,
                actual: bytes,
            });
        }
        Ok(TransferResult {
            bytes_moved: bytes,
            mode: TransferMode::Copy,
            checksum: Some(digest),
        })
    }

    /// Runs every request with at most `parallelism` in flight. Results keep
    /// the input order; one failure does not stop the others.
    pub fn batch_transfer(
        &self,
        reqs: &[TransferRequest],
        parallelism: usize,
    ) -> Result<Vec<Result<TransferResult, TransferError>>, TransferError> {
        if parallelism == 0 {
            return Err(TransferError::InvalidParallelism);
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<TransferResult, TransferError>>>> =
            reqs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..parallelism.min(reqs.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(req) = reqs.get(i) else { break };
                    *slots[i].lock().unwrap() = Some(self.transfer(req));
                });
            }
        });
        Ok(slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("every request ran"))
            .collect())
    }
}

/// Free-function form of [`TransferEngine::transfer`] with the default probe.
pub fn transfer(req: &TransferRequest) -> Result<TransferResult, TransferError> {
    TransferEngine::default().transfer(req)
}

/// Read access to a registry fixture served over `file://` or `http://`.
pub struct RegistryClient {
    base: Location,
    engine: TransferEngine,
    reads: AtomicUsize,
}

impl RegistryClient {
    pub fn new(base_url: &str) -> Result<Self, TransferError> {
        Ok(RegistryClient {
            base: Location::parse(base_url)?,
            engine: TransferEngine::default(),
            reads: AtomicUsize::new(0),
        })
    }

    /// Number of image downloads served so far.
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }

    fn entry_name(image: &ImageRef) -> String {
        format!("{}__{}", image.locator, image.tag_or_latest())
    }

    /// Opens an image for reading; counts as one registry read.
    pub fn open(&self, image: &ImageRef) -> Result<(Box<dyn Read + Send>, u64), TransferError> {
        let name = Self::entry_name(image);
        let miss = |_| TransferError::RegistryMiss(image.to_string());
        let mut size_text = String::new();
        self.engine
            .open(&self.base.join(&format!("{name}.size")))
            .map_err(miss)?
            .read_to_string(&mut size_text)
            .map_err(|e| TransferError::RegistryMiss(format!("{image}: {e}")))?;
        let size: u64 = size_text
            .trim()
            .parse()
            .map_err(|_| TransferError::RegistryMiss(format!("{image}: bad size sidecar")))?;
        let reader = self.engine.open(&self.base.join(&name)).map_err(miss)?;
        self.reads.fetch_add(1, Ordering::SeqCst);
        Ok((reader, size))
    }
}

/// Writes a registry fixture entry (image bytes plus size sidecar).
pub fn write_registry_fixture(root: &Path, image: &ImageRef, bytes: &[u8]) -> io::Result<PathBuf> {
    let path = root.join(RegistryClient::entry_name(image));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, bytes)?;
    fs::write(path.with_file_name(format!(
        "{}.size",
        path.file_name().unwrap().to_string_lossy()
    )), bytes.len().to_string())?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub image: String,
    pub location: String,
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

/// Exported images keyed by (image, location). Entries are published with a
/// directory rename and never rewritten.
#[derive(Debug, Clone)]
pub struct ImageCache {
    root: PathBuf,
}

impl ImageCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ImageCache { root: root.into() }
    }

    fn entry_dir(&self, image: &ImageRef, location: &str) -> PathBuf {
        self.root
            .join(location)
            .join(image.scheme.as_str())
            .join(image.flat_name())
    }

    pub fn lookup(&self, image: &ImageRef, location: &str) -> Option<CacheEntry> {
        let meta = fs::read(self.entry_dir(image, location).join("meta.json")).ok()?;
        serde_json::from_slice(&meta).ok()
    }

    /// Stores an image unless an entry already exists; returns the entry
    /// that ends up published.
    pub fn insert(
        &self,
        image: &ImageRef,
        location: &str,
        reader: &mut dyn Read,
    ) -> Result<CacheEntry, TransferError> {
        let cache_err = |e: io::Error| TransferError::Cache(e.to_string());
        let final_dir = self.entry_dir(image, location);
        let tmp_root = self.root.join(".tmp");
        fs::create_dir_all(&tmp_root).map_err(cache_err)?;
        let tmp_dir = tmp_root.join(format!(
            "{}-{}-{}",
            image.flat_name(),
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&tmp_dir).map_err(cache_err)?;
        let (bytes, sha256) =
            write_atomically(reader, &tmp_dir.join("image")).map_err(cache_err)?;
        let entry = CacheEntry {
            image: image.to_string(),
            location: location.to_string(),
            path: final_dir.join("image"),
            bytes,
            sha256,
        };
        fs::write(
            tmp_dir.join("meta.json"),
            serde_json::to_vec_pretty(&entry).expect("entry serializes"),
        )
        .map_err(cache_err)?;
        fs::create_dir_all(final_dir.parent().unwrap()).map_err(cache_err)?;
        if fs::rename(&tmp_dir, &final_dir).is_err() {
            // lost a publish race; keep the existing entry
            let _ = fs::remove_dir_all(&tmp_dir);
            return self
                .lookup(image, location)
                .ok_or_else(|| TransferError::Cache(format!("cannot publish {}", entry.image)));
        }
        Ok(entry)
    }
}

/// An exported image file placed at its destination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFile {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
    pub cache_hit: bool,
}

/// Exports hub images into image files, reading the registry at most once
/// per (image, location).
pub struct ImageExporter {
    registry: RegistryClient,
    cache: ImageCache,
    locks: Mutex<HashMap<(String, String), Arc<Mutex<()>>>>,
}

impl ImageExporter {
    pub fn new(registry: RegistryClient, cache: ImageCache) -> Self {
        ImageExporter {
            registry,
            cache,
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn registry(&self) -> &RegistryClient {
        &self.registry
    }

    pub fn cache(&self) -> &ImageCache {
        &self.cache
    }

    /// Exports `image` for staging `location`, then copies it to `dest` when
    /// given.
    pub fn export(
        &self,
        image: &ImageRef,
        location: &str,
        dest: Option<&Path>,
    ) -> Result<ImageFile, TransferError> {
        if !image.is_exportable() {
            return Err(TransferError::SchemeNotExportable(image.to_string()));
        }
        let key_lock = {
            let mut locks = self.locks.lock().unwrap();
            locks
                .entry((image.to_string(), location.to_string()))
                .or_default()
                .clone()
        };
        let _guard = key_lock.lock().unwrap();

        let (entry, cache_hit) = match self.cache.lookup(image, location) {
            Some(entry) => (entry, true),
            None => {
                let (mut reader, size) = self.registry.open(image)?;
                let entry = self.cache.insert(image, location, &mut reader)?;
                if entry.bytes != size {
                    return Err(TransferError::SizeMismatch {
                        url: image.to_string(),
                        expected: size,
                        actual: entry.bytes,
                    });
                }
                (entry, false)
            }
        };
        let path = match dest {
            Some(dest) => {
                let mut reader = fs::File::open(&entry.path)
                    .map_err(|e| TransferError::Cache(e.to_string()))?;
                let (_, digest) = write_atomically(&mut reader, dest).map_err(|e| {
                    TransferError::DestinationUnwritable {
                        url: dest.display().to_string(),
                        reason: e.to_string(),
                    }
                })?;
                if digest != entry.sha256 {
                    return Err(TransferError::ChecksumMismatch(dest.display().to_string()));
                }
                dest.to_path_buf()
            }
            None => entry.path.clone(),
        };
        Ok(ImageFile {
            path,
            bytes: entry.bytes,
            sha256: entry.sha256,
            cache_hit,
        })
    }
}
