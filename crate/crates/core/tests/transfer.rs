use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use cwflow::catalog::parse_image_url;
use cwflow::transfer::{
    write_registry_fixture, FilesystemProbe, ImageCache, ImageExporter, RegistryClient,
    TransferEngine, TransferError, TransferKind, TransferMode, TransferRequest,
};

/// Serves files under `root` over plain HTTP/1.0 until the test exits.
fn serve(root: PathBuf) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let root = root.clone();
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request = String::new();
                if reader.read_line(&mut request).is_err() {
                    return;
                }
                loop {
                    let mut header = String::new();
                    if reader.read_line(&mut header).unwrap_or(0) == 0 || header == "\r\n" {
                        break;
                    }
                }
                let path = request.split_whitespace().nth(1).unwrap_or("/");
                let file = root.join(path.trim_start_matches('/'));
                match std::fs::read(&file) {
                    Ok(body) => {
                        let _ = write!(
                            stream,
                            "HTTP/1.0 200 OK\r\nContent-Length: {}\r\n\r\n",
                            body.len()
                        );
                        let _ = stream.write_all(&body);
                    }
                    Err(_) => {
                        let _ = stream.write_all(b"HTTP/1.0 404 Not Found\r\nContent-Length: 0\r\n\r\n");
                    }
                }
            });
        }
    });
    format!("http://{addr}")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn payload(n: usize, salt: u8) -> Vec<u8> {
    (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt)).collect()
}

fn file_url(p: &Path) -> String {
    format!("file://{}", p.display())
}

fn req(src: String, dst: String, bytes: u64, kind: TransferKind, link_ok: bool) -> TransferRequest {
    TransferRequest {
        src,
        dst,
        bytes,
        kind,
        link_ok,
    }
}

/// Puts every path on filesystem 1, or, when `split`, paths of different
/// lengths on different filesystems.
struct FakeProbe {
    split: bool,
}

impl FilesystemProbe for FakeProbe {
    fn filesystem_id(&self, path: &Path) -> Option<u64> {
        if self.split {
            Some(path.as_os_str().len() as u64)
        } else {
            Some(1)
        }
    }
}

#[test]
fn http_download_is_verified() {
    let dir = tempfile::tempdir().unwrap();
    let body = payload(300_000, 3);
    std::fs::write(dir.path().join("data.bin"), &body).unwrap();
    let base = serve(dir.path().to_path_buf());
    let dst = dir.path().join("out/nested/data.bin");
    let res = TransferEngine::default()
        .transfer(&req(
            format!("{base}/data.bin"),
            file_url(&dst),
            body.len() as u64,
            TransferKind::Data,
            false,
        ))
        .unwrap();
    assert_eq!(res.mode, TransferMode::Copy);
    assert_eq!(res.bytes_moved, body.len() as u64);
    assert_eq!(res.checksum.as_deref(), Some(sha256_hex(&body).as_str()));
    assert_eq!(std::fs::read(&dst).unwrap(), body);
}

#[test]
fn http_missing_file_is_source_missing() {
    let dir = tempfile::tempdir().unwrap();
    let base = serve(dir.path().to_path_buf());
    let err = TransferEngine::default()
        .transfer(&req(
            format!("{base}/absent"),
            file_url(&dir.path().join("x")),
            0,
            TransferKind::Data,
            false,
        ))
        .unwrap_err();
    assert!(matches!(err, TransferError::SourceMissing { .. }), "{err}");
}

#[test]
fn links_only_within_one_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("image.tar");
    let body = payload(4096, 9);
    std::fs::write(&src, &body).unwrap();

    let same = TransferEngine::with_probe(FakeProbe { split: false });
    let linked = dir.path().join("job/image.tar");
    let res = same
        .transfer(&req(file_url(&src), file_url(&linked), 4096, TransferKind::ContainerImage, true))
        .unwrap();
    assert_eq!((res.mode, res.bytes_moved), (TransferMode::Link, 0));
    assert_eq!(std::fs::read_link(&linked).unwrap(), src);
    assert_eq!(std::fs::read(&linked).unwrap(), body);

    let split = TransferEngine::with_probe(FakeProbe { split: true });
    let copied = dir.path().join("other/copy-of-image.tar");
    let res = split
        .transfer(&req(file_url(&src), file_url(&copied), 4096, TransferKind::ContainerImage, true))
        .unwrap();
    assert_eq!((res.mode, res.bytes_moved), (TransferMode::Copy, 4096));
    assert!(!std::fs::symlink_metadata(&copied).unwrap().file_type().is_symlink());

    // linking is never attempted when not allowed
    let res = same
        .transfer(&req(file_url(&src), file_url(&dir.path().join("c3")), 4096, TransferKind::Data, false))
        .unwrap();
    assert_eq!(res.mode, TransferMode::Copy);
}

#[test]
fn image_size_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("img.sif");
    std::fs::write(&src, payload(1000, 1)).unwrap();
    let err = TransferEngine::default()
        .transfer(&req(
            file_url(&src),
            file_url(&dir.path().join("copy.sif")),
            999,
            TransferKind::ContainerImage,
            false,
        ))
        .unwrap_err();
    assert!(matches!(err, TransferError::SizeMismatch { expected: 999, actual: 1000, .. }));
}

#[test]
fn bad_urls_and_missing_files() {
    let engine = TransferEngine::default();
    let dir = tempfile::tempdir().unwrap();
    let dst = file_url(&dir.path().join("d"));
    for src in ["ftp://host/x", "file://relative/x", "gsiftp://a/b"] {
        let err = engine.transfer(&req(src.into(), dst.clone(), 0, TransferKind::Data, false)).unwrap_err();
        assert!(matches!(err, TransferError::UnsupportedUrl(_)), "{src}: {err}");
    }
    let err = engine
        .transfer(&req(file_url(&dir.path().join("nope")), dst.clone(), 0, TransferKind::Data, true))
        .unwrap_err();
    assert!(matches!(err, TransferError::SourceMissing { .. }));
}

#[test]
fn batch_transfer_moves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let base = serve(dir.path().to_path_buf());
    let mut reqs = Vec::new();
    let mut bodies = Vec::new();
    for i in 0..20u8 {
        let body = payload(10_000 + i as usize * 37, i);
        std::fs::write(dir.path().join(format!("in{i}")), &body).unwrap();
        let src = if i % 2 == 0 {
            format!("{base}/in{i}")
        } else {
            file_url(&dir.path().join(format!("in{i}")))
        };
        reqs.push(req(src, file_url(&dir.path().join(format!("out/{i}"))), 0, TransferKind::Data, false));
        bodies.push(body);
    }
    reqs.push(req(format!("{base}/missing"), file_url(&dir.path().join("out/m")), 0, TransferKind::Data, false));
    let results = TransferEngine::default().batch_transfer(&reqs, 4).unwrap();
    assert_eq!(results.len(), 21);
    for (i, body) in bodies.iter().enumerate() {
        let r = results[i].as_ref().unwrap();
        assert_eq!(r.checksum.as_deref(), Some(sha256_hex(body).as_str()));
        assert_eq!(&std::fs::read(dir.path().join(format!("out/{i}"))).unwrap(), body);
    }
    assert!(results[20].is_err());
    assert!(matches!(
        TransferEngine::default().batch_transfer(&reqs, 0),
        Err(TransferError::InvalidParallelism)
    ));
}

#[test]
fn exporter_reads_the_registry_once_per_location() {
    let registry_dir = tempfile::tempdir().unwrap();
    let cache_dir = tempfile::tempdir().unwrap();
    let image = parse_image_url("docker:///lab/tool:1.2").unwrap();
    let body = payload(250_000, 5);
    write_registry_fixture(registry_dir.path(), &image, &body).unwrap();
    let base = serve(registry_dir.path().to_path_buf());

    let exporter = Arc::new(ImageExporter::new(
        RegistryClient::new(&base).unwrap(),
        ImageCache::new(cache_dir.path()),
    ));
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let exporter = exporter.clone();
                let image = image.clone();
                s.spawn(move || exporter.export(&image, "staging-a", None).unwrap())
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(exporter.registry().reads(), 1);
    assert_eq!(results.iter().filter(|r| !r.cache_hit).count(), 1);
    for r in &results {
        assert_eq!(r.sha256, sha256_hex(&body));
        assert_eq!(r.bytes, body.len() as u64);
    }

    let dest = cache_dir.path().join("copies/tool.tar");
    let other = exporter.export(&image, "staging-b", Some(&dest)).unwrap();
    assert!(!other.cache_hit);
    assert_eq!(exporter.registry().reads(), 2);
    assert_eq!(std::fs::read(&dest).unwrap(), body);
    assert!(exporter.cache().lookup(&image, "staging-b").is_some());
}

#[test]
fn exporter_rejects_registry_only_images() {
    let cache_dir = tempfile::tempdir().unwrap();
    let exporter = ImageExporter::new(
        RegistryClient::new(&file_url(cache_dir.path())).unwrap(),
        ImageCache::new(cache_dir.path().join("cache")),
    );
    let shifter = parse_image_url("shifter:///lab/tool:1.2").unwrap();
    assert!(matches!(
        exporter.export(&shifter, "hpc", None),
        Err(TransferError::SchemeNotExportable(_))
    ));
    let absent = parse_image_url("docker:///lab/absent:0").unwrap();
    assert!(matches!(exporter.export(&absent, "hpc", None), Err(TransferError::RegistryMiss(_))));
}

#[test]
fn file_registry_works_too() {
    let dir = tempfile::tempdir().unwrap();
    let image = parse_image_url("shub://hub.example.org/lab/tool").unwrap();
    let body = payload(5000, 2);
    write_registry_fixture(&dir.path().join("reg"), &image, &body).unwrap();
    let exporter = ImageExporter::new(
        RegistryClient::new(&file_url(&dir.path().join("reg"))).unwrap(),
        ImageCache::new(dir.path().join("cache")),
    );
    let first = exporter.export(&image, "store", None).unwrap();
    let second = exporter.export(&image, "store", None).unwrap();
    assert!(!first.cache_hit && second.cache_hit);
    assert_eq!(std::fs::read(&second.path).unwrap(), body);
}
