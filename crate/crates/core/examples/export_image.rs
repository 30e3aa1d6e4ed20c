//! Exports an image from a directory-backed registry into a staging cache.
//! The second export for the same staging site is served from the cache.

use cwflow::catalog::parse_image_url;
use cwflow::transfer::{write_registry_fixture, ImageCache, ImageExporter, RegistryClient};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join(format!("cwflow-export-{}", std::process::id()));
    let image = parse_image_url("docker:///lab/tool:1.0")?;
    write_registry_fixture(&root.join("registry"), &image, &vec![7u8; 1 << 20])?;

    let registry = RegistryClient::new(&format!("file://{}", root.join("registry").display()))?;
    let exporter = ImageExporter::new(registry, ImageCache::new(root.join("cache")));
    for attempt in 1..=2 {
        let r = exporter.export(&image, "staging", None)?;
        println!(
            "export {attempt}: {} bytes at {} (cache hit: {}, sha256 {})",
            r.bytes,
            r.path.display(),
            r.cache_hit,
            &r.sha256[..12]
        );
    }
    println!("registry reads: {}", exporter.registry().reads());
    std::fs::remove_dir_all(&root)?;
    Ok(())
}
