//! Parses the reference catalog listing and prints what it describes.

use cwflow::catalog::parse_catalog;
use cwflow::fixtures::CATALOG_LISTING;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cat = parse_catalog(CATALOG_LISTING)?;
    for t in &cat.transformations {
        println!(
            "transformation {} at site {} -> {} (container {})",
            t.name,
            t.site,
            t.pfn,
            t.container.as_deref().unwrap_or("none")
        );
    }
    for c in cat.containers.values() {
        println!("container {}: {} ({})", c.name, c.image, c.runtime);
        for m in &c.mounts {
            println!("  mount {m}");
        }
        for (k, v) in &c.profiles {
            println!("  env {k}={v}");
        }
    }
    Ok(())
}
