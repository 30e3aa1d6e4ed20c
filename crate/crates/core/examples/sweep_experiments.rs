//! Loads the shipped scenario file and prints the sweep table.

use std::path::PathBuf;

use cwflow::simulator::{load_scenarios, sweep};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/casa-scenarios.yml");
    let scenarios = load_scenarios(&path)?;
    let table = sweep(&scenarios)?;
    print!("{}", table.to_tsv());
    for row in &table.rows {
        println!("{}: {} image bytes from submit", row.label, row.submit_container_bytes);
    }
    Ok(())
}
