//! Simulates the CASA workflow with no container, Docker and Singularity,
//! unclustered and clustered by 12, and prints makespans and submit-node
//! saturation.

use cwflow::fixtures::{casa_scenario, CasaContainer, SUBMIT_BANDWIDTH};
use cwflow::simulator::sweep;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut scenarios = Vec::new();
    for kind in [CasaContainer::None, CasaContainer::Docker, CasaContainer::Singularity] {
        for k in [1, 12] {
            scenarios.push(casa_scenario(kind, k, false)?);
        }
    }
    let table = sweep(&scenarios)?;
    println!("label\tmakespan_s\tjobs\tsaturated_s\tmean_io_wait_ms");
    for row in &table.rows {
        let workers = cwflow::fixtures::worker_names();
        println!(
            "{}\t{:.1}\t{}\t{:.0}\t{:.1}",
            row.label,
            row.makespan_s,
            row.compute_jobs,
            row.result
                .longest_egress_window("submit", 0.95 * SUBMIT_BANDWIDTH),
            row.result.mean_io_wait_ms(workers.iter().map(String::as_str)),
        );
    }
    Ok(())
}
