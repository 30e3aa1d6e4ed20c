//! Plans the CASA workflow with Docker at several cluster sizes and shows
//! the job mix the planner produces.

use cwflow::fixtures::{casa_catalog, casa_plan_config, casa_sites, casa_workflow, CasaContainer};
use cwflow::planner::plan;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let wf = casa_workflow();
    for k in [1, 4, 12] {
        let ewf = plan(
            &wf,
            &casa_catalog(CasaContainer::Docker),
            &casa_sites(false),
            &casa_plan_config(k),
        )?;
        let counts: Vec<String> = ewf
            .count_by_kind()
            .into_iter()
            .map(|(kind, n)| format!("{kind:?}={n}"))
            .collect();
        println!("k={k}: {} jobs ({})", ewf.jobs.len(), counts.join(", "));
    }
    Ok(())
}
