//! Renders the wrapper script of the first compute job for each container
//! runtime.

use cwflow::fixtures::{casa_catalog, casa_plan_config, casa_sites, casa_workflow, CasaContainer};
use cwflow::launcher::{plans_for, render_wrapper};
use cwflow::planner::plan;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kinds = [CasaContainer::Docker, CasaContainer::Singularity, CasaContainer::Shifter];
    for kind in kinds {
        let ewf = plan(&casa_workflow(), &casa_catalog(kind), &casa_sites(false), &casa_plan_config(12))?;
        let plans = plans_for(&ewf)?;
        let (id, p) = plans.iter().next().expect("at least one compute job");
        println!("==== {} / {id}: {:?}", kind.name(), p.kinds());
        println!("{}", render_wrapper(p));
    }
    Ok(())
}
