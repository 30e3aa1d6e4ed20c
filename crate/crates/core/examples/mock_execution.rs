//! Runs the clustered Docker CASA workflow in mock mode, with and without
//! Docker load deduplication, then again with an injected failure.

use cwflow::fixtures::{casa_catalog, casa_plan_config, casa_sites, casa_workflow, CasaContainer};
use cwflow::launcher::{execute_local, plans_for, ExecMode, LauncherError, MockOptions, StepKind};
use cwflow::planner::{plan, PlanConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for dedup in [false, true] {
        let cfg = PlanConfig {
            docker_load_dedup: dedup,
            ..casa_plan_config(4)
        };
        let ewf = plan(&casa_workflow(), &casa_catalog(CasaContainer::Docker), &casa_sites(false), &cfg)?;
        let rep = execute_local(&ewf, &plans_for(&ewf)?, ExecMode::Mock, &MockOptions::default())?;
        println!("dedup={dedup}: {} jobs, {} image loads, {} cache hits", rep.jobs.len(), rep.image_loads, rep.image_cache_hits);
    }

    let ewf = plan(
        &casa_workflow(),
        &casa_catalog(CasaContainer::Docker),
        &casa_sites(false),
        &casa_plan_config(1),
    )?;
    let opts = MockOptions {
        fail_at: vec![("compute_regrid_03".into(), StepKind::StageIn)],
        ..MockOptions::default()
    };
    match execute_local(&ewf, &plans_for(&ewf)?, ExecMode::Mock, &opts) {
        Err(LauncherError::StepFailed { job, step, report, .. }) => {
            println!("{job} failed at {step}");
            print!("{}", report.table());
        }
        other => println!("unexpected outcome: {:?}", other.map(|r| r.succeeded())),
    }
    Ok(())
}
