//! Scenario files and parameter sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{simulate, SimConfig, SimError, SimResult, Topology};
use crate::catalog::Catalog;
use crate::launcher::{plans_for, WrapperPlan};
use crate::planner::{plan, load_sites, ExecutableWorkflow, JobKind, PlanConfig, Site};
use crate::transfer::TransferKind;
use crate::workflow::AbstractWorkflow;

/// One scenario as written on disk. Paths are relative to the file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub label: String,
    pub workflow: PathBuf,
    pub catalog: PathBuf,
    pub sites: PathBuf,
    pub topology: PathBuf,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub sim: SimConfig,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScenarioDoc {
    Many { scenarios: Vec<ScenarioFile> },
    One(ScenarioFile),
}

/// A planned workflow ready to simulate.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub label: String,
    pub ewf: ExecutableWorkflow,
    pub plans: BTreeMap<String, WrapperPlan>,
    pub topo: Topology,
    pub cfg: SimConfig,
}

fn input<E: std::fmt::Display>(e: E) -> SimError {
    SimError::InvalidInput(e.to_string())
}

impl Scenario {
    /// Plans `wf` with `plan_cfg`, forcing the placement in `cfg` if any.
    pub fn build(
        label: impl Into<String>,
        wf: &AbstractWorkflow,
        cat: &Catalog,
        sites: &[Site],
        plan_cfg: &PlanConfig,
        topo: Topology,
        cfg: SimConfig,
    ) -> Result<Self, SimError> {
        let mut plan_cfg = plan_cfg.clone();
        if let Some(p) = cfg.placement {
            plan_cfg.placement = p;
        }
        let ewf = plan(wf, cat, sites, &plan_cfg).map_err(input)?;
        let plans = plans_for(&ewf).map_err(input)?;
        Ok(Scenario {
            label: label.into(),
            ewf,
            plans,
            topo,
            cfg,
        })
    }

    pub fn from_file(file: &ScenarioFile, base: &Path) -> Result<Self, SimError> {
        let wf = AbstractWorkflow::from_path(base.join(&file.workflow)).map_err(input)?;
        let cat = Catalog::from_path(base.join(&file.catalog)).map_err(input)?;
        let sites = load_sites(base.join(&file.sites)).map_err(input)?;
        let topo = Topology::from_path(base.join(&file.topology))?;
        Self::build(
            file.label.clone(),
            &wf,
            &cat,
            &sites,
            &file.plan,
            topo,
            file.sim.clone(),
        )
    }

    pub fn run(&self) -> Result<SimResult, SimError> {
        simulate(&self.ewf, &self.plans, &self.topo, &self.cfg)
    }
}

/// Reads a scenario file holding either one scenario or `scenarios: [...]`.
pub fn load_scenarios(path: impl AsRef<Path>) -> Result<Vec<Scenario>, SimError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
    let doc: ScenarioDoc = serde_yaml::from_str(&text)
        .map_err(|e| SimError::InvalidInput(format!("{}: {e}", path.display())))?;
    let files = match doc {
        ScenarioDoc::Many { scenarios } => scenarios,
        ScenarioDoc::One(s) => vec![s],
    };
    let base = path.parent().unwrap_or(Path::new("."));
    files.iter().map(|f| Scenario::from_file(f, base)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub makespan_s: f64,
    pub compute_jobs: usize,
    pub transfers: BTreeMap<TransferKind, usize>,
    /// Container image bytes sent over the network by the submit node.
    pub submit_container_bytes: u64,
    pub image_loads: usize,
    pub result: SimResult,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, label: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "label\tmakespan_s\tcompute_jobs\tdata_transfers\timage_transfers\tsubmit_image_bytes\timage_loads\n",
        );
        for r in &self.rows {
            let count = |k| r.transfers.get(&k).copied().unwrap_or(0);
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.label,
                r.makespan_s,
                r.compute_jobs,
                count(TransferKind::Data),
                count(TransferKind::ContainerImage),
                r.submit_container_bytes,
                r.image_loads
            );
        }
        out
    }
}

/// Simulates every scenario (in parallel) and tabulates them by label.
pub fn sweep(scenarios: &[Scenario]) -> Result<SweepTable, SimError> {
    if scenarios.is_empty() {
        return Err(SimError::InvalidInput("sweep needs at least one scenario".into()));
    }
    let results: Vec<Result<SimResult, SimError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|s| scope.spawn(move || s.run()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let mut rows = Vec::with_capacity(scenarios.len());
    for (s, res) in scenarios.iter().zip(results) {
        let res = res?;
        rows.push(SweepRow {
            label: s.label.clone(),
            makespan_s: res.makespan_s,
            compute_jobs: s.ewf.jobs_of(JobKind::Compute).count(),
            transfers: res.transfer_count_by_kind.clone(),
            submit_container_bytes: res.container_egress_bytes(&s.topo.submit.name),
            image_loads: res.image_loads,
            result: res,
        });
    }
    rows.sort_by(|a, b| a.label.cmp(&b.label));
    Ok(SweepTable { rows })
}
