//! The `cwflow` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use crate::catalog::Catalog;
use crate::launcher::{
    execute_local, plans_for, render_wrapper, ExecMode, LauncherError, MockOptions, StepKind,
};
use crate::planner::{
    load_sites, parse_switch, plan, ExecutableWorkflow, PlacementOverride, PlanConfig,
};
use crate::simulator::{
    load_scenarios, report, simulate, sweep, write_sweep_table, SimConfig, SimError, SimResult,
    Topology,
};
use crate::workflow::AbstractWorkflow;

#[derive(Debug, Parser)]
#[command(name = "cwflow", version, about = "Plan, wrap, run and simulate container workflows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan an abstract workflow into an executable workflow (JSON).
    Plan(PlanArgs),
    /// Render one wrapper script per compute job.
    Wrappers(WrapperArgs),
    /// Execute a planned workflow on this machine.
    Run(RunArgs),
    /// Simulate a planned workflow on a topology and write report files.
    Simulate(SimulateArgs),
    /// Rewrite report files from a saved simulation result.
    Report(ReportArgs),
    /// Simulate every scenario in a scenario file and tabulate them.
    Sweep(SweepArgs),
}

fn switch(s: &str) -> Result<bool, String> {
    parse_switch(s)
}

#[derive(Debug, Clone, Args)]
pub struct WrapperFlags {
    /// Stage data from inside the container.
    #[arg(long, value_name = "on|off", value_parser = switch)]
    pub staging_inside: Option<bool>,
    /// Load each Docker image once per node.
    #[arg(long, value_name = "on|off", value_parser = switch)]
    pub dedup_load: Option<bool>,
}

impl WrapperFlags {
    fn apply(&self, cfg: &mut PlanConfig) {
        if let Some(v) = self.staging_inside {
            cfg.staging_inside_container = v;
        }
        if let Some(v) = self.dedup_load {
            cfg.docker_load_dedup = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub workflow: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub sites: PathBuf,
    /// Plan configuration file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub cluster_size: Option<usize>,
    #[arg(long, value_name = "auto|copy|symlink|bypass")]
    pub placement: Option<PlacementOverride>,
    #[arg(long, value_name = "on|off", value_parser = switch)]
    pub cleanup: Option<bool>,
    #[arg(long)]
    pub output_site: Option<String>,
    #[command(flatten)]
    pub wrapper: WrapperFlags,
    /// Output directory; receives executable.json.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WrapperArgs {
    /// Planned workflow (executable.json).
    pub executable: PathBuf,
    #[command(flatten)]
    pub wrapper: WrapperFlags,
    #[arg(long, default_value = "wrappers")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub executable: PathBuf,
    #[arg(long, default_value = "mock")]
    pub mode: ExecMode,
    /// Force a step to fail in mock mode, e.g. compute_a:StageIn.
    #[arg(long, value_name = "JOB:STEP")]
    pub inject_failure: Vec<String>,
    #[command(flatten)]
    pub wrapper: WrapperFlags,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub executable: PathBuf,
    #[arg(long)]
    pub topology: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the load deduplication recorded in the plan.
    #[arg(long, value_name = "on|off", value_parser = switch)]
    pub dedup_load: Option<bool>,
    #[arg(long, value_name = "on|off", value_parser = switch)]
    pub fair_share: Option<bool>,
    #[arg(long, default_value = "sim")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// result.json written by `simulate`.
    pub result: PathBuf,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub scenarios: PathBuf,
    /// Replaces the seed of every scenario.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
}

/// Failures split by exit code: bad input (1) or failed execution (2).
#[derive(Debug)]
pub enum CliError {
    Input(anyhow::Error),
    Execution(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Execution(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(e) | CliError::Execution(e) => write!(f, "{e:#}"),
        }
    }
}

fn input(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Input(e.into())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))
            .map_err(CliError::Execution)?;
    }
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::Execution)
}

fn load_executable(path: &Path) -> Result<ExecutableWorkflow, CliError> {
    ExecutableWorkflow::from_path(path).map_err(input)
}

/// Parses `args` and runs the command. Help and version requests print
/// and succeed.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Plan(a) => cmd_plan(&a),
        Command::Wrappers(a) => cmd_wrappers(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

pub fn cmd_plan(a: &PlanArgs) -> Result<(), CliError> {
    let wf = AbstractWorkflow::from_path(&a.workflow).map_err(input)?;
    let cat = Catalog::from_path(&a.catalog).map_err(input)?;
    let sites = load_sites(&a.sites).map_err(input)?;
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(CliError::Input)?;
            serde_yaml::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(CliError::Input)?
        }
        None => PlanConfig::default(),
    };
    if let Some(k) = a.cluster_size {
        cfg.cluster_size = k;
    }
    if let Some(p) = a.placement {
        cfg.placement = p;
    }
    if let Some(c) = a.cleanup {
        cfg.cleanup = c;
    }
    if let Some(s) = &a.output_site {
        cfg.output_site = s.clone();
    }
    a.wrapper.apply(&mut cfg);
    let ewf = plan(&wf, &cat, &sites, &cfg).map_err(input)?;
    let path = a.out.join("executable.json");
    write_file(&path, &ewf.to_json())?;
    println!("planned {} jobs into {}", ewf.jobs.len(), path.display());
    for (kind, n) in ewf.count_by_kind() {
        println!("  {kind}: {n}");
    }
    Ok(())
}

fn plans_with(
    ewf: &mut ExecutableWorkflow,
    flags: &WrapperFlags,
) -> Result<BTreeMap<String, crate::launcher::WrapperPlan>, CliError> {
    flags.apply(&mut ewf.config);
    plans_for(ewf).map_err(input)
}

pub fn cmd_wrappers(a: &WrapperArgs) -> Result<(), CliError> {
    let mut ewf = load_executable(&a.executable)?;
    let plans = plans_with(&mut ewf, &a.wrapper)?;
    for (id, plan) in &plans {
        write_file(&a.out.join(format!("{id}.sh")), &render_wrapper(plan))?;
    }
    println!("wrote {} wrappers to {}", plans.len(), a.out.display());
    Ok(())
}

fn parse_injection(spec: &str) -> Result<(String, StepKind), CliError> {
    let (job, step) = spec
        .rsplit_once(':')
        .ok_or_else(|| CliError::Input(anyhow!("--inject-failure expects JOB:STEP, got `{spec}`")))?;
    let step: StepKind = step.parse().map_err(|e: String| CliError::Input(anyhow!(e)))?;
    Ok((job.to_string(), step))
}

pub fn cmd_run(a: &RunArgs) -> Result<(), CliError> {
    let mut ewf = load_executable(&a.executable)?;
    let plans = plans_with(&mut ewf, &a.wrapper)?;
    let opts = MockOptions {
        fail_at: a
            .inject_failure
            .iter()
            .map(|s| parse_injection(s))
            .collect::<Result<_, _>>()?,
        ..MockOptions::default()
    };
    if let Some((job, _)) = opts.fail_at.iter().find(|(j, _)| ewf.job(j).is_none()) {
        return Err(CliError::Input(anyhow!("--inject-failure names unknown job `{job}`")));
    }
    let path = a.out.join("execution.json");
    match execute_local(&ewf, &plans, a.mode, &opts) {
        Ok(rep) => {
            print!("{}", rep.table());
            write_file(&path, &serde_json::to_string_pretty(&rep).expect("report serializes"))?;
            println!(
                "{} jobs succeeded; {} image loads, {} cache hits",
                rep.jobs.len(),
                rep.image_loads,
                rep.image_cache_hits
            );
            Ok(())
        }
        Err(LauncherError::StepFailed {
            job,
            step,
            reason,
            report,
        }) => {
            print!("{}", report.table());
            write_file(&path, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
            Err(CliError::Execution(anyhow!(
                "job `{job}` failed at step {step}: {reason}"
            )))
        }
        Err(e) => Err(CliError::Execution(e.into())),
    }
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::InvalidTopology(_) | SimError::InvalidInput(_) => CliError::Input(e.into()),
        _ => CliError::Execution(e.into()),
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let ewf = load_executable(&a.executable)?;
    let plans = plans_for(&ewf).map_err(input)?;
    let topo = Topology::from_path(&a.topology).map_err(input)?;
    let mut cfg = SimConfig {
        seed: a.seed,
        docker_load_dedup: a.dedup_load,
        ..SimConfig::default()
    };
    if let Some(f) = a.fair_share {
        cfg.fair_share = f;
    }
    let res = simulate(&ewf, &plans, &topo, &cfg).map_err(sim_error)?;
    write_file(
        &a.out.join("result.json"),
        &serde_json::to_string(&res).expect("result serializes"),
    )?;
    report(&res, &a.out).map_err(sim_error)?;
    println!("makespan_s\t{}", res.makespan_s);
    println!("report written to {}", a.out.display());
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.result)
        .with_context(|| format!("reading {}", a.result.display()))
        .map_err(CliError::Input)?;
    let res: SimResult = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", a.result.display()))
        .map_err(CliError::Input)?;
    let files = report(&res, &a.out).map_err(sim_error)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let mut scenarios = load_scenarios(&a.scenarios).map_err(sim_error)?;
    if let Some(seed) = a.seed {
        for s in &mut scenarios {
            s.cfg.seed = seed;
        }
    }
    let table = sweep(&scenarios).map_err(sim_error)?;
    write_sweep_table(&table, &a.out.join("sweep.tsv")).map_err(sim_error)?;
    print!("{}", table.to_tsv());
    Ok(())
}
