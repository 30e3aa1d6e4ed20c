//! Turns an abstract workflow into an executable one: binds tasks to sites,
//! picks how each container image reaches the workers, clusters compute jobs
//! and adds the data management jobs (container fetch, stage-in, stage-out,
//! cleanup).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::catalog::{
    resolve_transformation, Catalog, CatalogError, ContainerDef, EnvMap, ImageScheme,
    InstallType, Runtime,
};
use crate::dag::{Dag, DagIssue};
use crate::transfer::TransferKind;
use crate::workflow::{AbstractWorkflow, WorkflowError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("task `{task}`: transformation `{transformation}` is not available at any site")]
    UnresolvableTransformation {
        task: String,
        transformation: String,
    },
    #[error("container `{container}` needs {runtime}, which site `{site}` does not provide")]
    RuntimeUnavailable {
        container: String,
        runtime: Runtime,
        site: String,
    },
    #[error("container `{container}` at site `{site}`: {reason}")]
    InconsistentPlacement {
        container: String,
        site: String,
        reason: String,
    },
    #[error("unknown site `{0}`")]
    UnknownSite(String),
    #[error("invalid site `{site}`: {reason}")]
    InvalidSite { site: String, reason: String },
    #[error("invalid plan configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid executable workflow: {0}")]
    InvalidExecutable(String),
    #[error("{0}")]
    Io(String),
}

impl From<DagIssue> for PlanError {
    fn from(issue: DagIssue) -> Self {
        PlanError::InvalidExecutable(match issue {
            DagIssue::DuplicateNode(id) => format!("duplicate job id `{id}`"),
            DagIssue::DanglingEdge { from, to } => format!("edge {from} -> {to} is dangling"),
            DagIssue::Cycle(c) => format!("cycle {}", c.join(" -> ")),
        })
    }
}

/// An execution or storage site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Site {
    pub name: String,
    #[serde(default)]
    pub shared_fs: bool,
    /// Where this site's jobs pull inputs from and push outputs to.
    pub staging_site: String,
    #[serde(default = "one")]
    pub worker_count: u32,
    #[serde(default = "one")]
    pub slots_per_worker: u32,
    #[serde(default)]
    pub runtimes_available: BTreeSet<Runtime>,
    /// Host paths with pre-deployed content, e.g. CVMFS mounts.
    #[serde(default)]
    pub cvmfs_like_paths: Vec<String>,
}

fn one() -> u32 {
    1
}

impl Site {
    /// A storage-only site that stages for itself.
    pub fn storage(name: impl Into<String>) -> Self {
        let name = name.into();
        Site {
            staging_site: name.clone(),
            name,
            shared_fs: false,
            worker_count: 1,
            slots_per_worker: 1,
            runtimes_available: BTreeSet::new(),
            cvmfs_like_paths: Vec::new(),
        }
    }

    fn exposes(&self, path: &str) -> bool {
        self.cvmfs_like_paths.iter().any(|root| {
            let root = root.trim_end_matches('/');
            path == root || path.starts_with(&format!("{root}/"))
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SitesDoc {
    Wrapped { sites: Vec<Site> },
    Bare(Vec<Site>),
}

/// Reads a sites file: either a bare list or `sites: [...]`.
pub fn parse_sites(text: &str) -> Result<Vec<Site>, PlanError> {
    let doc: SitesDoc =
        serde_yaml::from_str(text).map_err(|e| PlanError::Io(format!("sites: {e}")))?;
    let sites = match doc {
        SitesDoc::Wrapped { sites } | SitesDoc::Bare(sites) => sites,
    };
    validate_sites(&sites)?;
    Ok(sites)
}

pub fn load_sites(path: impl AsRef<Path>) -> Result<Vec<Site>, PlanError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| PlanError::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_sites(&text)
}

pub fn validate_sites(sites: &[Site]) -> Result<(), PlanError> {
    let names: BTreeSet<&str> = sites.iter().map(|s| s.name.as_str()).collect();
    if names.len() != sites.len() {
        return Err(PlanError::InvalidConfig("duplicate site names".into()));
    }
    for s in sites {
        if !names.contains(s.staging_site.as_str()) {
            return Err(PlanError::InvalidSite {
                site: s.name.clone(),
                reason: format!("staging site `{}` is not defined", s.staging_site),
            });
        }
        if s.worker_count == 0 || s.slots_per_worker == 0 {
            return Err(PlanError::InvalidSite {
                site: s.name.clone(),
                reason: "worker_count and slots_per_worker must be at least 1".into(),
            });
        }
    }
    Ok(())
}

/// How a container image reaches the worker that runs a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PlacementMode {
    /// Image file staged to the staging site once, copied into every job dir.
    StageCopy,
    /// Image file placed once on the shared filesystem, symlinked by jobs.
    SharedFsSymlink,
    /// Image already present on the compute site; no staging at all.
    Bypass,
    /// Image lives in the site's Shifter registry.
    ShifterLocal,
}

impl PlacementMode {
    /// Placements that need a container fetch job.
    pub fn is_transferable(self) -> bool {
        matches!(self, PlacementMode::StageCopy | PlacementMode::SharedFsSymlink)
    }
}

/// User override of the automatic placement choice.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementOverride {
    #[default]
    Auto,
    Copy,
    Symlink,
    Bypass,
}

impl FromStr for PlacementOverride {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(PlacementOverride::Auto),
            "copy" => Ok(PlacementOverride::Copy),
            "symlink" => Ok(PlacementOverride::Symlink),
            "bypass" => Ok(PlacementOverride::Bypass),
            _ => Err(format!("unknown placement `{s}` (auto|copy|symlink|bypass)")),
        }
    }
}

/// Accepts `on`/`off` as well as YAML booleans.
pub fn deserialize_switch<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Switch {
        Bool(bool),
        Text(String),
    }
    match Switch::deserialize(d)? {
        Switch::Bool(b) => Ok(b),
        Switch::Text(t) => parse_switch(&t).map_err(serde::de::Error::custom),
    }
}

pub fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        _ => Err(format!("expected on|off, got `{s}`")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub cluster_size: usize,
    /// Site that receives workflow outputs.
    pub output_site: String,
    /// Site holding raw workflow inputs and the image registry.
    pub input_site: String,
    #[serde(deserialize_with = "deserialize_switch")]
    pub cleanup: bool,
    /// Stage data from inside the container (newer wrapper behaviour).
    #[serde(deserialize_with = "deserialize_switch")]
    pub staging_inside_container: bool,
    #[serde(deserialize_with = "deserialize_switch")]
    pub docker_load_dedup: bool,
    pub placement: PlacementOverride,
    /// Worker-side parent of job directories.
    pub scratch_root: String,
    /// Parent of per-site staging and output areas.
    pub storage_root: String,
    /// Opaque credential variables injected into every job environment.
    pub credentials: EnvMap,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            cluster_size: 1,
            output_site: "local".into(),
            input_site: "local".into(),
            cleanup: true,
            staging_inside_container: true,
            docker_load_dedup: true,
            placement: PlacementOverride::Auto,
            scratch_root: "/var/tmp/cwflow/scratch".into(),
            storage_root: "/var/tmp/cwflow/storage".into(),
            credentials: EnvMap::new(),
        }
    }
}

impl PlanConfig {
    pub fn staging_url(&self, site: &str, file: &str) -> String {
        format!("file://{}/{site}/staging/{file}", self.storage_root)
    }

    pub fn output_url(&self, site: &str, file: &str) -> String {
        format!("file://{}/{site}/outputs/{file}", self.storage_root)
    }

    pub fn image_url(&self, site: &str, container: &str, runtime: Runtime) -> String {
        let ext = match runtime {
            Runtime::Docker => "tar",
            _ => "sif",
        };
        format!(
            "file://{}/{site}/images/{container}.{ext}",
            self.storage_root
        )
    }

    pub fn job_dir(&self, job_id: &str) -> String {
        format!("{}/{job_id}", self.scratch_root)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JobKind {
    StageIn,
    ContainerFetch,
    Compute,
    StageOut,
    Cleanup,
}

impl fmt::Display for JobKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            JobKind::ContainerFetch => "container-fetch",
            JobKind::StageIn => "stage-in",
            JobKind::Compute => "compute",
            JobKind::StageOut => "stage-out",
            JobKind::Cleanup => "cleanup",
        };
        f.write_str(s)
    }
}

/// One planned file movement between two sites.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferItem {
    /// Logical file name (or container name for images).
    pub name: String,
    pub src_url: String,
    pub dst_url: String,
    pub bytes: u64,
    pub src_site: String,
    pub dst_site: String,
    pub kind: TransferKind,
    /// Satisfied by a symlink; moves no bytes.
    #[serde(default)]
    pub link: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub name: String,
    pub bytes: u64,
}

/// A task as bound into a compute job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInvocation {
    pub task_id: String,
    pub transformation: String,
    pub executable: String,
    /// The executable is staged in with the job's inputs.
    #[serde(default)]
    pub stage_executable: bool,
    pub runtime_s: f64,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    #[serde(default)]
    pub env: EnvMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputePayload {
    /// Member tasks in execution order; more than one when clustered.
    pub tasks: Vec<TaskInvocation>,
    pub container: Option<String>,
    pub placement: Option<PlacementMode>,
    pub staging_site: String,
    pub shared_fs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPayload {
    pub items: Vec<TransferItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchPayload {
    pub container: String,
    pub image: String,
    /// Pull from a hub and export to an image file before placing it.
    pub export: bool,
    pub items: Vec<TransferItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanupPayload {
    pub urls: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum JobPayload {
    StageIn(TransferPayload),
    ContainerFetch(FetchPayload),
    Compute(ComputePayload),
    StageOut(TransferPayload),
    Cleanup(CleanupPayload),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub site: String,
    #[serde(flatten)]
    pub payload: JobPayload,
}

impl Job {
    pub fn kind(&self) -> JobKind {
        match &self.payload {
            JobPayload::StageIn(_) => JobKind::StageIn,
            JobPayload::ContainerFetch(_) => JobKind::ContainerFetch,
            JobPayload::Compute(_) => JobKind::Compute,
            JobPayload::StageOut(_) => JobKind::StageOut,
            JobPayload::Cleanup(_) => JobKind::Cleanup,
        }
    }

    pub fn compute(&self) -> Option<&ComputePayload> {
        match &self.payload {
            JobPayload::Compute(c) => Some(c),
            _ => None,
        }
    }

    /// Transfers carried by a data management job.
    pub fn transfer_items(&self) -> &[TransferItem] {
        match &self.payload {
            JobPayload::StageIn(p) | JobPayload::StageOut(p) => &p.items,
            JobPayload::ContainerFetch(p) => &p.items,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutableWorkflow {
    pub name: String,
    pub jobs: Vec<Job>,
    pub edges: Vec<(String, String)>,
    /// Definitions of every container a job uses.
    pub containers: BTreeMap<String, ContainerDef>,
    pub sites: Vec<Site>,
    pub config: PlanConfig,
}

impl ExecutableWorkflow {
    pub fn empty(name: impl Into<String>, sites: Vec<Site>, config: PlanConfig) -> Self {
        ExecutableWorkflow {
            name: name.into(),
            jobs: Vec::new(),
            edges: Vec::new(),
            containers: BTreeMap::new(),
            sites,
            config,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        let ewf: ExecutableWorkflow = serde_json::from_str(text)
            .map_err(|e| PlanError::Io(format!("executable workflow: {e}")))?;
        ewf.validate()?;
        Ok(ewf)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, PlanError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PlanError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("executable workflow serializes")
    }

    pub fn job(&self, id: &str) -> Option<&Job> {
        self.jobs.iter().find(|j| j.id == id)
    }

    pub fn site(&self, name: &str) -> Option<&Site> {
        self.sites.iter().find(|s| s.name == name)
    }

    pub fn jobs_of(&self, kind: JobKind) -> impl Iterator<Item = &Job> {
        self.jobs.iter().filter(move |j| j.kind() == kind)
    }

    pub fn count_by_kind(&self) -> BTreeMap<JobKind, usize> {
        let mut counts = BTreeMap::new();
        for j in &self.jobs {
            *counts.entry(j.kind()).or_insert(0) += 1;
        }
        counts
    }

    pub fn dag(&self) -> Result<Dag, PlanError> {
        Ok(Dag::build(
            self.jobs.iter().map(|j| j.id.as_str()),
            self.edges.iter().map(|(a, b)| (a.as_str(), b.as_str())),
        )?)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let dag = self.dag()?;
        dag.topological_order()?;
        let mut tasks = BTreeSet::new();
        for job in &self.jobs {
            if let Some(c) = job.compute() {
                if c.tasks.is_empty() {
                    return Err(PlanError::InvalidExecutable(format!(
                        "compute job `{}` has no tasks",
                        job.id
                    )));
                }
                for t in &c.tasks {
                    if !tasks.insert(t.task_id.as_str()) {
                        return Err(PlanError::InvalidExecutable(format!(
                            "task `{}` appears in more than one job",
                            t.task_id
                        )));
                    }
                }
                if let Some(name) = &c.container {
                    if !self.containers.contains_key(name) {
                        return Err(PlanError::InvalidExecutable(format!(
                            "job `{}` uses undefined container `{name}`",
                            job.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Task ids in an order that runs jobs topologically and each job's
    /// tasks in their stored order.
    pub fn flatten_tasks(&self) -> Result<Vec<String>, PlanError> {
        let dag = self.dag()?;
        let mut out = Vec::new();
        for i in dag.level_order()? {
            if let Some(c) = self.jobs[i].compute() {
                out.extend(c.tasks.iter().map(|t| t.task_id.clone()));
            }
        }
        Ok(out)
    }

    fn sort_jobs_by_kind(&mut self) {
        self.jobs.sort_by_key(|j| j.kind());
        self.edges.sort();
        self.edges.dedup();
    }
}

/// Chooses the image placement for container `c` on site `s`.
pub fn decide_placement(c: &ContainerDef, s: &Site) -> Result<PlacementMode, PlanError> {
    decide_placement_with(c, s, PlacementOverride::Auto)
}

pub fn decide_placement_with(
    c: &ContainerDef,
    s: &Site,
    over: PlacementOverride,
) -> Result<PlacementMode, PlanError> {
    if !s.runtimes_available.contains(&c.runtime) {
        return Err(PlanError::RuntimeUnavailable {
            container: c.name.clone(),
            runtime: c.runtime,
            site: s.name.clone(),
        });
    }
    if c.runtime == Runtime::Shifter {
        return Ok(PlacementMode::ShifterLocal);
    }
    let bypassable =
        c.site_local && c.image.scheme == ImageScheme::File && s.exposes(&c.image.locator);
    let inconsistent = |reason: &str| PlanError::InconsistentPlacement {
        container: c.name.clone(),
        site: s.name.clone(),
        reason: reason.to_string(),
    };
    match over {
        PlacementOverride::Auto => Ok(if bypassable {
            PlacementMode::Bypass
        } else if s.shared_fs {
            PlacementMode::SharedFsSymlink
        } else {
            PlacementMode::StageCopy
        }),
        PlacementOverride::Copy => Ok(PlacementMode::StageCopy),
        PlacementOverride::Symlink if s.shared_fs => Ok(PlacementMode::SharedFsSymlink),
        PlacementOverride::Symlink => Err(inconsistent("site has no shared filesystem")),
        PlacementOverride::Bypass if bypassable => Ok(PlacementMode::Bypass),
        PlacementOverride::Bypass => Err(inconsistent(
            "image is not site-local under one of the site's pre-deployed paths",
        )),
    }
}

fn compute_job_id(task: &str) -> String {
    format!("compute_{task}")
}

/// Plans `wf` for `sites`. Compute jobs are clustered before the data
/// management jobs are added, so one fetch serves a whole cluster.
pub fn plan(
    wf: &AbstractWorkflow,
    cat: &Catalog,
    sites: &[Site],
    cfg: &PlanConfig,
) -> Result<ExecutableWorkflow, PlanError> {
    wf.validate()?;
    validate_sites(sites)?;
    if cfg.cluster_size == 0 {
        return Err(PlanError::InvalidConfig("cluster_size must be at least 1".into()));
    }
    for site in [&cfg.output_site, &cfg.input_site] {
        if !sites.iter().any(|s| &s.name == site) {
            return Err(PlanError::UnknownSite(site.clone()));
        }
    }

    let mut ewf = ExecutableWorkflow::empty(wf.name.clone(), sites.to_vec(), cfg.clone());
    let mut round_robin = 0usize;
    for task_id in wf.topological_order()? {
        let task = wf.task(&task_id).expect("ordered ids come from the workflow");
        let mut eligible = Vec::new();
        let mut runtime_gap = None;
        for site in sites {
            let Ok((_, cdef)) = resolve_transformation(cat, &task.transformation, &site.name)
            else {
                continue;
            };
            match cdef {
                Some(c) if !site.runtimes_available.contains(&c.runtime) => {
                    runtime_gap.get_or_insert(PlanError::RuntimeUnavailable {
                        container: c.name.clone(),
                        runtime: c.runtime,
                        site: site.name.clone(),
                    });
                }
                _ => eligible.push(site),
            }
        }
        if eligible.is_empty() {
            return Err(runtime_gap.unwrap_or_else(|| PlanError::UnresolvableTransformation {
                task: task.id.clone(),
                transformation: task.transformation.clone(),
            }));
        }
        let site = eligible[round_robin % eligible.len()];
        round_robin += 1;

        let (entry, cdef) = resolve_transformation(cat, &task.transformation, &site.name)?;
        let placement = cdef
            .map(|c| decide_placement_with(c, site, cfg.placement))
            .transpose()?;
        if let Some(c) = cdef {
            ewf.containers.insert(c.name.clone(), c.clone());
        }
        let file_ref = |name: &String| FileRef {
            name: name.clone(),
            bytes: wf.file(name).size_bytes,
        };
        let invocation = TaskInvocation {
            task_id: task.id.clone(),
            transformation: task.transformation.clone(),
            executable: entry.pfn.clone(),
            stage_executable: entry.install_type == InstallType::Stageable,
            runtime_s: task.expected_runtime_s,
            inputs: task.inputs.iter().map(file_ref).collect(),
            outputs: task.outputs.iter().map(file_ref).collect(),
            env: entry.profiles.clone(),
        };
        ewf.jobs.push(Job {
            id: compute_job_id(&task.id),
            site: site.name.clone(),
            payload: JobPayload::Compute(ComputePayload {
                tasks: vec![invocation],
                container: cdef.map(|c| c.name.clone()),
                placement,
                staging_site: site.staging_site.clone(),
                shared_fs: site.shared_fs,
            }),
        });
    }
    ewf.edges = wf
        .dependency_edges()
        .into_iter()
        .map(|(a, b)| (compute_job_id(&a), compute_job_id(&b)))
        .collect();

    let mut ewf = cluster_jobs(&ewf, cfg.cluster_size)?;
    add_stage_in_jobs(&mut ewf, wf);
    let mut ewf = insert_container_fetch_jobs(&ewf, cat, sites)?;
    add_stage_out_jobs(&mut ewf, wf);
    if cfg.cleanup {
        add_cleanup_jobs(&mut ewf);
    }
    ewf.sort_jobs_by_kind();
    ewf.validate()?;
    Ok(ewf)
}

/// Staging sites in first-use order.
fn staging_sites(ewf: &ExecutableWorkflow) -> Vec<String> {
    let mut seen = Vec::new();
    for job in &ewf.jobs {
        if let Some(c) = job.compute() {
            if !seen.contains(&c.staging_site) {
                seen.push(c.staging_site.clone());
            }
        }
    }
    seen
}

/// One stage-in job per staging site moving raw workflow inputs (and
/// stageable executables) from the input site.
fn add_stage_in_jobs(ewf: &mut ExecutableWorkflow, wf: &AbstractWorkflow) {
    let raw_inputs = wf.input_files();
    let cfg = ewf.config.clone();
    for staging in staging_sites(ewf) {
        let mut items: Vec<TransferItem> = Vec::new();
        let mut consumers = Vec::new();
        let mut seen = BTreeSet::new();
        for job in &ewf.jobs {
            let Some(c) = job.compute() else { continue };
            if c.staging_site != staging {
                continue;
            }
            let mut uses_staged = false;
            for t in &c.tasks {
                for f in t.inputs.iter().filter(|f| raw_inputs.contains(f.name.as_str())) {
                    uses_staged = true;
                    if seen.insert(f.name.clone()) {
                        let meta = wf.file(&f.name);
                        items.push(TransferItem {
                            name: f.name.clone(),
                            src_url: meta.initial_location.unwrap_or_default(),
                            dst_url: cfg.staging_url(&staging, &f.name),
                            bytes: f.bytes,
                            src_site: cfg.input_site.clone(),
                            dst_site: staging.clone(),
                            kind: TransferKind::Data,
                            link: false,
                        });
                    }
                }
                if t.stage_executable {
                    uses_staged = true;
                    let name = executable_name(&t.executable);
                    if seen.insert(name.clone()) {
                        items.push(TransferItem {
                            dst_url: cfg.staging_url(&staging, &name),
                            name,
                            src_url: t.executable.clone(),
                            bytes: 0,
                            src_site: cfg.input_site.clone(),
                            dst_site: staging.clone(),
                            kind: TransferKind::Executable,
                            link: false,
                        });
                    }
                }
            }
            if uses_staged {
                consumers.push(job.id.clone());
            }
        }
        if items.is_empty() {
            continue;
        }
        let id = format!("stage_in_{staging}");
        ewf.edges
            .extend(consumers.into_iter().map(|c| (id.clone(), c)));
        ewf.jobs.push(Job {
            id,
            site: staging,
            payload: JobPayload::StageIn(TransferPayload { items }),
        });
    }
}

/// Base name used for a staged executable.
pub fn executable_name(pfn: &str) -> String {
    pfn.rsplit('/').next().unwrap_or(pfn).to_string()
}

/// Adds one container fetch job per (container, staging site) whose
/// placement needs the image staged, with an edge to every compute job that
/// uses it. Existing fetch jobs are kept.
pub fn insert_container_fetch_jobs(
    ewf: &ExecutableWorkflow,
    cat: &Catalog,
    sites: &[Site],
) -> Result<ExecutableWorkflow, PlanError> {
    let mut out = ewf.clone();
    let cfg = &ewf.config;
    let mut users: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for job in &ewf.jobs {
        let Some(c) = job.compute() else { continue };
        if let (Some(container), Some(p)) = (&c.container, c.placement) {
            if p.is_transferable() {
                users
                    .entry((container.clone(), c.staging_site.clone()))
                    .or_default()
                    .push(job.id.clone());
            }
        }
    }
    for ((container, staging), jobs) in users {
        if !sites.iter().any(|s| s.name == staging) {
            return Err(PlanError::UnknownSite(staging));
        }
        let def = cat
            .container(&container)
            .or_else(|| ewf.containers.get(&container))
            .ok_or_else(|| CatalogError::DanglingContainerRef {
                transformation: jobs[0].clone(),
                container: container.clone(),
            })?;
        let id = format!("fetch_{container}_{staging}");
        if !out.jobs.iter().any(|j| j.id == id) {
            out.jobs.push(Job {
                id: id.clone(),
                site: staging.clone(),
                payload: JobPayload::ContainerFetch(FetchPayload {
                    container: container.clone(),
                    image: def.image.to_string(),
                    export: def.image.is_exportable(),
                    items: vec![TransferItem {
                        name: container.clone(),
                        src_url: def.image.to_string(),
                        dst_url: cfg.image_url(&staging, &container, def.runtime),
                        bytes: def.image_size_bytes,
                        src_site: cfg.input_site.clone(),
                        dst_site: staging.clone(),
                        kind: TransferKind::ContainerImage,
                        link: false,
                    }],
                }),
            });
            out.containers.insert(container.clone(), def.clone());
        }
        out.edges
            .extend(jobs.into_iter().map(|j| (id.clone(), j)));
    }
    out.sort_jobs_by_kind();
    Ok(out)
}

/// One stage-out job per staging site shipping final outputs to the
/// output site.
fn add_stage_out_jobs(ewf: &mut ExecutableWorkflow, wf: &AbstractWorkflow) {
    let finals = wf.output_files();
    let cfg = ewf.config.clone();
    for staging in staging_sites(ewf) {
        let mut items = Vec::new();
        let mut producers = Vec::new();
        for job in &ewf.jobs {
            let Some(c) = job.compute() else { continue };
            if c.staging_site != staging {
                continue;
            }
            let before = items.len();
            for t in &c.tasks {
                for f in t.outputs.iter().filter(|f| finals.contains(f.name.as_str())) {
                    items.push(TransferItem {
                        name: f.name.clone(),
                        src_url: cfg.staging_url(&staging, &f.name),
                        dst_url: cfg.output_url(&cfg.output_site, &f.name),
                        bytes: f.bytes,
                        src_site: staging.clone(),
                        dst_site: cfg.output_site.clone(),
                        kind: TransferKind::Data,
                        link: false,
                    });
                }
            }
            if items.len() > before {
                producers.push(job.id.clone());
            }
        }
        if items.is_empty() {
            continue;
        }
        let id = format!("stage_out_{staging}");
        ewf.edges
            .extend(producers.into_iter().map(|p| (p, id.clone())));
        ewf.jobs.push(Job {
            id,
            site: staging,
            payload: JobPayload::StageOut(TransferPayload { items }),
        });
    }
}

/// One cleanup job per staging site, after every job that reads from or
/// writes to that staging area.
fn add_cleanup_jobs(ewf: &mut ExecutableWorkflow) {
    let cfg = ewf.config.clone();
    for staging in staging_sites(ewf) {
        let mut parents = Vec::new();
        let mut urls = BTreeSet::new();
        for job in &ewf.jobs {
            let touches = match &job.payload {
                JobPayload::Compute(c) => {
                    if c.staging_site == staging {
                        for t in &c.tasks {
                            for f in t.inputs.iter().chain(&t.outputs) {
                                urls.insert(cfg.staging_url(&staging, &f.name));
                            }
                        }
                    }
                    c.staging_site == staging
                }
                JobPayload::StageIn(_) | JobPayload::ContainerFetch(_) => {
                    if job.site == staging {
                        urls.extend(job.transfer_items().iter().map(|i| i.dst_url.clone()));
                    }
                    job.site == staging
                }
                JobPayload::StageOut(_) => job.site == staging,
                JobPayload::Cleanup(_) => false,
            };
            if touches {
                parents.push(job.id.clone());
            }
        }
        let id = format!("cleanup_{staging}");
        ewf.edges
            .extend(parents.into_iter().map(|p| (p, id.clone())));
        ewf.jobs.push(Job {
            id,
            site: staging,
            payload: JobPayload::Cleanup(CleanupPayload {
                urls: urls.into_iter().collect(),
            }),
        });
    }
}

/// Level-based horizontal clustering: compute jobs on the same level, site
/// and container are merged into groups of at most `k` tasks. Tasks inside
/// a group keep their topological order. `k = 1` returns the input
/// unchanged.
pub fn cluster_jobs(ewf: &ExecutableWorkflow, k: usize) -> Result<ExecutableWorkflow, PlanError> {
    if k == 0 {
        return Err(PlanError::InvalidConfig("cluster size must be at least 1".into()));
    }
    if k == 1 {
        return Ok(ewf.clone());
    }
    let dag = ewf.dag()?;
    let levels = dag.levels()?;

    type Key = (usize, String, Option<String>, Option<PlacementMode>);
    let mut groups: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
    for i in dag.level_order()? {
        if let Some(c) = ewf.jobs[i].compute() {
            let key = (
                levels[i],
                ewf.jobs[i].site.clone(),
                c.container.clone(),
                c.placement,
            );
            groups.entry(key).or_default().push(i);
        }
    }

    // old job index -> new job id; merged jobs are emitted at the position
    // of their first member
    let mut rename: Vec<String> = ewf.jobs.iter().map(|j| j.id.clone()).collect();
    let mut merged_at: BTreeMap<usize, Job> = BTreeMap::new();
    let mut absorbed = BTreeSet::new();
    for ((level, site, container, _), members) in groups {
        let mut chunks: Vec<Vec<usize>> = Vec::new();
        let mut current: Vec<usize> = Vec::new();
        let mut count = 0usize;
        for i in members {
            let n = ewf.jobs[i].compute().map_or(0, |c| c.tasks.len());
            if !current.is_empty() && count + n > k {
                chunks.push(std::mem::take(&mut current));
                count = 0;
            }
            current.push(i);
            count += n;
        }
        if !current.is_empty() {
            chunks.push(current);
        }
        for (n, chunk) in chunks.into_iter().enumerate() {
            if chunk.len() == 1 {
                continue;
            }
            let first = &ewf.jobs[chunk[0]];
            let id = format!(
                "cluster_{site}_{}_l{level}_{n}",
                container.as_deref().unwrap_or("none")
            );
            let mut payload = first.compute().expect("compute job").clone();
            payload.tasks = chunk
                .iter()
                .flat_map(|&i| ewf.jobs[i].compute().unwrap().tasks.iter().cloned())
                .collect();
            for &i in &chunk {
                rename[i] = id.clone();
                absorbed.insert(i);
            }
            merged_at.insert(
                chunk[0],
                Job {
                    id,
                    site: first.site.clone(),
                    payload: JobPayload::Compute(payload),
                },
            );
        }
    }

    let mut out = ewf.clone();
    out.jobs = Vec::with_capacity(ewf.jobs.len());
    for (i, job) in ewf.jobs.iter().enumerate() {
        if let Some(m) = merged_at.remove(&i) {
            out.jobs.push(m);
        } else if !absorbed.contains(&i) {
            out.jobs.push(job.clone());
        }
    }
    let index = |id: &str| dag.index_of(id).expect("edge endpoints are jobs");
    let edges: BTreeSet<(String, String)> = ewf
        .edges
        .iter()
        .map(|(a, b)| (rename[index(a)].clone(), rename[index(b)].clone()))
        .filter(|(a, b)| a != b)
        .collect();
    out.edges = edges.into_iter().collect();
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{parse_image_url, MountSpec};
    use crate::workflow::Task;

    fn container(name: &str, runtime: Runtime, image: &str) -> ContainerDef {
        ContainerDef {
            name: name.into(),
            image: parse_image_url(image).unwrap(),
            runtime,
            mounts: vec![MountSpec::new("/data", "/data")],
            profiles: EnvMap::new(),
            image_size_bytes: 1000,
            site_local: false,
        }
    }

    fn site(name: &str, shared: bool) -> Site {
        Site {
            name: name.into(),
            shared_fs: shared,
            staging_site: "local".into(),
            worker_count: 2,
            slots_per_worker: 4,
            runtimes_available: [Runtime::Docker, Runtime::Singularity, Runtime::Shifter]
                .into_iter()
                .collect(),
            cvmfs_like_paths: vec!["/cvmfs".into()],
        }
    }

    #[test]
    fn placement_rules() {
        let shifter = container("s", Runtime::Shifter, "shifter:///papajim/namd_image:latest");
        assert_eq!(
            decide_placement(&shifter, &site("a", true)).unwrap(),
            PlacementMode::ShifterLocal
        );
        assert_eq!(
            decide_placement(&shifter, &site("a", false)).unwrap(),
            PlacementMode::ShifterLocal
        );

        let mut cvmfs = container(
            "c",
            Runtime::Singularity,
            "file:///cvmfs/singularity.opensciencegrid.org/pycbc/pycbc-el7",
        );
        cvmfs.site_local = true;
        assert_eq!(
            decide_placement(&cvmfs, &site("a", false)).unwrap(),
            PlacementMode::Bypass
        );
        let mut hidden = site("a", false);
        hidden.cvmfs_like_paths = vec!["/cvmfs-other".into()];
        assert_eq!(
            decide_placement(&cvmfs, &hidden).unwrap(),
            PlacementMode::StageCopy
        );

        let docker = container("d", Runtime::Docker, "docker:///rynge/montage:latest");
        assert_eq!(
            decide_placement(&docker, &site("a", true)).unwrap(),
            PlacementMode::SharedFsSymlink
        );
        assert_eq!(
            decide_placement(&docker, &site("a", false)).unwrap(),
            PlacementMode::StageCopy
        );

        let mut no_docker = site("a", true);
        no_docker.runtimes_available.remove(&Runtime::Docker);
        assert!(matches!(
            decide_placement(&docker, &no_docker),
            Err(PlanError::RuntimeUnavailable { .. })
        ));
    }

    #[test]
    fn placement_overrides() {
        let docker = container("d", Runtime::Docker, "docker:///rynge/montage:latest");
        let shared = site("a", true);
        assert_eq!(
            decide_placement_with(&docker, &shared, PlacementOverride::Copy).unwrap(),
            PlacementMode::StageCopy
        );
        assert!(matches!(
            decide_placement_with(&docker, &site("b", false), PlacementOverride::Symlink),
            Err(PlanError::InconsistentPlacement { .. })
        ));
        assert!(matches!(
            decide_placement_with(&docker, &shared, PlacementOverride::Bypass),
            Err(PlanError::InconsistentPlacement { .. })
        ));
    }

    #[test]
    fn empty_workflow_plans_to_nothing() {
        let sites = vec![Site::storage("local")];
        let ewf = plan(
            &AbstractWorkflow::new("empty"),
            &Catalog::default(),
            &sites,
            &PlanConfig::default(),
        )
        .unwrap();
        assert!(ewf.jobs.is_empty());
        assert!(ewf.edges.is_empty());
    }

    fn one_container_catalog(runtime: Runtime, image: &str) -> Catalog {
        let mut cat = Catalog::default();
        cat.containers
            .insert("c1".into(), container("c1", runtime, image));
        cat.transformations.push(crate::catalog::TransformationEntry {
            namespace: None,
            name: "t".into(),
            version: None,
            site: "pool".into(),
            arch: None,
            os: None,
            pfn: "/bin/t".into(),
            install_type: InstallType::Installed,
            container: Some("c1".into()),
            profiles: EnvMap::new(),
        });
        cat
    }

    fn fan(n: usize) -> AbstractWorkflow {
        let mut wf = AbstractWorkflow::new("fan");
        for i in 0..n {
            let input = format!("in{i}");
            wf.add_file(&input, 10, Some(format!("file:///data/{input}")));
            wf.add_task(Task::new(format!("t{i}"), "t").reads(input).writes(format!("out{i}")));
        }
        wf
    }

    #[test]
    fn ten_tasks_share_one_fetch() {
        let cat = one_container_catalog(Runtime::Docker, "docker:///x/y:1");
        let mut pool = site("pool", false);
        pool.staging_site = "local".into();
        let sites = vec![Site::storage("local"), pool];
        let ewf = plan(&fan(10), &cat, &sites, &PlanConfig::default()).unwrap();
        let fetches: Vec<&Job> = ewf.jobs_of(JobKind::ContainerFetch).collect();
        assert_eq!(fetches.len(), 1);
        let fetch_id = &fetches[0].id;
        let downstream: BTreeSet<&str> = ewf
            .edges
            .iter()
            .filter(|(a, _)| a == fetch_id)
            .map(|(_, b)| b.as_str())
            .filter(|id| ewf.job(id).unwrap().kind() == JobKind::Compute)
            .collect();
        assert_eq!(downstream.len(), 10);
        let counts = ewf.count_by_kind();
        assert_eq!(counts[&JobKind::Compute], 10);
        assert_eq!(counts[&JobKind::StageIn], 1);
        assert_eq!(counts[&JobKind::StageOut], 1);
        assert_eq!(counts[&JobKind::Cleanup], 1);
    }

    #[test]
    fn shifter_plans_have_no_fetch() {
        let cat = one_container_catalog(Runtime::Shifter, "shifter:///papajim/namd_image:latest");
        let sites = vec![Site::storage("local"), site("pool", false)];
        let ewf = plan(&fan(4), &cat, &sites, &PlanConfig::default()).unwrap();
        assert_eq!(ewf.jobs_of(JobKind::ContainerFetch).count(), 0);
    }

    #[test]
    fn plan_errors() {
        let cat = one_container_catalog(Runtime::Docker, "docker:///x/y:1");
        let mut pool = site("pool", false);
        pool.runtimes_available.clear();
        let sites = vec![Site::storage("local"), pool];
        assert!(matches!(
            plan(&fan(1), &cat, &sites, &PlanConfig::default()),
            Err(PlanError::RuntimeUnavailable { .. })
        ));

        let sites = vec![Site::storage("local")];
        assert!(matches!(
            plan(&fan(1), &cat, &sites, &PlanConfig::default()),
            Err(PlanError::UnresolvableTransformation { .. })
        ));

        let cfg = PlanConfig {
            output_site: "mars".into(),
            ..PlanConfig::default()
        };
        assert!(matches!(
            plan(&fan(1), &cat, &[Site::storage("local")], &cfg),
            Err(PlanError::UnknownSite(_))
        ));
    }

    #[test]
    fn round_robin_over_eligible_sites() {
        let mut cat = one_container_catalog(Runtime::Docker, "docker:///x/y:1");
        let mut second = cat.transformations[0].clone();
        second.site = "pool2".into();
        cat.transformations.push(second);
        let sites = vec![Site::storage("local"), site("pool", false), site("pool2", false)];
        let ewf = plan(&fan(4), &cat, &sites, &PlanConfig::default()).unwrap();
        let bound: Vec<&str> = ewf
            .jobs_of(JobKind::Compute)
            .map(|j| j.site.as_str())
            .collect();
        assert_eq!(bound, vec!["pool", "pool2", "pool", "pool2"]);
    }

    #[test]
    fn cleanup_can_be_disabled() {
        let cat = one_container_catalog(Runtime::Docker, "docker:///x/y:1");
        let sites = vec![Site::storage("local"), site("pool", false)];
        let cfg = PlanConfig {
            cleanup: false,
            ..PlanConfig::default()
        };
        let ewf = plan(&fan(2), &cat, &sites, &cfg).unwrap();
        assert_eq!(ewf.jobs_of(JobKind::Cleanup).count(), 0);
    }

    #[test]
    fn config_switches_parse() {
        let cfg: PlanConfig =
            serde_yaml::from_str("cluster_size: 12\ncleanup: off\ndocker_load_dedup: on\n")
                .unwrap();
        assert_eq!(cfg.cluster_size, 12);
        assert!(!cfg.cleanup);
        assert!(cfg.docker_load_dedup);
        assert!(serde_yaml::from_str::<PlanConfig>("bogus: 1\n").is_err());
    }
}
