//! Runs an executable workflow on this machine, either by simulating each
//! wrapper step in memory (mock) or by running the rendered scripts (real).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::render::FAILURE_MARKER;
use super::{render_wrapper, LauncherError, Step, StepKind, WrapperPlan};
use crate::planner::{ExecutableWorkflow, Job, JobKind, JobPayload};
use crate::transfer::{Location, TransferEngine, TransferRequest};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    #[default]
    Mock,
    Real,
}

impl FromStr for ExecMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(ExecMode::Mock),
            "real" => Ok(ExecMode::Real),
            _ => Err(format!("unknown mode `{s}` (mock|real)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockOptions {
    /// Steps forced to fail, as (job id, step kind).
    pub fail_at: Vec<(String, StepKind)>,
    /// Concurrent data management jobs on the submit node.
    pub aux_slots: usize,
    /// Wall seconds slept per second of task runtime.
    pub time_scale: f64,
}

impl Default for MockOptions {
    fn default() -> Self {
        MockOptions {
            fail_at: Vec::new(),
            aux_slots: 4,
            time_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobStatus {
    Succeeded,
    Failed,
    NotRun,
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: StepKind,
    pub start_s: f64,
    pub end_s: f64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub job_id: String,
    pub kind: JobKind,
    pub node: String,
    pub status: JobStatus,
    pub start_s: f64,
    pub end_s: f64,
    pub steps: Vec<StepRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub mode: ExecMode,
    /// One entry per job, in workflow order.
    pub jobs: Vec<JobReport>,
    /// Job ids in completion order.
    pub completion_order: Vec<String>,
    pub image_loads: usize,
    pub image_cache_hits: usize,
    pub loads_by_node: BTreeMap<String, usize>,
    pub files_created: usize,
}

impl ExecutionReport {
    pub fn job(&self, id: &str) -> Option<&JobReport> {
        self.jobs.iter().find(|j| j.job_id == id)
    }

    pub fn succeeded(&self) -> bool {
        self.jobs.iter().all(|j| j.status == JobStatus::Succeeded)
    }

    /// Plain-text status table.
    pub fn table(&self) -> String {
        let mut out = String::from("job\tkind\tnode\tstatus\tstart_s\tend_s\n");
        for j in &self.jobs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.3}\t{:.3}\n",
                j.job_id, j.kind, j.node, j.status, j.start_s, j.end_s
            ));
        }
        out
    }
}

struct Node {
    name: String,
    free: usize,
}

/// State shared by concurrently running jobs.
struct Shared<'a> {
    epoch: Instant,
    opts: &'a MockOptions,
    /// URLs that currently exist.
    world: Mutex<BTreeSet<String>>,
    /// Loaded-image marker per (node, image), each behind its own lock.
    markers: Mutex<BTreeMap<(String, String), Arc<Mutex<bool>>>>,
    loads: Mutex<BTreeMap<String, usize>>,
    hits: AtomicUsize,
    created: AtomicUsize,
    scripts: PathBuf,
}

impl Shared<'_> {
    fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }

    fn injected(&self, job: &str, kind: StepKind) -> bool {
        self.opts
            .fail_at
            .iter()
            .any(|(j, k)| j == job && *k == kind)
    }

    fn marker(&self, node: &str, image: &str) -> Arc<Mutex<bool>> {
        self.markers
            .lock()
            .unwrap()
            .entry((node.to_string(), image.to_string()))
            .or_default()
            .clone()
    }

    fn count_load(&self, node: &str) {
        *self.loads.lock().unwrap().entry(node.to_string()).or_insert(0) += 1;
    }
}

/// The step kind a data management job is reported under.
fn aux_step(job: &Job) -> StepKind {
    match job.kind() {
        JobKind::StageIn => StepKind::StageIn,
        JobKind::StageOut => StepKind::StageOut,
        JobKind::ContainerFetch => StepKind::MaterializeImage,
        JobKind::Cleanup | JobKind::Compute => StepKind::RemoveJobDir,
    }
}

/// Executes `ewf` respecting its edges, with at most one job per slot. A
/// failed job marks all of its descendants as not run; independent jobs
/// keep going. Returns `StepFailed` for the first failure.
pub fn execute_local(
    ewf: &ExecutableWorkflow,
    plans: &BTreeMap<String, WrapperPlan>,
    mode: ExecMode,
    opts: &MockOptions,
) -> Result<ExecutionReport, LauncherError> {
    let dag = ewf.dag().map_err(|e| LauncherError::Io(e.to_string()))?;
    dag.topological_order()
        .map_err(|e| LauncherError::Io(format!("{e:?}")))?;
    for job in ewf.jobs.iter().filter(|j| j.kind() == JobKind::Compute) {
        if !plans.contains_key(&job.id) {
            return Err(LauncherError::Io(format!("no wrapper plan for job `{}`", job.id)));
        }
    }

    let scripts = PathBuf::from(&ewf.config.scratch_root).join(".wrappers");
    if mode == ExecMode::Real {
        for plan in plans.values() {
            if let Some(rt) = plan.backend {
                if !on_path(rt.as_str()) {
                    return Err(LauncherError::MissingRuntime(rt.as_str().to_string()));
                }
            }
        }
        std::fs::create_dir_all(&scripts)
            .map_err(|e| LauncherError::Io(format!("{}: {e}", scripts.display())))?;
    }

    // nodes: workers of every site running compute jobs, plus the submit node
    let mut nodes: Vec<Node> = vec![Node {
        name: "submit".into(),
        free: opts.aux_slots.max(1),
    }];
    let mut site_nodes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for job in ewf.jobs.iter().filter(|j| j.kind() == JobKind::Compute) {
        if site_nodes.contains_key(job.site.as_str()) {
            continue;
        }
        let site = ewf
            .site(&job.site)
            .ok_or_else(|| LauncherError::Io(format!("unknown site `{}`", job.site)))?;
        let ids = (0..site.worker_count)
            .map(|i| {
                nodes.push(Node {
                    name: format!("{}-node-{i}", site.name),
                    free: site.slots_per_worker as usize,
                });
                nodes.len() - 1
            })
            .collect();
        site_nodes.insert(job.site.as_str(), ids);
    }

    let mut world = BTreeSet::new();
    for job in &ewf.jobs {
        if matches!(job.kind(), JobKind::StageIn | JobKind::ContainerFetch) {
            world.extend(job.transfer_items().iter().map(|i| i.src_url.clone()));
        }
    }
    let shared = Shared {
        epoch: Instant::now(),
        opts,
        world: Mutex::new(world),
        markers: Mutex::new(BTreeMap::new()),
        loads: Mutex::new(BTreeMap::new()),
        hits: AtomicUsize::new(0),
        created: AtomicUsize::new(0),
        scripts,
    };

    let n = ewf.jobs.len();
    let mut reports: Vec<Option<JobReport>> = vec![None; n];
    let mut indeg: Vec<usize> = (0..n).map(|i| dag.parents(i).len()).collect();
    let mut blocked = vec![false; n];
    let mut ready: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut completion = Vec::new();
    let mut first_failure: Option<(String, StepKind, String)> = None;

    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, usize, JobReport)>();
        let mut running = 0usize;
        loop {
            let mut waiting = VecDeque::new();
            while let Some(i) = ready.pop_front() {
                let job = &ewf.jobs[i];
                let candidates: &[usize] = if job.kind() == JobKind::Compute {
                    &site_nodes[job.site.as_str()]
                } else {
                    &[0]
                };
                // most free slots first, then lowest index
                let pick = candidates
                    .iter()
                    .copied()
                    .filter(|&k| nodes[k].free > 0)
                    .max_by_key(|&k| (nodes[k].free, std::cmp::Reverse(k)));
                let Some(k) = pick else {
                    waiting.push_back(i);
                    continue;
                };
                nodes[k].free -= 1;
                running += 1;
                let tx = tx.clone();
                let node = nodes[k].name.clone();
                let plan = plans.get(&job.id);
                let shared = &shared;
                scope.spawn(move || {
                    let report = match mode {
                        ExecMode::Mock => run_mock(job, plan, &node, shared),
                        ExecMode::Real => run_real(job, plan, &node, shared),
                    };
                    let _ = tx.send((i, k, report));
                });
            }
            ready = waiting;
            if running == 0 {
                break;
            }
            let (i, k, report) = rx.recv().expect("a running job reports back");
            running -= 1;
            nodes[k].free += 1;
            completion.push(report.job_id.clone());
            if report.status == JobStatus::Succeeded {
                for &c in dag.children(i) {
                    indeg[c] -= 1;
                    if indeg[c] == 0 && !blocked[c] {
                        ready.push_back(c);
                    }
                }
            } else {
                if first_failure.is_none() {
                    let step = report
                        .steps
                        .iter()
                        .find(|s| !s.ok)
                        .map_or(aux_step(&ewf.jobs[i]), |s| s.kind);
                    first_failure = Some((
                        report.job_id.clone(),
                        step,
                        report.error.clone().unwrap_or_default(),
                    ));
                }
                for d in dag.descendants(i) {
                    blocked[d] = true;
                }
                ready.retain(|&r| !blocked[r]);
            }
            reports[i] = Some(report);
        }
    });

    let jobs = reports
        .into_iter()
        .zip(&ewf.jobs)
        .map(|(r, job)| {
            r.unwrap_or_else(|| JobReport {
                job_id: job.id.clone(),
                kind: job.kind(),
                node: String::new(),
                status: JobStatus::NotRun,
                start_s: 0.0,
                end_s: 0.0,
                steps: Vec::new(),
                error: None,
            })
        })
        .collect();
    let loads_by_node = shared.loads.into_inner().unwrap();
    let report = ExecutionReport {
        mode,
        jobs,
        completion_order: completion,
        image_loads: loads_by_node.values().sum(),
        image_cache_hits: shared.hits.load(Ordering::SeqCst),
        loads_by_node,
        files_created: shared.created.load(Ordering::SeqCst),
    };
    match first_failure {
        Some((job, step, reason)) => Err(LauncherError::StepFailed {
            job,
            step,
            reason,
            report: Box::new(report),
        }),
        None => Ok(report),
    }
}

fn on_path(binary: &str) -> bool {
    std::env::var_os("PATH").is_some_and(|paths| {
        std::env::split_paths(&paths).any(|dir| dir.join(binary).is_file())
    })
}

struct Recorder<'s, 'a> {
    shared: &'s Shared<'a>,
    report: JobReport,
}

impl<'s, 'a> Recorder<'s, 'a> {
    fn new(job: &Job, node: &str, shared: &'s Shared<'a>) -> Self {
        Recorder {
            report: JobReport {
                job_id: job.id.clone(),
                kind: job.kind(),
                node: node.to_string(),
                status: JobStatus::Succeeded,
                start_s: shared.now(),
                end_s: 0.0,
                steps: Vec::new(),
                error: None,
            },
            shared,
        }
    }

    /// Runs one step; returns false once the job has failed.
    fn step(&mut self, kind: StepKind, f: impl FnOnce() -> Result<String, String>) -> bool {
        let start = self.shared.now();
        let outcome = if self.shared.injected(&self.report.job_id, kind) {
            Err("injected failure".to_string())
        } else {
            f()
        };
        let (ok, note) = match outcome {
            Ok(note) => (true, note),
            Err(e) => (false, e),
        };
        if !ok {
            self.report.status = JobStatus::Failed;
            self.report.error = Some(format!("{kind}: {note}"));
        }
        self.report.steps.push(StepRecord {
            kind,
            start_s: start,
            end_s: self.shared.now(),
            ok,
            note,
        });
        ok
    }

    fn finish(mut self) -> JobReport {
        self.report.end_s = self.shared.now();
        self.report
    }
}

fn run_mock(job: &Job, plan: Option<&WrapperPlan>, node: &str, shared: &Shared) -> JobReport {
    let mut rec = Recorder::new(job, node, shared);
    let Some(plan) = plan else {
        run_mock_aux(job, &mut rec);
        return rec.finish();
    };
    for step in plan.execution_order() {
        let ok = rec.step(step.kind(), || match step {
            Step::StageIn { files } => {
                let world = shared.world.lock().unwrap();
                match files.iter().find(|f| !world.contains(&f.url)) {
                    Some(f) => Err(format!("missing {}", f.url)),
                    None => Ok(format!("{} files", files.len())),
                }
            }
            Step::StageOut { files } => {
                let mut world = shared.world.lock().unwrap();
                for f in files {
                    if world.insert(f.url.clone()) {
                        shared.created.fetch_add(1, Ordering::SeqCst);
                    }
                }
                Ok(format!("{} files", files.len()))
            }
            Step::LoadImage { image, dedup, .. } => {
                if *dedup {
                    let marker = shared.marker(node, image);
                    let mut loaded = marker.lock().unwrap();
                    if *loaded {
                        shared.hits.fetch_add(1, Ordering::SeqCst);
                        Ok("already loaded".into())
                    } else {
                        shared.count_load(node);
                        *loaded = true;
                        Ok("loaded".into())
                    }
                } else {
                    shared.count_load(node);
                    Ok("loaded".into())
                }
            }
            Step::LaunchTask { runtime_s, .. } => {
                if shared.opts.time_scale > 0.0 {
                    std::thread::sleep(Duration::from_secs_f64(runtime_s * shared.opts.time_scale));
                }
                Ok(String::new())
            }
            _ => Ok(String::new()),
        });
        if !ok {
            break;
        }
    }
    rec.finish()
}

fn run_mock_aux(job: &Job, rec: &mut Recorder) {
    let shared = rec.shared;
    let kind = aux_step(job);
    match &job.payload {
        JobPayload::Cleanup(c) => {
            rec.step(kind, || {
                let mut world = shared.world.lock().unwrap();
                let removed = c.urls.iter().filter(|u| world.remove(*u)).count();
                Ok(format!("{removed} removed"))
            });
        }
        _ => {
            rec.step(kind, || {
                let mut world = shared.world.lock().unwrap();
                for item in job.transfer_items() {
                    if !world.contains(&item.src_url) {
                        return Err(format!("missing {}", item.src_url));
                    }
                    if world.insert(item.dst_url.clone()) {
                        shared.created.fetch_add(1, Ordering::SeqCst);
                    }
                }
                Ok(format!("{} items", job.transfer_items().len()))
            });
        }
    }
}

fn run_real(job: &Job, plan: Option<&WrapperPlan>, node: &str, shared: &Shared) -> JobReport {
    let mut rec = Recorder::new(job, node, shared);
    match plan {
        Some(plan) => {
            let script = shared.scripts.join(format!("{}.sh", job.id));
            let kinds: Vec<StepKind> = plan.kinds();
            let outcome = std::fs::write(&script, render_wrapper(plan))
                .map_err(|e| (StepKind::CreateJobDir, e.to_string()))
                .and_then(|_| run_script(&script));
            match outcome {
                Ok(()) => {
                    rec.step(StepKind::RemoveJobDir, || Ok(format!("{} steps", kinds.len())));
                }
                Err((step, message)) => {
                    rec.step(step, || Err(message));
                }
            }
        }
        None => real_aux(job, &mut rec),
    }
    rec.finish()
}

fn run_script(script: &Path) -> Result<(), (StepKind, String)> {
    let out = Command::new("bash")
        .arg(script)
        .output()
        .map_err(|e| (StepKind::CreateJobDir, e.to_string()))?;
    if out.status.success() {
        return Ok(());
    }
    let stderr = String::from_utf8_lossy(&out.stderr);
    let step = stderr
        .lines()
        .find_map(|l| l.strip_prefix(FAILURE_MARKER))
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(StepKind::CreateJobDir);
    Err((step, format!("exit {}: {}", out.status, stderr.trim())))
}

fn real_aux(job: &Job, rec: &mut Recorder) {
    let kind = aux_step(job);
    let engine = TransferEngine::default();
    match &job.payload {
        JobPayload::Cleanup(c) => {
            rec.step(kind, || {
                for url in &c.urls {
                    if let Ok(Location::File(p)) = Location::parse(url) {
                        let _ = std::fs::remove_file(p);
                    }
                }
                Ok(String::new())
            });
        }
        JobPayload::ContainerFetch(f) if f.export => {
            rec.step(kind, || {
                let item = &f.items[0];
                let Ok(Location::File(dst)) = Location::parse(&item.dst_url) else {
                    return Err(format!("cannot write {}", item.dst_url));
                };
                if let Some(parent) = dst.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
                }
                let image: crate::catalog::ImageRef =
                    f.image.clone().try_into().map_err(|e: crate::catalog::CatalogError| e.to_string())?;
                let status = if image.scheme == crate::catalog::ImageScheme::Docker {
                    let name = format!("{}:{}", image.locator, image.tag_or_latest());
                    Command::new("docker").args(["pull", &name]).status().and_then(|s| {
                        if s.success() {
                            Command::new("docker")
                                .args(["save", "-o"])
                                .arg(&dst)
                                .arg(&name)
                                .status()
                        } else {
                            Ok(s)
                        }
                    })
                } else {
                    Command::new("singularity")
                        .arg("pull")
                        .arg(&dst)
                        .arg(&f.image)
                        .status()
                };
                match status {
                    Ok(s) if s.success() => Ok(String::new()),
                    Ok(s) => Err(format!("export exited with {s}")),
                    Err(e) => Err(e.to_string()),
                }
            });
        }
        _ => {
            rec.step(kind, || {
                let reqs: Vec<TransferRequest> = job
                    .transfer_items()
                    .iter()
                    .map(|i| TransferRequest {
                        src: i.src_url.clone(),
                        dst: i.dst_url.clone(),
                        bytes: i.bytes,
                        kind: i.kind,
                        link_ok: i.link,
                    })
                    .collect();
                let results = engine.batch_transfer(&reqs, 4).map_err(|e| e.to_string())?;
                for r in results {
                    r.map_err(|e| e.to_string())?;
                }
                Ok(format!("{} items", reqs.len()))
            });
        }
    }
}
