//! Discrete-event simulation of an executable workflow on a small cluster:
//! a submit node, an optional NFS server and worker nodes. Transfers share
//! node NICs (and optional point-to-point links) max-min fairly, tasks take
//! their expected runtime, and Docker image loads queue on a per-node disk.

mod network;
mod report;
mod scenario;

pub use network::{max_min_fair, uncontended};
pub use report::{report, write_sweep_table};
pub use scenario::{load_scenarios, sweep, Scenario, ScenarioFile, SweepRow, SweepTable};

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::launcher::{MaterializeMethod, Step, WrapperPlan};
use crate::planner::{ExecutableWorkflow, JobKind, JobPayload, PlacementOverride};
use crate::transfer::TransferKind;

/// 10 Gbps.
pub const DEFAULT_NIC_BANDWIDTH: f64 = 1.25e9;
/// Disk rate for image untar and file writes, in bytes/s. Chosen so a
/// Docker image load dominates worker disk activity; not a measured value.
pub const DEFAULT_DISK_RATE: f64 = 100e6;
pub const DEFAULT_DISK_BASE_MS: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("site `{0}` is not mapped to any topology node")]
    UnmappedSite(String),
    #[error("container `{0}` has no image size")]
    MissingSize(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid simulation input: {0}")]
    InvalidInput(String),
    #[error("cannot write `{path}`: {reason}")]
    DestinationUnwritable { path: String, reason: String },
    #[error("{0}")]
    Io(String),
}

fn default_slots() -> u32 {
    1
}
fn default_nic() -> f64 {
    DEFAULT_NIC_BANDWIDTH
}
fn default_disk_rate() -> f64 {
    DEFAULT_DISK_RATE
}
fn default_disk_base() -> f64 {
    DEFAULT_DISK_BASE_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default = "default_slots")]
    pub slots: u32,
    /// Per-direction NIC capacity in bytes/s.
    #[serde(default = "default_nic")]
    pub nic_bandwidth: f64,
    #[serde(default = "default_disk_rate")]
    pub disk_untar_rate: f64,
    #[serde(default = "default_disk_base")]
    pub disk_service_base_ms: f64,
}

impl NodeSpec {
    pub fn new(name: impl Into<String>, slots: u32, nic_bandwidth: f64) -> Self {
        NodeSpec {
            name: name.into(),
            slots,
            nic_bandwidth,
            disk_untar_rate: DEFAULT_DISK_RATE,
            disk_service_base_ms: DEFAULT_DISK_BASE_MS,
        }
    }
}

/// Extra capacity limit between two nodes, in either direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub submit: NodeSpec,
    #[serde(default)]
    pub nfs: Option<NodeSpec>,
    #[serde(default)]
    pub workers: Vec<NodeSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    /// Site name to the nodes that serve it. Storage sites use their first
    /// node; compute sites spread jobs over all of them.
    #[serde(default)]
    pub sites: BTreeMap<String, Vec<String>>,
    /// Node holding the image registry; the submit node when absent.
    #[serde(default)]
    pub registry_node: Option<String>,
}

impl Topology {
    pub fn from_yaml(text: &str) -> Result<Self, SimError> {
        let topo: Topology =
            serde_yaml::from_str(text).map_err(|e| SimError::InvalidTopology(e.to_string()))?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| SimError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_yaml(&text)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("topology serializes")
    }

    /// Submit, NFS, then workers.
    pub fn nodes(&self) -> Vec<&NodeSpec> {
        let mut out = vec![&self.submit];
        out.extend(self.nfs.iter());
        out.extend(self.workers.iter());
        out
    }

    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes().into_iter().find(|n| n.name == name)
    }

    pub fn max_bandwidth(&self) -> f64 {
        self.nodes()
            .iter()
            .map(|n| n.nic_bandwidth)
            .chain(self.links.iter().map(|l| l.bandwidth))
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidTopology(m));
        let nodes = self.nodes();
        let mut names = std::collections::BTreeSet::new();
        for n in &nodes {
            if !names.insert(n.name.as_str()) {
                return bad(format!("duplicate node `{}`", n.name));
            }
            if n.slots == 0 {
                return bad(format!("node `{}` has no slots", n.name));
            }
            if !(n.nic_bandwidth > 0.0) || !(n.disk_untar_rate > 0.0) {
                return bad(format!("node `{}` needs positive bandwidth and disk rate", n.name));
            }
            if !(n.disk_service_base_ms >= 0.0) {
                return bad(format!("node `{}` has a negative disk service time", n.name));
            }
        }
        for l in &self.links {
            if !names.contains(l.a.as_str()) || !names.contains(l.b.as_str()) {
                return bad(format!("link {} - {} names an unknown node", l.a, l.b));
            }
            if !(l.bandwidth > 0.0) {
                return bad(format!("link {} - {} needs positive bandwidth", l.a, l.b));
            }
        }
        for (site, members) in &self.sites {
            if members.is_empty() {
                return bad(format!("site `{site}` has no nodes"));
            }
            if let Some(m) = members.iter().find(|m| !names.contains(m.as_str())) {
                return bad(format!("site `{site}` names unknown node `{m}`"));
            }
        }
        if let Some(r) = &self.registry_node {
            if !names.contains(r.as_str()) {
                return bad(format!("registry node `{r}` is not defined"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Placement forced when a scenario is planned.
    pub placement: Option<PlacementOverride>,
    /// Overrides the load deduplication recorded in the wrapper plans.
    pub docker_load_dedup: Option<bool>,
    /// Share capacities max-min fairly; otherwise every flow gets the
    /// smallest capacity on its path regardless of other flows.
    pub fair_share: bool,
    /// Task runtimes are scaled by a uniform factor in [1-j, 1+j].
    pub runtime_jitter: f64,
    pub sample_interval_s: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            placement: None,
            docker_load_dedup: None,
            fair_share: true,
            runtime_jitter: 0.0,
            sample_interval_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub job: String,
    pub name: String,
    pub kind: TransferKind,
    pub src: String,
    pub dst: String,
    pub bytes: u64,
    pub start_s: f64,
    pub end_s: f64,
}

impl TransferRecord {
    /// Crossed the network (as opposed to a copy within one node).
    pub fn is_network(&self) -> bool {
        self.src != self.dst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpan {
    pub job: String,
    pub node: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub makespan_s: f64,
    pub sample_interval_s: f64,
    /// Bytes sent per sample bin, by node.
    pub egress_bytes: BTreeMap<String, Vec<f64>>,
    /// Bytes received per sample bin, by node.
    pub ingress_bytes: BTreeMap<String, Vec<f64>>,
    /// Mean disk service time per sample bin, by node.
    pub io_wait_ms: BTreeMap<String, Vec<f64>>,
    pub transfers: Vec<TransferRecord>,
    /// Network transfers by kind.
    pub transfer_count_by_kind: BTreeMap<TransferKind, usize>,
    pub transfer_bytes_by_kind: BTreeMap<TransferKind, u64>,
    pub job_timeline: Vec<JobSpan>,
    pub image_loads: usize,
    pub image_load_hits: usize,
}

impl SimResult {
    /// Average bytes/s per bin leaving `node`.
    pub fn egress_rate(&self, node: &str) -> Vec<f64> {
        self.egress_bytes
            .get(node)
            .map(|v| v.iter().map(|b| b / self.sample_interval_s).collect())
            .unwrap_or_default()
    }

    pub fn total_egress(&self) -> f64 {
        self.egress_bytes.values().flatten().sum()
    }

    pub fn total_ingress(&self) -> f64 {
        self.ingress_bytes.values().flatten().sum()
    }

    /// Σ bytes over network transfers.
    pub fn network_bytes(&self) -> u64 {
        self.transfers
            .iter()
            .filter(|t| t.is_network())
            .map(|t| t.bytes)
            .sum()
    }

    /// Longest run of bins in which `node` sends at ≥ `threshold` bytes/s,
    /// in seconds.
    pub fn longest_egress_window(&self, node: &str, threshold: f64) -> f64 {
        let mut best = 0usize;
        let mut run = 0usize;
        for rate in self.egress_rate(node) {
            if rate >= threshold {
                run += 1;
                best = best.max(run);
            } else {
                run = 0;
            }
        }
        best as f64 * self.sample_interval_s
    }

    /// Container image bytes sent over the network by `node`.
    pub fn container_egress_bytes(&self, node: &str) -> u64 {
        self.transfers
            .iter()
            .filter(|t| t.kind == TransferKind::ContainerImage && t.src == node && t.is_network())
            .map(|t| t.bytes)
            .sum()
    }

    /// Time-weighted mean of the io-wait series over `nodes`.
    pub fn mean_io_wait_ms<'a>(&self, nodes: impl IntoIterator<Item = &'a str>) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for node in nodes {
            if let Some(series) = self.io_wait_ms.get(node) {
                sum += series.iter().sum::<f64>();
                n += series.len();
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Where one end of a flow lives before the job is placed.
#[derive(Debug, Clone, Copy)]
enum End {
    Worker,
    Node(usize),
}

#[derive(Debug, Clone)]
struct FlowSpec {
    name: String,
    kind: TransferKind,
    src: End,
    dst: End,
    bytes: u64,
}

#[derive(Debug, Clone)]
enum Phase {
    Flows(Vec<FlowSpec>),
    Delay(f64),
    Untar { image: String, bytes: u64, dedup: bool },
}

struct Flow {
    job: usize,
    name: String,
    kind: TransferKind,
    src: usize,
    dst: usize,
    bytes: f64,
    remaining: f64,
    sent: f64,
    rate: f64,
    start: f64,
    path: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Timer {
    PhaseDone(usize),
    UntarDone { job: usize, node: usize, key: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ImageState {
    NotLoaded,
    Loading,
    Loaded,
}

struct JobRun {
    phases: Vec<Phase>,
    next: usize,
    node: usize,
    flows_left: usize,
    start: f64,
    done: bool,
}

/// Splits the span [a, b) over sample bins, adding `per_s * overlap` to
/// each bin.
fn spread(series: &mut Vec<f64>, interval: f64, a: f64, b: f64, per_s: f64) {
    if b <= a || per_s == 0.0 {
        return;
    }
    let mut k = (a / interval).floor() as usize;
    loop {
        let lo = k as f64 * interval;
        let hi = lo + interval;
        let overlap = b.min(hi) - a.max(lo);
        if overlap > 0.0 {
            if series.len() <= k {
                series.resize(k + 1, 0.0);
            }
            series[k] += per_s * overlap;
        }
        if hi >= b {
            break;
        }
        k += 1;
    }
}

/// Adds ∫ max(0, free_at - t) dt over [a, b) to the bins.
fn spread_backlog(series: &mut Vec<f64>, interval: f64, a: f64, b: f64, free_at: f64) {
    let end = b.min(free_at);
    if end <= a {
        return;
    }
    let mut k = (a / interval).floor() as usize;
    loop {
        let lo = (k as f64 * interval).max(a);
        let hi = ((k + 1) as f64 * interval).min(end);
        if hi > lo {
            if series.len() <= k {
                series.resize(k + 1, 0.0);
            }
            let (u, v) = (free_at - lo, free_at - hi);
            series[k] += (u * u - v * v) / 2.0;
        }
        if (k + 1) as f64 * interval >= end {
            break;
        }
        k += 1;
    }
}

struct Engine<'a> {
    ewf: &'a ExecutableWorkflow,
    topo: &'a Topology,
    cfg: &'a SimConfig,
    node_names: Vec<String>,
    caps: Vec<f64>,
    link_index: BTreeMap<(usize, usize), usize>,
    free_slots: Vec<usize>,
    disk_free_at: Vec<f64>,
    images: Vec<(usize, String, ImageState, Vec<usize>)>,
    jobs: Vec<JobRun>,
    flows: Vec<Flow>,
    timers: Vec<(f64, u64, Timer)>,
    timer_seq: u64,
    now: f64,
    egress: Vec<Vec<f64>>,
    ingress: Vec<Vec<f64>>,
    backlog: Vec<Vec<f64>>,
    transfers: Vec<TransferRecord>,
    timeline: Vec<Option<JobSpan>>,
    loads: usize,
    hits: usize,
    rates_dirty: bool,
}

/// Runs the workflow to completion. Compute jobs follow their wrapper plans;
/// data management jobs run on the submit node.
pub fn simulate(
    ewf: &ExecutableWorkflow,
    plans: &BTreeMap<String, WrapperPlan>,
    topo: &Topology,
    cfg: &SimConfig,
) -> Result<SimResult, SimError> {
    topo.validate()?;
    if !(cfg.sample_interval_s > 0.0) {
        return Err(SimError::InvalidInput("sample_interval_s must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.runtime_jitter) {
        return Err(SimError::InvalidInput("runtime_jitter must be in [0, 1)".into()));
    }
    let dag = ewf
        .dag()
        .map_err(|e| SimError::InvalidInput(e.to_string()))?;
    dag.topological_order()
        .map_err(|e| SimError::InvalidInput(format!("{e:?}")))?;

    let node_names: Vec<String> = topo.nodes().iter().map(|n| n.name.clone()).collect();
    let idx = |name: &str| node_names.iter().position(|n| n == name);
    let site_node = |site: &str| -> Result<usize, SimError> {
        topo.sites
            .get(site)
            .and_then(|m| m.first())
            .and_then(|n| idx(n))
            .ok_or_else(|| SimError::UnmappedSite(site.to_string()))
    };
    let registry = match &topo.registry_node {
        Some(r) => idx(r).expect("validated"),
        None => 0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut jobs = Vec::with_capacity(ewf.jobs.len());
    for job in &ewf.jobs {
        let mut phases = Vec::new();
        match &job.payload {
            JobPayload::Compute(c) => {
                let workers = topo
                    .sites
                    .get(&job.site)
                    .ok_or_else(|| SimError::UnmappedSite(job.site.clone()))?;
                debug_assert!(!workers.is_empty());
                let staging = End::Node(site_node(&c.staging_site)?);
                let plan = plans.get(&job.id).ok_or_else(|| {
                    SimError::InvalidInput(format!("no wrapper plan for `{}`", job.id))
                })?;
                if let Some(name) = &c.container {
                    let def = ewf.containers.get(name).ok_or_else(|| {
                        SimError::InvalidInput(format!("undefined container `{name}`"))
                    })?;
                    if def.image_size_bytes == 0 && c.placement.is_some_and(|p| p.is_transferable())
                    {
                        return Err(SimError::MissingSize(name.clone()));
                    }
                }
                for step in plan.execution_order() {
                    match step {
                        Step::MaterializeImage {
                            method: MaterializeMethod::Pull,
                            target,
                            bytes,
                            ..
                        } => phases.push(Phase::Flows(vec![FlowSpec {
                            name: target.rsplit('/').next().unwrap_or(target).to_string(),
                            kind: TransferKind::ContainerImage,
                            src: staging,
                            dst: End::Worker,
                            bytes: *bytes,
                        }])),
                        Step::LoadImage {
                            image, bytes, dedup, ..
                        } => phases.push(Phase::Untar {
                            image: image.clone(),
                            bytes: *bytes,
                            dedup: cfg.docker_load_dedup.unwrap_or(*dedup),
                        }),
                        Step::StageIn { files } | Step::StageOut { files } => {
                            let inbound = matches!(step, Step::StageIn { .. });
                            let specs = files
                                .iter()
                                .filter(|f| !f.link)
                                .map(|f| FlowSpec {
                                    name: f.name.clone(),
                                    kind: TransferKind::Data,
                                    src: if inbound { staging } else { End::Worker },
                                    dst: if inbound { End::Worker } else { staging },
                                    bytes: f.bytes,
                                })
                                .collect();
                            phases.push(Phase::Flows(specs));
                        }
                        Step::LaunchTask { runtime_s, .. } => {
                            let factor = if cfg.runtime_jitter > 0.0 {
                                1.0 + rng.gen_range(-cfg.runtime_jitter..cfg.runtime_jitter)
                            } else {
                                1.0
                            };
                            phases.push(Phase::Delay(runtime_s * factor));
                        }
                        _ => {}
                    }
                }
            }
            JobPayload::Cleanup(_) => {}
            _ => {
                let mut specs = Vec::new();
                for item in job.transfer_items() {
                    let src = if job.kind() == JobKind::ContainerFetch {
                        registry
                    } else {
                        site_node(&item.src_site)?
                    };
                    if item.link {
                        continue;
                    }
                    if item.kind == TransferKind::ContainerImage && item.bytes == 0 {
                        return Err(SimError::MissingSize(item.name.clone()));
                    }
                    specs.push(FlowSpec {
                        name: item.name.clone(),
                        kind: item.kind,
                        src: End::Node(src),
                        dst: End::Node(site_node(&item.dst_site)?),
                        bytes: item.bytes,
                    });
                }
                phases.push(Phase::Flows(specs));
            }
        }
        jobs.push(JobRun {
            phases,
            next: 0,
            node: usize::MAX,
            flows_left: 0,
            start: 0.0,
            done: false,
        });
    }

    let n = node_names.len();
    let mut caps: Vec<f64> = Vec::with_capacity(2 * n + topo.links.len());
    for node in topo.nodes() {
        caps.push(node.nic_bandwidth);
        caps.push(node.nic_bandwidth);
    }
    let mut link_index = BTreeMap::new();
    for l in &topo.links {
        let (a, b) = (idx(&l.a).unwrap(), idx(&l.b).unwrap());
        link_index.insert((a.min(b), a.max(b)), caps.len());
        caps.push(l.bandwidth);
    }

    let mut engine = Engine {
        ewf,
        topo,
        cfg,
        free_slots: topo.nodes().iter().map(|n| n.slots as usize).collect(),
        disk_free_at: vec![0.0; n],
        images: Vec::new(),
        jobs,
        flows: Vec::new(),
        timers: Vec::new(),
        timer_seq: 0,
        now: 0.0,
        egress: vec![Vec::new(); n],
        ingress: vec![Vec::new(); n],
        backlog: vec![Vec::new(); n],
        transfers: Vec::new(),
        timeline: vec![None; ewf.jobs.len()],
        loads: 0,
        hits: 0,
        rates_dirty: false,
        node_names,
        caps,
        link_index,
    };
    engine.run(&dag)?;
    Ok(engine.finish())
}

impl Engine<'_> {
    fn run(&mut self, dag: &crate::dag::Dag) -> Result<(), SimError> {
        let total = self.jobs.len();
        let mut indeg: Vec<usize> = (0..total).map(|i| dag.parents(i).len()).collect();
        let mut ready: VecDeque<usize> = (0..total).filter(|&i| indeg[i] == 0).collect();
        sort_by_id(&mut ready, self.ewf);
        let mut finished = 0usize;
        let mut newly_done: Vec<usize> = Vec::new();

        loop {
            // dispatch in readiness order; blocked jobs keep their place
            let mut waiting = VecDeque::new();
            while let Some(j) = ready.pop_front() {
                match self.pick_node(j)? {
                    Some(node) => {
                        self.free_slots[node] -= 1;
                        self.jobs[j].node = node;
                        self.jobs[j].start = self.now;
                        self.advance_job(j, &mut newly_done);
                    }
                    None => waiting.push_back(j),
                }
            }
            ready = waiting;

            // settle completions that happened without time passing
            while !newly_done.is_empty() {
                let mut released: Vec<usize> = Vec::new();
                for j in std::mem::take(&mut newly_done) {
                    finished += 1;
                    self.free_slots[self.jobs[j].node] += 1;
                    self.timeline[j] = Some(JobSpan {
                        job: self.ewf.jobs[j].id.clone(),
                        node: self.node_names[self.jobs[j].node].clone(),
                        start_s: self.jobs[j].start,
                        end_s: self.now,
                    });
                    for &c in dag.children(j) {
                        indeg[c] -= 1;
                        if indeg[c] == 0 {
                            released.push(c);
                        }
                    }
                }
                let mut released: VecDeque<usize> = released.into();
                sort_by_id(&mut released, self.ewf);
                ready.extend(released);
                let mut waiting = VecDeque::new();
                while let Some(j) = ready.pop_front() {
                    match self.pick_node(j)? {
                        Some(node) => {
                            self.free_slots[node] -= 1;
                            self.jobs[j].node = node;
                            self.jobs[j].start = self.now;
                            self.advance_job(j, &mut newly_done);
                        }
                        None => waiting.push_back(j),
                    }
                }
                ready = waiting;
            }

            if finished == total {
                return Ok(());
            }
            if self.rates_dirty {
                self.allocate();
            }
            let finish: Vec<f64> = self
                .flows
                .iter()
                .map(|f| self.now + f.remaining / f.rate)
                .collect();
            let next_flow = finish.iter().copied().fold(f64::INFINITY, f64::min);
            let next_timer = self
                .timers
                .iter()
                .map(|t| t.0)
                .fold(f64::INFINITY, f64::min);
            let next = next_flow.min(next_timer);
            if !next.is_finite() {
                return Err(SimError::InvalidInput(
                    "simulation stalled: jobs are waiting but nothing is running".into(),
                ));
            }
            self.advance_time(next);
            // judged by finish time, since a tiny remainder may not move the clock
            for (f, t) in self.flows.iter_mut().zip(finish) {
                if t <= next {
                    f.remaining = 0.0;
                }
            }

            // flows finishing now
            let mut i = 0;
            while i < self.flows.len() {
                let f = &self.flows[i];
                if f.remaining <= f.bytes * 1e-12 + 1e-6 {
                    let f = self.flows.swap_remove(i);
                    self.complete_flow(f, &mut newly_done);
                    self.rates_dirty = true;
                } else {
                    i += 1;
                }
            }
            // timers due now, in (time, sequence) order
            self.timers
                .sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            while self
                .timers
                .first()
                .is_some_and(|t| t.0 <= self.now + 1e-9)
            {
                let (_, _, timer) = self.timers.remove(0);
                match timer {
                    Timer::PhaseDone(j) => {
                        self.jobs[j].next += 1;
                        self.advance_job(j, &mut newly_done);
                    }
                    Timer::UntarDone { job, key, .. } => {
                        self.loads += 1;
                        let waiters = std::mem::take(&mut self.images[key].3);
                        if self.images[key].2 == ImageState::Loading {
                            self.images[key].2 = ImageState::Loaded;
                        }
                        self.jobs[job].next += 1;
                        self.advance_job(job, &mut newly_done);
                        for w in waiters {
                            self.hits += 1;
                            self.jobs[w].next += 1;
                            self.advance_job(w, &mut newly_done);
                        }
                    }
                }
            }
        }
    }

    fn pick_node(&self, j: usize) -> Result<Option<usize>, SimError> {
        let job = &self.ewf.jobs[j];
        if job.kind() != JobKind::Compute {
            return Ok((self.free_slots[0] > 0).then_some(0));
        }
        let members = self
            .topo
            .sites
            .get(&job.site)
            .ok_or_else(|| SimError::UnmappedSite(job.site.clone()))?;
        let mut best: Option<usize> = None;
        for m in members {
            let k = self.node_names.iter().position(|n| n == m).expect("validated");
            if self.free_slots[k] > 0 && best.is_none_or(|b| self.free_slots[k] > self.free_slots[b]) {
                best = Some(k);
            }
        }
        Ok(best)
    }

    fn add_timer(&mut self, at: f64, timer: Timer) {
        self.timers.push((at, self.timer_seq, timer));
        self.timer_seq += 1;
    }

    /// Starts phases of job `j` from its current position until one blocks.
    fn advance_job(&mut self, j: usize, done: &mut Vec<usize>) {
        let node = self.jobs[j].node;
        loop {
            let Some(phase) = self.jobs[j].phases.get(self.jobs[j].next).cloned() else {
                if !self.jobs[j].done {
                    self.jobs[j].done = true;
                    done.push(j);
                }
                return;
            };
            match phase {
                Phase::Delay(d) if d > 0.0 => {
                    self.add_timer(self.now + d, Timer::PhaseDone(j));
                    return;
                }
                Phase::Delay(_) => self.jobs[j].next += 1,
                Phase::Flows(specs) => {
                    let mut started = 0;
                    for s in specs {
                        let src = match s.src {
                            End::Worker => node,
                            End::Node(k) => k,
                        };
                        let dst = match s.dst {
                            End::Worker => node,
                            End::Node(k) => k,
                        };
                        if src == dst || s.bytes == 0 {
                            self.transfers.push(TransferRecord {
                                job: self.ewf.jobs[j].id.clone(),
                                name: s.name,
                                kind: s.kind,
                                src: self.node_names[src].clone(),
                                dst: self.node_names[dst].clone(),
                                bytes: s.bytes,
                                start_s: self.now,
                                end_s: self.now,
                            });
                            continue;
                        }
                        let mut path = vec![2 * src, 2 * dst + 1];
                        if let Some(&l) = self.link_index.get(&(src.min(dst), src.max(dst))) {
                            path.push(l);
                        }
                        self.flows.push(Flow {
                            job: j,
                            name: s.name,
                            kind: s.kind,
                            src,
                            dst,
                            bytes: s.bytes as f64,
                            remaining: s.bytes as f64,
                            sent: 0.0,
                            rate: 0.0,
                            start: self.now,
                            path,
                        });
                        started += 1;
                    }
                    if started == 0 {
                        self.jobs[j].next += 1;
                    } else {
                        self.jobs[j].flows_left = started;
                        self.rates_dirty = true;
                        return;
                    }
                }
                Phase::Untar { image, bytes, dedup } => {
                    let key = self.image_key(node, &image);
                    if dedup {
                        match self.images[key].2 {
                            ImageState::Loaded => {
                                self.hits += 1;
                                self.jobs[j].next += 1;
                                continue;
                            }
                            ImageState::Loading => {
                                self.images[key].3.push(j);
                                return;
                            }
                            ImageState::NotLoaded => self.images[key].2 = ImageState::Loading,
                        }
                    }
                    let end = self.disk_work(node, bytes as f64);
                    self.add_timer(end, Timer::UntarDone { job: j, node, key });
                    return;
                }
            }
        }
    }

    fn image_key(&mut self, node: usize, image: &str) -> usize {
        if let Some(k) = self
            .images
            .iter()
            .position(|(n, i, _, _)| *n == node && i == image)
        {
            return k;
        }
        self.images
            .push((node, image.to_string(), ImageState::NotLoaded, Vec::new()));
        self.images.len() - 1
    }

    /// Queues `bytes` of work on the node's disk; returns its finish time.
    fn disk_work(&mut self, node: usize, bytes: f64) -> f64 {
        let rate = self.topo.nodes()[node].disk_untar_rate;
        let start = self.disk_free_at[node].max(self.now);
        self.disk_free_at[node] = start + bytes / rate;
        self.disk_free_at[node]
    }

    fn complete_flow(&mut self, f: Flow, done: &mut Vec<usize>) {
        // rounding residue goes to the bin the flow ends in
        let residue = f.bytes - f.sent;
        if residue != 0.0 {
            let interval = self.cfg.sample_interval_s;
            let k = ((self.now / interval).ceil() as usize).saturating_sub(1);
            for series in [&mut self.egress[f.src], &mut self.ingress[f.dst]] {
                if series.len() <= k {
                    series.resize(k + 1, 0.0);
                }
                series[k] += residue;
            }
        }
        self.disk_work(f.dst, f.bytes);
        self.transfers.push(TransferRecord {
            job: self.ewf.jobs[f.job].id.clone(),
            name: f.name,
            kind: f.kind,
            src: self.node_names[f.src].clone(),
            dst: self.node_names[f.dst].clone(),
            bytes: f.bytes as u64,
            start_s: f.start,
            end_s: self.now,
        });
        let j = f.job;
        self.jobs[j].flows_left -= 1;
        if self.jobs[j].flows_left == 0 {
            self.jobs[j].next += 1;
            self.advance_job(j, done);
        }
    }

    fn allocate(&mut self) {
        let paths: Vec<Vec<usize>> = self.flows.iter().map(|f| f.path.clone()).collect();
        let rates = if self.cfg.fair_share {
            max_min_fair(&self.caps, &paths)
        } else {
            uncontended(&self.caps, &paths)
        };
        for (f, r) in self.flows.iter_mut().zip(rates) {
            f.rate = r;
        }
        self.rates_dirty = false;
    }

    fn advance_time(&mut self, to: f64) {
        let from = self.now;
        let interval = self.cfg.sample_interval_s;
        if to > from {
            for f in &mut self.flows {
                let dt_bytes = (f.rate * (to - from)).min(f.remaining);
                let per_s = dt_bytes / (to - from);
                spread(&mut self.egress[f.src], interval, from, to, per_s);
                spread(&mut self.ingress[f.dst], interval, from, to, per_s);
                f.remaining -= dt_bytes;
                f.sent += dt_bytes;
            }
            for (node, free_at) in self.disk_free_at.iter().enumerate() {
                spread_backlog(&mut self.backlog[node], interval, from, to, *free_at);
            }
        }
        self.now = to;
    }

    fn finish(self) -> SimResult {
        let interval = self.cfg.sample_interval_s;
        let makespan = self.now;
        let bins = (makespan / interval - 1e-9).ceil().max(0.0) as usize;
        let shape = |mut v: Vec<f64>| {
            // residues can land one bin past the end when makespan sits on a boundary
            if v.len() > bins && bins > 0 {
                let extra: f64 = v[bins..].iter().sum();
                v.truncate(bins);
                v[bins - 1] += extra;
            }
            v.resize(bins, 0.0);
            v
        };
        let mut egress = BTreeMap::new();
        let mut ingress = BTreeMap::new();
        let mut io_wait = BTreeMap::new();
        let nodes = self.topo.nodes();
        for (k, name) in self.node_names.iter().enumerate() {
            egress.insert(name.clone(), shape(self.egress[k].clone()));
            ingress.insert(name.clone(), shape(self.ingress[k].clone()));
            let base = nodes[k].disk_service_base_ms;
            let mut backlog = self.backlog[k].clone();
            backlog.resize(bins, 0.0);
            backlog.truncate(bins);
            io_wait.insert(
                name.clone(),
                backlog
                    .iter()
                    .map(|b| base + 1000.0 * b / interval)
                    .collect(),
            );
        }
        let mut count = BTreeMap::new();
        let mut bytes = BTreeMap::new();
        for t in self.transfers.iter().filter(|t| t.is_network()) {
            *count.entry(t.kind).or_insert(0) += 1;
            *bytes.entry(t.kind).or_insert(0) += t.bytes;
        }
        SimResult {
            makespan_s: makespan,
            sample_interval_s: interval,
            egress_bytes: egress,
            ingress_bytes: ingress,
            io_wait_ms: io_wait,
            transfers: self.transfers,
            transfer_count_by_kind: count,
            transfer_bytes_by_kind: bytes,
            job_timeline: self.timeline.into_iter().flatten().collect(),
            image_loads: self.loads,
            image_load_hits: self.hits,
        }
    }
}

fn sort_by_id(q: &mut VecDeque<usize>, ewf: &ExecutableWorkflow) {
    q.make_contiguous()
        .sort_by(|&a, &b| ewf.jobs[a].id.cmp(&ewf.jobs[b].id));
}

/// A lower bound on the makespan: the heaviest DAG path where each job
/// weighs its task runtimes plus its transfer phases at the fastest
/// capacity in the topology.
pub fn critical_path_lower_bound(
    ewf: &ExecutableWorkflow,
    plans: &BTreeMap<String, WrapperPlan>,
    topo: &Topology,
    cfg: &SimConfig,
) -> Result<f64, SimError> {
    let dag = ewf
        .dag()
        .map_err(|e| SimError::InvalidInput(e.to_string()))?;
    let bw = topo.max_bandwidth();
    // sharing only bounds a phase by its total when capacities are shared
    let phase = |sizes: &mut dyn Iterator<Item = u64>| -> f64 {
        if cfg.fair_share {
            sizes.sum::<u64>() as f64 / bw
        } else {
            sizes.max().unwrap_or(0) as f64 / bw
        }
    };
    let node_of = |site: &str| topo.sites.get(site).and_then(|m| m.first()).cloned();
    let weights: Vec<f64> = ewf
        .jobs
        .iter()
        .map(|job| match (plans.get(&job.id), job.compute()) {
            (Some(plan), Some(c)) => {
                // a worker that is also the staging node moves nothing
                let local = node_of(&c.staging_site).is_some_and(|s| {
                    topo.sites.get(&job.site).is_some_and(|m| m.contains(&s))
                });
                plan.execution_order()
                    .iter()
                    .map(|s| match s {
                        Step::LaunchTask { runtime_s, .. } => runtime_s * (1.0 - cfg.runtime_jitter),
                        Step::MaterializeImage {
                            method: MaterializeMethod::Pull,
                            bytes,
                            ..
                        } if !local => *bytes as f64 / bw,
                        Step::StageIn { files } | Step::StageOut { files } if !local => {
                            phase(&mut files.iter().filter(|f| !f.link).map(|f| f.bytes))
                        }
                        _ => 0.0,
                    })
                    .sum()
            }
            _ => {
                let registry = topo
                    .registry_node
                    .clone()
                    .unwrap_or_else(|| topo.submit.name.clone());
                phase(&mut job.transfer_items().iter().filter(|i| {
                    let src = if job.kind() == JobKind::ContainerFetch {
                        Some(registry.clone())
                    } else {
                        node_of(&i.src_site)
                    };
                    !i.link && src != node_of(&i.dst_site)
                }).map(|i| i.bytes))
            }
        })
        .collect();
    dag.longest_weighted_path(&weights)
        .map_err(|e| SimError::InvalidInput(format!("{e:?}")))
}
