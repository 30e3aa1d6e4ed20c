//! Seeded generators shared by the property and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cwflow::catalog::{
    parse_image_url, parse_mount_spec, Catalog, ContainerDef, EnvMap, ImageScheme, InstallType, MountSpec, Runtime,
    TransformationEntry,
};
use cwflow::planner::{ExecutableWorkflow, PlanConfig, Site};
use cwflow::simulator::{NodeSpec, Topology};
use cwflow::workflow::{AbstractWorkflow, Task};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random DAG of `n` tasks over transformations `tr0..tr{n_tr}`. Every
/// task writes one file; parents are chosen among earlier tasks, so the
/// numbering is one valid order.
pub fn random_workflow(rng: &mut impl Rng, n: usize, n_tr: usize) -> AbstractWorkflow {
    let mut wf = AbstractWorkflow::new("random");
    for i in 0..n {
        let out = format!("f{i:03}");
        wf.add_file(&out, rng.gen_range(1..5_000_000), None);
        let mut task = Task::new(format!("t{i:03}"), format!("tr{}", rng.gen_range(0..n_tr)))
            .writes(out)
            .runtime(rng.gen_range(0.5..5.0));
        let parents = if i == 0 { 0 } else { rng.gen_range(0..=3.min(i)) };
        let mut chosen = BTreeSet::new();
        for _ in 0..parents {
            chosen.insert(rng.gen_range(0..i));
        }
        for p in chosen {
            task = task.reads(format!("f{p:03}"));
        }
        if rng.gen_bool(0.3) {
            let raw = format!("raw{i:03}");
            wf.add_file(&raw, rng.gen_range(1..2_000_000), Some(format!("file:///in/{raw}")));
            task = task.reads(raw);
        }
        wf.add_task(task);
    }
    wf
}

pub fn random_container(rng: &mut impl Rng, i: usize) -> ContainerDef {
    let runtime = *[Runtime::Docker, Runtime::Singularity, Runtime::Shifter]
        .choose(rng)
        .unwrap();
    let site_local = runtime != Runtime::Shifter && rng.gen_bool(0.3);
    let url = match runtime {
        Runtime::Shifter => format!("shifter:///lab/img{i}:latest"),
        _ if site_local => format!("file:///cvmfs/images/img{i}.img"),
        Runtime::Docker => format!("docker:///lab/img{i}:v{}", rng.gen_range(1..4)),
        Runtime::Singularity => format!("shub://hub.example.org/lab/img{i}"),
    };
    let mut mounts = Vec::new();
    if rng.gen_bool(0.5) {
        mounts.push(MountSpec::new(format!("/data/{i}"), "/data"));
    }
    ContainerDef {
        name: format!("c{i}"),
        image: parse_image_url(&url).unwrap(),
        runtime,
        mounts,
        profiles: EnvMap::new(),
        image_size_bytes: if runtime == Runtime::Shifter {
            0
        } else {
            rng.gen_range(10_000_000..500_000_000)
        },
        site_local,
    }
}

/// One planning problem: up to three containers and two staging sites.
pub struct Setup {
    pub wf: AbstractWorkflow,
    pub cat: Catalog,
    pub sites: Vec<Site>,
    pub cfg: PlanConfig,
}

pub fn random_setup(rng: &mut impl Rng, max_tasks: usize) -> Setup {
    let n_tr = rng.gen_range(1..=4);
    let n = rng.gen_range(1..=max_tasks);
    let wf = random_workflow(rng, n, n_tr);

    let n_stage = rng.gen_range(1..=2);
    let mut sites = vec![Site::storage("local")];
    for s in 0..n_stage {
        sites.push(Site::storage(&format!("stage{s}")));
    }
    let n_compute = rng.gen_range(1..=3);
    for c in 0..n_compute {
        sites.push(Site {
            name: format!("site{c}"),
            shared_fs: rng.gen_bool(0.4),
            staging_site: format!("stage{}", rng.gen_range(0..n_stage)),
            worker_count: rng.gen_range(1..=3),
            slots_per_worker: rng.gen_range(1..=4),
            runtimes_available: [Runtime::Docker, Runtime::Singularity, Runtime::Shifter]
                .into_iter()
                .collect(),
            cvmfs_like_paths: if rng.gen_bool(0.5) {
                vec!["/cvmfs".into()]
            } else {
                Vec::new()
            },
        });
    }

    let n_containers = rng.gen_range(0..=3);
    let containers: Vec<ContainerDef> =
        (0..n_containers).map(|i| random_container(rng, i)).collect();
    let mut cat = Catalog::default();
    for c in &containers {
        cat.containers.insert(c.name.clone(), c.clone());
    }
    for t in 0..n_tr {
        let container = if containers.is_empty() || rng.gen_bool(0.2) {
            None
        } else {
            Some(containers.choose(rng).unwrap().name.clone())
        };
        let mut placed = false;
        for c in 0..n_compute {
            if placed && rng.gen_bool(0.5) {
                continue;
            }
            placed = true;
            cat.transformations.push(TransformationEntry {
                namespace: None,
                name: format!("tr{t}"),
                version: None,
                site: format!("site{c}"),
                arch: None,
                os: None,
                pfn: format!("/usr/bin/tr{t}"),
                install_type: InstallType::Installed,
                container: container.clone(),
                profiles: EnvMap::new(),
            });
        }
    }
    let cfg = PlanConfig {
        cluster_size: rng.gen_range(1..=4),
        staging_inside_container: rng.gen_bool(0.5),
        docker_load_dedup: rng.gen_bool(0.5),
        cleanup: rng.gen_bool(0.7),
        ..PlanConfig::default()
    };
    Setup { wf, cat, sites, cfg }
}

/// Brute force: the distinct (container, staging site) pairs among
/// compute jobs whose image has to be moved to the worker.
pub fn expected_fetch_pairs(ewf: &ExecutableWorkflow, cat: &Catalog) -> BTreeSet<(String, String)> {
    let sites: BTreeMap<&str, &Site> = ewf.sites.iter().map(|s| (s.name.as_str(), s)).collect();
    let mut pairs = BTreeSet::new();
    for job in &ewf.jobs {
        let Some(c) = job.compute() else { continue };
        let Some(name) = &c.container else { continue };
        let def = &cat.containers[name];
        let site = sites[job.site.as_str()];
        let pre_deployed = def.site_local
            && def.image.scheme == ImageScheme::File
            && site.cvmfs_like_paths.iter().any(|p| def.image.locator.starts_with(&format!("{p}/")));
        if def.runtime == Runtime::Shifter || pre_deployed {
            continue;
        }
        pairs.insert((name.clone(), site.staging_site.clone()));
    }
    pairs
}

/// A topology for `sites`: one submit node serving every storage site and
/// one to three workers per compute site.
pub fn topology_for(rng: &mut impl Rng, sites: &[Site]) -> Topology {
    let mut map = BTreeMap::new();
    let mut workers = Vec::new();
    for s in sites {
        if s.runtimes_available.is_empty() {
            map.insert(s.name.clone(), vec!["submit".to_string()]);
            continue;
        }
        let mut names = Vec::new();
        for w in 0..rng.gen_range(1..=3) {
            let name = format!("{}-w{w}", s.name);
            let bw = [125e6, 1.25e9][rng.gen_range(0..2)];
            workers.push(NodeSpec::new(name.clone(), rng.gen_range(1..=8), bw));
            names.push(name);
        }
        map.insert(s.name.clone(), names);
    }
    Topology {
        submit: NodeSpec::new("submit", 4, [125e6, 1.25e9][rng.gen_range(0..2)]),
        nfs: None,
        workers,
        links: Vec::new(),
        sites: map,
        registry_node: None,
    }
}

use cwflow::launcher::{build_wrapper_plan, Step, StepKind, WrapperPlan};
use cwflow::planner::{
    plan, ComputePayload, FileRef, Job, JobPayload, PlacementMode, TaskInvocation,
};

/// Checks the job-directory mount and the wrapper step order of `p`,
/// built for compute job `job`.
pub fn check_wrapper_laws(p: &WrapperPlan, job: &Job) -> Result<(), String> {
    let compute = job.compute().ok_or("not a compute job")?;
    let order = p.execution_order();
    let kinds: Vec<StepKind> = order.iter().map(|s| s.kind()).collect();
    let at = |k: StepKind| -> Vec<usize> {
        kinds.iter().enumerate().filter(|(_, &x)| x == k).map(|(i, _)| i).collect()
    };
    let once = |k: StepKind| -> Result<Option<usize>, String> {
        match at(k).as_slice() {
            [] => Ok(None),
            [i] => Ok(Some(*i)),
            _ => Err(format!("{k} appears more than once")),
        }
    };
    let before = |a: Option<usize>, b: Option<usize>, what: &str| -> Result<(), String> {
        match (a, b) {
            (Some(x), Some(y)) if x >= y => Err(format!("order violated: {what} in {kinds:?}")),
            _ => Ok(()),
        }
    };

    if kinds.first() != Some(&StepKind::CreateJobDir) {
        return Err("job directory is not created first".into());
    }
    if kinds.last() != Some(&StepKind::RemoveJobDir) || at(StepKind::RemoveJobDir).len() != 1 {
        return Err("job directory is not removed exactly once, at the end".into());
    }
    once(StepKind::CreateJobDir)?;

    let launched: Vec<&str> = order
        .iter()
        .filter_map(|s| match s {
            Step::LaunchTask { task_id, .. } => Some(task_id.as_str()),
            _ => None,
        })
        .collect();
    let members: Vec<&str> = compute.tasks.iter().map(|t| t.task_id.as_str()).collect();
    if launched != members {
        return Err(format!("launches {launched:?}, expected {members:?}"));
    }
    let first_launch = at(StepKind::LaunchTask).first().copied();
    let last_launch = at(StepKind::LaunchTask).last().copied();
    let stage_in = once(StepKind::StageIn)?;
    let stage_out = once(StepKind::StageOut)?;
    let setup = once(StepKind::WorkerSetup)?;
    let env = once(StepKind::EnvSetup)?;
    if setup.is_none() || env.is_none() {
        return Err("worker or environment setup missing".into());
    }
    before(setup, env, "worker setup before environment")?;
    if p.backend.is_none() || p.staging_inside {
        before(env, stage_in, "environment before stage-in")?;
    }
    before(env, first_launch, "environment before launch")?;
    before(stage_in, first_launch, "stage-in before launch")?;
    before(last_launch, stage_out, "launch before stage-out")?;

    let job_dir = p.job_dir();
    let start = once(StepKind::StartContainer)?;
    let Some(runtime) = p.backend else {
        for k in [
            StepKind::StartContainer,
            StepKind::MaterializeImage,
            StepKind::LoadImage,
            StepKind::StopContainer,
        ] {
            if !at(k).is_empty() {
                return Err(format!("{k} in a job without container"));
            }
        }
        return if p.mounts.is_empty() {
            Ok(())
        } else {
            Err("mounts in a job without container".into())
        };
    };

    // mounts
    let point = match runtime {
        Runtime::Singularity => "/srv",
        Runtime::Docker | Runtime::Shifter => "/scratch",
    };
    let first = p.mounts.first().ok_or("container job without mounts")?;
    if first.src != job_dir || first.dst != point {
        return Err(format!("job dir mounted as {}:{}, expected {job_dir}:{point}", first.src, first.dst));
    }
    if p.mounts.iter().filter(|m| m.src == job_dir).count() != 1 {
        return Err("job directory mounted more than once".into());
    }
    match order.iter().find(|s| s.kind() == StepKind::StartContainer) {
        Some(Step::StartContainer { mounts, workdir, backend, .. }) => {
            if mounts != &p.mounts || workdir != point || *backend != runtime {
                return Err("container start disagrees with the plan mounts".into());
            }
        }
        _ => return Err("container never started".into()),
    }

    // container lifecycle
    before(start, setup, "start before in-container setup")?;
    let materialize = once(StepKind::MaterializeImage)?;
    if (runtime == Runtime::Shifter) != materialize.is_none() {
        return Err("image materialization must happen iff not Shifter".into());
    }
    if materialize.is_some() && materialize != Some(1) {
        return Err("image not materialized right after the job directory".into());
    }
    before(materialize, start, "image before container start")?;
    let load = once(StepKind::LoadImage)?;
    let user = once(StepKind::EnsureUser)?;
    let stop = once(StepKind::StopContainer)?;
    let unload = once(StepKind::UnloadImage)?;
    let docker = runtime == Runtime::Docker;
    for (k, pos) in [
        (StepKind::LoadImage, load),
        (StepKind::EnsureUser, user),
        (StepKind::StopContainer, stop),
        (StepKind::UnloadImage, unload),
    ] {
        if pos.is_some() != docker {
            return Err(format!("{k} must appear iff the backend is Docker"));
        }
    }
    before(materialize, load, "image file before load")?;
    before(load, user, "load before user setup")?;
    before(user, start, "user setup before start")?;
    before(last_launch, stop, "launch before stop")?;
    before(stop, unload, "stop before unload")?;

    let inside = |i: Option<usize>| {
        i.map(|i| p.container_steps.iter().any(|s| std::ptr::eq(s, order[i])))
    };
    for (what, pos) in [("stage-in", stage_in), ("stage-out", stage_out)] {
        if let Some(flag) = inside(pos) {
            if flag != p.staging_inside {
                return Err(format!("{what} on the wrong side of the container boundary"));
            }
        }
    }
    if !p.staging_inside {
        before(stage_in, start, "host stage-in before start")?;
        before(stop, stage_out, "host stage-out after stop")?;
    }
    Ok(())
}

/// `n` independent Docker tasks planned onto one worker with `n` slots.
pub fn colocated_docker(n: usize, dedup: bool) -> ExecutableWorkflow {
    let mut wf = AbstractWorkflow::new("colocated");
    for i in 0..n {
        let out = format!("out{i:02}");
        wf.add_file(&out, 1000, None);
        wf.add_task(Task::new(format!("job{i:02}"), "tool").writes(out).runtime(1.0));
    }
    let container = ContainerDef {
        name: "tool-image".into(),
        image: parse_image_url("docker:///lab/tool:1.0").unwrap(),
        runtime: Runtime::Docker,
        mounts: Vec::new(),
        profiles: EnvMap::new(),
        image_size_bytes: 300_000_000,
        site_local: false,
    };
    let mut cat = Catalog::default();
    cat.containers.insert(container.name.clone(), container);
    cat.transformations.push(TransformationEntry {
        namespace: None,
        name: "tool".into(),
        version: None,
        site: "worker".into(),
        arch: None,
        os: None,
        pfn: "/usr/bin/tool".into(),
        install_type: InstallType::Installed,
        container: Some("tool-image".into()),
        profiles: EnvMap::new(),
    });
    let sites = vec![
        Site::storage("local"),
        Site {
            name: "worker".into(),
            shared_fs: false,
            staging_site: "local".into(),
            worker_count: 1,
            slots_per_worker: n as u32,
            runtimes_available: [Runtime::Docker].into_iter().collect(),
            cvmfs_like_paths: Vec::new(),
        },
    ];
    let cfg = PlanConfig {
        docker_load_dedup: dedup,
        ..PlanConfig::default()
    };
    plan(&wf, &cat, &sites, &cfg).unwrap()
}

pub fn golden_job(container: Option<&str>, shared_fs: bool) -> Job {
    let task = |id: &str, input: &str, output: &str| TaskInvocation {
        task_id: id.into(),
        transformation: "lab::filter:2.1".into(),
        executable: "/opt/lab/bin/filter".into(),
        stage_executable: false,
        runtime_s: 4.0,
        inputs: vec![FileRef {
            name: input.into(),
            bytes: 2_000_000,
        }],
        outputs: vec![FileRef {
            name: output.into(),
            bytes: 1_000_000,
        }],
        env: [("FILTER_LEVEL".to_string(), "3".to_string())].into_iter().collect(),
    };
    Job {
        id: "cluster_hpc_filter_l0_0".into(),
        site: "hpc".into(),
        payload: JobPayload::Compute(ComputePayload {
            tasks: vec![task("filter_a", "in_a.dat", "mid_a.dat"), task("filter_b", "mid_a.dat", "out_b.dat")],
            container: container.map(String::from),
            placement: None,
            staging_site: "store".into(),
            shared_fs,
        }),
    }
}

pub fn golden_container(runtime: Runtime) -> ContainerDef {
    let url = match runtime {
        Runtime::Docker => "docker:///lab/filter:2.1",
        Runtime::Singularity => "shub://hub.example.org/lab/filter",
        Runtime::Shifter => "shifter:///lab/filter:2.1",
    };
    ContainerDef {
        name: "filter".into(),
        image: parse_image_url(url).unwrap(),
        runtime,
        mounts: vec![parse_mount_spec("/data/reference:/reference:ro").unwrap()],
        profiles: [("OMP_NUM_THREADS".to_string(), "4".to_string())].into_iter().collect(),
        image_size_bytes: if runtime == Runtime::Shifter { 0 } else { 250_000_000 },
        site_local: false,
    }
}

/// Docker with staged copy and in-container staging, Singularity through
/// a shared filesystem with host staging, Shifter from its registry.
pub fn golden_plan(runtime: Runtime) -> WrapperPlan {
    let (placement, shared, inside) = match runtime {
        Runtime::Docker => (PlacementMode::StageCopy, false, true),
        Runtime::Singularity => (PlacementMode::SharedFsSymlink, true, false),
        Runtime::Shifter => (PlacementMode::ShifterLocal, false, true),
    };
    let mut job = golden_job(Some("filter"), shared);
    if let JobPayload::Compute(c) = &mut job.payload {
        c.placement = Some(placement);
    }
    let cfg = PlanConfig {
        staging_inside_container: inside,
        credentials: [("LAB_TOKEN_FILE".to_string(), "/etc/lab/token".to_string())]
            .into_iter()
            .collect(),
        ..PlanConfig::default()
    };
    build_wrapper_plan(&job, Some(&golden_container(runtime)), Some(placement), &cfg).unwrap()
}

pub fn golden_path(runtime: Runtime) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{runtime}.sh"))
}
