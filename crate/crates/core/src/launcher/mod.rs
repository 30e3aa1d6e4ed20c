//! Per-job wrapper plans: host-side job directory and image handling around
//! an in-container script that stages data and launches the tasks.

mod execute;
mod render;

pub use execute::{
    execute_local, ExecMode, ExecutionReport, JobReport, JobStatus, MockOptions, StepRecord,
};
pub use render::render_wrapper;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{ContainerDef, EnvMap, MountSpec, Runtime};
use crate::planner::{executable_name, ExecutableWorkflow, Job, PlacementMode, PlanConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LauncherError {
    #[error("job `{0}` is not a compute job")]
    NotACompute(String),
    #[error("job `{job}`: expected container {expected:?}, got {found:?}")]
    ContainerMismatch {
        job: String,
        expected: Option<String>,
        found: Option<String>,
    },
    #[error("job `{job}` needs {runtime}, which site `{site}` does not provide")]
    RuntimeUnavailable {
        job: String,
        runtime: Runtime,
        site: String,
    },
    #[error("job `{job}`: {reason}")]
    InconsistentPlacement { job: String, reason: String },
    #[error("job `{job}` failed at step {step}: {reason}")]
    StepFailed {
        job: String,
        step: StepKind,
        reason: String,
        report: Box<ExecutionReport>,
    },
    #[error("container runtime `{0}` is not installed on this host")]
    MissingRuntime(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StepKind {
    CreateJobDir,
    MaterializeImage,
    LoadImage,
    EnsureUser,
    StartContainer,
    WorkerSetup,
    EnvSetup,
    StageIn,
    LaunchTask,
    StageOut,
    StopContainer,
    UnloadImage,
    RemoveJobDir,
}

impl StepKind {
    pub const ALL: [StepKind; 13] = [
        StepKind::CreateJobDir,
        StepKind::MaterializeImage,
        StepKind::LoadImage,
        StepKind::EnsureUser,
        StepKind::StartContainer,
        StepKind::WorkerSetup,
        StepKind::EnvSetup,
        StepKind::StageIn,
        StepKind::LaunchTask,
        StepKind::StageOut,
        StepKind::StopContainer,
        StepKind::UnloadImage,
        StepKind::RemoveJobDir,
    ];
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for StepKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StepKind::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown step `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaterializeMethod {
    /// Copy the image file from the staging site.
    Pull,
    /// Symlink the image file on a shared filesystem.
    Symlink,
    /// Use the image in place.
    Reference,
}

/// A file moved between the staging site and the job directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedFile {
    /// Name inside the job directory.
    pub name: String,
    /// Staging-site URL.
    pub url: String,
    pub bytes: u64,
    pub link: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Step {
    CreateJobDir {
        path: String,
    },
    MaterializeImage {
        method: MaterializeMethod,
        source: String,
        target: String,
        bytes: u64,
    },
    LoadImage {
        image: String,
        file: String,
        bytes: u64,
        dedup: bool,
    },
    /// Mirror the host user and group inside the container.
    EnsureUser,
    StartContainer {
        backend: Runtime,
        name: String,
        image: String,
        mounts: Vec<MountSpec>,
        workdir: String,
    },
    /// Check that the worker tools the wrapper relies on are present.
    WorkerSetup,
    EnvSetup {
        vars: EnvMap,
    },
    StageIn {
        files: Vec<StagedFile>,
    },
    LaunchTask {
        task_id: String,
        executable: String,
        env: EnvMap,
        runtime_s: f64,
    },
    StageOut {
        files: Vec<StagedFile>,
    },
    StopContainer {
        name: String,
    },
    UnloadImage {
        image: String,
        keep_loaded: bool,
    },
    RemoveJobDir {
        path: String,
    },
}

impl Step {
    pub fn kind(&self) -> StepKind {
        match self {
            Step::CreateJobDir { .. } => StepKind::CreateJobDir,
            Step::MaterializeImage { .. } => StepKind::MaterializeImage,
            Step::LoadImage { .. } => StepKind::LoadImage,
            Step::EnsureUser => StepKind::EnsureUser,
            Step::StartContainer { .. } => StepKind::StartContainer,
            Step::WorkerSetup => StepKind::WorkerSetup,
            Step::EnvSetup { .. } => StepKind::EnvSetup,
            Step::StageIn { .. } => StepKind::StageIn,
            Step::LaunchTask { .. } => StepKind::LaunchTask,
            Step::StageOut { .. } => StepKind::StageOut,
            Step::StopContainer { .. } => StepKind::StopContainer,
            Step::UnloadImage { .. } => StepKind::UnloadImage,
            Step::RemoveJobDir { .. } => StepKind::RemoveJobDir,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrapperPlan {
    pub job_id: String,
    pub host_steps: Vec<Step>,
    pub container_steps: Vec<Step>,
    pub backend: Option<Runtime>,
    /// Job directory mount first, then the container's own mounts.
    pub mounts: Vec<MountSpec>,
    pub env: EnvMap,
    pub staging_inside: bool,
    pub placement: Option<PlacementMode>,
}

impl WrapperPlan {
    /// Steps in execution order, container steps spliced in at the
    /// container start.
    pub fn execution_order(&self) -> Vec<&Step> {
        let mut out = Vec::new();
        for s in &self.host_steps {
            out.push(s);
            if s.kind() == StepKind::StartContainer {
                out.extend(self.container_steps.iter());
            }
        }
        out
    }

    pub fn kinds(&self) -> Vec<StepKind> {
        self.execution_order().iter().map(|s| s.kind()).collect()
    }

    pub fn job_dir(&self) -> &str {
        match self.host_steps.first() {
            Some(Step::CreateJobDir { path }) => path,
            _ => "",
        }
    }
}

/// Builds the wrapper plan for one compute job.
pub fn build_wrapper_plan(
    job: &Job,
    cdef: Option<&ContainerDef>,
    placement: Option<PlacementMode>,
    cfg: &PlanConfig,
) -> Result<WrapperPlan, LauncherError> {
    let compute = job
        .compute()
        .ok_or_else(|| LauncherError::NotACompute(job.id.clone()))?;
    if compute.container.as_deref() != cdef.map(|c| c.name.as_str()) {
        return Err(LauncherError::ContainerMismatch {
            job: job.id.clone(),
            expected: compute.container.clone(),
            found: cdef.map(|c| c.name.clone()),
        });
    }
    let inconsistent = |reason: &str| LauncherError::InconsistentPlacement {
        job: job.id.clone(),
        reason: reason.to_string(),
    };
    match (cdef, placement) {
        (None, None) | (Some(_), Some(_)) => {}
        (None, Some(_)) => return Err(inconsistent("placement given for a job without container")),
        (Some(_), None) => return Err(inconsistent("container job without a placement")),
    }
    if let (Some(c), Some(p)) = (cdef, placement) {
        let shifter = c.runtime == Runtime::Shifter;
        if shifter != (p == PlacementMode::ShifterLocal) {
            return Err(inconsistent(
                "Shifter images are only usable from the site-local registry",
            ));
        }
        if p == PlacementMode::Bypass && !c.site_local {
            return Err(inconsistent("bypass placement needs a site-local image"));
        }
        if p == PlacementMode::SharedFsSymlink && !compute.shared_fs {
            return Err(inconsistent("symlink placement needs a shared filesystem"));
        }
    }

    let job_dir = cfg.job_dir(&job.id);
    let staging = &compute.staging_site;
    let link = compute.shared_fs;
    let mut stage_in = Vec::new();
    let mut stage_out = Vec::new();
    let mut produced = std::collections::BTreeSet::new();
    for t in &compute.tasks {
        for f in &t.inputs {
            // clustered members read their siblings' outputs from the job dir
            if !produced.contains(&f.name) && !stage_in.iter().any(|s: &StagedFile| s.name == f.name) {
                stage_in.push(StagedFile {
                    name: f.name.clone(),
                    url: cfg.staging_url(staging, &f.name),
                    bytes: f.bytes,
                    link,
                });
            }
        }
        if t.stage_executable {
            let name = executable_name(&t.executable);
            if !stage_in.iter().any(|s| s.name == name) {
                stage_in.push(StagedFile {
                    url: cfg.staging_url(staging, &name),
                    name,
                    bytes: 0,
                    link,
                });
            }
        }
        for f in &t.outputs {
            produced.insert(f.name.clone());
            stage_out.push(StagedFile {
                name: f.name.clone(),
                url: cfg.staging_url(staging, &f.name),
                bytes: f.bytes,
                link: false,
            });
        }
    }

    let mut env = cfg.credentials.clone();
    if let Some(c) = cdef {
        env.extend(c.profiles.clone());
    }
    let launches: Vec<Step> = compute
        .tasks
        .iter()
        .map(|t| Step::LaunchTask {
            task_id: t.task_id.clone(),
            executable: if t.stage_executable {
                format!("./{}", executable_name(&t.executable))
            } else {
                t.executable.clone()
            },
            env: t.env.clone(),
            runtime_s: t.runtime_s,
        })
        .collect();
    let stage_in_step = (!stage_in.is_empty()).then_some(Step::StageIn { files: stage_in });
    let stage_out_step = (!stage_out.is_empty()).then_some(Step::StageOut { files: stage_out });

    let (Some(c), Some(p)) = (cdef, placement) else {
        let mut host = vec![
            Step::CreateJobDir {
                path: job_dir.clone(),
            },
            Step::WorkerSetup,
            Step::EnvSetup { vars: env.clone() },
        ];
        host.extend(stage_in_step);
        host.extend(launches);
        host.extend(stage_out_step);
        host.push(Step::RemoveJobDir { path: job_dir });
        return Ok(WrapperPlan {
            job_id: job.id.clone(),
            host_steps: host,
            container_steps: Vec::new(),
            backend: None,
            mounts: Vec::new(),
            env,
            staging_inside: cfg.staging_inside_container,
            placement: None,
        });
    };

    let workdir = c.runtime.job_dir_mount_point().to_string();
    let mut mounts = vec![MountSpec::new(job_dir.clone(), workdir.clone())];
    mounts.extend(c.mounts.iter().cloned());

    let image_file_url = cfg.image_url(staging, &c.name, c.runtime);
    let image_file_name = executable_name(&image_file_url);
    let materialize = match p {
        PlacementMode::StageCopy | PlacementMode::SharedFsSymlink => Some(Step::MaterializeImage {
            method: if p == PlacementMode::StageCopy {
                MaterializeMethod::Pull
            } else {
                MaterializeMethod::Symlink
            },
            source: image_file_url,
            target: format!("{job_dir}/{image_file_name}"),
            bytes: c.image_size_bytes,
        }),
        PlacementMode::Bypass => Some(Step::MaterializeImage {
            method: MaterializeMethod::Reference,
            source: c.image.locator.clone(),
            target: c.image.locator.clone(),
            bytes: c.image_size_bytes,
        }),
        PlacementMode::ShifterLocal => None,
    };
    let image_file = match &materialize {
        Some(Step::MaterializeImage { target, .. }) => target.clone(),
        _ => String::new(),
    };
    let container_name = format!("cwflow-{}", job.id);
    let run_image = match c.runtime {
        Runtime::Docker | Runtime::Shifter => {
            format!("{}:{}", c.image.locator, c.image.tag_or_latest())
        }
        Runtime::Singularity => image_file.clone(),
    };

    let staging_inside = cfg.staging_inside_container;
    let mut host = vec![Step::CreateJobDir {
        path: job_dir.clone(),
    }];
    host.extend(materialize);
    let mut inner = vec![Step::WorkerSetup, Step::EnvSetup { vars: env.clone() }];
    if staging_inside {
        inner.extend(stage_in_step);
    } else {
        host.extend(stage_in_step);
    }
    inner.extend(launches);
    if staging_inside {
        inner.extend(stage_out_step.clone());
    }
    if c.runtime == Runtime::Docker {
        host.push(Step::LoadImage {
            image: run_image.clone(),
            file: image_file,
            bytes: c.image_size_bytes,
            dedup: cfg.docker_load_dedup,
        });
        host.push(Step::EnsureUser);
    }
    host.push(Step::StartContainer {
        backend: c.runtime,
        name: container_name.clone(),
        image: run_image.clone(),
        mounts: mounts.clone(),
        workdir,
    });
    if c.runtime == Runtime::Docker {
        host.push(Step::StopContainer {
            name: container_name,
        });
    }
    if !staging_inside {
        host.extend(stage_out_step);
    }
    if c.runtime == Runtime::Docker {
        host.push(Step::UnloadImage {
            image: run_image,
            keep_loaded: cfg.docker_load_dedup,
        });
    }
    host.push(Step::RemoveJobDir { path: job_dir });

    Ok(WrapperPlan {
        job_id: job.id.clone(),
        host_steps: host,
        container_steps: inner,
        backend: Some(c.runtime),
        mounts,
        env,
        staging_inside,
        placement: Some(p),
    })
}

/// Wrapper plans for every compute job of `ewf`, keyed by job id.
pub fn plans_for(ewf: &ExecutableWorkflow) -> Result<BTreeMap<String, WrapperPlan>, LauncherError> {
    let mut plans = BTreeMap::new();
    for job in &ewf.jobs {
        let Some(c) = job.compute() else { continue };
        let cdef = match &c.container {
            Some(name) => Some(ewf.containers.get(name).ok_or_else(|| {
                LauncherError::ContainerMismatch {
                    job: job.id.clone(),
                    expected: Some(name.clone()),
                    found: None,
                }
            })?),
            None => None,
        };
        if let (Some(def), Some(site)) = (cdef, ewf.site(&job.site)) {
            if !site.runtimes_available.contains(&def.runtime) {
                return Err(LauncherError::RuntimeUnavailable {
                    job: job.id.clone(),
                    runtime: def.runtime,
                    site: site.name.clone(),
                });
            }
        }
        plans.insert(
            job.id.clone(),
            build_wrapper_plan(job, cdef, c.placement, &ewf.config)?,
        );
    }
    Ok(plans)
}
