//! The CASA nowcast setup used by the examples, the acceptance suite and
//! the shipped fixture files: 63 tasks over two levels, Docker and
//! Singularity images of the sizes used in the experiments, and a cluster
//! of one 1 Gbps submit node and four 24-slot workers.

use std::collections::BTreeMap;

use crate::catalog::{
    parse_catalog, parse_image_url, Catalog, ContainerDef, EnvMap, InstallType, Runtime,
    TransformationEntry,
};
use crate::planner::{PlanConfig, Site};
use crate::simulator::{NodeSpec, Scenario, SimConfig, SimError, Topology};
use crate::workflow::{AbstractWorkflow, Task};

/// A reference catalog listing with comments, kept byte for byte.
pub const CATALOG_LISTING: &str = include_str!("../fixtures/catalog_listing.yml");

pub const DOCKER_IMAGE_BYTES: u64 = 488_000_000;
pub const SINGULARITY_IMAGE_BYTES: u64 = 153_000_000;
/// 1 Gbps.
pub const SUBMIT_BANDWIDTH: f64 = 125e6;
pub const WORKERS: usize = 4;
pub const SLOTS_PER_WORKER: u32 = 24;
/// Regrid tasks, and contour tasks, one per radar scan.
pub const SCANS: usize = 31;
pub const COMPUTE_SITE: &str = "condorpool";

const RAW_BYTES: u64 = 4_000_000;
const GRID_BYTES: u64 = 4_000_000;
const CONTOUR_BYTES: u64 = 200_000;
const MOSAIC_BYTES: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CasaContainer {
    None,
    Docker,
    Singularity,
    Shifter,
}

impl CasaContainer {
    pub const ALL: [CasaContainer; 4] = [
        CasaContainer::None,
        CasaContainer::Docker,
        CasaContainer::Singularity,
        CasaContainer::Shifter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CasaContainer::None => "none",
            CasaContainer::Docker => "docker",
            CasaContainer::Singularity => "singularity",
            CasaContainer::Shifter => "shifter",
        }
    }
}

/// 31 regrid tasks, then 31 contour tasks and one mosaic over all grids.
pub fn casa_workflow() -> AbstractWorkflow {
    let mut wf = AbstractWorkflow::new("casa-nowcast");
    for i in 0..SCANS {
        let raw = format!("raw_{i:02}.nc");
        let grid = format!("grid_{i:02}.nc");
        let contour = format!("contour_{i:02}.png");
        wf.add_file(&raw, RAW_BYTES, Some(format!("file:///data/casa/{raw}")));
        wf.add_file(&grid, GRID_BYTES, None);
        wf.add_file(&contour, CONTOUR_BYTES, None);
        wf.add_task(
            Task::new(format!("regrid_{i:02}"), "casa::regrid:1.0")
                .reads(raw)
                .writes(grid.clone())
                .runtime(2.0),
        );
        wf.add_task(
            Task::new(format!("contour_{i:02}"), "casa::contour:1.0")
                .reads(grid)
                .writes(contour)
                .runtime(3.0),
        );
    }
    let mut mosaic = Task::new("mosaic", "casa::mosaic:1.0")
        .writes("mosaic.nc")
        .runtime(3.0);
    for i in 0..SCANS {
        mosaic = mosaic.reads(format!("grid_{i:02}.nc"));
    }
    wf.add_file("mosaic.nc", MOSAIC_BYTES, None);
    wf.add_task(mosaic);
    wf
}

pub fn casa_container(kind: CasaContainer) -> Option<ContainerDef> {
    let (runtime, url, bytes) = match kind {
        CasaContainer::None => return None,
        CasaContainer::Docker => (
            Runtime::Docker,
            "docker:///casa/nowcast:latest",
            DOCKER_IMAGE_BYTES,
        ),
        CasaContainer::Singularity => (
            Runtime::Singularity,
            "shub://singularity-hub.org/casa/nowcast",
            SINGULARITY_IMAGE_BYTES,
        ),
        CasaContainer::Shifter => (Runtime::Shifter, "shifter:///casa/nowcast:latest", 0),
    };
    Some(ContainerDef {
        name: "casa-nowcast".into(),
        image: parse_image_url(url).expect("fixture URL parses"),
        runtime,
        mounts: Vec::new(),
        profiles: EnvMap::new(),
        image_size_bytes: bytes,
        site_local: false,
    })
}

pub fn casa_catalog(kind: CasaContainer) -> Catalog {
    let container = casa_container(kind);
    let mut cat = Catalog::default();
    for name in ["regrid", "contour", "mosaic"] {
        cat.transformations.push(TransformationEntry {
            namespace: Some("casa".into()),
            name: name.into(),
            version: Some("1.0".into()),
            site: COMPUTE_SITE.into(),
            arch: Some("x86_64".into()),
            os: Some("linux".into()),
            pfn: format!("/opt/casa/bin/{name}"),
            install_type: InstallType::Installed,
            container: container.as_ref().map(|c| c.name.clone()),
            profiles: EnvMap::new(),
        });
    }
    if let Some(c) = container {
        cat.containers.insert(c.name.clone(), c);
    }
    cat
}

/// Sites without (`shared = false`) or with a shared NFS staging area.
pub fn casa_sites(shared: bool) -> Vec<Site> {
    let mut sites = vec![Site::storage("local")];
    if shared {
        sites.push(Site::storage("nfs"));
    }
    sites.push(Site {
        name: COMPUTE_SITE.into(),
        shared_fs: shared,
        staging_site: if shared { "nfs" } else { "local" }.into(),
        worker_count: WORKERS as u32,
        slots_per_worker: SLOTS_PER_WORKER,
        runtimes_available: [Runtime::Docker, Runtime::Singularity, Runtime::Shifter]
            .into_iter()
            .collect(),
        cvmfs_like_paths: Vec::new(),
    });
    sites
}

pub fn worker_names() -> Vec<String> {
    (1..=WORKERS).map(|i| format!("worker-{i}")).collect()
}

pub fn casa_topology() -> Topology {
    let mut sites = BTreeMap::new();
    sites.insert("local".to_string(), vec!["submit".to_string()]);
    sites.insert("nfs".to_string(), vec!["nfs".to_string()]);
    sites.insert(COMPUTE_SITE.to_string(), worker_names());
    Topology {
        submit: NodeSpec::new("submit", 8, SUBMIT_BANDWIDTH),
        nfs: Some(NodeSpec::new("nfs", 8, crate::simulator::DEFAULT_NIC_BANDWIDTH)),
        workers: worker_names()
            .into_iter()
            .map(|n| NodeSpec::new(n, SLOTS_PER_WORKER, crate::simulator::DEFAULT_NIC_BANDWIDTH))
            .collect(),
        links: Vec::new(),
        sites,
        registry_node: None,
    }
}

/// Plan settings for the experiment runs: every Docker job loads its own
/// image, as wrappers did before load deduplication existed.
pub fn casa_plan_config(cluster_size: usize) -> PlanConfig {
    PlanConfig {
        cluster_size,
        docker_load_dedup: false,
        ..PlanConfig::default()
    }
}

/// Label of the form `docker-k1` or `singularity-k12-shared`.
pub fn casa_label(kind: CasaContainer, cluster_size: usize, shared: bool) -> String {
    let mut label = format!("{}-k{cluster_size}", kind.name());
    if shared {
        label.push_str("-shared");
    }
    label
}

pub fn casa_scenario(
    kind: CasaContainer,
    cluster_size: usize,
    shared: bool,
) -> Result<Scenario, SimError> {
    Scenario::build(
        casa_label(kind, cluster_size, shared),
        &casa_workflow(),
        &casa_catalog(kind),
        &casa_sites(shared),
        &casa_plan_config(cluster_size),
        casa_topology(),
        SimConfig::default(),
    )
}

/// The reference catalog listing, parsed.
pub fn listing_catalog() -> Catalog {
    parse_catalog(CATALOG_LISTING).expect("reference catalog parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn casa_shape() {
        let wf = casa_workflow();
        wf.validate().unwrap();
        assert_eq!(wf.tasks.len(), 63);
        let levels = wf.topological_levels().unwrap();
        let at = |l| levels.values().filter(|&&v| v == l).count();
        assert_eq!((at(0), at(1)), (31, 32));
    }

    #[test]
    fn fixtures_are_consistent() {
        casa_topology().validate().unwrap();
        for kind in CasaContainer::ALL {
            casa_catalog(kind).validate().unwrap();
        }
        crate::planner::validate_sites(&casa_sites(true)).unwrap();
        crate::planner::validate_sites(&casa_sites(false)).unwrap();
    }
}
