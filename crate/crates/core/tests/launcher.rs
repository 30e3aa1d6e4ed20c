mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use common::{golden_container, golden_job, golden_path, golden_plan};

use cwflow::catalog::{EnvMap, Runtime};
use cwflow::fixtures::{casa_catalog, casa_plan_config, casa_sites, casa_workflow, CasaContainer};
use cwflow::launcher::{
    build_wrapper_plan, execute_local, plans_for, render_wrapper, ExecMode, JobStatus,
    LauncherError, MockOptions, StepKind, WrapperPlan,
};
use cwflow::planner::{plan, ExecutableWorkflow, PlacementMode, PlanConfig};

#[test]
fn golden_wrappers_are_byte_stable() {
    for runtime in [Runtime::Docker, Runtime::Singularity, Runtime::Shifter] {
        let script = render_wrapper(&golden_plan(runtime));
        assert_eq!(script, render_wrapper(&golden_plan(runtime)));
        let path = golden_path(runtime);
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, &script).unwrap();
        }
        let expected = std::fs::read_to_string(&path)
            .unwrap_or_else(|e| panic!("{}: {e} (run with UPDATE_GOLDEN=1)", path.display()));
        assert_eq!(script, expected, "{runtime} wrapper drifted from {}", path.display());
    }
}

#[test]
fn golden_plans_obey_the_laws() {
    for runtime in [Runtime::Docker, Runtime::Singularity, Runtime::Shifter] {
        let p = golden_plan(runtime);
        let job = golden_job(Some("filter"), runtime == Runtime::Singularity);
        common::check_wrapper_laws(&p, &job).unwrap();
    }
    let p = build_wrapper_plan(&golden_job(None, false), None, None, &PlanConfig::default()).unwrap();
    common::check_wrapper_laws(&p, &golden_job(None, false)).unwrap();
}

#[test]
fn rendered_scripts_parse_as_bash() {
    let dir = tempfile::tempdir().unwrap();
    for runtime in [Runtime::Docker, Runtime::Singularity, Runtime::Shifter] {
        let path = dir.path().join(format!("{runtime}.sh"));
        std::fs::write(&path, render_wrapper(&golden_plan(runtime))).unwrap();
        let status = match std::process::Command::new("bash").arg("-n").arg(&path).status() {
            Ok(s) => s,
            Err(_) => return, // no bash here
        };
        assert!(status.success(), "{runtime} wrapper has a syntax error");
    }
}

#[test]
fn scripts_follow_plan_order() {
    for runtime in [Runtime::Docker, Runtime::Singularity, Runtime::Shifter] {
        let p = golden_plan(runtime);
        let script = render_wrapper(&p);
        let marked: Vec<String> = script
            .lines()
            .filter_map(|l| l.trim().strip_prefix("cwflow_step=").map(String::from))
            .collect();
        let kinds: Vec<String> = p.kinds().iter().map(|k| k.to_string()).collect();
        assert_eq!(marked, kinds, "{runtime}");
        let mount_point = if runtime == Runtime::Singularity { "/srv" } else { "/scratch" };
        assert!(script.contains(&format!("{}:{mount_point}", p.job_dir())), "{runtime}");
    }
}

#[test]
fn placement_must_match_the_container() {
    let cfg = PlanConfig::default();
    let job = golden_job(Some("filter"), false);
    let docker = golden_container(Runtime::Docker);
    let shifter = golden_container(Runtime::Shifter);
    for (c, p) in [
        (&docker, PlacementMode::ShifterLocal),
        (&docker, PlacementMode::SharedFsSymlink),
        (&docker, PlacementMode::Bypass),
        (&shifter, PlacementMode::StageCopy),
    ] {
        assert!(matches!(
            build_wrapper_plan(&job, Some(c), Some(p), &cfg),
            Err(LauncherError::InconsistentPlacement { .. })
        ));
    }
    assert!(matches!(
        build_wrapper_plan(&job, None, None, &cfg),
        Err(LauncherError::ContainerMismatch { .. })
    ));
}

#[test]
fn missing_site_runtime_is_reported() {
    let mut ewf = plan(
        &casa_workflow(),
        &casa_catalog(CasaContainer::Singularity),
        &casa_sites(false),
        &casa_plan_config(12),
    )
    .unwrap();
    for s in &mut ewf.sites {
        s.runtimes_available.remove(&Runtime::Singularity);
    }
    assert!(matches!(plans_for(&ewf), Err(LauncherError::RuntimeUnavailable { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_plans_obey_the_laws(seed in any::<u64>()) {
        let s = common::random_setup(&mut common::rng(seed), 30);
        let ewf = plan(&s.wf, &s.cat, &s.sites, &s.cfg).unwrap();
        let plans = plans_for(&ewf).unwrap();
        for (id, p) in &plans {
            let job = ewf.job(id).unwrap();
            if let Err(e) = common::check_wrapper_laws(p, job) {
                return Err(TestCaseError::fail(format!("{id}: {e}")));
            }
            prop_assert_eq!(render_wrapper(p), render_wrapper(p));
        }
    }
}

fn casa(kind: CasaContainer, k: usize) -> (ExecutableWorkflow, BTreeMap<String, WrapperPlan>) {
    let ewf = plan(&casa_workflow(), &casa_catalog(kind), &casa_sites(false), &casa_plan_config(k))
        .unwrap();
    let plans = plans_for(&ewf).unwrap();
    (ewf, plans)
}

#[test]
fn mock_run_completes_in_dependency_order() {
    for (kind, k) in [(CasaContainer::None, 1), (CasaContainer::Docker, 12), (CasaContainer::Singularity, 4)] {
        let (ewf, plans) = casa(kind, k);
        let rep = execute_local(&ewf, &plans, ExecMode::Mock, &MockOptions::default()).unwrap();
        assert!(rep.succeeded());
        assert_eq!(rep.completion_order.len(), ewf.jobs.len());
        let pos: BTreeMap<&str, usize> = rep
            .completion_order
            .iter()
            .enumerate()
            .map(|(i, j)| (j.as_str(), i))
            .collect();
        for (a, b) in &ewf.edges {
            assert!(pos[a.as_str()] < pos[b.as_str()], "{a} finished after {b}");
        }
        for j in &rep.jobs {
            let parents: Vec<&str> =
                ewf.edges.iter().filter(|(_, c)| c == &j.job_id).map(|(p, _)| p.as_str()).collect();
            for p in parents {
                assert!(rep.job(p).unwrap().end_s <= j.start_s + 1e-9);
            }
        }
    }
}

#[test]
fn docker_load_dedup_on_one_node() {
    for (dedup, loads) in [(true, 1), (false, 12)] {
        let ewf = common::colocated_docker(12, dedup);
        let plans = plans_for(&ewf).unwrap();
        let rep = execute_local(&ewf, &plans, ExecMode::Mock, &MockOptions::default()).unwrap();
        assert!(rep.succeeded());
        assert_eq!(rep.image_loads, loads, "dedup={dedup}");
        assert_eq!(rep.image_loads + rep.image_cache_hits, 12);
        assert_eq!(rep.loads_by_node.len(), 1);
    }
}

#[test]
fn injected_failure_stops_descendants() {
    let (ewf, plans) = casa(CasaContainer::Docker, 1);
    let opts = MockOptions {
        fail_at: vec![("compute_regrid_03".into(), StepKind::LaunchTask)],
        ..MockOptions::default()
    };
    let err = execute_local(&ewf, &plans, ExecMode::Mock, &opts).unwrap_err();
    let LauncherError::StepFailed { job, step, report, .. } = err else {
        panic!("expected a step failure, got {err}");
    };
    assert_eq!((job.as_str(), step), ("compute_regrid_03", StepKind::LaunchTask));
    let status = |id: &str| report.job(id).unwrap().status;
    assert_eq!(status("compute_regrid_03"), JobStatus::Failed);
    assert_eq!(status("compute_contour_03"), JobStatus::NotRun);
    assert_eq!(status("compute_mosaic"), JobStatus::NotRun);
    assert_eq!(status("stage_out_local"), JobStatus::NotRun);
    assert_eq!(status("compute_regrid_04"), JobStatus::Succeeded);
    assert_eq!(status("compute_contour_04"), JobStatus::Succeeded);
    let failed = report.job("compute_regrid_03").unwrap();
    let last = failed.steps.last().unwrap();
    assert_eq!((last.kind, last.ok), (StepKind::LaunchTask, false));
    assert!(failed.steps.iter().all(|s| s.kind != StepKind::StageOut));
}

#[test]
fn env_profiles_reach_the_wrapper() {
    let p = golden_plan(Runtime::Docker);
    let mut expected = EnvMap::new();
    expected.insert("LAB_TOKEN_FILE".into(), "/etc/lab/token".into());
    expected.insert("OMP_NUM_THREADS".into(), "4".into());
    assert_eq!(p.env, expected);
    let script = render_wrapper(&p);
    assert!(script.contains("OMP_NUM_THREADS"));
    assert!(script.contains("FILTER_LEVEL"));
}
