//! Renders a wrapper plan as a bash script.

use std::fmt::Write;

use super::{MaterializeMethod, StagedFile, Step, WrapperPlan};
use crate::catalog::Runtime;

const INNER_SCRIPT: &str = "cwflow-inner.sh";

/// Marker the local runner uses to name the failing step.
pub(crate) const FAILURE_MARKER: &str = "cwflow: failed at step ";

const TRAP: &str = "trap 'echo \"cwflow: failed at step $cwflow_step\" >&2' ERR\n";

const HELPERS: &str = r#"cwflow_get() {
    case "$1" in
        file://*) cp "${1#file://}" "$2" ;;
        http://*|https://*) curl -fsSL -o "$2" "$1" ;;
        *) echo "unsupported URL $1" >&2; return 1 ;;
    esac
}
cwflow_link() {
    ln -sf "${1#file://}" "$2"
}
cwflow_put() {
    case "$2" in
        file://*) mkdir -p "$(dirname "${2#file://}")" && cp "$1" "${2#file://}" ;;
        *) echo "unsupported URL $2" >&2; return 1 ;;
    esac
}
cwflow_launch() {
    local task=$1
    shift
    local start end rc
    start=$(date +%s.%N)
    set +e
    "$@"
    rc=$?
    set -e
    end=$(date +%s.%N)
    echo "task=$task start=$start end=$end exit=$rc" >> cwflow-launch.log
    return $rc
}
"#;

/// Single-quotes `s` for bash.
fn q(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn backend_name(plan: &WrapperPlan) -> &'static str {
    plan.backend.map_or("none", Runtime::as_str)
}

/// Deterministic script text for `plan`: a header naming the job and the
/// backend, then one stanza per step.
pub fn render_wrapper(plan: &WrapperPlan) -> String {
    let mut out = String::new();
    out.push_str("#!/bin/bash\n");
    let _ = writeln!(out, "# cwflow job wrapper");
    let _ = writeln!(out, "# job: {}", plan.job_id);
    let _ = writeln!(out, "# backend: {}", backend_name(plan));
    out.push_str("set -e\n");
    out.push_str(TRAP);
    out.push('\n');
    out.push_str(HELPERS);
    for (i, step) in plan.host_steps.iter().enumerate() {
        out.push('\n');
        let _ = writeln!(out, "# step {}: {}", i + 1, step.kind());
        let _ = writeln!(out, "cwflow_step={}", step.kind());
        render_step(&mut out, plan, step);
    }
    out
}

fn render_inner(plan: &WrapperPlan) -> String {
    let mut out = String::from("#!/bin/bash\nset -e\n");
    out.push_str(TRAP);
    let _ = writeln!(out, "cd {}", q(plan.mounts.first().map_or(".", |m| m.dst.as_str())));
    out.push_str(HELPERS);
    for (i, step) in plan.container_steps.iter().enumerate() {
        out.push('\n');
        let _ = writeln!(out, "# container step {}: {}", i + 1, step.kind());
        let _ = writeln!(out, "cwflow_step={}", step.kind());
        render_step(&mut out, plan, step);
    }
    out
}

fn lock_name(image: &str) -> String {
    image
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn render_staging(out: &mut String, files: &[StagedFile], inbound: bool) {
    for f in files {
        let line = match (inbound, f.link) {
            (true, true) => format!("cwflow_link {} {}", q(&f.url), q(&f.name)),
            (true, false) => format!("cwflow_get {} {}", q(&f.url), q(&f.name)),
            (false, _) => format!("cwflow_put {} {}", q(&f.name), q(&f.url)),
        };
        out.push_str(&line);
        out.push('\n');
    }
}

fn render_step(out: &mut String, plan: &WrapperPlan, step: &Step) {
    match step {
        Step::CreateJobDir { path } => {
            let _ = writeln!(out, "mkdir -p {}", q(path));
            let _ = writeln!(out, "cd {}", q(path));
        }
        Step::MaterializeImage {
            method,
            source,
            target,
            ..
        } => match method {
            MaterializeMethod::Pull => {
                let _ = writeln!(out, "cwflow_get {} {}", q(source), q(target));
            }
            MaterializeMethod::Symlink => {
                let _ = writeln!(out, "cwflow_link {} {}", q(source), q(target));
            }
            MaterializeMethod::Reference => {
                let _ = writeln!(out, "test -e {}", q(target));
            }
        },
        Step::LoadImage {
            image, file, dedup, ..
        } => {
            if *dedup {
                let name = lock_name(image);
                let _ = writeln!(out, "cwflow_locks=${{CWFLOW_LOCK_DIR:-/tmp}}");
                let _ = writeln!(out, "exec 9>\"$cwflow_locks/cwflow-load-{name}.lock\"");
                out.push_str("flock 9\n");
                let _ = writeln!(out, "if [ ! -e \"$cwflow_locks/cwflow-loaded-{name}\" ]; then");
                let _ = writeln!(out, "    docker load -i {}", q(file));
                let _ = writeln!(out, "    touch \"$cwflow_locks/cwflow-loaded-{name}\"");
                out.push_str("fi\n");
                out.push_str("flock -u 9\n");
                out.push_str("exec 9>&-\n");
            } else {
                let _ = writeln!(out, "docker load -i {}", q(file));
            }
        }
        Step::EnsureUser => {
            out.push_str("cwflow_uid=$(id -u)\n");
            out.push_str("cwflow_gid=$(id -g)\n");
            out.push_str("cwflow_user=$(id -un)\n");
        }
        Step::StartContainer {
            backend,
            name,
            image,
            mounts,
            workdir,
        } => {
            let _ = writeln!(out, "cat > {INNER_SCRIPT} <<'CWFLOW_INNER'");
            out.push_str(&render_inner(plan));
            out.push_str("CWFLOW_INNER\n");
            let inner = format!("{workdir}/{INNER_SCRIPT}");
            match backend {
                Runtime::Docker => {
                    let _ = write!(out, "docker run --name {}", q(name));
                    for m in mounts {
                        let _ = write!(out, " -v {}", q(&m.to_string()));
                    }
                    let _ = writeln!(out, " -w {} {} /bin/bash -c \\", q(workdir), q(image));
                    let _ = writeln!(
                        out,
                        "    \"getent group $cwflow_gid >/dev/null || groupadd -g $cwflow_gid $cwflow_user; \
id -u $cwflow_user >/dev/null 2>&1 || useradd -u $cwflow_uid -g $cwflow_gid $cwflow_user; \
su $cwflow_user -s /bin/bash -c 'bash {inner}'\""
                    );
                }
                Runtime::Singularity => {
                    let _ = write!(out, "singularity exec");
                    for m in mounts {
                        let _ = write!(out, " -B {}", q(&m.to_string()));
                    }
                    let _ = writeln!(out, " --pwd {} {} bash {}", q(workdir), q(image), q(&inner));
                }
                Runtime::Shifter => {
                    let _ = write!(out, "shifter --image={}", q(&format!("docker:{image}")));
                    for m in mounts {
                        let _ = write!(out, " --volume={}", q(&format!("{}:{}", m.src, m.dst)));
                    }
                    let _ = writeln!(out, " --workdir={} bash {}", q(workdir), q(&inner));
                }
            }
        }
        Step::WorkerSetup => {
            out.push_str("for tool in cp ln mkdir date; do\n");
            out.push_str("    command -v \"$tool\" >/dev/null || { echo \"missing $tool\" >&2; exit 1; }\n");
            out.push_str("done\n");
        }
        Step::EnvSetup { vars } => {
            for (k, v) in vars {
                let _ = writeln!(out, "export {k}={}", q(v));
            }
            if vars.is_empty() {
                out.push_str(":\n");
            }
        }
        Step::StageIn { files } => render_staging(out, files, true),
        Step::LaunchTask {
            task_id,
            executable,
            env,
            ..
        } => {
            let prefix: String = env
                .iter()
                .map(|(k, v)| format!("{k}={} ", q(v)))
                .collect();
            let env_cmd = if prefix.is_empty() {
                String::new()
            } else {
                format!("env {prefix}")
            };
            let _ = writeln!(out, "cwflow_launch {} {env_cmd}{}", q(task_id), q(executable));
        }
        Step::StageOut { files } => render_staging(out, files, false),
        Step::StopContainer { name } => {
            let _ = writeln!(out, "docker stop {} >/dev/null 2>&1 || true", q(name));
            let _ = writeln!(out, "docker rm {} >/dev/null", q(name));
        }
        Step::UnloadImage { image, keep_loaded } => {
            if *keep_loaded {
                out.push_str("# image stays loaded for later jobs on this node\n");
            } else {
                let _ = writeln!(out, "docker rmi {} >/dev/null", q(image));
            }
        }
        Step::RemoveJobDir { path } => {
            out.push_str("cd /\n");
            let _ = writeln!(out, "rm -rf {}", q(path));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoting() {
        assert_eq!(q("a b"), "'a b'");
        assert_eq!(q("it's"), r"'it'\''s'");
    }
}
