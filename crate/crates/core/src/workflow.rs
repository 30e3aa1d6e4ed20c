//! Abstract workflows: tasks that name logical files and logical
//! transformations, with no site or storage information.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{Dag, DagIssue};

/// Runtime assumed for tasks that carry no estimate.
pub const DEFAULT_RUNTIME_S: f64 = 1.0;
/// Size assumed for files that carry no metadata.
pub const DEFAULT_FILE_BYTES: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkflowError {
    #[error("workflow syntax error: {0}")]
    Syntax(String),
    #[error("cycle detected: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("edge {from} -> {to} references an unknown task")]
    DanglingEdge { from: String, to: String },
    #[error("file `{file}` is produced by more than one task: {}", .producers.join(", "))]
    MultipleProducers { file: String, producers: Vec<String> },
    #[error("task `{task}` reads `{file}`, which no task produces and which has no initial location")]
    OrphanInput { task: String, file: String },
    #[error("duplicate task id `{0}`")]
    DuplicateTaskId(String),
    #[error("task `{task}` lists `{file}` as both input and output")]
    InputOutputOverlap { task: String, file: String },
    #[error("task `{task}` has an invalid runtime {runtime}")]
    InvalidRuntime { task: String, runtime: f64 },
    #[error("reading workflow: {0}")]
    Io(String),
}

impl From<DagIssue> for WorkflowError {
    fn from(issue: DagIssue) -> Self {
        match issue {
            DagIssue::DuplicateNode(id) => WorkflowError::DuplicateTaskId(id),
            DagIssue::DanglingEdge { from, to } => WorkflowError::DanglingEdge { from, to },
            DagIssue::Cycle(c) => WorkflowError::CycleDetected(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub transformation: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(rename = "runtime", default = "default_runtime")]
    pub expected_runtime_s: f64,
}

fn default_runtime() -> f64 {
    DEFAULT_RUNTIME_S
}

impl Task {
    pub fn new(id: impl Into<String>, transformation: impl Into<String>) -> Self {
        Task {
            id: id.into(),
            transformation: transformation.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            expected_runtime_s: DEFAULT_RUNTIME_S,
        }
    }

    pub fn reads(mut self, file: impl Into<String>) -> Self {
        self.inputs.push(file.into());
        self
    }

    pub fn writes(mut self, file: impl Into<String>) -> Self {
        self.outputs.push(file.into());
        self
    }

    pub fn runtime(mut self, seconds: f64) -> Self {
        self.expected_runtime_s = seconds;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileMeta {
    #[serde(skip)]
    pub name: String,
    #[serde(rename = "size", default = "default_size")]
    pub size_bytes: u64,
    #[serde(rename = "location", default, skip_serializing_if = "Option::is_none")]
    pub initial_location: Option<String>,
}

fn default_size() -> u64 {
    DEFAULT_FILE_BYTES
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AbstractWorkflow {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub tasks: Vec<Task>,
    /// Explicit control edges; data-flow edges are implied by file usage.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<(String, String)>,
    #[serde(default)]
    pub files: BTreeMap<String, FileMeta>,
}

impl AbstractWorkflow {
    pub fn new(name: impl Into<String>) -> Self {
        AbstractWorkflow {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn from_yaml(text: &str) -> Result<Self, WorkflowError> {
        let mut wf: AbstractWorkflow =
            serde_yaml::from_str(text).map_err(|e| WorkflowError::Syntax(e.to_string()))?;
        for (name, meta) in wf.files.iter_mut() {
            meta.name = name.clone();
        }
        Ok(wf)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, WorkflowError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| WorkflowError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_yaml(&text)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("workflow serializes")
    }

    pub fn add_task(&mut self, task: Task) -> &mut Self {
        self.tasks.push(task);
        self
    }

    pub fn add_edge(&mut self, parent: impl Into<String>, child: impl Into<String>) -> &mut Self {
        self.edges.push((parent.into(), child.into()));
        self
    }

    pub fn add_file(
        &mut self,
        name: impl Into<String>,
        size_bytes: u64,
        initial_location: Option<String>,
    ) -> &mut Self {
        let name = name.into();
        self.files.insert(
            name.clone(),
            FileMeta {
                name,
                size_bytes,
                initial_location,
            },
        );
        self
    }

    pub fn task(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }

    /// Metadata for `name`, falling back to the default size.
    pub fn file(&self, name: &str) -> FileMeta {
        self.files.get(name).cloned().unwrap_or_else(|| FileMeta {
            name: name.to_string(),
            size_bytes: DEFAULT_FILE_BYTES,
            initial_location: None,
        })
    }

    /// Producing task per file.
    pub fn producers(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for t in &self.tasks {
            for f in &t.outputs {
                out.entry(f.as_str()).or_default().push(t.id.as_str());
            }
        }
        out
    }

    /// Files read by some task and produced by none.
    pub fn input_files(&self) -> BTreeSet<&str> {
        let produced = self.producers();
        self.tasks
            .iter()
            .flat_map(|t| t.inputs.iter())
            .map(String::as_str)
            .filter(|f| !produced.contains_key(f))
            .collect()
    }

    /// Files produced by some task and read by none.
    pub fn output_files(&self) -> BTreeSet<&str> {
        let consumed: BTreeSet<&str> = self
            .tasks
            .iter()
            .flat_map(|t| t.inputs.iter())
            .map(String::as_str)
            .collect();
        self.tasks
            .iter()
            .flat_map(|t| t.outputs.iter())
            .map(String::as_str)
            .filter(|f| !consumed.contains(f))
            .collect()
    }

    /// Explicit edges plus producer-to-consumer edges, sorted and deduplicated.
    pub fn dependency_edges(&self) -> Vec<(String, String)> {
        let producers = self.producers();
        let mut edges: BTreeSet<(String, String)> = self.edges.iter().cloned().collect();
        for t in &self.tasks {
            for f in &t.inputs {
                for p in producers.get(f.as_str()).into_iter().flatten() {
                    if *p != t.id {
                        edges.insert((p.to_string(), t.id.clone()));
                    }
                }
            }
        }
        edges.into_iter().collect()
    }

    pub(crate) fn dag(&self) -> Result<Dag, WorkflowError> {
        let edges = self.dependency_edges();
        Ok(Dag::build(
            self.tasks.iter().map(|t| t.id.as_str()),
            edges.iter().map(|(a, b)| (a.as_str(), b.as_str())),
        )?)
    }

    /// Structural validation. Pure; calling it twice gives the same answer.
    pub fn validate(&self) -> Result<(), WorkflowError> {
        for t in &self.tasks {
            if let Some(f) = t.inputs.iter().find(|f| t.outputs.contains(f)) {
                return Err(WorkflowError::InputOutputOverlap {
                    task: t.id.clone(),
                    file: f.clone(),
                });
            }
            if !(t.expected_runtime_s.is_finite() && t.expected_runtime_s >= 0.0) {
                return Err(WorkflowError::InvalidRuntime {
                    task: t.id.clone(),
                    runtime: t.expected_runtime_s,
                });
            }
        }
        for (file, producers) in self.producers() {
            if producers.len() > 1 {
                return Err(WorkflowError::MultipleProducers {
                    file: file.to_string(),
                    producers: producers.into_iter().map(str::to_string).collect(),
                });
            }
        }
        let dag = self.dag()?;
        if let Some(cycle) = dag.find_cycle() {
            return Err(WorkflowError::CycleDetected(cycle));
        }
        let produced = self.producers();
        for t in &self.tasks {
            for f in &t.inputs {
                let located = self
                    .files
                    .get(f)
                    .is_some_and(|m| m.initial_location.is_some());
                if !produced.contains_key(f.as_str()) && !located {
                    return Err(WorkflowError::OrphanInput {
                        task: t.id.clone(),
                        file: f.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Longest-path level of every task; roots are level 0.
    pub fn topological_levels(&self) -> Result<BTreeMap<String, usize>, WorkflowError> {
        let dag = self.dag()?;
        let levels = dag.levels()?;
        Ok((0..dag.len())
            .map(|i| (dag.id(i).to_string(), levels[i]))
            .collect())
    }

    /// Task ids ordered by (level, declaration order).
    pub fn topological_order(&self) -> Result<Vec<String>, WorkflowError> {
        let dag = self.dag()?;
        Ok(dag
            .level_order()?
            .into_iter()
            .map(|i| dag.id(i).to_string())
            .collect())
    }
}

/// Free-function form of [`AbstractWorkflow::validate`].
pub fn validate_dag(wf: &AbstractWorkflow) -> Result<(), WorkflowError> {
    wf.validate()
}

/// Free-function form of [`AbstractWorkflow::topological_levels`].
pub fn topological_levels(wf: &AbstractWorkflow) -> Result<BTreeMap<String, usize>, WorkflowError> {
    wf.topological_levels()
}
