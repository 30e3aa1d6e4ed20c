//! Transformation catalog: logical transformations mapped to per-site
//! executables, plus the container definitions they run in.
//!
//! The on-disk format is YAML. The top level is either a sequence of
//! single-key maps (`- transformations: [...]`, `- cont: [...]`) or a plain
//! mapping with the same two keys.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable map, ordered for deterministic output.
pub type EnvMap = BTreeMap<String, String>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CatalogError {
    #[error("catalog syntax error: {0}")]
    Syntax(String),
    #[error("transformation {transformation} references unknown container `{container}`")]
    DanglingContainerRef {
        transformation: String,
        container: String,
    },
    #[error("duplicate catalog entry: {0}")]
    DuplicateName(String),
    #[error("unknown image URL scheme in `{0}`")]
    UnknownScheme(String),
    #[error("image URL `{0}` has an empty locator")]
    EmptyLocator(String),
    #[error("image URL `{0}` has an empty tag")]
    EmptyTag(String),
    #[error("malformed mount `{0}`: expected src-dir:dest-dir[:options] with absolute paths")]
    MalformedMount(String),
    #[error("unknown mount option `{option}` in `{mount}`")]
    UnknownOption { mount: String, option: String },
    #[error("only env profiles are supported, found `{0}`")]
    NonEnvProfile(String),
    #[error("invalid value `{value}` for field `{field}`")]
    InvalidField { field: &'static str, value: String },
    #[error("container `{container}`: runtime {runtime} cannot use image `{image}`")]
    RuntimeSchemeMismatch {
        container: String,
        runtime: Runtime,
        image: String,
    },
    #[error("no catalog entry for transformation `{name}` at site `{site}`")]
    NotFound { name: String, site: String },
    #[error("reading catalog: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Runtime {
    Docker,
    Singularity,
    Shifter,
}

impl Runtime {
    pub fn as_str(self) -> &'static str {
        match self {
            Runtime::Docker => "docker",
            Runtime::Singularity => "singularity",
            Runtime::Shifter => "shifter",
        }
    }

    /// Where the job directory is mounted inside the container.
    pub fn job_dir_mount_point(self) -> &'static str {
        match self {
            Runtime::Docker | Runtime::Shifter => "/scratch",
            Runtime::Singularity => "/srv",
        }
    }
}

impl fmt::Display for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Runtime {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "docker" => Ok(Runtime::Docker),
            "singularity" => Ok(Runtime::Singularity),
            "shifter" => Ok(Runtime::Shifter),
            _ => Err(CatalogError::InvalidField {
                field: "type",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstallType {
    Installed,
    Stageable,
}

impl InstallType {
    fn as_str(self) -> &'static str {
        match self {
            InstallType::Installed => "INSTALLED",
            InstallType::Stageable => "STAGEABLE",
        }
    }
}

impl FromStr for InstallType {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "INSTALLED" => Ok(InstallType::Installed),
            "STAGEABLE" => Ok(InstallType::Stageable),
            _ => Err(CatalogError::InvalidField {
                field: "type",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageScheme {
    Docker,
    Shub,
    Shifter,
    File,
    Http,
}

impl ImageScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageScheme::Docker => "docker",
            ImageScheme::Shub => "shub",
            ImageScheme::Shifter => "shifter",
            ImageScheme::File => "file",
            ImageScheme::Http => "http",
        }
    }

    /// Registry schemes whose last path segment may carry a `:tag`.
    fn is_registry(self) -> bool {
        matches!(
            self,
            ImageScheme::Docker | ImageScheme::Shub | ImageScheme::Shifter
        )
    }
}

/// A container image location as written in the catalog.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ImageRef {
    pub scheme: ImageScheme,
    pub locator: String,
    pub tag: Option<String>,
}

impl ImageRef {
    /// Hub images that the transfer tool can export into an image file.
    /// Shifter images live only in the site-local Shifter registry.
    pub fn is_exportable(&self) -> bool {
        matches!(self.scheme, ImageScheme::Docker | ImageScheme::Shub)
    }

    pub fn tag_or_latest(&self) -> &str {
        self.tag.as_deref().unwrap_or("latest")
    }

    /// Filesystem-safe name, e.g. `rynge__montage__latest`.
    pub fn flat_name(&self) -> String {
        let base = self.locator.trim_start_matches('/').replace('/', "__");
        match self.scheme {
            ImageScheme::File | ImageScheme::Http => base,
            _ => format!("{base}__{}", self.tag_or_latest()),
        }
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scheme {
            ImageScheme::Docker | ImageScheme::Shifter => {
                write!(f, "{}:///{}", self.scheme.as_str(), self.locator)?
            }
            ImageScheme::Shub | ImageScheme::Http => {
                write!(f, "{}://{}", self.scheme.as_str(), self.locator)?
            }
            ImageScheme::File => write!(f, "file://{}", self.locator)?,
        }
        if let Some(tag) = &self.tag {
            write!(f, ":{tag}")?;
        }
        Ok(())
    }
}

impl From<ImageRef> for String {
    fn from(value: ImageRef) -> Self {
        value.to_string()
    }
}

impl TryFrom<String> for ImageRef {
    type Error = CatalogError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        parse_image_url(&value)
    }
}

/// Splits an image URL into scheme, locator and optional tag.
///
/// A colon is a tag separator only when it follows the final `/`, so
/// `host:5000/repo` keeps its port in the locator.
pub fn parse_image_url(url: &str) -> Result<ImageRef, CatalogError> {
    let (scheme, rest) = url
        .split_once("://")
        .ok_or_else(|| CatalogError::UnknownScheme(url.to_string()))?;
    let scheme = match scheme {
        "docker" => ImageScheme::Docker,
        "shub" => ImageScheme::Shub,
        "shifter" => ImageScheme::Shifter,
        "file" => ImageScheme::File,
        "http" => ImageScheme::Http,
        _ => return Err(CatalogError::UnknownScheme(url.to_string())),
    };
    let body = match scheme {
        // keep file paths absolute
        ImageScheme::File => rest,
        _ => rest.trim_start_matches('/'),
    };
    let (locator, tag) = if scheme.is_registry() {
        let last_slash = body.rfind('/').map_or(0, |i| i + 1);
        match body[last_slash..].rfind(':') {
            Some(pos) => {
                let split = last_slash + pos;
                (&body[..split], Some(&body[split + 1..]))
            }
            None => (body, None),
        }
    } else {
        (body, None)
    };
    if locator.trim_matches('/').is_empty() {
        return Err(CatalogError::EmptyLocator(url.to_string()));
    }
    if tag == Some("") {
        return Err(CatalogError::EmptyTag(url.to_string()));
    }
    Ok(ImageRef {
        scheme,
        locator: locator.to_string(),
        tag: tag.map(str::to_string),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MountOption {
    Ro,
    Rw,
}

/// Host directory bind-mounted into a container.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MountSpec {
    pub src: String,
    pub dst: String,
    pub options: Vec<MountOption>,
}

impl MountSpec {
    pub fn new(src: impl Into<String>, dst: impl Into<String>) -> Self {
        MountSpec {
            src: src.into(),
            dst: dst.into(),
            options: Vec::new(),
        }
    }

    pub fn read_only(&self) -> bool {
        self.options.contains(&MountOption::Ro)
    }
}

impl fmt::Display for MountSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.src, self.dst)?;
        if !self.options.is_empty() {
            let opts: Vec<&str> = self
                .options
                .iter()
                .map(|o| match o {
                    MountOption::Ro => "ro",
                    MountOption::Rw => "rw",
                })
                .collect();
            write!(f, ":{}", opts.join(","))?;
        }
        Ok(())
    }
}

impl From<MountSpec> for String {
    fn from(value: MountSpec) -> Self {
        value.to_string()
    }
}

impl TryFrom<String> for MountSpec {
    type Error = CatalogError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        parse_mount_spec(&value)
    }
}

/// Parses `src-dir:dest-dir[:options]`, options being a comma list of `ro`/`rw`.
pub fn parse_mount_spec(s: &str) -> Result<MountSpec, CatalogError> {
    let parts: Vec<&str> = s.split(':').collect();
    if !(2..=3).contains(&parts.len()) {
        return Err(CatalogError::MalformedMount(s.to_string()));
    }
    let (src, dst) = (parts[0], parts[1]);
    if !src.starts_with('/') || !dst.starts_with('/') {
        return Err(CatalogError::MalformedMount(s.to_string()));
    }
    let mut options = Vec::new();
    if let Some(opts) = parts.get(2) {
        for token in opts.split(',') {
            let opt = match token {
                "ro" => MountOption::Ro,
                "rw" => MountOption::Rw,
                other => {
                    return Err(CatalogError::UnknownOption {
                        mount: s.to_string(),
                        option: other.to_string(),
                    })
                }
            };
            options.push(opt);
        }
    }
    Ok(MountSpec {
        src: src.to_string(),
        dst: dst.to_string(),
        options,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerDef {
    pub name: String,
    pub image: ImageRef,
    pub runtime: Runtime,
    pub mounts: Vec<MountSpec>,
    pub profiles: EnvMap,
    /// Exported image size; the simulator needs it.
    pub image_size_bytes: u64,
    /// The image is pre-deployed on compute sites (CVMFS-style).
    pub site_local: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformationEntry {
    pub namespace: Option<String>,
    pub name: String,
    pub version: Option<String>,
    pub site: String,
    pub arch: Option<String>,
    pub os: Option<String>,
    /// Path inside the container for installed containerized entries,
    /// otherwise a host path or fetchable URL.
    pub pfn: String,
    pub install_type: InstallType,
    pub container: Option<String>,
    pub profiles: EnvMap,
}

impl TransformationEntry {
    /// Logical id in `namespace::name:version` form, omitting absent parts.
    pub fn id(&self) -> String {
        transformation_id(self.namespace.as_deref(), &self.name, self.version.as_deref())
    }
}

pub fn transformation_id(namespace: Option<&str>, name: &str, version: Option<&str>) -> String {
    let mut id = String::new();
    if let Some(ns) = namespace {
        id.push_str(ns);
        id.push_str("::");
    }
    id.push_str(name);
    if let Some(v) = version {
        id.push(':');
        id.push_str(v);
    }
    id
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub transformations: Vec<TransformationEntry>,
    pub containers: BTreeMap<String, ContainerDef>,
}

impl Catalog {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, CatalogError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| CatalogError::Io(format!("{}: {e}", path.as_ref().display())))?;
        parse_catalog(&text)
    }

    /// Checks cross-entry invariants: unique keys and resolvable containers.
    pub fn validate(&self) -> Result<(), CatalogError> {
        let mut keys = std::collections::BTreeSet::new();
        for t in &self.transformations {
            if !keys.insert((t.id(), t.site.clone())) {
                return Err(CatalogError::DuplicateName(format!("{}@{}", t.id(), t.site)));
            }
            if let Some(c) = &t.container {
                if !self.containers.contains_key(c) {
                    return Err(CatalogError::DanglingContainerRef {
                        transformation: t.id(),
                        container: c.clone(),
                    });
                }
            }
        }
        for (name, c) in &self.containers {
            if name != &c.name {
                return Err(CatalogError::InvalidField {
                    field: "name",
                    value: c.name.clone(),
                });
            }
            let shifter_runtime = c.runtime == Runtime::Shifter;
            let shifter_image = c.image.scheme == ImageScheme::Shifter;
            if shifter_runtime != shifter_image {
                return Err(CatalogError::RuntimeSchemeMismatch {
                    container: c.name.clone(),
                    runtime: c.runtime,
                    image: c.image.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn container(&self, name: &str) -> Option<&ContainerDef> {
        self.containers.get(name)
    }

    /// Serializes back into the listing layout: one `transformations` block
    /// per (transformation, site) entry, then the `cont` list.
    pub fn to_yaml(&self) -> String {
        let transformations: Vec<RawTransformation> = self
            .transformations
            .iter()
            .map(|t| RawTransformation {
                namespace: t.namespace.clone(),
                name: t.name.clone(),
                version: t.version.clone().map(serde_yaml::Value::String),
                profile: None,
                site: vec![RawSite {
                    name: t.site.clone(),
                    arch: t.arch.clone(),
                    os: t.os.clone(),
                    container: t.container.clone(),
                    pfn: t.pfn.clone(),
                    kind: t.install_type.as_str().to_string(),
                    profile: env_profile(&t.profiles),
                }],
            })
            .collect();
        let cont: Vec<RawCont> = self
            .containers
            .values()
            .map(|c| RawCont {
                name: c.name.clone(),
                image: c.image.to_string(),
                runtime: c.runtime.as_str().to_string(),
                mount: c.mounts.iter().map(ToString::to_string).collect(),
                profile: env_profile(&c.profiles),
                image_size_bytes: Some(c.image_size_bytes),
                site_local: Some(c.site_local),
            })
            .collect();
        let doc = vec![
            RawSection::Transformations { transformations },
            RawSection::Cont { cont },
        ];
        serde_yaml::to_string(&doc).expect("catalog serializes")
    }
}

fn env_profile(env: &EnvMap) -> Vec<BTreeMap<String, EnvMap>> {
    if env.is_empty() {
        Vec::new()
    } else {
        vec![BTreeMap::from([("env".to_string(), env.clone())])]
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawSection {
    Transformations {
        transformations: Vec<RawTransformation>,
    },
    Cont {
        cont: Vec<RawCont>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    #[serde(default)]
    transformations: Vec<RawTransformation>,
    #[serde(default)]
    cont: Vec<RawCont>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransformation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    namespace: Option<String>,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    version: Option<serde_yaml::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    profile: Option<Vec<BTreeMap<String, EnvMap>>>,
    site: Vec<RawSite>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSite {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arch: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    os: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    container: Option<String>,
    pfn: String,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    profile: Vec<BTreeMap<String, EnvMap>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCont {
    name: String,
    image: String,
    #[serde(rename = "type")]
    runtime: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    mount: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    profile: Vec<BTreeMap<String, EnvMap>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_size_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    site_local: Option<bool>,
}

fn scalar_to_string(v: &serde_yaml::Value) -> Result<String, CatalogError> {
    match v {
        serde_yaml::Value::String(s) => Ok(s.clone()),
        serde_yaml::Value::Number(n) => Ok(n.to_string()),
        other => Err(CatalogError::InvalidField {
            field: "version",
            value: format!("{other:?}"),
        }),
    }
}

fn collect_env(profiles: &[BTreeMap<String, EnvMap>]) -> Result<EnvMap, CatalogError> {
    let mut env = EnvMap::new();
    for profile in profiles {
        for (kind, vars) in profile {
            if kind != "env" {
                return Err(CatalogError::NonEnvProfile(kind.clone()));
            }
            env.extend(vars.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
    }
    Ok(env)
}

/// Parses a catalog document and checks every cross-reference.
pub fn parse_catalog(text: &str) -> Result<Catalog, CatalogError> {
    let value: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| CatalogError::Syntax(e.to_string()))?;
    let doc = match value {
        serde_yaml::Value::Null => RawDocument::default(),
        serde_yaml::Value::Sequence(items) => {
            let mut doc = RawDocument::default();
            for item in items {
                let section: RawSection = serde_yaml::from_value(item)
                    .map_err(|e| CatalogError::Syntax(e.to_string()))?;
                match section {
                    RawSection::Transformations { transformations } => {
                        doc.transformations.extend(transformations)
                    }
                    RawSection::Cont { cont } => doc.cont.extend(cont),
                }
            }
            doc
        }
        mapping @ serde_yaml::Value::Mapping(_) => {
            serde_yaml::from_value(mapping).map_err(|e| CatalogError::Syntax(e.to_string()))?
        }
        other => {
            return Err(CatalogError::Syntax(format!(
                "expected a sequence or mapping at top level, found {other:?}"
            )))
        }
    };

    let mut catalog = Catalog::default();
    for raw in doc.cont {
        let image = parse_image_url(&raw.image)?;
        let runtime: Runtime = raw.runtime.parse()?;
        let mounts = raw
            .mount
            .iter()
            .map(|m| parse_mount_spec(m))
            .collect::<Result<Vec<_>, _>>()?;
        let def = ContainerDef {
            name: raw.name.clone(),
            image,
            runtime,
            mounts,
            profiles: collect_env(&raw.profile)?,
            image_size_bytes: raw.image_size_bytes.unwrap_or(0),
            site_local: raw.site_local.unwrap_or(false),
        };
        if catalog.containers.insert(raw.name.clone(), def).is_some() {
            return Err(CatalogError::DuplicateName(raw.name));
        }
    }
    for raw in doc.transformations {
        let version = raw.version.as_ref().map(scalar_to_string).transpose()?;
        let shared_env = collect_env(raw.profile.as_deref().unwrap_or_default())?;
        for site in raw.site {
            let mut profiles = shared_env.clone();
            profiles.extend(collect_env(&site.profile)?);
            catalog.transformations.push(TransformationEntry {
                namespace: raw.namespace.clone(),
                name: raw.name.clone(),
                version: version.clone(),
                site: site.name,
                arch: site.arch,
                os: site.os,
                pfn: site.pfn,
                install_type: site.kind.parse()?,
                container: site.container,
                profiles,
            });
        }
    }
    catalog.validate()?;
    Ok(catalog)
}

/// Finds the entry for a logical transformation at one site, together with
/// the container it requires, if any.
pub fn resolve_transformation<'a>(
    catalog: &'a Catalog,
    name: &str,
    site: &str,
) -> Result<(&'a TransformationEntry, Option<&'a ContainerDef>), CatalogError> {
    let entry = catalog
        .transformations
        .iter()
        .find(|t| t.site == site && t.id() == name)
        .ok_or_else(|| CatalogError::NotFound {
            name: name.to_string(),
            site: site.to_string(),
        })?;
    let container = match &entry.container {
        Some(c) => Some(catalog.containers.get(c).ok_or_else(|| {
            CatalogError::DanglingContainerRef {
                transformation: entry.id(),
                container: c.clone(),
            }
        })?),
        None => None,
    };
    Ok((entry, container))
}
