//! Dependency resolution against detected environments and meta packages.
//!
//! A dependency names required tags, forbidden tags and a version window;
//! resolution picks the best matching environment entry, installing a
//! package recipe first when allowed. Versions are integer lists compared
//! lexicographically with implicit trailing zeros, and the lower bound is
//! inclusive while the upper bound is exclusive.

use crate::detect::{self, EnvEntry, EnvSource};
use crate::error::{code, Error, Result};
use crate::registry::{split_tags, ComponentRef, Registry};
use serde_json::Value;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Compare dotted versions lexicographically, padding the shorter list
/// with zeros, so `[1,13]` equals `[1,13,0]`.
pub fn compare_versions(a: &[u64], b: &[u64]) -> Ordering {
    let len = a.len().max(b.len());
    for i in 0..len {
        let x = a.get(i).copied().unwrap_or(0);
        let y = b.get(i).copied().unwrap_or(0);
        match x.cmp(&y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

/// A named requirement on the environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencySpec {
    pub key: String,
    pub name: String,
    pub tags: BTreeSet<String>,
    pub no_tags: BTreeSet<String>,
    pub version_from: Option<Vec<u64>>,
    pub version_to: Option<Vec<u64>>,
    pub sort: i64,
}

impl DependencySpec {
    pub fn from_meta(key: &str, meta: &Value) -> Result<Self> {
        let obj = meta
            .as_object()
            .ok_or_else(|| Error::generic(format!("dependency {key:?} must be an object")))?;
        let tags = match obj.get("tags") {
            Some(Value::String(s)) => split_tags(s),
            _ => BTreeSet::new(),
        };
        if tags.is_empty() {
            return Err(Error::generic(format!(
                "dependency {key:?} needs a nonempty `tags` string"
            )));
        }
        let no_tags = match obj.get("no_tags") {
            Some(Value::String(s)) => split_tags(s),
            _ => BTreeSet::new(),
        };
        let version_from = parse_version_list(obj.get("version_from"))?;
        let version_to = parse_version_list(obj.get("version_to"))?;
        if let (Some(from), Some(to)) = (&version_from, &version_to) {
            if compare_versions(from, to) == Ordering::Greater {
                return Err(Error::generic(format!(
                    "dependency {key:?}: version_from exceeds version_to"
                )));
            }
        }
        Ok(DependencySpec {
            key: key.to_string(),
            name: obj
                .get("name")
                .and_then(Value::as_str)
                .unwrap_or(key)
                .to_string(),
            tags,
            no_tags,
            version_from,
            version_to,
            sort: obj.get("sort").and_then(Value::as_i64).unwrap_or(0),
        })
    }

    /// Parse a `deps` map into specs ordered ascending by (sort, key).
    pub fn map_from_meta(meta: Option<&Value>) -> Result<Vec<DependencySpec>> {
        let mut specs = Vec::new();
        if let Some(map) = meta.and_then(Value::as_object) {
            for (key, value) in map {
                specs.push(DependencySpec::from_meta(key, value)?);
            }
        }
        specs.sort_by(|a, b| a.sort.cmp(&b.sort).then_with(|| a.key.cmp(&b.key)));
        Ok(specs)
    }
}

fn parse_version_list(value: Option<&Value>) -> Result<Option<Vec<u64>>> {
    match value {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => {
            let mut out = Vec::new();
            for item in items {
                out.push(item.as_u64().ok_or_else(|| {
                    Error::generic("version bounds must be lists of non-negative integers")
                })?);
            }
            Ok(Some(out))
        }
        Some(Value::String(s)) => Ok(Some(detect::parse_version(s))),
        Some(_) => Err(Error::generic("version bounds must be lists of non-negative integers")),
    }
}

/// Why a candidate was rejected, reported on resolution failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    TagMiss(BTreeSet<String>),
    NoTagHit(BTreeSet<String>),
    VersionOutOfRange,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::TagMiss(missing) => {
                write!(f, "missing tags {}", missing.iter().cloned().collect::<Vec<_>>().join(","))
            }
            Rejection::NoTagHit(hit) => {
                write!(f, "forbidden tags {}", hit.iter().cloned().collect::<Vec<_>>().join(","))
            }
            Rejection::VersionOutOfRange => f.write_str("version out of range"),
        }
    }
}

/// Check one candidate against a spec.
pub fn check_candidate(spec: &DependencySpec, candidate: &EnvEntry) -> Option<Rejection> {
    let missing: BTreeSet<String> = spec.tags.difference(&candidate.tags).cloned().collect();
    if !missing.is_empty() {
        return Some(Rejection::TagMiss(missing));
    }
    let hit: BTreeSet<String> = spec.no_tags.intersection(&candidate.tags).cloned().collect();
    if !hit.is_empty() {
        return Some(Rejection::NoTagHit(hit));
    }
    if let Some(from) = &spec.version_from {
        if compare_versions(&candidate.version, from) == Ordering::Less {
            return Some(Rejection::VersionOutOfRange);
        }
    }
    if let Some(to) = &spec.version_to {
        if compare_versions(&candidate.version, to) != Ordering::Less {
            return Some(Rejection::VersionOutOfRange);
        }
    }
    None
}

/// Pick the best candidate: highest version, then detected over
/// installed, then lowest UID for determinism.
pub fn match_dep<'a>(spec: &DependencySpec, candidates: &'a [EnvEntry]) -> Option<&'a EnvEntry> {
    candidates
        .iter()
        .filter(|c| check_candidate(spec, c).is_none())
        .max_by(|a, b| {
            compare_versions(&a.version, &b.version)
                .then_with(|| source_rank(a.source).cmp(&source_rank(b.source)))
                .then_with(|| b.uid.cmp(&a.uid))
        })
}

fn source_rank(source: EnvSource) -> u8 {
    match source {
        EnvSource::Installed => 0,
        EnvSource::Detected => 1,
    }
}

/// One satisfied dependency.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ResolvedDep {
    pub key: String,
    pub uid: String,
    pub version: Vec<u64>,
}

/// The complete result of resolving a dependency set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResolvedDeps {
    /// Ascending by spec `sort`; the merge below applies them in this
    /// order, later entries overriding on key collisions.
    pub entries: Vec<ResolvedDep>,
    pub merged_env: BTreeMap<String, String>,
}

/// Resolve every spec, installing matching packages when `allow_install`
/// is set. Specs are processed ascending by `sort`, so later installs see
/// the environments of earlier dependencies.
pub fn resolve(
    registry: &Registry,
    specs: &[DependencySpec],
    allow_install: bool,
) -> Result<ResolvedDeps> {
    let mut stack = Vec::new();
    resolve_inner(registry, specs, allow_install, 0, &mut stack)
}

fn resolve_inner(
    registry: &Registry,
    specs: &[DependencySpec],
    allow_install: bool,
    depth: usize,
    stack: &mut Vec<String>,
) -> Result<ResolvedDeps> {
    const MAX_DEPTH: usize = 8;
    if depth > MAX_DEPTH {
        return Err(Error::dependency(format!(
            "dependency recursion exceeds depth {MAX_DEPTH}"
        )));
    }
    let mut ordered: Vec<&DependencySpec> = specs.iter().collect();
    ordered.sort_by(|a, b| a.sort.cmp(&b.sort).then_with(|| a.key.cmp(&b.key)));

    let mut result = ResolvedDeps::default();
    for spec in ordered {
        let candidates = detect::all_env_entries(registry)?;
        let mut chosen = match_dep(spec, &candidates).cloned();
        if chosen.is_none() && allow_install {
            if let Some(pkg_ref) = best_package_for(registry, spec)? {
                install_package_inner(
                    registry,
                    &pkg_ref,
                    None,
                    &result.merged_env,
                    depth,
                    stack,
                )?;
                let candidates = detect::all_env_entries(registry)?;
                chosen = match_dep(spec, &candidates).cloned();
            }
        }
        let Some(entry) = chosen else {
            return Err(unsatisfied_error(registry, spec, &candidates));
        };
        for (k, v) in &entry.env {
            result.merged_env.insert(k.clone(), v.clone());
        }
        result.entries.push(ResolvedDep {
            key: spec.key.clone(),
            uid: entry.uid.as_str().to_string(),
            version: entry.version.clone(),
        });
    }
    Ok(result)
}

fn unsatisfied_error(registry: &Registry, spec: &DependencySpec, candidates: &[EnvEntry]) -> Error {
    let mut lines = vec![format!(
        "unsatisfied dependency {:?} ({})",
        spec.key, spec.name
    )];
    for candidate in candidates {
        if let Some(rejection) = check_candidate(spec, candidate) {
            lines.push(format!(
                "  env {} v{}: {}",
                candidate.data_name,
                candidate.version_string(),
                rejection
            ));
        }
    }
    if let Ok(pkg_refs) = registry.search_components("package", &[], None) {
        for pkg_ref in pkg_refs {
            if let Ok(component) = registry.load_component(&pkg_ref) {
                if let Ok(pkg) = PackageSpec::from_meta(&component.meta) {
                    if let Some(reason) = reject_package(spec, &pkg) {
                        lines.push(format!("  package {pkg_ref}: {reason}"));
                    }
                }
            }
        }
    }
    Error::new(code::DEPENDENCY, lines.join("\n"))
}

fn reject_package(spec: &DependencySpec, pkg: &PackageSpec) -> Option<String> {
    if !pkg.platform_ok(std::env::consts::OS, std::env::consts::ARCH) {
        return Some("package not available for this platform".to_string());
    }
    let as_entry = pkg.as_pseudo_env_entry();
    check_candidate(spec, &as_entry).map(|r| r.to_string())
}

/// Find the best installable package for a spec: same tag/version filter
/// as environments, platform filter applied, highest version wins.
fn best_package_for(registry: &Registry, spec: &DependencySpec) -> Result<Option<ComponentRef>> {
    let mut best: Option<(Vec<u64>, ComponentRef)> = None;
    for pkg_ref in registry.search_components("package", &[], None)? {
        let component = registry.load_component(&pkg_ref)?;
        let Ok(pkg) = PackageSpec::from_meta(&component.meta) else {
            continue;
        };
        if !pkg.platform_ok(std::env::consts::OS, std::env::consts::ARCH) {
            continue;
        }
        if check_candidate(spec, &pkg.as_pseudo_env_entry()).is_some() {
            continue;
        }
        let better = match &best {
            Some((version, _)) => compare_versions(&pkg.version, version) == Ordering::Greater,
            None => true,
        };
        if better {
            best = Some((pkg.version.clone(), pkg_ref));
        }
    }
    Ok(best.map(|(_, r)| r))
}

/// Archive to fetch and verify before installing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchSpec {
    pub url: String,
    pub sha256: String,
}

/// A declarative recipe to install missing software.
#[derive(Debug, Clone)]
pub struct PackageSpec {
    pub tags: BTreeSet<String>,
    pub version: Vec<u64>,
    pub fetch: Option<FetchSpec>,
    pub install_steps: Vec<String>,
    pub env_template: BTreeMap<String, String>,
    pub platform_filter: Option<Vec<(String, String)>>,
    pub deps: Vec<DependencySpec>,
}

impl PackageSpec {
    pub fn from_meta(meta: &Value) -> Result<Self> {
        let obj = meta
            .as_object()
            .ok_or_else(|| Error::generic("package meta must be an object"))?;
        let tags = match obj.get("tags") {
            Some(Value::String(s)) => split_tags(s),
            _ => return Err(Error::generic("package meta needs a comma-separated `tags` string")),
        };
        let version = parse_version_list(obj.get("version"))?.unwrap_or_default();
        let fetch = match obj.get("fetch") {
            None | Some(Value::Null) => None,
            Some(f) => {
                let url = f
                    .get("url")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::generic("package fetch needs a `url`"))?;
                let sha256 = f
                    .get("sha256")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::generic("package fetch needs a `sha256`"))?;
                if sha256.len() != 64 || !sha256.chars().all(|c| c.is_ascii_hexdigit()) {
                    return Err(Error::generic("package fetch sha256 must be 64 hex characters"));
                }
                Some(FetchSpec {
                    url: url.to_string(),
                    sha256: sha256.to_lowercase(),
                })
            }
        };
        let install_steps = obj
            .get("install_steps")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default();
        let env_template = detect::parse_env_template(obj.get("env_template"))?;
        let platform_filter = match obj.get("platform_filter") {
            None | Some(Value::Null) => None,
            Some(Value::Array(items)) => {
                let mut pairs = Vec::new();
                for item in items {
                    let pair = match item {
                        Value::Array(xs) if xs.len() == 2 => (
                            xs[0].as_str().unwrap_or_default().to_string(),
                            xs[1].as_str().unwrap_or_default().to_string(),
                        ),
                        Value::Object(m) => (
                            m.get("os").and_then(Value::as_str).unwrap_or_default().to_string(),
                            m.get("arch").and_then(Value::as_str).unwrap_or_default().to_string(),
                        ),
                        _ => return Err(Error::generic("platform_filter entries must be (os, arch) pairs")),
                    };
                    pairs.push(pair);
                }
                Some(pairs)
            }
            Some(_) => return Err(Error::generic("platform_filter must be a list")),
        };
        let deps = DependencySpec::map_from_meta(obj.get("deps"))?;
        Ok(PackageSpec {
            tags,
            version,
            fetch,
            install_steps,
            env_template,
            platform_filter,
            deps,
        })
    }

    /// `*` (or an empty string) in either position matches anything.
    pub fn platform_ok(&self, os: &str, arch: &str) -> bool {
        match &self.platform_filter {
            None => true,
            Some(pairs) => pairs.iter().any(|(o, a)| {
                (o.is_empty() || o == "*" || o == os) && (a.is_empty() || a == "*" || a == arch)
            }),
        }
    }

    /// View the package through the candidate filter (same tag and
    /// version checks as an environment entry).
    fn as_pseudo_env_entry(&self) -> EnvEntry {
        EnvEntry {
            uid: crate::registry::Uid::derive("package-candidate"),
            data_name: String::new(),
            tags: self.tags.clone(),
            version: self.version.clone(),
            env: BTreeMap::new(),
            detected_path: PathBuf::new(),
            source: EnvSource::Installed,
        }
    }

    /// Signature used for cycle detection across transitive installs.
    fn signature(&self) -> String {
        format!(
            "{}@{}",
            self.tags.iter().cloned().collect::<Vec<_>>().join(","),
            detect::version_to_string(&self.version)
        )
    }
}

/// Fetch, verify, unpack and install a package, returning the resulting
/// environment entry. Installation is atomic: any failure removes the
/// partially written install directory.
pub fn install_package(
    registry: &Registry,
    pkg_ref: &ComponentRef,
    target_dir: Option<&Path>,
) -> Result<EnvEntry> {
    let mut stack = Vec::new();
    install_package_inner(registry, pkg_ref, target_dir, &BTreeMap::new(), 0, &mut stack)
}

fn install_package_inner(
    registry: &Registry,
    pkg_ref: &ComponentRef,
    target_dir: Option<&Path>,
    base_env: &BTreeMap<String, String>,
    depth: usize,
    stack: &mut Vec<String>,
) -> Result<EnvEntry> {
    let component = registry.load_component(pkg_ref)?;
    let pkg = PackageSpec::from_meta(&component.meta)?;
    if !pkg.platform_ok(std::env::consts::OS, std::env::consts::ARCH) {
        return Err(Error::dependency(format!(
            "package {pkg_ref}: package not available for this platform"
        )));
    }
    let signature = pkg.signature();
    if stack.contains(&signature) {
        return Err(Error::dependency(format!(
            "package dependency cycle at {signature}"
        )));
    }
    stack.push(signature);
    let result = (|| {
        // Dependencies of the package itself resolve first; their
        // environments are visible to the install steps.
        let mut step_env = base_env.clone();
        if !pkg.deps.is_empty() {
            let dep_result = resolve_inner(registry, &pkg.deps, true, depth + 1, stack)?;
            step_env.extend(dep_result.merged_env);
        }

        let install_dir = match target_dir {
            Some(dir) => dir.to_path_buf(),
            None => registry
                .config_dir()
                .join("installed")
                .join(&component.data_name),
        };

        let tmp = tempfile::tempdir().map_err(Error::from)?;
        let work_dir = tmp.path().join("work");
        std::fs::create_dir_all(&work_dir).map_err(|e| Error::io_at(&work_dir, e))?;

        match &pkg.fetch {
            Some(fetch) => {
                let archive = fetch_archive(fetch, &component.payload_dir, tmp.path())?;
                verify_sha256(&archive, &fetch.sha256)?;
                crate::registry::unpack_into(&archive, &work_dir)?;
            }
            None => {
                // No archive: the package payload is the working tree.
                copy_payload_into(&component.payload_dir, &work_dir)?;
            }
        }

        if install_dir.exists() {
            std::fs::remove_dir_all(&install_dir).map_err(|e| Error::io_at(&install_dir, e))?;
        }
        std::fs::create_dir_all(&install_dir).map_err(|e| Error::io_at(&install_dir, e))?;

        let mut transcript = String::new();
        let run = run_install_steps(&pkg, &install_dir, &work_dir, &step_env, &mut transcript);
        let log_path = install_dir.join(".ck-install-log.txt");
        if let Err(err) = run {
            let _ = std::fs::remove_dir_all(&install_dir);
            return Err(err);
        }
        std::fs::File::create(&log_path)
            .and_then(|mut f| f.write_all(transcript.as_bytes()))
            .map_err(|e| Error::io_at(&log_path, e))?;

        detect::register_env_entry(
            registry,
            &component.data_name,
            &pkg.tags,
            &pkg.env_template,
            pkg.version.clone(),
            &install_dir,
            EnvSource::Installed,
        )
    })();
    stack.pop();
    result
}

fn run_install_steps(
    pkg: &PackageSpec,
    install_dir: &Path,
    work_dir: &Path,
    step_env: &BTreeMap<String, String>,
    transcript: &mut String,
) -> Result<()> {
    for step in &pkg.install_steps {
        let expanded = step
            .replace("{install_dir}", &install_dir.to_string_lossy())
            .replace("{tmp_dir}", &work_dir.to_string_lossy())
            .replace("{os}", std::env::consts::OS);
        transcript.push_str(&format!("$ {expanded}\n"));
        let mut command = shell_command(&expanded);
        command.current_dir(work_dir);
        command.env_clear();
        if let Some(path) = std::env::var_os("PATH") {
            command.env("PATH", path);
        }
        for (k, v) in step_env {
            command.env(k, v);
        }
        let output = command
            .output()
            .map_err(|e| Error::exec(format!("cannot run install step: {e}")))?;
        transcript.push_str(&String::from_utf8_lossy(&output.stdout));
        transcript.push_str(&String::from_utf8_lossy(&output.stderr));
        if !output.status.success() {
            return Err(Error::exec(format!(
                "install step failed ({}): {expanded}\n{}{}",
                output.status,
                String::from_utf8_lossy(&output.stdout),
                String::from_utf8_lossy(&output.stderr),
            )));
        }
    }
    Ok(())
}

pub(crate) fn shell_command(line: &str) -> std::process::Command {
    #[cfg(unix)]
    {
        let mut c = std::process::Command::new("sh");
        c.arg("-c").arg(line);
        c
    }
    #[cfg(not(unix))]
    {
        let mut c = std::process::Command::new("cmd");
        c.arg("/C").arg(line);
        c
    }
}

fn fetch_archive(fetch: &FetchSpec, payload_dir: &Path, tmp: &Path) -> Result<PathBuf> {
    let url = &fetch.url;
    if url.starts_with("http://") || url.starts_with("https://") {
        let dest = tmp.join(url.rsplit('/').next().unwrap_or("archive"));
        let response = ureq::get(url)
            .timeout(std::time::Duration::from_secs(60))
            .call()
            .map_err(|e| Error::io(format!("{url}: {e}")))?;
        let mut reader = response.into_reader();
        let mut file = std::fs::File::create(&dest).map_err(|e| Error::io_at(&dest, e))?;
        std::io::copy(&mut reader, &mut file).map_err(|e| Error::io_at(&dest, e))?;
        return Ok(dest);
    }
    let path = if let Some(rest) = url.strip_prefix("file://") {
        PathBuf::from(rest)
    } else {
        let p = PathBuf::from(url);
        if p.is_absolute() {
            p
        } else {
            payload_dir.join(p)
        }
    };
    if !path.is_file() {
        return Err(Error::not_found(format!("{}: archive not found", path.display())));
    }
    Ok(path)
}

fn verify_sha256(path: &Path, expected: &str) -> Result<()> {
    use sha2::Digest;
    let mut hasher = sha2::Sha256::new();
    let mut file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    std::io::copy(&mut file, &mut hasher).map_err(|e| Error::io_at(path, e))?;
    let actual = hex::encode(hasher.finalize());
    if actual != expected {
        return Err(Error::io(format!(
            "integrity failure: {} has sha256 {actual}, expected {expected}",
            path.display()
        )));
    }
    Ok(())
}

fn copy_payload_into(payload_dir: &Path, work_dir: &Path) -> Result<()> {
    for entry in std::fs::read_dir(payload_dir).map_err(|e| Error::io_at(payload_dir, e))? {
        let entry = entry.map_err(|e| Error::io_at(payload_dir, e))?;
        let name = entry.file_name();
        if name == ".cm" || name == "tmp" {
            continue;
        }
        let from = entry.path();
        let to = work_dir.join(&name);
        if from.is_dir() {
            copy_dir(&from, &to)?;
        } else {
            std::fs::copy(&from, &to).map_err(|e| Error::io_at(&from, e))?;
        }
    }
    Ok(())
}

fn copy_dir(src: &Path, dst: &Path) -> Result<()> {
    std::fs::create_dir_all(dst).map_err(|e| Error::io_at(dst, e))?;
    for entry in walkdir::WalkDir::new(src).min_depth(1) {
        let entry = entry.map_err(|e| Error::io(format!("{}: {e}", src.display())))?;
        let rel = entry.path().strip_prefix(src).expect("under root");
        let target = dst.join(rel);
        if entry.file_type().is_dir() {
            std::fs::create_dir_all(&target).map_err(|e| Error::io_at(&target, e))?;
        } else {
            std::fs::copy(entry.path(), &target).map_err(|e| Error::io_at(entry.path(), e))?;
        }
    }
    Ok(())
}

/// Serialize resolved deps for build records and experiment points.
pub fn resolved_to_json(resolved: &ResolvedDeps) -> Value {
    serde_json::json!({
        "entries": resolved.entries,
        "merged_env": resolved.merged_env,
    })
}

pub fn resolved_from_json(value: &Value) -> Result<ResolvedDeps> {
    let entries: Vec<ResolvedDep> = serde_json::from_value(
        value.get("entries").cloned().unwrap_or(Value::Array(vec![])),
    )?;
    let merged_env: BTreeMap<String, String> = serde_json::from_value(
        value
            .get("merged_env")
            .cloned()
            .unwrap_or(Value::Object(Default::default())),
    )?;
    Ok(ResolvedDeps { entries, merged_env })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::Uid;
    use rand::prelude::*;
    use serde_json::json;

    fn entry(
        uid: &str,
        tags: &str,
        version: &[u64],
        source: EnvSource,
    ) -> EnvEntry {
        EnvEntry {
            uid: Uid::parse(uid).unwrap(),
            data_name: format!("entry-{uid}"),
            tags: split_tags(tags),
            version: version.to_vec(),
            env: BTreeMap::new(),
            detected_path: PathBuf::from(format!("/opt/{uid}")),
            source,
        }
    }

    #[test]
    fn compare_versions_examples() {
        assert_eq!(compare_versions(&[1, 13, 1], &[2, 0, 0]), Ordering::Less);
        assert_eq!(compare_versions(&[1, 13], &[1, 13, 0]), Ordering::Equal);
        assert_eq!(compare_versions(&[2, 0, 1], &[2]), Ordering::Greater);
    }

    #[test]
    fn compare_versions_matches_padded_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..2000 {
            let a: Vec<u64> = (0..rng.gen_range(0..5)).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<u64> = (0..rng.gen_range(0..5)).map(|_| rng.gen_range(0..4)).collect();
            let len = a.len().max(b.len());
            let pad = |v: &[u64]| -> Vec<u64> {
                let mut p = v.to_vec();
                p.resize(len, 0);
                p
            };
            assert_eq!(compare_versions(&a, &b), pad(&a).cmp(&pad(&b)), "{a:?} vs {b:?}");
        }
    }

    fn tensorflow_spec() -> DependencySpec {
        DependencySpec::from_meta(
            "library",
            &json!({
                "name": "TensorFlow C++ API",
                "sort": 20,
                "version_from": [1, 13, 1],
                "version_to": [2, 0, 0],
                "no_tags": "tensorflow-lite",
                "tags": "lib,tensorflow,vstatic"
            }),
        )
        .unwrap()
    }

    #[test]
    fn match_dep_tensorflow_example() {
        let spec = tensorflow_spec();
        let candidates = vec![
            entry("000000000000000a", "lib,tensorflow,vstatic", &[1, 13, 1], EnvSource::Detected),
            entry("000000000000000b", "lib,tensorflow,vstatic", &[1, 15, 0], EnvSource::Detected),
            entry("000000000000000c", "lib,tensorflow,vstatic", &[2, 0, 0], EnvSource::Detected),
            entry(
                "000000000000000d",
                "lib,tensorflow,vstatic,tensorflow-lite",
                &[1, 14, 0],
                EnvSource::Detected,
            ),
        ];
        let best = match_dep(&spec, &candidates).unwrap();
        assert_eq!(best.version, vec![1, 15, 0]);
    }

    #[test]
    fn match_dep_empty_candidates_is_none() {
        assert!(match_dep(&tensorflow_spec(), &[]).is_none());
    }

    #[test]
    fn match_dep_prefers_detected_then_lowest_uid() {
        let spec = DependencySpec::from_meta("t", &json!({"tags": "x"})).unwrap();
        let candidates = vec![
            entry("00000000000000ff", "x", &[1, 0], EnvSource::Installed),
            entry("00000000000000aa", "x", &[1, 0], EnvSource::Detected),
        ];
        assert_eq!(
            match_dep(&spec, &candidates).unwrap().uid.as_str(),
            "00000000000000aa"
        );
        // Same source: lowest uid wins.
        let candidates = vec![
            entry("00000000000000ff", "x", &[1, 0], EnvSource::Detected),
            entry("00000000000000aa", "x", &[1, 0], EnvSource::Detected),
        ];
        assert_eq!(
            match_dep(&spec, &candidates).unwrap().uid.as_str(),
            "00000000000000aa"
        );
    }

    /// Brute-force oracle: filter with the same predicate, then maximize
    /// by (version, source preference, reversed uid).
    fn oracle_match<'a>(spec: &DependencySpec, candidates: &'a [EnvEntry]) -> Option<&'a EnvEntry> {
        let mut survivors: Vec<&EnvEntry> = candidates
            .iter()
            .filter(|c| {
                spec.tags.is_subset(&c.tags)
                    && spec.no_tags.intersection(&c.tags).next().is_none()
                    && spec
                        .version_from
                        .as_ref()
                        .map(|f| compare_versions(&c.version, f) != Ordering::Less)
                        .unwrap_or(true)
                    && spec
                        .version_to
                        .as_ref()
                        .map(|t| compare_versions(&c.version, t) == Ordering::Less)
                        .unwrap_or(true)
            })
            .collect();
        survivors.sort_by(|a, b| {
            compare_versions(&b.version, &a.version)
                .then_with(|| source_rank(b.source).cmp(&source_rank(a.source)))
                .then_with(|| a.uid.cmp(&b.uid))
        });
        survivors.first().copied()
    }

    #[test]
    fn match_dep_agrees_with_oracle_on_random_sets() {
        let mut rng = StdRng::seed_from_u64(99);
        let vocab = ["lib", "tensorflow", "vstatic", "tensorflow-lite", "gpu", "cpu"];
        for _ in 0..500 {
            let pick_tags = |rng: &mut StdRng, max: usize| -> String {
                let n = rng.gen_range(0..=max);
                (0..n)
                    .map(|_| vocab[rng.gen_range(0..vocab.len())])
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let spec = DependencySpec {
                key: "dep".into(),
                name: "dep".into(),
                tags: split_tags(&format!("lib,{}", pick_tags(&mut rng, 2))),
                no_tags: split_tags(&pick_tags(&mut rng, 2)),
                version_from: if rng.gen_bool(0.5) {
                    Some(vec![rng.gen_range(0..3), rng.gen_range(0..20)])
                } else {
                    None
                },
                version_to: if rng.gen_bool(0.5) {
                    Some(vec![rng.gen_range(1..4), 0, 0])
                } else {
                    None
                },
                sort: 0,
            };
            // Skip malformed windows the type invariant forbids.
            if let (Some(f), Some(t)) = (&spec.version_from, &spec.version_to) {
                if compare_versions(f, t) == Ordering::Greater {
                    continue;
                }
            }
            let n = rng.gen_range(0..20);
            let candidates: Vec<EnvEntry> = (0..n)
                .map(|i| {
                    entry(
                        &format!("{:016x}", rng.gen::<u64>() % 1000 + i),
                        &format!("lib,{}", pick_tags(&mut rng, 3)),
                        &[rng.gen_range(0..4), rng.gen_range(0..20), rng.gen_range(0..5)],
                        if rng.gen_bool(0.5) {
                            EnvSource::Detected
                        } else {
                            EnvSource::Installed
                        },
                    )
                })
                .collect();
            let got = match_dep(&spec, &candidates).map(|e| e.uid.clone());
            let want = oracle_match(&spec, &candidates).map(|e| e.uid.clone());
            assert_eq!(got, want);
        }
    }

    #[test]
    fn dependency_spec_rejects_empty_tags_and_inverted_window() {
        assert!(DependencySpec::from_meta("x", &json!({})).is_err());
        assert!(DependencySpec::from_meta(
            "x",
            &json!({"tags": "a", "version_from": [2], "version_to": [1]})
        )
        .is_err());
    }

    fn stub_package_meta(dir_token: &str) -> Value {
        json!({
            "tags": "tool,stub",
            "version": [1, 0, 0],
            "install_steps": [
                format!("mkdir -p {{install_dir}}/bin"),
                format!("printf '#!/bin/sh\\necho {dir_token}\\n' > {{install_dir}}/bin/stub.sh"),
                "chmod +x {install_dir}/bin/stub.sh",
            ],
            "env_template": {"CK_ENV_STUB": "{path}/bin/stub.sh"}
        })
    }

    #[test]
    fn install_stub_package_creates_env_entry() {
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::init(dir.path()).unwrap();
        registry
            .add_component(
                &ComponentRef::new("package", "stub-tool"),
                stub_package_meta("hello"),
                None,
                None,
            )
            .unwrap();
        let entry = install_package(&registry, &ComponentRef::new("package", "stub-tool"), None).unwrap();
        assert_eq!(entry.source, EnvSource::Installed);
        let stub = PathBuf::from(entry.env.get("CK_ENV_STUB").unwrap());
        assert!(stub.is_file(), "{} missing", stub.display());
        assert!(stub.starts_with(registry.config_dir().join("installed")));
        assert!(entry.detected_path.join(".ck-install-log.txt").is_file());
    }

    #[test]
    fn corrupted_archive_is_rejected_without_residue() {
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::init(dir.path()).unwrap();
        let component = registry
            .add_component(
                &ComponentRef::new("package", "bad-archive"),
                json!({
                    "tags": "tool,bad",
                    "version": [1],
                    "fetch": {"url": "payload.tar.gz", "sha256": "0".repeat(64)},
                    "install_steps": ["true"],
                    "env_template": {}
                }),
                None,
                None,
            )
            .unwrap();
        // An archive whose checksum will not match the declared one.
        std::fs::write(component.payload_dir.join("payload.tar.gz"), b"corrupted bytes").unwrap();
        let target = dir.path().join("target-install");
        let err = install_package(
            &registry,
            &ComponentRef::new("package", "bad-archive"),
            Some(&target),
        )
        .unwrap_err();
        assert_eq!(err.code, code::IO);
        assert!(err.message.contains("integrity failure"), "{err}");
        assert!(!target.exists(), "partial install dir left behind");
        assert!(detect::all_env_entries(&registry).unwrap().is_empty());
    }

    #[test]
    fn failing_install_step_cleans_up() {
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::init(dir.path()).unwrap();
        registry
            .add_component(
                &ComponentRef::new("package", "broken-install"),
                json!({
                    "tags": "tool,broken",
                    "version": [1],
                    "install_steps": ["touch {install_dir}/half-done", "exit 3"],
                    "env_template": {}
                }),
                None,
                None,
            )
            .unwrap();
        let target = dir.path().join("broken-target");
        let err = install_package(
            &registry,
            &ComponentRef::new("package", "broken-install"),
            Some(&target),
        )
        .unwrap_err();
        assert_eq!(err.code, code::EXEC);
        assert!(!target.exists());
    }

    #[test]
    fn platform_filter_excludes_host() {
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::init(dir.path()).unwrap();
        registry
            .add_component(
                &ComponentRef::new("package", "alien"),
                json!({
                    "tags": "tool,alien",
                    "version": [1],
                    "platform_filter": [["plan9", "mips"]],
                    "install_steps": ["true"],
                }),
                None,
                None,
            )
            .unwrap();
        let err =
            install_package(&registry, &ComponentRef::new("package", "alien"), None).unwrap_err();
        assert!(err.message.contains("not available for this platform"), "{err}");
    }

    #[test]
    fn resolve_orders_by_sort_and_merges_env_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::init(dir.path()).unwrap();
        for (alias, tags, shared) in [
            ("low", "alpha", "from-low"),
            ("high", "beta", "from-high"),
        ] {
            let mut env = BTreeMap::new();
            env.insert("SHARED_KEY".to_string(), shared.to_string());
            env.insert(format!("ONLY_{}", alias.to_uppercase()), "1".to_string());
            let e = EnvEntry {
                uid: Uid::generate(),
                data_name: alias.to_string(),
                tags: split_tags(tags),
                version: vec![1, 0],
                env,
                detected_path: PathBuf::from("/opt").join(alias),
                source: EnvSource::Detected,
            };
            registry
                .add_component(&ComponentRef::new("env", alias), e.to_meta(), None, None)
                .unwrap();
        }
        let specs = vec![
            DependencySpec::from_meta("second", &json!({"tags": "beta", "sort": 20})).unwrap(),
            DependencySpec::from_meta("first", &json!({"tags": "alpha", "sort": 10})).unwrap(),
        ];
        let resolved = resolve(&registry, &specs, false).unwrap();
        let keys: Vec<&str> = resolved.entries.iter().map(|e| e.key.as_str()).collect();
        assert_eq!(keys, vec!["first", "second"]);
        // Higher-sort entry wins the collision.
        assert_eq!(resolved.merged_env.get("SHARED_KEY").map(String::as_str), Some("from-high"));
        assert_eq!(resolved.merged_env.get("ONLY_LOW").map(String::as_str), Some("1"));
    }

    #[test]
    fn resolve_deterministic_and_no_install_when_satisfied() {
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::init(dir.path()).unwrap();
        let e = entry("00000000000000ab", "alpha", &[2, 1], EnvSource::Detected);
        registry
            .add_component(
                &ComponentRef::new("env", "alpha-env"),
                e.to_meta(),
                None,
                Some(e.uid.clone()),
            )
            .unwrap();
        // A package that would fail if installation were attempted.
        registry
            .add_component(
                &ComponentRef::new("package", "alpha-pkg"),
                json!({"tags": "alpha", "version": [9], "install_steps": ["exit 1"]}),
                None,
                None,
            )
            .unwrap();
        let specs = vec![DependencySpec::from_meta("a", &json!({"tags": "alpha"})).unwrap()];
        let one = resolve(&registry, &specs, false).unwrap();
        // The env entry satisfies the spec, so no install runs even with
        // allow_install (the decoy package would fail loudly if it did).
        let two = resolve(&registry, &specs, true).unwrap();
        assert_eq!(one, two);
        assert_eq!(one.entries[0].uid, "00000000000000ab");
    }

    #[test]
    fn resolve_installs_package_when_needed() {
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::init(dir.path()).unwrap();
        registry
            .add_component(
                &ComponentRef::new("package", "stub-tool"),
                stub_package_meta("resolved"),
                None,
                None,
            )
            .unwrap();
        let specs = vec![DependencySpec::from_meta("tool", &json!({"tags": "stub"})).unwrap()];
        let err = resolve(&registry, &specs, false).unwrap_err();
        assert_eq!(err.code, code::DEPENDENCY);

        let resolved = resolve(&registry, &specs, true).unwrap();
        assert_eq!(resolved.entries.len(), 1);
        assert_eq!(resolved.entries[0].version, vec![1, 0, 0]);
        assert!(resolved.merged_env.contains_key("CK_ENV_STUB"));
        let entries = detect::all_env_entries(&registry).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].source, EnvSource::Installed);
    }

    #[test]
    fn unsatisfiable_spec_reports_rejection_reasons() {
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::init(dir.path()).unwrap();
        let e = entry("00000000000000aa", "lib,other", &[3, 0], EnvSource::Detected);
        registry
            .add_component(&ComponentRef::new("env", "other-env"), e.to_meta(), None, None)
            .unwrap();
        let specs = vec![DependencySpec::from_meta(
            "library",
            &json!({"tags": "lib,tensorflow", "version_to": [2, 0, 0]}),
        )
        .unwrap()];
        let err = resolve(&registry, &specs, true).unwrap_err();
        assert_eq!(err.code, code::DEPENDENCY);
        assert!(err.message.contains("unsatisfied dependency"), "{err}");
        assert!(err.message.contains("missing tags"), "{err}");
    }
}
