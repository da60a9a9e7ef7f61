//! Detect software already installed on the host. Detection rules are pure
//! data (probe commands, a version regex, an env template); findings are
//! registered as `env` components in the `local` repository so that
//! dependency resolution can pick them up.

use crate::error::{Error, Result};
use crate::registry::{split_tags, ComponentRef, Registry, Uid, LOCAL_REPO};
use serde_json::{json, Map, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

/// Per-candidate probe budget; a hung `--version` must not hang the tool.
pub const PROBE_TIMEOUT: Duration = Duration::from_secs(10);

/// One probe: run `exe version_arg` and regex the combined output.
#[derive(Debug, Clone)]
pub struct ProbeCommand {
    pub exe: String,
    pub version_arg: String,
}

/// Declarative detection rules, parsed from a `soft` component's meta.
#[derive(Debug, Clone)]
pub struct SoftPlugin {
    pub name: String,
    pub tags: BTreeSet<String>,
    pub probe_commands: Vec<ProbeCommand>,
    pub version_regex: Option<regex::Regex>,
    pub file_hints: Vec<String>,
    pub env_template: BTreeMap<String, String>,
}

impl SoftPlugin {
    pub fn from_meta(meta: &Value) -> Result<Self> {
        let obj = meta
            .as_object()
            .ok_or_else(|| Error::generic("soft plugin meta must be an object"))?;
        let name = obj
            .get("name")
            .and_then(Value::as_str)
            .unwrap_or("unnamed software")
            .to_string();
        let tags = match obj.get("tags") {
            Some(Value::String(s)) => split_tags(s),
            _ => return Err(Error::generic("soft plugin meta needs a comma-separated `tags` string")),
        };
        let mut probe_commands = Vec::new();
        if let Some(list) = obj.get("probe_commands") {
            let list = list
                .as_array()
                .ok_or_else(|| Error::generic("`probe_commands` must be an array"))?;
            for item in list {
                let exe = item
                    .get("exe")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::generic("probe command needs an `exe` string"))?;
                let version_arg = item
                    .get("version_arg")
                    .and_then(Value::as_str)
                    .unwrap_or("--version");
                probe_commands.push(ProbeCommand {
                    exe: exe.to_string(),
                    version_arg: version_arg.to_string(),
                });
            }
        }
        let version_regex = match obj.get("version_regex") {
            Some(Value::String(s)) => Some(
                regex::Regex::new(s)
                    .map_err(|e| Error::generic(format!("invalid version_regex: {e}")))?,
            ),
            _ => None,
        };
        if !probe_commands.is_empty() && version_regex.is_none() {
            return Err(Error::generic("probe commands require a `version_regex` with one capture group"));
        }
        let file_hints = obj
            .get("file_hints")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default();
        let env_template = parse_env_template(obj.get("env_template"))?;
        Ok(SoftPlugin {
            name,
            tags,
            probe_commands,
            version_regex,
            file_hints,
            env_template,
        })
    }
}

pub fn parse_env_template(value: Option<&Value>) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if let Some(v) = value {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::generic("`env_template` must be an object of strings"))?;
        for (k, v) in obj {
            let s = v
                .as_str()
                .ok_or_else(|| Error::generic(format!("env_template.{k} must be a string")))?;
            out.insert(k.clone(), s.to_string());
        }
    }
    Ok(out)
}

/// Where an environment entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EnvSource {
    Detected,
    Installed,
}

impl EnvSource {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvSource::Detected => "detected",
            EnvSource::Installed => "installed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "detected" => Ok(EnvSource::Detected),
            "installed" => Ok(EnvSource::Installed),
            other => Err(Error::generic(format!("unknown env source {other:?}"))),
        }
    }
}

/// A usable software installation: tags, version and the environment
/// variables that make it reachable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvEntry {
    pub uid: Uid,
    pub data_name: String,
    pub tags: BTreeSet<String>,
    pub version: Vec<u64>,
    pub env: BTreeMap<String, String>,
    pub detected_path: PathBuf,
    pub source: EnvSource,
}

impl EnvEntry {
    pub fn version_string(&self) -> String {
        version_to_string(&self.version)
    }

    pub fn to_meta(&self) -> Value {
        let tags = self.tags.iter().cloned().collect::<Vec<_>>().join(",");
        let mut env = Map::new();
        for (k, v) in &self.env {
            env.insert(k.clone(), json!(v));
        }
        json!({
            "tags": tags,
            "version": self.version,
            "env": env,
            "detected_path": self.detected_path.to_string_lossy(),
            "source": self.source.as_str(),
        })
    }

    pub fn from_component(component: &crate::registry::Component) -> Result<Self> {
        let meta = &component.meta;
        let version = meta
            .get("version")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_u64).collect())
            .unwrap_or_default();
        let mut env = BTreeMap::new();
        if let Some(obj) = meta.get("env").and_then(Value::as_object) {
            for (k, v) in obj {
                if let Some(s) = v.as_str() {
                    env.insert(k.clone(), s.to_string());
                }
            }
        }
        let detected_path = meta
            .get("detected_path")
            .and_then(Value::as_str)
            .map(PathBuf::from)
            .unwrap_or_default();
        let source = EnvSource::parse(
            meta.get("source").and_then(Value::as_str).unwrap_or("detected"),
        )?;
        Ok(EnvEntry {
            uid: component.uid.clone(),
            data_name: component.data_name.clone(),
            tags: component.tags(),
            version,
            env,
            detected_path,
            source,
        })
    }
}

/// Lenient dotted-version parser: keeps the leading integer of each dot
/// segment and stops at the first segment without one, so `2.0.0-rc1`
/// parses as `[2, 0, 0]` and an empty string as `[]`.
pub fn parse_version(text: &str) -> Vec<u64> {
    let mut out = Vec::new();
    for segment in text.split('.') {
        let digits: String = segment.chars().take_while(|c| c.is_ascii_digit()).collect();
        match digits.parse::<u64>() {
            Ok(n) => out.push(n),
            Err(_) => break,
        }
    }
    out
}

pub fn version_to_string(version: &[u64]) -> String {
    version
        .iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join(".")
}

/// Result of a detection pass.
#[derive(Debug, Clone)]
pub struct DetectOutcome {
    pub entries: Vec<EnvEntry>,
    pub warnings: Vec<String>,
}

/// Run the detection rules of a `soft` component against the host.
///
/// Candidates come from the search path (or an explicit list) and from the
/// plugin's file hints. Each hit becomes an `env` component in the `local`
/// repository; re-detection of the same path updates the entry in place,
/// keeping its UID. Finding nothing is a success with an empty list.
pub fn detect(
    registry: &Registry,
    plugin_ref: &ComponentRef,
    search_paths: Option<&[PathBuf]>,
) -> Result<DetectOutcome> {
    let plugin_component = registry.load_component(plugin_ref)?;
    let plugin = SoftPlugin::from_meta(&plugin_component.meta)?;
    let mut warnings = Vec::new();

    let dirs: Vec<PathBuf> = match search_paths {
        Some(paths) => paths.to_vec(),
        None => std::env::var_os("PATH")
            .map(|p| std::env::split_paths(&p).collect())
            .unwrap_or_default(),
    };

    // Candidate files, de-duplicated, search path before file hints.
    let mut candidates: Vec<PathBuf> = Vec::new();
    let push_candidate = |path: PathBuf, candidates: &mut Vec<PathBuf>| {
        if path.is_file() && !candidates.contains(&path) {
            candidates.push(path);
        }
    };
    for probe in &plugin.probe_commands {
        for dir in &dirs {
            push_candidate(dir.join(&probe.exe), &mut candidates);
        }
    }
    for hint in &plugin.file_hints {
        match glob::glob(hint) {
            Ok(paths) => {
                for path in paths.flatten() {
                    push_candidate(path, &mut candidates);
                }
            }
            Err(e) => warnings.push(format!("bad file hint {hint:?}: {e}")),
        }
    }

    let mut entries = Vec::new();
    for candidate in candidates {
        let version = if plugin.probe_commands.is_empty() {
            // Pure file-presence detection.
            Some(vec![0])
        } else {
            probe_version(&plugin, &candidate, &mut warnings)
        };
        let Some(version) = version else { continue };
        let entry = register_env_entry(
            registry,
            &plugin_component.data_name,
            &plugin.tags,
            &plugin.env_template,
            version,
            &candidate,
            EnvSource::Detected,
        )?;
        entries.push(entry);
    }
    Ok(DetectOutcome { entries, warnings })
}

fn probe_version(
    plugin: &SoftPlugin,
    candidate: &Path,
    warnings: &mut Vec<String>,
) -> Option<Vec<u64>> {
    let regex = plugin.version_regex.as_ref()?;
    for probe in &plugin.probe_commands {
        match run_probe(candidate, &probe.version_arg) {
            Ok(output) => {
                if let Some(caps) = regex.captures(&output) {
                    let text = caps.get(1).map(|m| m.as_str()).unwrap_or_default();
                    let version = parse_version(text);
                    if !version.is_empty() {
                        return Some(version);
                    }
                }
                warnings.push(format!(
                    "{}: output did not match version pattern",
                    candidate.display()
                ));
            }
            Err(e) => warnings.push(format!("{}: probe failed: {}", candidate.display(), e.message)),
        }
    }
    None
}

/// Run `candidate arg`, returning combined stdout+stderr. Kills the child
/// after [`PROBE_TIMEOUT`].
fn run_probe(candidate: &Path, arg: &str) -> Result<String> {
    use std::process::{Command, Stdio};
    let mut child = Command::new(candidate)
        .arg(arg)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::exec(format!("cannot spawn: {e}")))?;
    let deadline = Instant::now() + PROBE_TIMEOUT;
    loop {
        match child.try_wait() {
            Ok(Some(_)) => break,
            Ok(None) => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::exec("probe timed out"));
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(Error::exec(format!("wait failed: {e}"))),
        }
    }
    let mut output = String::new();
    if let Some(mut stdout) = child.stdout.take() {
        let _ = stdout.read_to_string(&mut output);
    }
    if let Some(mut stderr) = child.stderr.take() {
        let mut err = String::new();
        let _ = stderr.read_to_string(&mut err);
        output.push_str(&err);
    }
    Ok(output)
}

/// Expand `{path}`, `{dir}` and `{version}` placeholders of an env
/// template against a concrete finding.
pub fn expand_env_template(
    template: &BTreeMap<String, String>,
    path: &Path,
    version: &[u64],
) -> BTreeMap<String, String> {
    let dir = path.parent().unwrap_or(path);
    let version = version_to_string(version);
    template
        .iter()
        .map(|(k, v)| {
            let expanded = v
                .replace("{path}", &path.to_string_lossy())
                .replace("{dir}", &dir.to_string_lossy())
                .replace("{version}", &version);
            (k.clone(), expanded)
        })
        .collect()
}

/// Create or update the `env` component for a finding. The alias is
/// derived from the plugin name plus a hash of the path, so re-detection
/// lands on the same component and keeps its UID.
pub fn register_env_entry(
    registry: &Registry,
    origin_name: &str,
    tags: &BTreeSet<String>,
    env_template: &BTreeMap<String, String>,
    version: Vec<u64>,
    detected_path: &Path,
    source: EnvSource,
) -> Result<EnvEntry> {
    let mut tags = tags.clone();
    tags.insert(match source {
        EnvSource::Detected => "vdetected".to_string(),
        EnvSource::Installed => "vinstalled".to_string(),
    });
    let env = expand_env_template(env_template, detected_path, &version);
    let alias = env_alias(origin_name, detected_path);

    let existing = registry
        .search_components_in(Some(LOCAL_REPO), "env", &[], Some(&alias))?
        .into_iter()
        .next();
    let mut entry = EnvEntry {
        uid: Uid::generate(),
        data_name: alias.clone(),
        tags,
        version,
        env,
        detected_path: detected_path.to_path_buf(),
        source,
    };
    match existing {
        Some(reference) => {
            let updated = registry.update_meta(&reference, entry.to_meta())?;
            entry.uid = updated.uid;
        }
        None => {
            let component = registry.add_component(
                &ComponentRef::in_repo(LOCAL_REPO, "env", &alias),
                entry.to_meta(),
                None,
                None,
            )?;
            entry.uid = component.uid;
        }
    }
    Ok(entry)
}

fn env_alias(origin_name: &str, path: &Path) -> String {
    use sha2::Digest;
    let digest = sha2::Sha256::digest(path.to_string_lossy().as_bytes());
    let sanitized: String = origin_name
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_ascii_lowercase() || c.is_ascii_digit() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect();
    format!("{}-{}", sanitized.trim_matches('-'), hex::encode(&digest[..4]))
}

/// All environment entries visible to the registry, in repo resolution
/// order then alias order.
pub fn all_env_entries(registry: &Registry) -> Result<Vec<EnvEntry>> {
    let mut out = Vec::new();
    for reference in registry.search_components("env", &[], None)? {
        let component = registry.load_component(&reference)?;
        match EnvEntry::from_component(&component) {
            Ok(entry) => out.push(entry),
            Err(_) => continue, // ignore malformed foreign entries
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::Registry;

    #[test]
    fn parse_version_cases() {
        assert_eq!(parse_version("1.13.1"), vec![1, 13, 1]);
        assert_eq!(parse_version(""), Vec::<u64>::new());
        assert_eq!(parse_version("2.0.0-rc1"), vec![2, 0, 0]);
        assert_eq!(parse_version("10.2"), vec![10, 2]);
        assert_eq!(parse_version("3"), vec![3]);
    }

    #[test]
    fn parse_version_matches_segment_oracle() {
        // Oracle: split on dots, take the leading digit run of each
        // segment, stop at the first segment without one.
        fn oracle(s: &str) -> Vec<u64> {
            let mut out = Vec::new();
            for seg in s.split('.') {
                let mut digits = String::new();
                for c in seg.chars() {
                    if c.is_ascii_digit() {
                        digits.push(c);
                    } else {
                        break;
                    }
                }
                if digits.is_empty() {
                    break;
                }
                out.push(digits.parse().unwrap());
            }
            out
        }
        for s in [
            "1.13.1", "2.0.0-rc1", "", "v1.2", "7", "1..2", "4.5b.6", "0.0.0", "12.04.5-ubuntu",
        ] {
            assert_eq!(parse_version(s), oracle(s), "input {s:?}");
        }
    }

    #[test]
    fn regex_capture_from_compiler_banner() {
        let re = regex::Regex::new(r"(\d+\.\d+\.\d+)").unwrap();
        let caps = re.captures("gcc (GCC) 10.2.1 20210110").unwrap();
        assert_eq!(parse_version(&caps[1]), vec![10, 2, 1]);
    }

    #[test]
    fn version_round_trips_through_dotted_form() {
        for v in [vec![1, 13, 1], vec![0], vec![10, 2]] {
            assert_eq!(parse_version(&version_to_string(&v)), v);
        }
    }

    fn fixture_registry_with_plugin(meta: Value) -> (tempfile::TempDir, Registry) {
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::init(dir.path()).unwrap();
        registry
            .add_component(&ComponentRef::new("soft", "fixture-tool"), meta, None, None)
            .unwrap();
        (dir, registry)
    }

    fn write_fake_tool(dir: &Path, name: &str, banner: &str) -> PathBuf {
        let bin_dir = dir.join("bin");
        std::fs::create_dir_all(&bin_dir).unwrap();
        let path = bin_dir.join(name);
        std::fs::write(&path, format!("#!/bin/sh\necho \"{banner}\"\n")).unwrap();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
        }
        bin_dir
    }

    #[test]
    fn detect_finds_tool_and_is_idempotent() {
        let (dir, registry) = fixture_registry_with_plugin(json!({
            "name": "Fixture tool",
            "tags": "fixture,tool",
            "probe_commands": [{"exe": "fixtool", "version_arg": "--version"}],
            "version_regex": r"fixtool (\d+\.\d+\.\d+)",
            "env_template": {"CK_ENV_FIXTOOL": "{path}", "CK_ENV_FIXTOOL_DIR": "{dir}"}
        }));
        let bin_dir = write_fake_tool(dir.path(), "fixtool", "fixtool 3.4.5");
        let plugin = ComponentRef::new("soft", "fixture-tool");

        let first = detect(&registry, &plugin, Some(&[bin_dir.clone()])).unwrap();
        assert_eq!(first.entries.len(), 1);
        let entry = &first.entries[0];
        assert_eq!(entry.version, vec![3, 4, 5]);
        assert!(entry.tags.contains("vdetected"));
        assert!(entry.tags.contains("fixture"));
        assert_eq!(
            entry.env.get("CK_ENV_FIXTOOL").map(String::as_str),
            Some(bin_dir.join("fixtool").to_str().unwrap())
        );
        assert!(!entry.env.values().any(|v| v.contains('{')));

        // Second run updates in place: same uid, still one env component.
        let second = detect(&registry, &plugin, Some(&[bin_dir])).unwrap();
        assert_eq!(second.entries.len(), 1);
        assert_eq!(second.entries[0].uid, entry.uid);
        assert_eq!(all_env_entries(&registry).unwrap().len(), 1);
    }

    #[test]
    fn detect_nothing_is_success() {
        let (dir, registry) = fixture_registry_with_plugin(json!({
            "name": "Ghost",
            "tags": "ghost",
            "probe_commands": [{"exe": "no-such-binary-here", "version_arg": "--version"}],
            "version_regex": r"(\d+)",
        }));
        let empty = dir.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        let outcome = detect(
            &registry,
            &ComponentRef::new("soft", "fixture-tool"),
            Some(&[empty]),
        )
        .unwrap();
        assert!(outcome.entries.is_empty());
    }

    #[test]
    fn regex_mismatch_skips_candidate_with_warning() {
        let (dir, registry) = fixture_registry_with_plugin(json!({
            "name": "Fixture tool",
            "tags": "fixture",
            "probe_commands": [{"exe": "fixtool", "version_arg": "--version"}],
            "version_regex": r"version=(\d+\.\d+)",
        }));
        let bin_dir = write_fake_tool(dir.path(), "fixtool", "no numbers here");
        let outcome = detect(
            &registry,
            &ComponentRef::new("soft", "fixture-tool"),
            Some(&[bin_dir]),
        )
        .unwrap();
        assert!(outcome.entries.is_empty());
        assert_eq!(outcome.warnings.len(), 1);
    }

    #[test]
    fn invalid_plugin_meta_is_code_1() {
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::init(dir.path()).unwrap();
        registry
            .add_component(
                &ComponentRef::new("soft", "broken"),
                json!({"name": "no tags at all"}),
                None,
                None,
            )
            .unwrap();
        let err = detect(&registry, &ComponentRef::new("soft", "broken"), None).unwrap_err();
        assert_eq!(err.code, crate::error::code::GENERIC);
    }

    #[test]
    fn file_presence_detection_has_version_zero() {
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::init(dir.path()).unwrap();
        let data = dir.path().join("model.bin");
        std::fs::write(&data, b"weights").unwrap();
        registry
            .add_component(
                &ComponentRef::new("soft", "model-file"),
                json!({
                    "name": "Model file",
                    "tags": "model",
                    "file_hints": [data.to_str().unwrap()],
                    "env_template": {"CK_ENV_MODEL": "{path}"}
                }),
                None,
                None,
            )
            .unwrap();
        let outcome = detect(
            &registry,
            &ComponentRef::new("soft", "model-file"),
            Some(&[]),
        )
        .unwrap();
        assert_eq!(outcome.entries.len(), 1);
        assert_eq!(outcome.entries[0].version, vec![0]);
    }
}
