//! Unified action dispatch: every operation is a named action on a
//! module with a map in and a map out, and every failure comes back as a
//! nonzero `return` code with a message — nothing escapes the envelope.

use crate::detect;
use crate::error::{code, Error, Result};
use crate::experiment::{self, FrontierQuery};
use crate::package;
use crate::pipeline::{self, BenchmarkConfig, BuildOptions, RunOptions};
use crate::registry::{ComponentRef, Registry, Uid};
use crate::report;
use crate::tuner::{self, TuningSpec};
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// One request: an action applied to `module[:data]` with parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionRequest {
    pub action: String,
    pub repo: Option<String>,
    pub module: String,
    pub data: Option<String>,
    pub params: Map<String, Value>,
}

impl ActionRequest {
    pub fn new(action: impl Into<String>, module: impl Into<String>) -> Self {
        ActionRequest {
            action: action.into(),
            repo: None,
            module: module.into(),
            data: None,
            params: Map::new(),
        }
    }

    pub fn with_data(mut self, data: impl Into<String>) -> Self {
        self.data = Some(data.into());
        self
    }

    pub fn with_param(mut self, key: impl Into<String>, value: Value) -> Self {
        self.params.insert(key.into(), value);
        self
    }

    fn component_ref(&self) -> ComponentRef {
        ComponentRef {
            repo: self.repo.clone(),
            module: self.module.clone(),
            data: self.data.clone(),
        }
    }
}

/// The unified result envelope: `return` is 0 on success, a nonzero code
/// with a message otherwise, and payload keys sit at the top level.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionResult {
    pub return_code: u32,
    pub error: Option<String>,
    pub payload: Map<String, Value>,
}

impl ActionResult {
    pub fn success(payload: Map<String, Value>) -> Self {
        ActionResult {
            return_code: 0,
            error: None,
            payload,
        }
    }

    pub fn failure(return_code: u32, error: impl Into<String>, payload: Map<String, Value>) -> Self {
        let message: String = error.into();
        ActionResult {
            return_code: return_code.max(1),
            error: Some(if message.is_empty() {
                "unspecified error".to_string()
            } else {
                message
            }),
            payload,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.return_code == 0
    }

    pub fn to_json(&self) -> Value {
        let mut out = Map::new();
        out.insert("return".to_string(), json!(self.return_code));
        if let Some(error) = &self.error {
            out.insert("error".to_string(), json!(error));
        }
        for (key, value) in &self.payload {
            if key != "return" && key != "error" {
                out.insert(key.clone(), value.clone());
            }
        }
        Value::Object(out)
    }
}

impl From<Error> for ActionResult {
    fn from(e: Error) -> Self {
        ActionResult::failure(e.code, e.message, Map::new())
    }
}

/// Modules with actions beyond the generic CRUD set, with one-line help.
const MODULE_ACTIONS: &[(&str, &[(&str, &str)])] = &[
    ("repo", &[("pull", "Fetch and register a repository from a directory, archive or URL")]),
    (
        "program",
        &[
            ("compile", "Resolve dependencies and build the program"),
            ("run", "Execute a named command of the program"),
            ("benchmark", "Build, run repeatedly and record an experiment point"),
            ("autotune", "Sweep exposed choices and report the efficient frontier"),
        ],
    ),
    (
        "experiment",
        &[
            ("replay", "Re-run a recorded point and compare metrics"),
            ("report", "Write a JSON and HTML report for a record"),
        ],
    ),
    ("env", &[]),
    ("package", &[("install", "Fetch, verify and install a package")]),
    ("soft", &[("detect", "Probe the host for matching installations")]),
];

const GENERIC_ACTIONS: &[(&str, &str)] = &[
    ("add", "Create a component with meta and info documents"),
    ("load", "Load a component and print its meta"),
    ("search", "List components matching tags and name patterns"),
    ("cp", "Copy a component (the copy gets a fresh uid)"),
    ("rm", "Delete a component"),
    ("rename", "Change a component's alias (uid is kept)"),
    ("find", "Print the payload path of a component"),
    ("help", "List actions available for a module"),
];

/// The action engine bound to a registry location.
#[derive(Debug, Clone)]
pub struct Engine {
    config_dir: PathBuf,
}

impl Engine {
    pub fn new(config_dir: impl Into<PathBuf>) -> Self {
        Engine {
            config_dir: config_dir.into(),
        }
    }

    pub fn config_dir(&self) -> &Path {
        &self.config_dir
    }

    /// Dispatch a request. Never panics and never raises: every failure
    /// becomes a `return > 0` envelope.
    pub fn access(&self, request: &ActionRequest) -> ActionResult {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            self.dispatch(request)
        }));
        match outcome {
            Ok(Ok(result)) => result,
            Ok(Err(e)) => ActionResult::from(e),
            Err(panic) => {
                let message = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "unknown panic".to_string());
                ActionResult::failure(code::GENERIC, format!("internal error: {message}"), Map::new())
            }
        }
    }

    fn dispatch(&self, request: &ActionRequest) -> Result<ActionResult> {
        if request.action.is_empty() || request.module.is_empty() {
            return Err(Error::generic("usage: <action> <module>[:<data>] (flags)"));
        }
        let registry = Registry::init(&self.config_dir)?;

        if truthy(request.params.get("help")) {
            return self.action_help(&registry, request);
        }

        let module_specific = MODULE_ACTIONS
            .iter()
            .find(|(module, _)| *module == request.module)
            .map(|(_, actions)| *actions);
        let action = request.action.as_str();

        if let Some(actions) = module_specific {
            if actions.iter().any(|(name, _)| *name == action) {
                return self.dispatch_specific(&registry, request);
            }
        }
        match action {
            "add" | "load" | "search" | "cp" | "rm" | "rename" | "find" | "help" => {
                self.dispatch_generic(&registry, request)
            }
            _ => {
                if module_specific.is_some() || self.module_component(&registry, &request.module).is_some() {
                    Err(Error::unknown(format!(
                        "action {action:?} not implemented for module {:?}",
                        request.module
                    )))
                } else {
                    Err(Error::unknown(format!("module {:?} not found", request.module)))
                }
            }
        }
    }

    fn module_component(&self, registry: &Registry, module: &str) -> Option<crate::registry::Component> {
        registry
            .load_component(&ComponentRef::new("module", module))
            .ok()
    }

    /// Actions every module supports, backed by the component registry.
    fn dispatch_generic(&self, registry: &Registry, request: &ActionRequest) -> Result<ActionResult> {
        let reference = request.component_ref();
        match request.action.as_str() {
            "help" => self.help(registry, &request.module),
            "add" => {
                if request.module == "repo" {
                    return Err(Error::unknown("action \"add\" not implemented for module \"repo\"; use pull"));
                }
                let mut meta = match request.params.get("meta") {
                    Some(Value::Object(m)) => Value::Object(m.clone()),
                    Some(other) => return Err(Error::generic(format!("`meta` must be an object, got {other}"))),
                    None => json!({}),
                };
                if let Some(tags) = request.params.get("tags") {
                    if meta.get("tags").is_none() {
                        meta["tags"] = tags.clone();
                    }
                }
                let info = match request.params.get("info") {
                    Some(Value::Object(m)) => Some(Value::Object(m.clone())),
                    Some(other) => return Err(Error::generic(format!("`info` must be an object, got {other}"))),
                    None => None,
                };
                let uid = request
                    .params
                    .get("uid")
                    .and_then(Value::as_str)
                    .map(Uid::parse)
                    .transpose()?;
                let component = registry.add_component(&reference, meta, info, uid)?;
                Ok(ActionResult::success(component_payload(&component)))
            }
            "load" => {
                if request.module == "repo" {
                    let repo = registry.repo(reference.required_data()?)?;
                    return Ok(ActionResult::success(repo_payload(&repo)));
                }
                let component = registry.load_component(&reference)?;
                Ok(ActionResult::success(component_payload(&component)))
            }
            "find" => {
                if request.module == "repo" {
                    let repo = registry.repo(reference.required_data()?)?;
                    let mut payload = Map::new();
                    payload.insert("path".into(), json!(repo.path.to_string_lossy()));
                    return Ok(ActionResult::success(payload));
                }
                let path = registry.find_component(&reference)?;
                let mut payload = Map::new();
                payload.insert("path".into(), json!(path.to_string_lossy()));
                Ok(ActionResult::success(payload))
            }
            "search" => {
                if request.module == "repo" {
                    let names: Vec<Value> = registry
                        .repos()?
                        .into_iter()
                        .map(|r| json!({"name": r.name, "uid": r.uid, "path": r.path.to_string_lossy()}))
                        .collect();
                    let mut payload = Map::new();
                    payload.insert("count".into(), json!(names.len()));
                    payload.insert("matches".into(), Value::Array(names));
                    return Ok(ActionResult::success(payload));
                }
                let tags: Vec<String> = match request.params.get("tags") {
                    Some(Value::String(s)) => vec![s.clone()],
                    Some(Value::Array(items)) => items
                        .iter()
                        .filter_map(|v| v.as_str().map(str::to_string))
                        .collect(),
                    _ => Vec::new(),
                };
                let name_glob = request
                    .params
                    .get("name_glob")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .or_else(|| reference.data.clone());
                let matches = registry.search_components_in(
                    reference.repo.as_deref(),
                    &reference.module,
                    &tags,
                    name_glob.as_deref(),
                )?;
                let mut payload = Map::new();
                payload.insert("count".into(), json!(matches.len()));
                payload.insert(
                    "matches".into(),
                    Value::Array(matches.iter().map(|r| json!(r.to_string())).collect()),
                );
                Ok(ActionResult::success(payload))
            }
            "cp" => {
                let dst_text = first_positional(&request.params)
                    .or_else(|| request.params.get("dst").and_then(Value::as_str).map(str::to_string))
                    .ok_or_else(|| Error::generic("cp needs a destination reference"))?;
                let mut dst = ComponentRef::parse(&dst_text)?;
                if dst.data.is_none() {
                    // A bare name copies within the same module.
                    dst = ComponentRef {
                        repo: None,
                        module: reference.module.clone(),
                        data: Some(dst_text),
                    };
                }
                let component = registry.copy_component(&reference, &dst)?;
                Ok(ActionResult::success(component_payload(&component)))
            }
            "rename" => {
                let new_name = first_positional(&request.params)
                    .or_else(|| request.params.get("new_name").and_then(Value::as_str).map(str::to_string))
                    .ok_or_else(|| Error::generic("rename needs the new data name"))?;
                let component = registry.rename_component(&reference, &new_name)?;
                Ok(ActionResult::success(component_payload(&component)))
            }
            "rm" => {
                if request.module == "repo" {
                    registry.remove_repo(reference.required_data()?)?;
                    return Ok(ActionResult::success(Map::new()));
                }
                registry.remove_component(&reference)?;
                Ok(ActionResult::success(Map::new()))
            }
            other => Err(Error::unknown(format!("action {other:?} is not a generic action"))),
        }
    }

    /// Module-specific actions.
    fn dispatch_specific(&self, registry: &Registry, request: &ActionRequest) -> Result<ActionResult> {
        let reference = request.component_ref();
        let params = &request.params;
        match (request.module.as_str(), request.action.as_str()) {
            ("repo", "pull") => {
                let source = params
                    .get("url")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .or_else(|| first_positional(params))
                    .ok_or_else(|| Error::generic("pull needs --url=<archive, directory or URL>"))?;
                let name = params.get("name").and_then(Value::as_str);
                let outcome = registry.pull_repo(&source, name)?;
                let mut payload = repo_payload(&outcome.repo);
                payload.insert("already_registered".into(), json!(outcome.already_registered));
                if !outcome.missing_deps.is_empty() {
                    payload.insert("missing_deps".into(), json!(outcome.missing_deps));
                }
                Ok(ActionResult::success(payload))
            }
            ("program", "compile") => {
                let options = BuildOptions {
                    speed: truthy(params.get("speed")),
                    env_overrides: env_map(params.get("env"))?,
                    choices: object_or_empty(params.get("choices"))?,
                };
                let record = pipeline::build(registry, &reference, &options)?;
                let mut payload = Map::new();
                payload.insert("resolved_deps".into(), package::resolved_to_json(&record.resolved));
                payload.insert("choices".into(), Value::Object(record.choices));
                if let Some(path) = record.transcript_path {
                    payload.insert("transcript".into(), json!(path.to_string_lossy()));
                }
                Ok(ActionResult::success(payload))
            }
            ("program", "run") => {
                let options = RunOptions {
                    cmd_key: params.get("cmd_key").and_then(Value::as_str).map(str::to_string),
                    env_overrides: env_map(params.get("env"))?,
                    choices: object_or_empty(params.get("choices"))?,
                    repetitions: positive_int(params.get("repetitions"), 1)?,
                };
                let results = pipeline::run(registry, &reference, &options)?;
                let mut payload = Map::new();
                payload.insert("results".into(), pipeline::run_results_to_json(&results));
                if pipeline::all_failed(&results) {
                    return Ok(ActionResult::failure(
                        code::EXEC,
                        "all repetitions exited nonzero",
                        payload,
                    ));
                }
                Ok(ActionResult::success(payload))
            }
            ("program", "benchmark") => {
                let record = if let Some(name) = params.get("record_uoa").and_then(Value::as_str) {
                    Some(name.to_string())
                } else if truthy(params.get("record")) {
                    Some(format!("experiment-{}", &Uid::generate().as_str()[..8]))
                } else {
                    None
                };
                let config = BenchmarkConfig {
                    cmd_key: params.get("cmd_key").and_then(Value::as_str).map(str::to_string),
                    env_overrides: env_map(params.get("env"))?,
                    choices: object_or_empty(params.get("choices"))?,
                    repetitions: positive_int(params.get("repetitions"), 1)?,
                    speed: truthy(params.get("speed")),
                    record,
                };
                let outcome = pipeline::benchmark(registry, &reference, &config)?;
                let mut payload = Map::new();
                payload.insert("point".into(), serde_json::to_value(&outcome.point)?);
                if let Some(name) = &outcome.recorded_as {
                    payload.insert("recorded_as".into(), json!(name));
                }
                if outcome.all_failed {
                    return Ok(ActionResult::failure(
                        code::EXEC,
                        "all repetitions exited nonzero",
                        payload,
                    ));
                }
                Ok(ActionResult::success(payload))
            }
            ("program", "autotune") => {
                let spec = TuningSpec::from_json(reference, &Value::Object(params.clone()))?;
                let report = tuner::tune(registry, &spec)?;
                let mut payload = Map::new();
                payload.insert("tuning".into(), report.to_json());
                Ok(ActionResult::success(payload))
            }
            ("experiment", "replay") => {
                let record_name = reference.required_data()?;
                let tolerance = match params.get("tolerance") {
                    Some(value) => float_param(value, "tolerance")?,
                    None => experiment::REPLAY_TOLERANCE,
                };
                let point_uid = params.get("point_uid").and_then(Value::as_str);
                let report = experiment::replay(registry, record_name, point_uid, tolerance)?;
                let ok = report.ok;
                let mut payload = Map::new();
                payload.insert("replay".into(), report.to_json());
                if ok {
                    Ok(ActionResult::success(payload))
                } else {
                    Ok(ActionResult::failure(
                        code::GENERIC,
                        "replay mismatch: metrics out of tolerance or dependencies changed",
                        payload,
                    ))
                }
            }
            ("experiment", "report") => {
                let record_name = reference.required_data()?;
                let query = match params.get("query") {
                    Some(value) => Some(FrontierQuery::from_json(value)?),
                    None => None,
                };
                let out_dir = match params.get("out_dir").and_then(Value::as_str) {
                    Some(dir) => PathBuf::from(dir),
                    None => registry
                        .find_component(&ComponentRef::new("experiment", record_name))?
                        .join("report"),
                };
                let paths = report::emit_report(registry, record_name, query.as_ref(), &out_dir)?;
                let mut payload = Map::new();
                payload.insert("report_json".into(), json!(paths.json.to_string_lossy()));
                payload.insert("report_html".into(), json!(paths.html.to_string_lossy()));
                Ok(ActionResult::success(payload))
            }
            ("soft", "detect") => {
                let search_paths: Option<Vec<PathBuf>> = params
                    .get("search_paths")
                    .and_then(Value::as_array)
                    .map(|a| {
                        a.iter()
                            .filter_map(|v| v.as_str().map(PathBuf::from))
                            .collect()
                    });
                let outcome = detect::detect(registry, &reference, search_paths.as_deref())?;
                let mut payload = Map::new();
                payload.insert(
                    "entries".into(),
                    Value::Array(outcome.entries.iter().map(|e| e.to_meta()).collect()),
                );
                payload.insert("count".into(), json!(outcome.entries.len()));
                if !outcome.warnings.is_empty() {
                    payload.insert("warnings".into(), json!(outcome.warnings));
                }
                Ok(ActionResult::success(payload))
            }
            ("package", "install") => {
                let target_dir = params
                    .get("target_dir")
                    .and_then(Value::as_str)
                    .map(PathBuf::from);
                let entry = package::install_package(registry, &reference, target_dir.as_deref())?;
                let mut payload = Map::new();
                payload.insert("env_entry".into(), entry.to_meta());
                payload.insert("uid".into(), json!(entry.uid));
                Ok(ActionResult::success(payload))
            }
            (module, action) => Err(Error::unknown(format!(
                "action {action:?} not implemented for module {module:?}"
            ))),
        }
    }

    /// `help <module>`: generic actions plus the module's own, name-sorted.
    fn help(&self, registry: &Registry, module: &str) -> Result<ActionResult> {
        let module_specific = MODULE_ACTIONS
            .iter()
            .find(|(name, _)| *name == module)
            .map(|(_, actions)| *actions);
        let component = self.module_component(registry, module);
        if module_specific.is_none() && component.is_none() {
            return Err(Error::unknown(format!("module {module:?} not found")));
        }
        let mut actions: BTreeMap<String, String> = GENERIC_ACTIONS
            .iter()
            .map(|(name, help)| (name.to_string(), help.to_string()))
            .collect();
        for (name, help) in module_specific.unwrap_or(&[]) {
            actions.insert(name.to_string(), help.to_string());
        }
        // Help text shipped as data in `module/<name>` components.
        if let Some(component) = &component {
            if let Some(map) = component.meta.get("actions").and_then(Value::as_object) {
                for (name, help) in map {
                    if let Some(text) = help.as_str() {
                        actions.entry(name.clone()).or_insert_with(|| text.to_string());
                    }
                }
            }
        }
        let mut payload = Map::new();
        payload.insert("module".into(), json!(module));
        if let Some(component) = &component {
            if let Some(desc) = component.meta.get("desc").and_then(Value::as_str) {
                payload.insert("desc".into(), json!(desc));
            }
        }
        payload.insert(
            "actions".into(),
            Value::Array(
                actions
                    .into_iter()
                    .map(|(name, help)| json!({"action": name, "help": help}))
                    .collect(),
            ),
        );
        Ok(ActionResult::success(payload))
    }

    /// `<action> <module> --help`: one line about the action itself.
    fn action_help(&self, registry: &Registry, request: &ActionRequest) -> Result<ActionResult> {
        let help_result = self.help(registry, &request.module)?;
        let line = help_result
            .payload
            .get("actions")
            .and_then(Value::as_array)
            .and_then(|actions| {
                actions.iter().find(|entry| {
                    entry.get("action").and_then(Value::as_str) == Some(request.action.as_str())
                })
            })
            .and_then(|entry| entry.get("help").and_then(Value::as_str))
            .map(str::to_string);
        match line {
            Some(help) => {
                let mut payload = Map::new();
                payload.insert("action".into(), json!(request.action));
                payload.insert("module".into(), json!(request.module));
                payload.insert("help".into(), json!(help));
                Ok(ActionResult::success(payload))
            }
            None => Err(Error::unknown(format!(
                "action {:?} not implemented for module {:?}",
                request.action, request.module
            ))),
        }
    }

    /// Name-sorted `(action, help)` pairs for a module.
    pub fn list_actions(&self, module: &str) -> Result<Vec<(String, String)>> {
        let registry = Registry::init(&self.config_dir)?;
        let result = self.help(&registry, module)?;
        Ok(result
            .payload
            .get("actions")
            .and_then(Value::as_array)
            .map(|actions| {
                actions
                    .iter()
                    .filter_map(|entry| {
                        Some((
                            entry.get("action")?.as_str()?.to_string(),
                            entry.get("help")?.as_str()?.to_string(),
                        ))
                    })
                    .collect()
            })
            .unwrap_or_default())
    }
}

fn component_payload(component: &crate::registry::Component) -> Map<String, Value> {
    let mut payload = Map::new();
    payload.insert("repo".into(), json!(component.repo_name));
    payload.insert("module".into(), json!(component.module_name));
    payload.insert("data".into(), json!(component.data_name));
    payload.insert("uid".into(), json!(component.uid));
    payload.insert("path".into(), json!(component.payload_dir.to_string_lossy()));
    payload.insert("meta".into(), component.meta.clone());
    payload.insert("info".into(), component.info.clone());
    payload
}

fn repo_payload(repo: &crate::registry::RepoDescriptor) -> Map<String, Value> {
    let mut payload = Map::new();
    payload.insert("name".into(), json!(repo.name));
    payload.insert("uid".into(), json!(repo.uid));
    payload.insert("path".into(), json!(repo.path.to_string_lossy()));
    payload.insert("deps".into(), json!(repo.deps));
    payload
}

/// `true`, `"yes"`, `"true"`, `"1"` and `1` count as set.
pub fn truthy(value: Option<&Value>) -> bool {
    match value {
        Some(Value::Bool(b)) => *b,
        Some(Value::String(s)) => {
            matches!(s.to_lowercase().as_str(), "yes" | "true" | "1" | "on")
        }
        Some(Value::Number(n)) => n.as_f64().map(|f| f != 0.0).unwrap_or(false),
        _ => false,
    }
}

fn positive_int(value: Option<&Value>, default: u32) -> Result<u32> {
    match value {
        None | Some(Value::Null) => Ok(default),
        Some(Value::Number(n)) => n
            .as_u64()
            .filter(|&v| v >= 1)
            .map(|v| v as u32)
            .ok_or_else(|| Error::generic(format!("expected a positive integer, got {n}"))),
        Some(Value::String(s)) => s
            .parse::<u32>()
            .ok()
            .filter(|&v| v >= 1)
            .ok_or_else(|| Error::generic(format!("expected a positive integer, got {s:?}"))),
        Some(other) => Err(Error::generic(format!("expected a positive integer, got {other}"))),
    }
}

fn float_param(value: &Value, name: &str) -> Result<f64> {
    match value {
        Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| Error::generic(format!("{name} must be a number"))),
        Value::String(s) => s
            .parse::<f64>()
            .map_err(|_| Error::generic(format!("{name} must be a number, got {s:?}"))),
        other => Err(Error::generic(format!("{name} must be a number, got {other}"))),
    }
}

/// An `env` parameter object becomes string-valued overrides; numbers and
/// booleans are stringified the way a shell would expect.
fn env_map(value: Option<&Value>) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    match value {
        None | Some(Value::Null) => {}
        Some(Value::Object(map)) => {
            for (key, value) in map {
                let text = match value {
                    Value::String(s) => s.clone(),
                    Value::Number(n) => n.to_string(),
                    Value::Bool(b) => b.to_string(),
                    other => {
                        return Err(Error::generic(format!(
                            "env.{key} must be a scalar, got {other}"
                        )))
                    }
                };
                out.insert(key.clone(), text);
            }
        }
        Some(other) => return Err(Error::generic(format!("`env` must be an object, got {other}"))),
    }
    Ok(out)
}

fn object_or_empty(value: Option<&Value>) -> Result<Map<String, Value>> {
    match value {
        None | Some(Value::Null) => Ok(Map::new()),
        Some(Value::Object(map)) => Ok(map.clone()),
        Some(other) => Err(Error::generic(format!("expected an object, got {other}"))),
    }
}

fn first_positional(params: &Map<String, Value>) -> Option<String> {
    params
        .get("args")
        .and_then(Value::as_array)
        .and_then(|a| a.first())
        .and_then(Value::as_str)
        .map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn engine() -> (tempfile::TempDir, Engine) {
        let dir = tempfile::tempdir().unwrap();
        let engine = Engine::new(dir.path());
        (dir, engine)
    }

    #[test]
    fn load_round_trip_through_access() {
        let (_dir, engine) = engine();
        let add = engine.access(
            &ActionRequest::new("add", "program")
                .with_data("my-bench")
                .with_param("meta", json!({"tags": "demo"})),
        );
        assert_eq!(add.return_code, 0, "{:?}", add.error);
        let load = engine.access(&ActionRequest::new("load", "program").with_data("my-bench"));
        assert_eq!(load.return_code, 0);
        assert_eq!(load.payload["meta"], json!({"tags": "demo"}));
        assert!(load.error.is_none());
    }

    #[test]
    fn load_missing_is_code_8_with_message() {
        let (_dir, engine) = engine();
        let result = engine.access(&ActionRequest::new("load", "program").with_data("missing"));
        assert_eq!(result.return_code, 8);
        assert!(result.error.as_deref().unwrap_or("").contains("not found"));
        assert!(result.payload.is_empty());
    }

    #[test]
    fn unknown_module_and_action_are_code_4() {
        let (_dir, engine) = engine();
        let result = engine.access(&ActionRequest::new("frobnicate", "no-such-module"));
        assert_eq!(result.return_code, 4);
        assert!(result.error.as_deref().unwrap().contains("module"));

        let result = engine.access(&ActionRequest::new("replay", "program").with_data("x"));
        assert_eq!(result.return_code, 4);
        assert!(result.error.as_deref().unwrap().contains("not implemented"));
    }

    #[test]
    fn envelope_shape_is_flat() {
        let (_dir, engine) = engine();
        let result = engine.access(&ActionRequest::new("help", "program"));
        let doc = result.to_json();
        assert_eq!(doc["return"], json!(0));
        assert!(doc.get("error").is_none());
        assert!(doc.get("actions").is_some(), "payload keys at top level");
    }

    #[test]
    fn help_lists_expected_actions() {
        let (_dir, engine) = engine();
        let actions = engine.list_actions("program").unwrap();
        let names: Vec<&str> = actions.iter().map(|(name, _)| name.as_str()).collect();
        for expected in ["compile", "run", "benchmark", "load", "search", "help"] {
            assert!(names.contains(&expected), "{expected} missing from {names:?}");
        }
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted, "actions are name-sorted");

        let actions = engine.list_actions("experiment").unwrap();
        assert!(actions.iter().any(|(name, _)| name == "replay"));

        let err = engine.list_actions("definitely-not-a-module").unwrap_err();
        assert_eq!(err.code, code::UNKNOWN);
    }

    #[test]
    fn help_works_for_data_only_modules() {
        // `dataset` has no built-in actions but ships as a module
        // component in the default repository.
        let (_dir, engine) = engine();
        let actions = engine.list_actions("dataset").unwrap();
        assert!(actions.iter().any(|(name, _)| name == "search"));
    }

    #[test]
    fn action_help_flag_returns_help_line() {
        let (_dir, engine) = engine();
        let result = engine.access(
            &ActionRequest::new("run", "program").with_param("help", json!(true)),
        );
        assert_eq!(result.return_code, 0);
        assert!(result.payload["help"].as_str().unwrap().contains("Execute"));
    }

    #[test]
    fn compile_delegates_to_build() {
        let (_dir, engine) = engine();
        engine.access(
            &ActionRequest::new("add", "program")
                .with_data("hello")
                .with_param(
                    "meta",
                    json!({
                        "build_cmds": [],
                        "run_cmds": {"default": {"cmd": "true"}}
                    }),
                ),
        );
        let result = engine.access(
            &ActionRequest::new("compile", "program")
                .with_data("hello")
                .with_param("speed", json!("yes")),
        );
        assert_eq!(result.return_code, 0, "{:?}", result.error);
        assert!(result.payload.contains_key("resolved_deps"));
    }

    #[test]
    fn dispatch_depends_only_on_module_and_action() {
        let (_dir, engine) = engine();
        // Whatever junk rides along in params, an unknown action stays
        // an unknown action and a load stays a load.
        for junk in [json!({"x": 1}), json!({"action": "compile"}), json!({"module": "repo"})] {
            let mut request = ActionRequest::new("load", "program").with_data("nope");
            request.params = junk.as_object().cloned().unwrap();
            let result = engine.access(&request);
            assert_eq!(result.return_code, 8);
        }
    }

    #[test]
    fn fuzzed_requests_never_escape_the_envelope() {
        let (_dir, engine) = engine();
        let mut rng = StdRng::seed_from_u64(17);
        let actions = [
            "add", "load", "search", "cp", "rm", "rename", "find", "help", "pull", "compile",
            "run", "benchmark", "replay", "report", "detect", "install", "autotune", "bogus",
        ];
        let modules = ["repo", "program", "experiment", "env", "package", "soft", "dataset", "junk"];
        for _ in 0..300 {
            let action = actions[rng.gen_range(0..actions.len())];
            let module = modules[rng.gen_range(0..modules.len())];
            let mut request = ActionRequest::new(action, module);
            if rng.gen_bool(0.7) {
                request.data = Some(
                    ["x", "cbench-*", "..", "UPPER", "ok-name", ""][rng.gen_range(0..6)].to_string(),
                );
            }
            for _ in 0..rng.gen_range(0..4) {
                let key = ["tags", "meta", "env", "repetitions", "url", "speed", "weird"]
                    [rng.gen_range(0..7)];
                let value = match rng.gen_range(0..5) {
                    0 => json!(rng.gen::<i64>()),
                    1 => json!("string"),
                    2 => json!({"nested": [1, 2, 3]}),
                    3 => json!(null),
                    _ => json!([true, false]),
                };
                request.params.insert(key.to_string(), value);
            }
            let result = engine.access(&request);
            // The convention: code 0 has no error, nonzero has one.
            if result.return_code == 0 {
                assert!(result.error.is_none());
            } else {
                assert!(result.error.as_deref().map(|s| !s.is_empty()).unwrap_or(false));
            }
            // And the envelope serializes.
            let _ = result.to_json();
        }
    }
}
