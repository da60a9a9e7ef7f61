//! Build and run program components portably: resolve dependencies, lay
//! the environment (scrubbed base, then resolved dependency env, then
//! exposed choices, then user overrides), execute command templates and
//! collect characteristics.
//!
//! A program talks back to the framework through one file: if a run
//! writes `tmp-ck-output.json` in its working directory, the numeric
//! top-level values merge into the run's characteristics.

use crate::error::{Error, Result};
use crate::experiment::{self, ExperimentPoint, MetricStats};
use crate::jsonio;
use crate::package::{self, DependencySpec, ResolvedDeps};
use crate::registry::{Component, ComponentRef, Registry, Uid};
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering as AtomicOrdering};
use std::time::Instant;

/// Conventional metrics file a program may write in its run directory.
pub const OUTPUT_METRICS_FILE: &str = "tmp-ck-output.json";

/// Default relative tolerance for numeric output validation.
pub const DEFAULT_VALIDATION_TOLERANCE: f64 = 1e-5;

/// How a run's output file is compared against the reference.
#[derive(Debug, Clone, PartialEq)]
pub enum Comparison {
    Exact,
    Numeric { tolerance: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub reference_file: String,
    pub comparison: Comparison,
}

/// One named way to run the program.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCommand {
    pub cmd: String,
    pub expected_output_file: Option<String>,
    pub validation: Option<Validation>,
}

/// Domain of an exposed choice: an explicit value list or an inclusive
/// integer range.
#[derive(Debug, Clone, PartialEq)]
pub enum ChoiceDomain {
    Values(Vec<Value>),
    Range { from: i64, to: i64, step: i64 },
}

impl ChoiceDomain {
    /// Expand to concrete values in declaration order. Ranges include
    /// both ends when the step divides evenly.
    pub fn values(&self) -> Result<Vec<Value>> {
        match self {
            ChoiceDomain::Values(values) => {
                if values.is_empty() {
                    return Err(Error::generic("choice domain is empty"));
                }
                Ok(values.clone())
            }
            ChoiceDomain::Range { from, to, step } => {
                if *step <= 0 {
                    return Err(Error::generic("choice range step must be positive"));
                }
                if to < from {
                    return Err(Error::generic("choice range is empty"));
                }
                Ok((*from..=*to).step_by(*step as usize).map(|v| json!(v)).collect())
            }
        }
    }

    /// The value `--speed` selects: the numeric maximum when every value
    /// is a number, the last declared value otherwise.
    pub fn max_value(&self) -> Result<Value> {
        let values = self.values()?;
        let all_numeric = values.iter().all(|v| v.as_f64().is_some());
        if all_numeric {
            Ok(values
                .into_iter()
                .max_by(|a, b| a.as_f64().unwrap().total_cmp(&b.as_f64().unwrap()))
                .expect("domain nonempty"))
        } else {
            Ok(values.last().cloned().expect("domain nonempty"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceSpec {
    pub domain: ChoiceDomain,
    pub default: Option<Value>,
}

impl ChoiceSpec {
    pub fn default_value(&self) -> Result<Value> {
        match &self.default {
            Some(v) => Ok(v.clone()),
            None => Ok(self.domain.values()?[0].clone()),
        }
    }
}

/// Parsed program meta: dependencies, build and run command templates,
/// and the exposed choice space.
#[derive(Debug, Clone, Default)]
pub struct ProgramMeta {
    pub deps: Vec<DependencySpec>,
    pub build_cmds: Vec<String>,
    pub run_cmds: BTreeMap<String, RunCommand>,
    pub default_cmd_key: Option<String>,
    pub exposed_choices: BTreeMap<String, ChoiceSpec>,
}

impl ProgramMeta {
    pub fn from_meta(meta: &Value) -> Result<Self> {
        let obj = meta
            .as_object()
            .ok_or_else(|| Error::generic("program meta must be an object"))?;
        let deps = DependencySpec::map_from_meta(obj.get("deps"))?;
        let build_cmds = obj
            .get("build_cmds")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default();
        let mut run_cmds = BTreeMap::new();
        if let Some(map) = obj.get("run_cmds").and_then(Value::as_object) {
            for (key, value) in map {
                run_cmds.insert(key.clone(), parse_run_command(key, value)?);
            }
        }
        let default_cmd_key = obj
            .get("default_cmd_key")
            .and_then(Value::as_str)
            .map(str::to_string);
        if let Some(key) = &default_cmd_key {
            if !run_cmds.contains_key(key) {
                return Err(Error::generic(format!(
                    "default_cmd_key {key:?} is not one of run_cmds"
                )));
            }
        }
        let mut exposed_choices = BTreeMap::new();
        if let Some(map) = obj.get("exposed_choices").and_then(Value::as_object) {
            for (name, value) in map {
                exposed_choices.insert(name.clone(), parse_choice_spec(name, value)?);
            }
        }
        Ok(ProgramMeta {
            deps,
            build_cmds,
            run_cmds,
            default_cmd_key,
            exposed_choices,
        })
    }

    /// The command key a run uses when none is requested.
    pub fn resolve_cmd_key(&self, requested: Option<&str>) -> Result<String> {
        if let Some(key) = requested {
            if self.run_cmds.contains_key(key) {
                return Ok(key.to_string());
            }
            return Err(Error::unknown(format!("unknown cmd_key {key:?}")));
        }
        if let Some(key) = &self.default_cmd_key {
            return Ok(key.clone());
        }
        if self.run_cmds.contains_key("default") {
            return Ok("default".to_string());
        }
        if self.run_cmds.len() == 1 {
            return Ok(self.run_cmds.keys().next().unwrap().clone());
        }
        Err(Error::unknown(
            "program declares several run commands and no default_cmd_key",
        ))
    }

    /// Default-fill the exposed choices, then apply explicit ones.
    pub fn effective_choices(&self, explicit: &Map<String, Value>) -> Result<Map<String, Value>> {
        let mut out = Map::new();
        for (name, spec) in &self.exposed_choices {
            out.insert(name.clone(), spec.default_value()?);
        }
        for (name, value) in explicit {
            out.insert(name.clone(), value.clone());
        }
        Ok(out)
    }
}

fn parse_run_command(key: &str, value: &Value) -> Result<RunCommand> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::generic(format!("run_cmds.{key} must be an object")))?;
    let cmd = obj
        .get("cmd")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::generic(format!("run_cmds.{key} needs a `cmd` template")))?
        .to_string();
    let expected_output_file = obj
        .get("expected_output_file")
        .and_then(Value::as_str)
        .map(str::to_string);
    let validation = match obj.get("validation") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let reference_file = v
                .get("reference_file")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::generic(format!("run_cmds.{key}.validation needs a reference_file")))?
                .to_string();
            let comparison = match v.get("comparison") {
                None | Some(Value::String(_)) if matches!(v.get("comparison"), Some(Value::String(s)) if s == "exact") => {
                    Comparison::Exact
                }
                Some(Value::String(s)) if s == "numeric" => Comparison::Numeric {
                    tolerance: DEFAULT_VALIDATION_TOLERANCE,
                },
                Some(Value::Object(m)) => {
                    let tolerance = m
                        .get("tolerance")
                        .and_then(Value::as_f64)
                        .unwrap_or(DEFAULT_VALIDATION_TOLERANCE);
                    match m.get("kind").and_then(Value::as_str) {
                        Some("exact") => Comparison::Exact,
                        _ => Comparison::Numeric { tolerance },
                    }
                }
                None => Comparison::Exact,
                Some(other) => {
                    return Err(Error::generic(format!(
                        "run_cmds.{key}.validation.comparison is malformed: {other}"
                    )))
                }
            };
            Some(Validation {
                reference_file,
                comparison,
            })
        }
    };
    if expected_output_file.is_none() && validation.is_some() {
        return Err(Error::generic(format!(
            "run_cmds.{key}: validation requires expected_output_file"
        )));
    }
    Ok(RunCommand {
        cmd,
        expected_output_file,
        validation,
    })
}

fn parse_choice_spec(name: &str, value: &Value) -> Result<ChoiceSpec> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::generic(format!("exposed_choices.{name} must be an object")))?;
    let domain = match obj.get("domain") {
        Some(Value::Array(values)) => ChoiceDomain::Values(values.clone()),
        Some(Value::Object(m)) => ChoiceDomain::Range {
            from: m.get("from").and_then(Value::as_i64).ok_or_else(|| {
                Error::generic(format!("exposed_choices.{name}.domain range needs `from`"))
            })?,
            to: m.get("to").and_then(Value::as_i64).ok_or_else(|| {
                Error::generic(format!("exposed_choices.{name}.domain range needs `to`"))
            })?,
            step: m.get("step").and_then(Value::as_i64).unwrap_or(1),
        },
        _ => {
            return Err(Error::generic(format!(
                "exposed_choices.{name} needs a `domain` (value list or integer range)"
            )))
        }
    };
    domain.values().map_err(|e| {
        Error::generic(format!("exposed_choices.{name}: {}", e.message))
    })?;
    Ok(ChoiceSpec {
        domain,
        default: obj.get("default").cloned(),
    })
}

/// Directory layout of a program's scratch space.
#[derive(Debug, Clone)]
pub struct ProgramDirs {
    pub src_dir: PathBuf,
    pub tmp_root: PathBuf,
    pub build_dir: PathBuf,
    pub bin_dir: PathBuf,
}

impl ProgramDirs {
    fn of(component: &Component) -> Self {
        let src_dir = component.payload_dir.clone();
        let tmp_root = src_dir.join("tmp");
        ProgramDirs {
            build_dir: tmp_root.join("build"),
            bin_dir: tmp_root.join("bin"),
            src_dir,
            tmp_root,
        }
    }

    fn build_record_path(&self) -> PathBuf {
        self.tmp_root.join("build.json")
    }
}

/// Expand a command template against the directory layout, environment
/// and choices. `{env.NAME}` and `{choice.NAME}` must refer to known
/// entries; unrelated braces (for example shell `${VAR}`) pass through.
pub fn expand_template(
    template: &str,
    dirs: &ProgramDirs,
    work_dir: &Path,
    env: &BTreeMap<String, String>,
    choices: &Map<String, Value>,
) -> Result<String> {
    let mut out = template
        .replace("{bin_dir}", &dirs.bin_dir.to_string_lossy())
        .replace("{src_dir}", &dirs.src_dir.to_string_lossy())
        .replace("{tmp_dir}", &work_dir.to_string_lossy());
    while let Some(start) = out.find("{env.").or_else(|| out.find("{choice.")) {
        let end = out[start..]
            .find('}')
            .map(|i| start + i)
            .ok_or_else(|| Error::generic(format!("unterminated placeholder in template {template:?}")))?;
        let token = out[start + 1..end].to_string();
        let replacement = if let Some(name) = token.strip_prefix("env.") {
            env.get(name)
                .cloned()
                .ok_or_else(|| Error::generic(format!("template references unknown env var {name:?}")))?
        } else if let Some(name) = token.strip_prefix("choice.") {
            let value = choices
                .get(name)
                .ok_or_else(|| Error::generic(format!("template references unknown choice {name:?}")))?;
            choice_to_string(value)
        } else {
            unreachable!("find matched a known prefix")
        };
        out.replace_range(start..=end, &replacement);
    }
    Ok(out)
}

pub fn choice_to_string(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Assemble the child environment: scrubbed base, resolved dependency
/// env, `CK_CHOICE_*` exports, then user overrides (overrides win).
pub fn child_env(
    merged_env: &BTreeMap<String, String>,
    choices: &Map<String, Value>,
    env_overrides: &BTreeMap<String, String>,
) -> BTreeMap<String, String> {
    let mut env = BTreeMap::new();
    for key in ["PATH", "HOME", "LANG", "TMPDIR"] {
        if let Ok(value) = std::env::var(key) {
            env.insert(key.to_string(), value);
        }
    }
    for (k, v) in merged_env {
        env.insert(k.clone(), v.clone());
    }
    for (name, value) in choices {
        env.insert(
            format!("CK_CHOICE_{}", name.to_uppercase()),
            choice_to_string(value),
        );
    }
    for (k, v) in env_overrides {
        env.insert(k.clone(), v.clone());
    }
    env
}

/// Settings for one build.
#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    pub speed: bool,
    pub env_overrides: BTreeMap<String, String>,
    pub choices: Map<String, Value>,
}

/// What a successful build leaves behind (also persisted as
/// `tmp/build.json` in the program payload).
#[derive(Debug, Clone)]
pub struct BuildRecord {
    pub resolved: ResolvedDeps,
    pub choices: Map<String, Value>,
    pub env: BTreeMap<String, String>,
    pub transcript_path: Option<PathBuf>,
}

/// Resolve dependencies (installing what is missing), then execute the
/// build commands in a fresh build directory. A resolution failure leaves
/// no scratch directory behind.
pub fn build(
    registry: &Registry,
    program_ref: &ComponentRef,
    options: &BuildOptions,
) -> Result<BuildRecord> {
    let component = registry.load_component(program_ref)?;
    let meta = ProgramMeta::from_meta(&component.meta)?;
    let dirs = ProgramDirs::of(&component);

    let resolved = package::resolve(registry, &meta.deps, true)?;

    let mut choices = meta.effective_choices(&options.choices)?;
    if options.speed {
        if let Some(spec) = meta.exposed_choices.get("opt_level") {
            if !options.choices.contains_key("opt_level") {
                choices.insert("opt_level".to_string(), spec.domain.max_value()?);
            }
        }
    }
    let env = child_env(&resolved.merged_env, &choices, &options.env_overrides);

    // Fresh build workspace; created only after resolution succeeded.
    if dirs.build_dir.exists() {
        std::fs::remove_dir_all(&dirs.build_dir).map_err(|e| Error::io_at(&dirs.build_dir, e))?;
    }
    if dirs.bin_dir.exists() {
        std::fs::remove_dir_all(&dirs.bin_dir).map_err(|e| Error::io_at(&dirs.bin_dir, e))?;
    }
    std::fs::create_dir_all(&dirs.build_dir).map_err(|e| Error::io_at(&dirs.build_dir, e))?;
    std::fs::create_dir_all(&dirs.bin_dir).map_err(|e| Error::io_at(&dirs.bin_dir, e))?;

    let mut transcript = String::new();
    let transcript_path = dirs.tmp_root.join("build-log.txt");
    for template in &meta.build_cmds {
        let cmd = expand_template(template, &dirs, &dirs.build_dir, &env, &choices)?;
        transcript.push_str(&format!("$ {cmd}\n"));
        let mut command = package::shell_command(&cmd);
        command.current_dir(&dirs.build_dir);
        command.env_clear();
        command.envs(&env);
        let output = command
            .output()
            .map_err(|e| Error::exec(format!("cannot run build command: {e}")))?;
        transcript.push_str(&String::from_utf8_lossy(&output.stdout));
        transcript.push_str(&String::from_utf8_lossy(&output.stderr));
        if !output.status.success() {
            std::fs::write(&transcript_path, &transcript).ok();
            return Err(Error::exec(format!(
                "build command failed ({}): {cmd}\ntranscript: {}",
                output.status,
                transcript_path.display()
            )));
        }
    }
    std::fs::write(&transcript_path, &transcript).map_err(|e| Error::io_at(&transcript_path, e))?;

    let record = json!({
        "timestamp": chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.6fZ").to_string(),
        "choices": choices,
        "env_overrides": options.env_overrides,
        "speed": options.speed,
        "resolved_deps": package::resolved_to_json(&resolved),
    });
    jsonio::write_json(&dirs.build_record_path(), &record)?;
    Ok(BuildRecord {
        resolved,
        choices,
        env,
        transcript_path: Some(transcript_path),
    })
}

fn load_build_record(dirs: &ProgramDirs) -> Result<Option<(ResolvedDeps, Map<String, Value>)>> {
    let path = dirs.build_record_path();
    if !path.exists() {
        return Ok(None);
    }
    let doc = jsonio::read_json(&path)?;
    let resolved = package::resolved_from_json(
        doc.get("resolved_deps").unwrap_or(&Value::Null),
    )?;
    let choices = doc
        .get("choices")
        .and_then(Value::as_object)
        .cloned()
        .unwrap_or_default();
    Ok(Some((resolved, choices)))
}

/// Settings for one run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub cmd_key: Option<String>,
    pub env_overrides: BTreeMap<String, String>,
    pub choices: Map<String, Value>,
    pub repetitions: u32,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            cmd_key: None,
            env_overrides: BTreeMap::new(),
            choices: Map::new(),
            repetitions: 1,
        }
    }
}

/// One benchmark repetition.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub exit_code: i64,
    pub wall_time_s: f64,
    pub characteristics: BTreeMap<String, f64>,
    pub stdout_path: PathBuf,
    pub stderr_path: PathBuf,
    pub validated: Option<bool>,
}

pub fn all_failed(results: &[RunResult]) -> bool {
    !results.is_empty() && results.iter().all(|r| r.exit_code != 0)
}

// Concurrency bookkeeping for the `contended` flag on experiment points.
static ACTIVE_RUNS: AtomicUsize = AtomicUsize::new(0);
static OVERLAP_GENERATION: AtomicU64 = AtomicU64::new(0);

struct RunPhaseGuard {
    start_generation: u64,
    started_contended: bool,
}

impl RunPhaseGuard {
    fn begin() -> Self {
        let previous = ACTIVE_RUNS.fetch_add(1, AtomicOrdering::SeqCst);
        let started_contended = previous > 0;
        if started_contended {
            OVERLAP_GENERATION.fetch_add(1, AtomicOrdering::SeqCst);
        }
        RunPhaseGuard {
            start_generation: OVERLAP_GENERATION.load(AtomicOrdering::SeqCst),
            started_contended,
        }
    }

    fn finish(self) -> bool {
        let contended = self.started_contended
            || OVERLAP_GENERATION.load(AtomicOrdering::SeqCst) != self.start_generation;
        ACTIVE_RUNS.fetch_sub(1, AtomicOrdering::SeqCst);
        contended
    }
}

/// Execute a run command `repetitions` times, each in a fresh working
/// directory under the program's `tmp/`. A nonzero program exit is
/// recorded in its result, not raised; the action layer reports failure
/// only when every repetition failed.
pub fn run(
    registry: &Registry,
    program_ref: &ComponentRef,
    options: &RunOptions,
) -> Result<Vec<RunResult>> {
    let (results, _contended) = run_with_contention(registry, program_ref, options)?;
    Ok(results)
}

pub(crate) fn run_with_contention(
    registry: &Registry,
    program_ref: &ComponentRef,
    options: &RunOptions,
) -> Result<(Vec<RunResult>, bool)> {
    if options.repetitions == 0 {
        return Err(Error::generic("repetitions must be a positive integer"));
    }
    let component = registry.load_component(program_ref)?;
    let meta = ProgramMeta::from_meta(&component.meta)?;
    let dirs = ProgramDirs::of(&component);
    let cmd_key = meta.resolve_cmd_key(options.cmd_key.as_deref())?;
    let run_cmd = meta.run_cmds.get(&cmd_key).expect("validated by resolve_cmd_key");

    let (resolved, build_choices) = match load_build_record(&dirs)? {
        Some(record) => record,
        None if meta.build_cmds.is_empty() => {
            (package::resolve(registry, &meta.deps, false)?, Map::new())
        }
        None => {
            return Err(Error::generic(format!(
                "{program_ref}: no successful build record; compile the program first"
            )))
        }
    };

    // Explicit run choices win over the recorded build choices.
    let mut explicit = build_choices;
    for (k, v) in &options.choices {
        explicit.insert(k.clone(), v.clone());
    }
    let choices = meta.effective_choices(&explicit)?;
    let env = child_env(&resolved.merged_env, &choices, &options.env_overrides);

    let guard = RunPhaseGuard::begin();
    let outcome = (|| {
        let mut results = Vec::new();
        for repetition in 0..options.repetitions {
            let run_dir = dirs.tmp_root.join(format!(
                "run-{repetition}-{}",
                &Uid::generate().as_str()[..8]
            ));
            std::fs::create_dir_all(&run_dir).map_err(|e| Error::io_at(&run_dir, e))?;
            results.push(execute_once(
                run_cmd, &dirs, &run_dir, &env, &choices,
            )?);
        }
        Ok(results)
    })();
    let contended = guard.finish();
    outcome.map(|results| (results, contended))
}

fn execute_once(
    run_cmd: &RunCommand,
    dirs: &ProgramDirs,
    run_dir: &Path,
    env: &BTreeMap<String, String>,
    choices: &Map<String, Value>,
) -> Result<RunResult> {
    use std::process::Stdio;
    let cmd = expand_template(&run_cmd.cmd, dirs, run_dir, env, choices)?;
    let stdout_path = run_dir.join("stdout.txt");
    let stderr_path = run_dir.join("stderr.txt");
    let stdout_file = std::fs::File::create(&stdout_path).map_err(|e| Error::io_at(&stdout_path, e))?;
    let stderr_file = std::fs::File::create(&stderr_path).map_err(|e| Error::io_at(&stderr_path, e))?;

    let mut command = package::shell_command(&cmd);
    command
        .current_dir(run_dir)
        .env_clear()
        .envs(env)
        .stdin(Stdio::null())
        .stdout(stdout_file)
        .stderr(stderr_file);
    let started = Instant::now();
    let status = command
        .status()
        .map_err(|e| Error::exec(format!("cannot run command {cmd:?}: {e}")))?;
    let wall_time_s = started.elapsed().as_secs_f64();
    let exit_code = status.code().unwrap_or(-1) as i64;

    let mut characteristics = BTreeMap::new();
    characteristics.insert("wall_time_s".to_string(), wall_time_s);
    characteristics.insert("exit_code".to_string(), exit_code as f64);
    let metrics_path = run_dir.join(OUTPUT_METRICS_FILE);
    if metrics_path.is_file() {
        if let Ok(doc) = jsonio::read_json(&metrics_path) {
            if let Some(obj) = doc.as_object() {
                for (key, value) in obj {
                    if let Some(number) = value.as_f64() {
                        characteristics.insert(key.clone(), number);
                    }
                }
            }
        }
    }

    let validated = match (&run_cmd.expected_output_file, &run_cmd.validation) {
        (Some(output_file), Some(validation)) => Some(validate_output(
            &run_dir.join(output_file),
            &dirs.src_dir.join(&validation.reference_file),
            &validation.comparison,
        )?),
        _ => None,
    };

    Ok(RunResult {
        exit_code,
        wall_time_s,
        characteristics,
        stdout_path,
        stderr_path,
        validated,
    })
}

/// Compare a produced file against a reference: exact bytes, or
/// token-wise numeric comparison where `|candidate - reference| <=
/// tolerance * max(|reference|, 1)` and non-numeric tokens must match
/// exactly.
pub fn validate_output(produced: &Path, reference: &Path, comparison: &Comparison) -> Result<bool> {
    if !produced.is_file() {
        return Ok(false);
    }
    let reference_bytes = std::fs::read(reference).map_err(|e| Error::io_at(reference, e))?;
    let produced_bytes = std::fs::read(produced).map_err(|e| Error::io_at(produced, e))?;
    match comparison {
        Comparison::Exact => Ok(produced_bytes == reference_bytes),
        Comparison::Numeric { tolerance } => {
            let produced_text = String::from_utf8_lossy(&produced_bytes);
            let reference_text = String::from_utf8_lossy(&reference_bytes);
            let produced_tokens: Vec<&str> = produced_text.split_whitespace().collect();
            let reference_tokens: Vec<&str> = reference_text.split_whitespace().collect();
            if produced_tokens.len() != reference_tokens.len() {
                return Ok(false);
            }
            for (p, r) in produced_tokens.iter().zip(&reference_tokens) {
                match (p.parse::<f64>(), r.parse::<f64>()) {
                    (Ok(pv), Ok(rv)) => {
                        if (pv - rv).abs() > tolerance * rv.abs().max(1.0) {
                            return Ok(false);
                        }
                    }
                    _ => {
                        if p != r {
                            return Ok(false);
                        }
                    }
                }
            }
            Ok(true)
        }
    }
}

/// Full input to one benchmark: command key, overrides, choices,
/// repetitions and the optional record target.
#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub cmd_key: Option<String>,
    pub env_overrides: BTreeMap<String, String>,
    pub choices: Map<String, Value>,
    pub repetitions: u32,
    pub speed: bool,
    /// Record name to append the point to, when given.
    pub record: Option<String>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            cmd_key: None,
            env_overrides: BTreeMap::new(),
            choices: Map::new(),
            repetitions: 1,
            speed: false,
            record: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub point: ExperimentPoint,
    pub all_failed: bool,
    pub recorded_as: Option<String>,
}

/// Build (freshly, so choices affecting the build take effect), run the
/// requested repetitions, aggregate characteristics to min/median/max and
/// assemble the experiment point with the complete configuration.
pub fn benchmark(
    registry: &Registry,
    program_ref: &ComponentRef,
    config: &BenchmarkConfig,
) -> Result<BenchmarkOutcome> {
    let component = registry.load_component(program_ref)?;
    let full_ref = component.to_ref();

    let build_record = build(
        registry,
        &full_ref,
        &BuildOptions {
            speed: config.speed,
            env_overrides: config.env_overrides.clone(),
            choices: config.choices.clone(),
        },
    )?;
    let meta = ProgramMeta::from_meta(&component.meta)?;
    let cmd_key = meta.resolve_cmd_key(config.cmd_key.as_deref())?;

    let (results, contended) = run_with_contention(
        registry,
        &full_ref,
        &RunOptions {
            cmd_key: Some(cmd_key.clone()),
            env_overrides: config.env_overrides.clone(),
            choices: config.choices.clone(),
            repetitions: config.repetitions,
        },
    )?;

    let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for result in &results {
        for (metric, value) in &result.characteristics {
            samples.entry(metric.clone()).or_default().push(*value);
        }
    }
    let characteristics: BTreeMap<String, MetricStats> = samples
        .into_iter()
        .map(|(metric, values)| (metric, MetricStats::from_samples(&values)))
        .collect();

    let validated = {
        let flags: Vec<bool> = results.iter().filter_map(|r| r.validated).collect();
        if flags.is_empty() {
            None
        } else {
            Some(flags.iter().all(|&v| v))
        }
    };

    let point = ExperimentPoint {
        point_uid: Uid::generate().as_str().to_string(),
        timestamp: chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.6fZ").to_string(),
        program_ref: full_ref.to_string(),
        cmd_key,
        choices: build_record.choices.clone(),
        env_overrides: config.env_overrides.clone(),
        resolved_deps: build_record.resolved.entries.clone(),
        platform: crate::platform::describe(),
        characteristics,
        validated,
        repetitions: config.repetitions,
        contended,
    };
    let all_failed = all_failed(&results);

    let recorded_as = match &config.record {
        Some(record_name) => {
            experiment::record_point(registry, record_name, &point)?;
            Some(record_name.clone())
        }
        None => None,
    };
    Ok(BenchmarkOutcome {
        point,
        all_failed,
        recorded_as,
    })
}

/// Serialize run results for action payloads.
pub fn run_results_to_json(results: &[RunResult]) -> Value {
    Value::Array(
        results
            .iter()
            .map(|r| {
                json!({
                    "exit_code": r.exit_code,
                    "wall_time_s": r.wall_time_s,
                    "characteristics": r.characteristics,
                    "stdout_path": r.stdout_path.to_string_lossy(),
                    "stderr_path": r.stderr_path.to_string_lossy(),
                    "validated": r.validated,
                })
            })
            .collect(),
    )
}
