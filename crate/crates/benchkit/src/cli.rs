//! The natural-language-style command grammar:
//!
//! ```text
//! <action> <module>                       (flags) (@input.json|@input.yaml)
//! <action> <module>:<data>                (flags)
//! <action> <repo>:<module>:<data>         (flags)
//! ```
//!
//! `@file` documents merge first (in order, objects deep-merged, lists
//! replaced), then `--key=value` flags override left to right. Dotted
//! keys nest: `--env.OMP_NUM_THREADS=4` becomes `{"env":
//! {"OMP_NUM_THREADS": "4"}}`. Flag values stay strings; actions coerce
//! at the point of use. Unknown flags pass through to the action.

use crate::action::{ActionRequest, ActionResult, Engine};
use crate::error::{Error, Result};
use crate::jsonio;
use crate::registry::ComponentRef;
use serde_json::{Map, Value};
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Human,
    Json,
}

/// A fully parsed invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCommand {
    pub action: String,
    pub reference: ComponentRef,
    pub params: Map<String, Value>,
    pub input_files: Vec<PathBuf>,
    pub out_format: OutputFormat,
    pub repo_dir: Option<PathBuf>,
}

impl ParsedCommand {
    /// Regenerate an equivalent invocation (file inputs are already
    /// merged into `params`, so they reappear as flags).
    pub fn to_argv(&self) -> Vec<String> {
        let mut argv = vec![self.action.clone(), self.reference.to_string()];
        if let Some(args) = self.params.get("args").and_then(Value::as_array) {
            for arg in args {
                if let Some(s) = arg.as_str() {
                    argv.push(s.to_string());
                }
            }
        }
        emit_flags("", &self.params, &mut argv);
        match self.out_format {
            OutputFormat::Human => {}
            OutputFormat::Json => argv.push("--out=json".to_string()),
        }
        if let Some(dir) = &self.repo_dir {
            argv.push(format!("--repo_dir={}", dir.to_string_lossy()));
        }
        argv
    }
}

fn emit_flags(prefix: &str, params: &Map<String, Value>, argv: &mut Vec<String>) {
    for (key, value) in params {
        if prefix.is_empty() && key == "args" {
            continue;
        }
        let dotted = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match value {
            Value::Object(nested) => emit_flags(&dotted, nested, argv),
            Value::Bool(true) => argv.push(format!("--{dotted}")),
            Value::String(s) => argv.push(format!("--{dotted}={s}")),
            other => argv.push(format!("--{dotted}={other}")),
        }
    }
}

/// Parse a full argument vector (without the program name).
pub fn parse_argv(argv: &[String]) -> Result<ParsedCommand> {
    let mut tokens = argv.iter();
    let action = tokens
        .next()
        .filter(|t| !t.starts_with("--") && !t.starts_with('@'))
        .ok_or_else(|| Error::generic("usage: <action> <module>[:<data>] (flags) (@input.json)"))?
        .clone();
    let reference = tokens
        .next()
        .filter(|t| !t.starts_with("--") && !t.starts_with('@'))
        .ok_or_else(|| Error::generic(format!("usage: {action} <module>[:<data>] (flags)")))?;
    let reference = ComponentRef::parse(reference)?;

    let mut params = Value::Object(Map::new());
    let mut positional = Vec::new();
    let mut input_files = Vec::new();
    let mut out_format = OutputFormat::Human;
    let mut repo_dir = None;

    // Files first, then flags, left to right; later sources override.
    let rest: Vec<&String> = tokens.collect();
    for token in rest.iter().filter(|t| t.starts_with('@')) {
        let path = PathBuf::from(&token[1..]);
        if path.as_os_str().is_empty() {
            return Err(Error::generic("@ must be followed by a file path"));
        }
        let doc = load_input_file(&path)?;
        jsonio::deep_merge(&mut params, doc);
        input_files.push(path);
    }
    for token in rest.iter().filter(|t| !t.starts_with('@')) {
        if let Some(flag) = token.strip_prefix("--") {
            let (key, value) = match flag.split_once('=') {
                Some((key, value)) => (key, Value::String(value.to_string())),
                None => (flag, Value::Bool(true)),
            };
            if key.is_empty() {
                return Err(Error::generic(format!("malformed flag {token:?}")));
            }
            match key {
                "out" => {
                    out_format = match value.as_str() {
                        Some("human") => OutputFormat::Human,
                        Some("json") => OutputFormat::Json,
                        other => {
                            return Err(Error::generic(format!(
                                "--out must be human or json, got {other:?}"
                            )))
                        }
                    };
                }
                "repo_dir" => {
                    repo_dir = Some(PathBuf::from(value.as_str().ok_or_else(|| {
                        Error::generic("--repo_dir needs a path value")
                    })?));
                }
                _ => jsonio::set_dotted(&mut params, key, value),
            }
        } else {
            positional.push(Value::String(token.to_string()));
        }
    }
    let mut params = match params {
        Value::Object(map) => map,
        _ => Map::new(),
    };
    if !positional.is_empty() {
        params.insert("args".to_string(), Value::Array(positional));
    }
    Ok(ParsedCommand {
        action,
        reference,
        params,
        input_files,
        out_format,
        repo_dir,
    })
}

fn load_input_file(path: &PathBuf) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::io(format!("cannot read {}: {e}", path.display()))
    })?;
    let extension = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_lowercase();
    match extension.as_str() {
        "json" => serde_json::from_str(&text)
            .map_err(|e| Error::generic(format!("{}: malformed JSON: {e}", path.display()))),
        "yaml" | "yml" => serde_yaml::from_str(&text)
            .map_err(|e| Error::generic(format!("{}: malformed YAML: {e}", path.display()))),
        other => Err(Error::generic(format!(
            "{}: unsupported input extension {other:?} (expected .json, .yaml or .yml)",
            path.display()
        ))),
    }
}

impl ParsedCommand {
    pub fn to_request(&self) -> ActionRequest {
        ActionRequest {
            action: self.action.clone(),
            repo: self.reference.repo.clone(),
            module: self.reference.module.clone(),
            data: self.reference.data.clone(),
            params: self.params.clone(),
        }
    }
}

/// Render a result and return the process exit code
/// (`min(return_code, 125)`).
pub fn render_result(
    result: &ActionResult,
    format: OutputFormat,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32 {
    match format {
        OutputFormat::Json => {
            let _ = write!(stdout, "{}", jsonio::to_canonical_string(&result.to_json()));
        }
        OutputFormat::Human => {
            render_human(result, stdout);
            if let Some(error) = &result.error {
                let use_color = std::env::var_os("NO_COLOR").is_none() && stderr_is_tty();
                if use_color {
                    let _ = writeln!(stderr, "\x1b[31merror:\x1b[0m {error} (code {})", result.return_code);
                } else {
                    let _ = writeln!(stderr, "error: {error} (code {})", result.return_code);
                }
            }
        }
    }
    result.return_code.min(125) as i32
}

fn stderr_is_tty() -> bool {
    use std::io::IsTerminal;
    std::io::stderr().is_terminal()
}

fn render_human(result: &ActionResult, out: &mut dyn Write) {
    let payload = &result.payload;
    if let Some(matches) = payload.get("matches").and_then(Value::as_array) {
        for entry in matches {
            match entry {
                Value::String(s) => {
                    let _ = writeln!(out, "{s}");
                }
                other => {
                    let _ = writeln!(out, "{other}");
                }
            }
        }
        return;
    }
    if let Some(actions) = payload.get("actions").and_then(Value::as_array) {
        if let Some(desc) = payload.get("desc").and_then(Value::as_str) {
            let _ = writeln!(out, "{desc}\n");
        }
        for entry in actions {
            let name = entry.get("action").and_then(Value::as_str).unwrap_or("?");
            let help = entry.get("help").and_then(Value::as_str).unwrap_or("");
            let _ = writeln!(out, "{name:<12} {help}");
        }
        return;
    }
    if let Some(path) = payload.get("path").and_then(Value::as_str) {
        if payload.get("meta").is_none() {
            let _ = writeln!(out, "{path}");
            return;
        }
    }
    if let Some(replay) = payload.get("replay") {
        render_replay(replay, out);
        return;
    }
    if let Some(tuning) = payload.get("tuning") {
        render_tuning(tuning, out);
        return;
    }
    if let Some(point) = payload.get("point") {
        render_point(point, payload, out);
        return;
    }
    if let Some(results) = payload.get("results").and_then(Value::as_array) {
        for (index, r) in results.iter().enumerate() {
            let _ = writeln!(
                out,
                "run {index}: exit {} in {:.4}s",
                r.get("exit_code").and_then(Value::as_i64).unwrap_or(-1),
                r.get("wall_time_s").and_then(Value::as_f64).unwrap_or(0.0),
            );
        }
        return;
    }
    if let Some(entries) = payload.get("entries").and_then(Value::as_array) {
        for entry in entries {
            let _ = writeln!(
                out,
                "{} v{} at {}",
                entry.get("tags").and_then(Value::as_str).unwrap_or("?"),
                entry
                    .get("version")
                    .and_then(Value::as_array)
                    .map(|v| v
                        .iter()
                        .filter_map(Value::as_u64)
                        .map(|n| n.to_string())
                        .collect::<Vec<_>>()
                        .join("."))
                    .unwrap_or_default(),
                entry.get("detected_path").and_then(Value::as_str).unwrap_or("?"),
            );
        }
        return;
    }
    if !payload.is_empty() {
        let _ = write!(
            out,
            "{}",
            jsonio::to_canonical_string(&Value::Object(payload.clone()))
        );
    }
}

fn render_replay(replay: &Value, out: &mut dyn Write) {
    let _ = writeln!(
        out,
        "replay of {} point {}",
        replay.get("record_name").and_then(Value::as_str).unwrap_or("?"),
        replay.get("point_uid").and_then(Value::as_str).unwrap_or("?"),
    );
    if let Some(metrics) = replay.get("metrics").and_then(Value::as_array) {
        for m in metrics {
            let _ = writeln!(
                out,
                "  {:<16} original {:>12.6}  replayed {:>12}  {}",
                m.get("name").and_then(Value::as_str).unwrap_or("?"),
                m.get("original").and_then(Value::as_f64).unwrap_or(f64::NAN),
                m.get("replayed")
                    .and_then(Value::as_f64)
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_else(|| "missing".to_string()),
                if m.get("within_tolerance").and_then(Value::as_bool).unwrap_or(false) {
                    "ok"
                } else {
                    "MISMATCH"
                }
            );
        }
    }
    match replay.get("dep_diff").and_then(Value::as_array) {
        Some(diff) if !diff.is_empty() => {
            let _ = writeln!(out, "  dependency changes:");
            for change in diff {
                let _ = writeln!(out, "    {change}");
            }
        }
        _ => {
            let _ = writeln!(out, "  dependencies: unchanged");
        }
    }
}

fn render_tuning(tuning: &Value, out: &mut dyn Write) {
    let _ = writeln!(
        out,
        "evaluated {} configuration(s) into record {:?}",
        tuning.get("evaluated").and_then(Value::as_u64).unwrap_or(0),
        tuning.get("record_name").and_then(Value::as_str).unwrap_or("?"),
    );
    if let Some(failures) = tuning.get("failures").and_then(Value::as_array) {
        if !failures.is_empty() {
            let _ = writeln!(out, "failures: {}", failures.len());
        }
    }
    if let Some(frontier) = tuning.get("frontier_uids").and_then(Value::as_array) {
        let _ = writeln!(out, "frontier: {} point(s)", frontier.len());
        for uid in frontier {
            let _ = writeln!(out, "  {}", uid.as_str().unwrap_or("?"));
        }
    }
    if let Some(best) = tuning.get("best_per_metric").and_then(Value::as_array) {
        for entry in best {
            let _ = writeln!(
                out,
                "best {:<16} {:>12.6} (point {})",
                entry.get("metric").and_then(Value::as_str).unwrap_or("?"),
                entry.get("value").and_then(Value::as_f64).unwrap_or(f64::NAN),
                entry.get("point_uid").and_then(Value::as_str).unwrap_or("?"),
            );
        }
    }
}

fn render_point(point: &Value, payload: &Map<String, Value>, out: &mut dyn Write) {
    let _ = writeln!(
        out,
        "point {} ({} repetition(s))",
        point.get("point_uid").and_then(Value::as_str).unwrap_or("?"),
        point.get("repetitions").and_then(Value::as_u64).unwrap_or(0),
    );
    if let Some(metrics) = point.get("characteristics").and_then(Value::as_object) {
        for (name, stats) in metrics {
            let _ = writeln!(
                out,
                "  {:<16} min {:>12.6}  median {:>12.6}  max {:>12.6}",
                name,
                stats.get("min").and_then(Value::as_f64).unwrap_or(f64::NAN),
                stats.get("median").and_then(Value::as_f64).unwrap_or(f64::NAN),
                stats.get("max").and_then(Value::as_f64).unwrap_or(f64::NAN),
            );
        }
    }
    if let Some(record) = payload.get("recorded_as").and_then(Value::as_str) {
        let _ = writeln!(out, "recorded as experiment:{record}");
    }
}

/// Registry location: `--repo_dir`, else `BENCHKIT_HOME`, else
/// `~/.benchkit`.
pub fn default_config_dir(explicit: Option<&PathBuf>) -> PathBuf {
    if let Some(dir) = explicit {
        return dir.clone();
    }
    if let Some(dir) = std::env::var_os("BENCHKIT_HOME") {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME")
        .or_else(|| std::env::var_os("USERPROFILE"))
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    home.join(".benchkit")
}

/// CLI entry point: parse, dispatch, render; returns the exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let mut stdout = std::io::stdout();
    let mut stderr = std::io::stderr();
    let parsed = match parse_argv(&argv) {
        Ok(parsed) => parsed,
        Err(e) => {
            let result = ActionResult::from(e);
            return render_result(&result, OutputFormat::Human, &mut stdout, &mut stderr);
        }
    };
    let engine = Engine::new(default_config_dir(parsed.repo_dir.as_ref()));
    let result = engine.access(&parsed.to_request());
    render_result(&result, parsed.out_format, &mut stdout, &mut stderr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use crate::error::code;
    use serde_json::json;

    fn argv(tokens: &[&str]) -> Vec<String> {
        tokens.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn parses_the_run_invocation_with_dotted_env() {
        let parsed = parse_argv(&argv(&[
            "run",
            "program:cbench-automotive-susan",
            "--env.OMP_NUM_THREADS=4",
        ]))
        .unwrap();
        assert_eq!(parsed.action, "run");
        assert_eq!(parsed.reference.module, "program");
        assert_eq!(parsed.reference.data.as_deref(), Some("cbench-automotive-susan"));
        assert_eq!(parsed.params["env"]["OMP_NUM_THREADS"], json!("4"));
    }

    #[test]
    fn parses_three_segment_destination_ref() {
        let parsed = parse_argv(&argv(&["cp", "program:x", "local:program:y"])).unwrap();
        assert_eq!(parsed.params["args"], json!(["local:program:y"]));
        let dst = ComponentRef::parse("local:program:y").unwrap();
        assert_eq!(dst.repo.as_deref(), Some("local"));
        assert_eq!(dst.module, "program");
        assert_eq!(dst.data.as_deref(), Some("y"));
    }

    #[test]
    fn flags_override_input_files() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("input.json");
        std::fs::write(&file, r#"{"a": 1, "keep": "file"}"#).unwrap();
        let parsed = parse_argv(&argv(&[
            "run",
            "program:x",
            &format!("@{}", file.display()),
            "--a=2",
        ]))
        .unwrap();
        assert_eq!(parsed.params["a"], json!("2"));
        assert_eq!(parsed.params["keep"], json!("file"));
        assert_eq!(parsed.input_files.len(), 1);
    }

    #[test]
    fn yaml_inputs_load_and_deep_merge() {
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a.yaml");
        std::fs::write(&first, "env:\n  A: '1'\n  B: '2'\nlist: [1, 2]\n").unwrap();
        let second = dir.path().join("b.json");
        std::fs::write(&second, r#"{"env": {"B": "9"}, "list": [7]}"#).unwrap();
        let parsed = parse_argv(&argv(&[
            "run",
            "program:x",
            &format!("@{}", first.display()),
            &format!("@{}", second.display()),
        ]))
        .unwrap();
        // Objects deep-merge, lists replace.
        assert_eq!(parsed.params["env"], json!({"A": "1", "B": "9"}));
        assert_eq!(parsed.params["list"], json!([7]));
    }

    #[test]
    fn missing_action_or_ref_is_usage_error() {
        assert_eq!(parse_argv(&[]).unwrap_err().code, code::GENERIC);
        assert_eq!(parse_argv(&argv(&["load"])).unwrap_err().code, code::GENERIC);
        assert_eq!(
            parse_argv(&argv(&["load", "--flag"])).unwrap_err().code,
            code::GENERIC
        );
    }

    #[test]
    fn unreadable_input_file_is_io_error() {
        let err = parse_argv(&argv(&["run", "program:x", "@/no/such/file.json"])).unwrap_err();
        assert_eq!(err.code, code::IO);
    }

    #[test]
    fn malformed_document_reports_line_info() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bad.json");
        std::fs::write(&file, "{\n  \"a\": oops\n}\n").unwrap();
        let err = parse_argv(&argv(&["run", "program:x", &format!("@{}", file.display())]))
            .unwrap_err();
        assert_eq!(err.code, code::GENERIC);
        assert!(err.message.contains("line"), "{err}");
    }

    #[test]
    fn bare_flag_is_boolean_and_deep_dotting_nests() {
        let parsed = parse_argv(&argv(&["compile", "program:x", "--speed", "--a.b.c=1"])).unwrap();
        assert_eq!(parsed.params["speed"], json!(true));
        assert_eq!(parsed.params["a"]["b"]["c"], json!("1"));
    }

    #[test]
    fn unknown_flags_pass_through() {
        let parsed =
            parse_argv(&argv(&["run", "program:x", "--totally.unknown=keep"])).unwrap();
        assert_eq!(parsed.params["totally"]["unknown"], json!("keep"));
    }

    #[test]
    fn global_flags_are_extracted() {
        let parsed = parse_argv(&argv(&[
            "load",
            "program:x",
            "--out=json",
            "--repo_dir=/tmp/somewhere",
        ]))
        .unwrap();
        assert_eq!(parsed.out_format, OutputFormat::Json);
        assert_eq!(parsed.repo_dir, Some(PathBuf::from("/tmp/somewhere")));
        assert!(!parsed.params.contains_key("out"));
        assert!(!parsed.params.contains_key("repo_dir"));
    }

    #[test]
    fn grammar_round_trips_on_fuzzed_invocations() {
        let mut rng = StdRng::seed_from_u64(23);
        let actions = ["run", "load", "compile", "benchmark", "search"];
        let keys = ["speed", "env.OMP_NUM_THREADS", "a.b.c", "tags", "record_uoa", "deep.x.y.z"];
        for _ in 0..200 {
            let mut tokens = vec![
                actions[rng.gen_range(0..actions.len())].to_string(),
                ["program:x", "dataset", "local:program:y"][rng.gen_range(0..3)].to_string(),
            ];
            let mut used: Vec<&str> = Vec::new();
            for _ in 0..rng.gen_range(0..4) {
                let key = keys[rng.gen_range(0..keys.len())];
                // One flag per key family keeps the invocation
                // order-insensitive (later flags override earlier).
                if used.iter().any(|u| u.starts_with(key) || key.starts_with(u)) {
                    continue;
                }
                used.push(key);
                if rng.gen_bool(0.3) {
                    tokens.push(format!("--{key}"));
                } else {
                    tokens.push(format!("--{key}=v{}", rng.gen_range(0..100)));
                }
            }
            let first = parse_argv(&tokens).unwrap();
            let regenerated = first.to_argv();
            let second = parse_argv(&regenerated).unwrap();
            assert_eq!(first, second, "argv {tokens:?} vs {regenerated:?}");
        }
    }

    #[test]
    fn render_json_is_parseable_and_exit_codes_clamp() {
        let result = ActionResult::success(Map::new());
        let mut out = Vec::new();
        let mut err = Vec::new();
        let exit = render_result(&result, OutputFormat::Json, &mut out, &mut err);
        assert_eq!(exit, 0);
        let doc: Value = serde_json::from_slice(&out).unwrap();
        assert_eq!(doc["return"], json!(0));

        let result = ActionResult::failure(8, "entry not found", Map::new());
        let mut out = Vec::new();
        let mut err = Vec::new();
        let exit = render_result(&result, OutputFormat::Human, &mut out, &mut err);
        assert_eq!(exit, 8);
        assert!(String::from_utf8_lossy(&err).contains("entry not found"));

        let result = ActionResult::failure(4000, "big", Map::new());
        let mut out = Vec::new();
        let mut err = Vec::new();
        assert_eq!(
            render_result(&result, OutputFormat::Human, &mut out, &mut err),
            125
        );
    }
}
