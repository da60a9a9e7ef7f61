//! Canonical JSON on disk: UTF-8, two-space indent, sorted keys, trailing
//! newline. All meta documents go through this module so that diffs and
//! round-trips stay deterministic, and writes land atomically via a temp
//! file plus rename.

use crate::error::{Error, Result};
use serde_json::Value;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Serialize a value to the canonical on-disk form.
///
/// `serde_json`'s default map is ordered, so object keys come out sorted;
/// the trailing newline is added here.
pub fn to_canonical_string(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("JSON value serializes");
    s.push('\n');
    s
}

/// Write a JSON document atomically: serialize to a temp file in the target
/// directory, fsync, then rename over the destination. A reader never sees
/// a torn file.
pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::io(format!("{}: no parent directory", path.display())))?;
    fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .suffix(".json")
        .tempfile_in(dir)
        .map_err(|e| Error::io_at(dir, e))?;
    tmp.write_all(to_canonical_string(value).as_bytes())
        .map_err(|e| Error::io_at(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io_at(path, e))?;
    tmp.persist(path)
        .map_err(|e| Error::io_at(path, e.error))?;
    Ok(())
}

/// Read and parse a JSON document.
pub fn read_json(path: &Path) -> Result<Value> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::not_found(format!("{}: not found", path.display())),
        _ => Error::io_at(path, e),
    })?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::generic(format!("{}: malformed JSON: {e}", path.display())))
}

/// Deep-merge `patch` into `base`: objects merge recursively, everything
/// else (including arrays) replaces the previous value.
pub fn deep_merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(base_map), Value::Object(patch_map)) => {
            for (k, v) in patch_map {
                match base_map.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        base_map.insert(k, v);
                    }
                }
            }
        }
        (slot, patch) => *slot = patch,
    }
}

/// Set a dotted path like `env.OMP_NUM_THREADS` inside a JSON object,
/// creating intermediate objects as needed. A non-object on the path is
/// replaced by an object.
pub fn set_dotted(doc: &mut Value, dotted: &str, value: Value) {
    let mut cur = doc;
    let mut parts = dotted.split('.').peekable();
    while let Some(part) = parts.next() {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let map = cur.as_object_mut().expect("object just ensured");
        if parts.peek().is_none() {
            map.insert(part.to_string(), value);
            return;
        }
        cur = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
}

/// Fetch a nested value by dotted path.
pub fn get_dotted<'a>(doc: &'a Value, dotted: &str) -> Option<&'a Value> {
    let mut cur = doc;
    for part in dotted.split('.') {
        cur = cur.as_object()?.get(part)?;
    }
    Some(cur)
}
