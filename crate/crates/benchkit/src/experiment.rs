//! Persist experiment points as components, replay recorded
//! configurations and compute Pareto frontiers.
//!
//! A record is an `experiment` component in the `local` repository whose
//! payload holds one JSON file per point under `points/`. The store is
//! append-only: recorded points are never rewritten.

use crate::error::{code, Error, Result};
use crate::jsonio;
use crate::package::ResolvedDep;
use crate::registry::{ComponentRef, Registry, LOCAL_REPO};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Aggregated repetitions of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl MetricStats {
    /// Min/median/max of the samples; the median of an even count is the
    /// mean of the middle pair.
    pub fn from_samples(samples: &[f64]) -> Self {
        debug_assert!(!samples.is_empty());
        if samples.is_empty() {
            return MetricStats { min: 0.0, median: 0.0, max: 0.0 };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        MetricStats {
            min: sorted[0],
            median: median_of_sorted(&sorted),
            max: *sorted.last().unwrap(),
        }
    }

    pub fn value(&self, source: StatSource) -> f64 {
        match source {
            StatSource::Min => self.min,
            StatSource::Median => self.median,
            StatSource::Max => self.max,
        }
    }
}

pub fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// One benchmark result with the complete configuration needed to
/// reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPoint {
    pub point_uid: String,
    pub timestamp: String,
    pub program_ref: String,
    pub cmd_key: String,
    pub choices: Map<String, Value>,
    pub env_overrides: BTreeMap<String, String>,
    pub resolved_deps: Vec<ResolvedDep>,
    pub platform: Value,
    pub characteristics: BTreeMap<String, MetricStats>,
    pub validated: Option<bool>,
    pub repetitions: u32,
    #[serde(default)]
    pub contended: bool,
}

impl ExperimentPoint {
    fn check_invariants(&self) -> Result<()> {
        if self.characteristics.is_empty() {
            return Err(Error::generic("experiment point has no characteristics"));
        }
        let mut keys = std::collections::BTreeSet::new();
        for dep in &self.resolved_deps {
            if !keys.insert(&dep.key) {
                return Err(Error::generic(format!(
                    "experiment point has duplicate dependency key {:?}",
                    dep.key
                )));
            }
        }
        Ok(())
    }
}

fn points_dir(registry: &Registry, record_name: &str) -> Result<PathBuf> {
    let component =
        registry.load_component(&ComponentRef::new("experiment", record_name))?;
    Ok(component.payload_dir.join("points"))
}

/// Append a point to a record, creating the `experiment` component on
/// first use. Existing point files are never touched.
pub fn record_point(registry: &Registry, record_name: &str, point: &ExperimentPoint) -> Result<String> {
    point.check_invariants()?;
    let reference = ComponentRef::in_repo(LOCAL_REPO, "experiment", record_name);
    let component = match registry.load_component(&reference) {
        Ok(component) => component,
        Err(e) if e.code == code::NOT_FOUND => {
            match registry.add_component(
                &reference,
                json!({"tags": "experiment", "point_count": 0, "metrics": []}),
                None,
                None,
            ) {
                Ok(component) => component,
                // Lost the creation race: someone else just added it.
                Err(e) if e.message.contains("entry already exists") => {
                    registry.load_component(&reference)?
                }
                Err(e) => return Err(e),
            }
        }
        Err(e) => return Err(e),
    };

    let _guard = registry.lock_repo(LOCAL_REPO)?;
    let dir = component.payload_dir.join("points");
    let path = dir.join(format!("{}.json", point.point_uid));
    if path.exists() {
        return Err(Error::generic(format!(
            "point {} is already recorded in {record_name:?}",
            point.point_uid
        )));
    }
    jsonio::write_json(&path, &serde_json::to_value(point)?)?;

    // Refresh the record meta (count and metric-name union) in place.
    let meta_path = component.payload_dir.join(".cm").join("meta.json");
    let mut meta = jsonio::read_json(&meta_path).unwrap_or_else(|_| json!({}));
    let count = meta.get("point_count").and_then(Value::as_u64).unwrap_or(0);
    let mut metrics: std::collections::BTreeSet<String> = meta
        .get("metrics")
        .and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .filter_map(|v| v.as_str().map(str::to_string))
                .collect()
        })
        .unwrap_or_default();
    metrics.extend(point.characteristics.keys().cloned());
    jsonio::deep_merge(
        &mut meta,
        json!({
            "point_count": count + 1,
            "metrics": metrics.into_iter().collect::<Vec<_>>(),
        }),
    );
    jsonio::write_json(&meta_path, &meta)?;
    Ok(point.point_uid.clone())
}

/// All points of a record, ordered by (timestamp, uid).
pub fn load_points(registry: &Registry, record_name: &str) -> Result<Vec<ExperimentPoint>> {
    let dir = points_dir(registry, record_name)?;
    let mut points = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io_at(&dir, e))? {
            let entry = entry.map_err(|e| Error::io_at(&dir, e))?;
            let path = entry.path();
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if !name.ends_with(".json") || name.starts_with('.') {
                continue;
            }
            let doc = jsonio::read_json(&path)?;
            let point: ExperimentPoint = serde_json::from_value(doc)
                .map_err(|e| Error::generic(format!("{}: bad point: {e}", path.display())))?;
            points.push(point);
        }
    }
    points.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.point_uid.cmp(&b.point_uid))
    });
    Ok(points)
}

/// One specific point, or the most recent when `point_uid` is `None`.
pub fn load_point(
    registry: &Registry,
    record_name: &str,
    point_uid: Option<&str>,
) -> Result<ExperimentPoint> {
    let points = load_points(registry, record_name)?;
    match point_uid {
        Some(uid) => points
            .into_iter()
            .find(|p| p.point_uid == uid)
            .ok_or_else(|| Error::not_found(format!("point {uid} not found in {record_name:?}"))),
        None => points
            .into_iter()
            .last()
            .ok_or_else(|| Error::not_found(format!("record {record_name:?} has no points"))),
    }
}

/// Whether to minimize or maximize a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

/// Which aggregated value of a metric drives the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatSource {
    Min,
    Median,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricQuery {
    pub name: String,
    pub direction: Direction,
    #[serde(default = "default_source")]
    pub source: StatSource,
}

fn default_source() -> StatSource {
    StatSource::Median
}

/// A direction-annotated metric list plus an optional equality filter on
/// choices and platform fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FrontierQuery {
    pub metrics: Vec<MetricQuery>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<Value>,
}

impl FrontierQuery {
    pub fn from_json(value: &Value) -> Result<Self> {
        serde_json::from_value(value.clone())
            .map_err(|e| Error::generic(format!("bad frontier query: {e}")))
    }

    fn passes_filter(&self, point: &ExperimentPoint) -> bool {
        let Some(filter) = &self.filter else { return true };
        let choice_filter = filter.get("choices").and_then(Value::as_object);
        if let Some(wanted) = choice_filter {
            for (k, v) in wanted {
                if point.choices.get(k) != Some(v) {
                    return false;
                }
            }
        }
        if let Some(wanted) = filter.get("platform").and_then(Value::as_object) {
            for (k, v) in wanted {
                if point.platform.get(k) != Some(v) {
                    return false;
                }
            }
        }
        true
    }
}

/// Frontier plus the count of candidates skipped for missing metrics.
#[derive(Debug, Clone)]
pub struct FrontierOutcome {
    pub frontier: Vec<ExperimentPoint>,
    pub skipped_missing_metric: usize,
}

/// The maximal non-dominated subset under the query, ordered by the first
/// metric, best first. Points with identical metric vectors are all kept.
///
/// The scan presorts candidates lexicographically on the normalized cost
/// vector; any dominator of a point sorts strictly before it, so each
/// candidate only needs checking against already-accepted points.
pub fn pareto_frontier(
    points: &[ExperimentPoint],
    query: &FrontierQuery,
) -> Result<FrontierOutcome> {
    if query.metrics.is_empty() {
        return Err(Error::generic("frontier query needs at least one metric"));
    }
    let mut skipped = 0usize;
    let mut candidates: Vec<(&ExperimentPoint, Vec<f64>)> = Vec::new();
    for point in points {
        if !query.passes_filter(point) {
            continue;
        }
        let mut costs = Vec::with_capacity(query.metrics.len());
        let mut complete = true;
        for metric in &query.metrics {
            match point.characteristics.get(&metric.name) {
                Some(stats) => {
                    let value = stats.value(metric.source);
                    costs.push(match metric.direction {
                        Direction::Minimize => value,
                        Direction::Maximize => -value,
                    });
                }
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            candidates.push((point, costs));
        } else {
            skipped += 1;
        }
    }

    candidates.sort_by(|a, b| lex_cmp(&a.1, &b.1));
    let mut frontier: Vec<(&ExperimentPoint, &[f64])> = Vec::new();
    for (point, costs) in &candidates {
        let dominated = frontier.iter().any(|(_, f)| dominates(f, costs));
        if !dominated {
            frontier.push((point, costs));
        }
    }
    Ok(FrontierOutcome {
        frontier: frontier.into_iter().map(|(p, _)| p.clone()).collect(),
        skipped_missing_metric: skipped,
    })
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

/// `p` dominates `q` when it is no worse everywhere and strictly better
/// somewhere (costs normalized to minimize).
fn dominates(p: &[f64], q: &[f64]) -> bool {
    let mut strictly_better = false;
    for (x, y) in p.iter().zip(q) {
        if x > y {
            return false;
        }
        if x < y {
            strictly_better = true;
        }
    }
    strictly_better
}

/// Default relative tolerance for replay metric comparison.
pub const REPLAY_TOLERANCE: f64 = 0.25;

#[derive(Debug, Clone, Serialize)]
pub struct MetricComparison {
    pub name: String,
    pub original: f64,
    pub replayed: Option<f64>,
    pub rel_delta: Option<f64>,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DepChange {
    pub key: String,
    pub original_version: Option<Vec<u64>>,
    pub replayed_version: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub record_name: String,
    pub point_uid: String,
    pub metrics: Vec<MetricComparison>,
    pub dep_diff: Vec<DepChange>,
    /// True when every metric is within tolerance and the dependency
    /// diff is empty. A false value is information, not a crash.
    pub ok: bool,
}

impl ReplayReport {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

/// Re-execute a recorded point (dependencies re-resolved fresh) and
/// compare metrics. Timing-like metrics compare within the relative
/// tolerance; metrics whose medians are both integers must match exactly.
pub fn replay(
    registry: &Registry,
    record_name: &str,
    point_uid: Option<&str>,
    tolerance_rel: f64,
) -> Result<ReplayReport> {
    let original = load_point(registry, record_name, point_uid)?;
    let program_ref = ComponentRef::parse(&original.program_ref)?;
    let outcome = crate::pipeline::benchmark(
        registry,
        &program_ref,
        &crate::pipeline::BenchmarkConfig {
            cmd_key: Some(original.cmd_key.clone()),
            env_overrides: original.env_overrides.clone(),
            choices: original.choices.clone(),
            repetitions: original.repetitions.max(1),
            speed: false,
            record: None,
        },
    )?;
    let replayed = outcome.point;

    let mut metrics = Vec::new();
    let mut all_within = true;
    for (name, original_stats) in &original.characteristics {
        let replayed_median = replayed.characteristics.get(name).map(|s| s.median);
        let comparison = match replayed_median {
            Some(new_median) => {
                let exact = is_integer_valued(original_stats.median)
                    && is_integer_valued(new_median);
                let within = if exact {
                    new_median == original_stats.median
                } else {
                    relative_delta(original_stats.median, new_median).abs() <= tolerance_rel
                };
                MetricComparison {
                    name: name.clone(),
                    original: original_stats.median,
                    replayed: Some(new_median),
                    rel_delta: Some(relative_delta(original_stats.median, new_median)),
                    within_tolerance: within,
                }
            }
            None => MetricComparison {
                name: name.clone(),
                original: original_stats.median,
                replayed: None,
                rel_delta: None,
                within_tolerance: false,
            },
        };
        all_within &= comparison.within_tolerance;
        metrics.push(comparison);
    }

    let dep_diff = diff_deps(&original.resolved_deps, &replayed.resolved_deps);
    let ok = all_within && dep_diff.is_empty();
    Ok(ReplayReport {
        record_name: record_name.to_string(),
        point_uid: original.point_uid.clone(),
        metrics,
        dep_diff,
        ok,
    })
}

fn is_integer_valued(x: f64) -> bool {
    x.fract() == 0.0 && x.is_finite()
}

fn relative_delta(original: f64, replayed: f64) -> f64 {
    (replayed - original) / original.abs().max(1e-12)
}

/// Version changes between the recorded resolution and a fresh one.
fn diff_deps(original: &[ResolvedDep], replayed: &[ResolvedDep]) -> Vec<DepChange> {
    let mut changes = Vec::new();
    let replayed_map: BTreeMap<&str, &ResolvedDep> =
        replayed.iter().map(|d| (d.key.as_str(), d)).collect();
    for dep in original {
        match replayed_map.get(dep.key.as_str()) {
            Some(new) if new.version == dep.version => {}
            Some(new) => changes.push(DepChange {
                key: dep.key.clone(),
                original_version: Some(dep.version.clone()),
                replayed_version: Some(new.version.clone()),
            }),
            None => changes.push(DepChange {
                key: dep.key.clone(),
                original_version: Some(dep.version.clone()),
                replayed_version: None,
            }),
        }
    }
    let original_keys: std::collections::BTreeSet<&str> =
        original.iter().map(|d| d.key.as_str()).collect();
    for dep in replayed {
        if !original_keys.contains(dep.key.as_str()) {
            changes.push(DepChange {
                key: dep.key.clone(),
                original_version: None,
                replayed_version: Some(dep.version.clone()),
            });
        }
    }
    changes
}

#[cfg(test)]
pub(crate) fn synthetic_point(uid: &str, metrics: &[(&str, f64)]) -> ExperimentPoint {
    ExperimentPoint {
        point_uid: uid.to_string(),
        timestamp: format!("2026-01-01T00:00:{:02}Z", uid.len() % 60),
        program_ref: "local:program:synthetic".to_string(),
        cmd_key: "default".to_string(),
        choices: Map::new(),
        env_overrides: BTreeMap::new(),
        resolved_deps: Vec::new(),
        platform: json!({"os": "test"}),
        characteristics: metrics
            .iter()
            .map(|(name, value)| {
                (
                    name.to_string(),
                    MetricStats { min: *value, median: *value, max: *value },
                )
            })
            .collect(),
        validated: None,
        repetitions: 1,
        contended: false,
    }
}
