//! Design-space exploration over a program's exposed choices: enumerate
//! or sample the space, benchmark every assignment into a record, and
//! report the efficient frontier. Failing configurations are recorded as
//! points too (an unexpected failure is a result, not noise) and only
//! excluded from the frontier.

use crate::error::{code, Error, Result};
use crate::experiment::{self, ExperimentPoint, FrontierQuery};
use crate::pipeline::{self, BenchmarkConfig, ChoiceDomain};
use crate::registry::{ComponentRef, Registry};
use rand::{Rng, SeedableRng};
use serde_json::{Map, Value};
use std::collections::BTreeMap;

/// Exhaustive sweeps are capped to keep a misconfigured spec from
/// running for days.
pub const MAX_EXHAUSTIVE_SPACE: u128 = 100_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Strategy {
    Exhaustive,
    Random { n: u64, seed: u64 },
}

/// Everything one tuning sweep needs.
#[derive(Debug, Clone)]
pub struct TuningSpec {
    pub program_ref: ComponentRef,
    pub cmd_key: Option<String>,
    pub space: BTreeMap<String, ChoiceDomain>,
    pub strategy: Strategy,
    pub repetitions: u32,
    pub record_name: String,
    pub objective: FrontierQuery,
}

impl TuningSpec {
    /// Parse the JSON document accepted by the CLI (`@tuning.json`); the
    /// program reference comes from the command line.
    pub fn from_json(program_ref: ComponentRef, doc: &Value) -> Result<Self> {
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::generic("tuning spec must be a JSON object"))?;
        let mut space = BTreeMap::new();
        let space_obj = obj
            .get("space")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::generic("tuning spec needs a `space` object"))?;
        for (name, domain) in space_obj {
            space.insert(name.clone(), parse_domain(name, domain)?);
        }
        if space.is_empty() {
            return Err(Error::generic("tuning spec `space` is empty"));
        }
        let strategy = match obj.get("strategy") {
            None | Some(Value::Null) => Strategy::Exhaustive,
            Some(Value::String(s)) if s == "exhaustive" => Strategy::Exhaustive,
            Some(Value::Object(m)) => match m.get("kind").and_then(Value::as_str) {
                Some("exhaustive") | None => Strategy::Exhaustive,
                Some("random") => {
                    let n = m.get("n").and_then(Value::as_u64).unwrap_or(0);
                    if n < 1 {
                        return Err(Error::generic("random strategy needs n >= 1"));
                    }
                    let seed = m
                        .get("seed")
                        .and_then(Value::as_u64)
                        .ok_or_else(|| Error::generic("random strategy needs an explicit seed"))?;
                    Strategy::Random { n, seed }
                }
                Some(other) => {
                    return Err(Error::generic(format!("unknown strategy kind {other:?}")))
                }
            },
            Some(other) => return Err(Error::generic(format!("bad strategy: {other}"))),
        };
        let record_name = obj
            .get("record_name")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::generic("tuning spec needs a `record_name`"))?
            .to_string();
        let objective = match obj.get("objective") {
            Some(value) => FrontierQuery::from_json(value)?,
            None => return Err(Error::generic("tuning spec needs an `objective` query")),
        };
        let spec = TuningSpec {
            program_ref,
            cmd_key: obj.get("cmd_key").and_then(Value::as_str).map(str::to_string),
            space,
            strategy,
            repetitions: obj.get("repetitions").and_then(Value::as_u64).unwrap_or(1) as u32,
            record_name,
            objective,
        };
        if spec.repetitions == 0 {
            return Err(Error::generic("repetitions must be a positive integer"));
        }
        if spec.strategy == Strategy::Exhaustive && spec.space_size()? > MAX_EXHAUSTIVE_SPACE {
            return Err(Error::generic(format!(
                "exhaustive strategy over a space of {} assignments (limit {MAX_EXHAUSTIVE_SPACE})",
                spec.space_size()?
            )));
        }
        Ok(spec)
    }

    pub fn space_size(&self) -> Result<u128> {
        let mut size: u128 = 1;
        for (name, domain) in &self.space {
            let len = domain
                .values()
                .map_err(|e| Error::generic(format!("choice {name:?}: {}", e.message)))?
                .len() as u128;
            size = size.saturating_mul(len);
        }
        Ok(size)
    }
}

fn parse_domain(name: &str, value: &Value) -> Result<ChoiceDomain> {
    let domain = match value {
        Value::Array(values) => ChoiceDomain::Values(values.clone()),
        Value::Object(m) => ChoiceDomain::Range {
            from: m
                .get("from")
                .and_then(Value::as_i64)
                .ok_or_else(|| Error::generic(format!("space.{name} range needs `from`")))?,
            to: m
                .get("to")
                .and_then(Value::as_i64)
                .ok_or_else(|| Error::generic(format!("space.{name} range needs `to`")))?,
            step: m.get("step").and_then(Value::as_i64).unwrap_or(1),
        },
        _ => {
            return Err(Error::generic(format!(
                "space.{name} must be a value list or an integer range"
            )))
        }
    };
    domain
        .values()
        .map_err(|e| Error::generic(format!("space.{name}: {}", e.message)))?;
    Ok(domain)
}

/// Expanded domains in sorted-name order; the shared shape behind
/// enumeration and index decomposition.
fn expanded_domains(space: &BTreeMap<String, ChoiceDomain>) -> Result<Vec<(String, Vec<Value>)>> {
    let mut out = Vec::new();
    for (name, domain) in space {
        let values = domain
            .values()
            .map_err(|e| Error::generic(format!("choice {name:?}: {}", e.message)))?;
        out.push((name.clone(), values));
    }
    Ok(out)
}

fn assignment_at(domains: &[(String, Vec<Value>)], mut index: u128) -> Map<String, Value> {
    let mut assignment = Map::new();
    // Mixed-radix decomposition, last (sorted) choice varying fastest.
    for (name, values) in domains.iter().rev() {
        let radix = values.len() as u128;
        let digit = (index % radix) as usize;
        index /= radix;
        assignment.insert(name.clone(), values[digit].clone());
    }
    assignment
}

/// The full Cartesian product in lexicographic order of sorted choice
/// names, each domain in declaration order.
pub fn enumerate_space(space: &BTreeMap<String, ChoiceDomain>) -> Result<Vec<Map<String, Value>>> {
    let domains = expanded_domains(space)?;
    let size: u128 = domains.iter().map(|(_, v)| v.len() as u128).product();
    if size > MAX_EXHAUSTIVE_SPACE {
        return Err(Error::generic(format!(
            "space of {size} assignments exceeds the enumeration limit {MAX_EXHAUSTIVE_SPACE}"
        )));
    }
    Ok((0..size).map(|i| assignment_at(&domains, i)).collect())
}

/// The assignment sequence a spec evaluates: the whole space for
/// exhaustive, or seeded uniform draws (without replacement while n fits,
/// with replacement otherwise).
pub fn planned_assignments(spec: &TuningSpec) -> Result<Vec<Map<String, Value>>> {
    match &spec.strategy {
        Strategy::Exhaustive => enumerate_space(&spec.space),
        Strategy::Random { n, seed } => {
            let domains = expanded_domains(&spec.space)?;
            let size: u128 = domains.iter().map(|(_, v)| v.len() as u128).product();
            let size = u64::try_from(size)
                .map_err(|_| Error::generic("space too large for random sampling"))?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
            let indices = if *n <= size {
                sample_without_replacement(&mut rng, size, *n)
            } else {
                (0..*n).map(|_| rng.gen_range(0..size)).collect()
            };
            Ok(indices
                .into_iter()
                .map(|i| assignment_at(&domains, i as u128))
                .collect())
        }
    }
}

/// Sparse partial Fisher-Yates: O(n) memory regardless of the space size.
fn sample_without_replacement<R: Rng>(rng: &mut R, size: u64, n: u64) -> Vec<u64> {
    let mut swaps: std::collections::HashMap<u64, u64> = std::collections::HashMap::new();
    let mut out = Vec::with_capacity(n as usize);
    for i in 0..n {
        let j = rng.gen_range(i..size);
        let value_at_j = *swaps.get(&j).unwrap_or(&j);
        let value_at_i = *swaps.get(&i).unwrap_or(&i);
        out.push(value_at_j);
        swaps.insert(j, value_at_i);
    }
    out
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TuningFailure {
    pub assignment: Map<String, Value>,
    pub point_uid: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BestMetric {
    pub metric: String,
    pub point_uid: String,
    pub value: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TuningReport {
    pub record_name: String,
    pub evaluated: usize,
    pub point_uids: Vec<String>,
    pub failures: Vec<TuningFailure>,
    pub frontier_uids: Vec<String>,
    pub best_per_metric: Vec<BestMetric>,
}

impl TuningReport {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

/// Run the sweep: benchmark every planned assignment into the record,
/// then compute the frontier over the successful points. An individual
/// failing configuration never aborts the sweep; a build failure before
/// any point does.
pub fn tune(registry: &Registry, spec: &TuningSpec) -> Result<TuningReport> {
    let assignments = planned_assignments(spec)?;
    let mut point_uids = Vec::new();
    let mut failures = Vec::new();

    for assignment in &assignments {
        let config = BenchmarkConfig {
            cmd_key: spec.cmd_key.clone(),
            env_overrides: BTreeMap::new(),
            choices: assignment.clone(),
            repetitions: spec.repetitions,
            speed: false,
            record: Some(spec.record_name.clone()),
        };
        match pipeline::benchmark(registry, &spec.program_ref, &config) {
            Ok(outcome) => {
                point_uids.push(outcome.point.point_uid.clone());
                if outcome.all_failed {
                    failures.push(TuningFailure {
                        assignment: assignment.clone(),
                        point_uid: Some(outcome.point.point_uid),
                        reason: "all repetitions exited nonzero".to_string(),
                    });
                }
            }
            Err(e) if point_uids.is_empty() && failures.is_empty() => {
                // Nothing evaluated yet: the program itself does not build.
                return Err(Error::new(code::EXEC.max(e.code), e.message));
            }
            Err(e) => failures.push(TuningFailure {
                assignment: assignment.clone(),
                point_uid: None,
                reason: e.message,
            }),
        }
    }

    // The frontier comes from the record itself, not tuner-private state.
    let points = experiment::load_points(registry, &spec.record_name)?;
    let successful: Vec<ExperimentPoint> = points
        .iter()
        .filter(|p| point_uids.contains(&p.point_uid))
        .filter(|p| {
            p.characteristics
                .get("exit_code")
                .map(|s| s.median == 0.0)
                .unwrap_or(false)
        })
        .cloned()
        .collect();
    let frontier = experiment::pareto_frontier(&successful, &spec.objective)?;

    let mut best_per_metric = Vec::new();
    for metric in &spec.objective.metrics {
        let best = successful
            .iter()
            .filter_map(|p| {
                p.characteristics
                    .get(&metric.name)
                    .map(|s| (p, s.value(metric.source)))
            })
            .max_by(|(_, a), (_, b)| match metric.direction {
                experiment::Direction::Minimize => b.total_cmp(a),
                experiment::Direction::Maximize => a.total_cmp(b),
            });
        if let Some((point, value)) = best {
            best_per_metric.push(BestMetric {
                metric: metric.name.clone(),
                point_uid: point.point_uid.clone(),
                value,
            });
        }
    }

    Ok(TuningReport {
        record_name: spec.record_name.clone(),
        evaluated: assignments.len(),
        point_uids,
        failures,
        frontier_uids: frontier.frontier.into_iter().map(|p| p.point_uid).collect(),
        best_per_metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{Direction, MetricQuery, StatSource};
    use rand::prelude::*;
    use serde_json::json;

    fn space_of(entries: &[(&str, ChoiceDomain)]) -> BTreeMap<String, ChoiceDomain> {
        entries
            .iter()
            .map(|(name, domain)| (name.to_string(), domain.clone()))
            .collect()
    }

    #[test]
    fn enumerate_product_in_order() {
        let space = space_of(&[
            ("a", ChoiceDomain::Values(vec![json!(1), json!(2)])),
            ("b", ChoiceDomain::Values(vec![json!("x")])),
        ]);
        let assignments = enumerate_space(&space).unwrap();
        assert_eq!(assignments.len(), 2);
        assert_eq!(assignments[0].get("a"), Some(&json!(1)));
        assert_eq!(assignments[0].get("b"), Some(&json!("x")));
        assert_eq!(assignments[1].get("a"), Some(&json!(2)));
    }

    #[test]
    fn range_expands_inclusive() {
        let space = space_of(&[("n", ChoiceDomain::Range { from: 0, to: 3, step: 1 })]);
        let assignments = enumerate_space(&space).unwrap();
        let values: Vec<i64> = assignments.iter().map(|a| a["n"].as_i64().unwrap()).collect();
        assert_eq!(values, vec![0, 1, 2, 3]);
    }

    #[test]
    fn last_sorted_name_varies_fastest() {
        let space = space_of(&[
            ("alpha", ChoiceDomain::Values(vec![json!(0), json!(1)])),
            ("beta", ChoiceDomain::Values(vec![json!("p"), json!("q")])),
        ]);
        let assignments = enumerate_space(&space).unwrap();
        let pairs: Vec<(i64, String)> = assignments
            .iter()
            .map(|a| (a["alpha"].as_i64().unwrap(), a["beta"].as_str().unwrap().to_string()))
            .collect();
        assert_eq!(
            pairs,
            vec![
                (0, "p".to_string()),
                (0, "q".to_string()),
                (1, "p".to_string()),
                (1, "q".to_string()),
            ]
        );
    }

    #[test]
    fn product_size_matches_domain_size_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let n_choices = rng.gen_range(1..4);
            let mut space = BTreeMap::new();
            let mut expected: usize = 1;
            for i in 0..n_choices {
                let len = rng.gen_range(1..5);
                expected *= len;
                space.insert(
                    format!("c{i}"),
                    ChoiceDomain::Values((0..len).map(|v| json!(v)).collect()),
                );
            }
            assert_eq!(enumerate_space(&space).unwrap().len(), expected);
        }
    }

    #[test]
    fn empty_domain_is_an_error_naming_the_choice() {
        let space = space_of(&[("broken", ChoiceDomain::Values(vec![]))]);
        let err = enumerate_space(&space).unwrap_err();
        assert_eq!(err.code, code::GENERIC);
        assert!(err.message.contains("broken"), "{err}");
    }

    fn random_spec(n: u64, seed: u64) -> TuningSpec {
        TuningSpec {
            program_ref: ComponentRef::new("program", "x"),
            cmd_key: None,
            space: space_of(&[(
                "v",
                ChoiceDomain::Range { from: 0, to: 99, step: 1 },
            )]),
            strategy: Strategy::Random { n, seed },
            repetitions: 1,
            record_name: "r".to_string(),
            objective: FrontierQuery::default(),
        }
    }

    #[test]
    fn seeded_random_is_reproducible_and_distinct_without_replacement() {
        let a = planned_assignments(&random_spec(5, 42)).unwrap();
        let b = planned_assignments(&random_spec(5, 42)).unwrap();
        assert_eq!(a, b);
        let unique: std::collections::BTreeSet<String> =
            a.iter().map(|m| Value::Object(m.clone()).to_string()).collect();
        assert_eq!(unique.len(), 5, "draws must be distinct when n <= space size");

        let c = planned_assignments(&random_spec(5, 43)).unwrap();
        assert_ne!(a, c, "different seeds should differ");
    }

    #[test]
    fn oversampling_draws_with_replacement() {
        let mut spec = random_spec(10, 7);
        spec.space = space_of(&[("v", ChoiceDomain::Values(vec![json!(0), json!(1)]))]);
        let assignments = planned_assignments(&spec).unwrap();
        assert_eq!(assignments.len(), 10);
    }

    #[test]
    fn spec_parsing_validates_strategy() {
        let program = ComponentRef::new("program", "p");
        let base = json!({
            "space": {"v": [1, 2, 3]},
            "record_name": "r",
            "objective": {"metrics": [{"name": "m", "direction": "minimize"}]}
        });
        assert!(TuningSpec::from_json(program.clone(), &base).is_ok());

        let mut no_seed = base.clone();
        no_seed["strategy"] = json!({"kind": "random", "n": 3});
        assert!(TuningSpec::from_json(program.clone(), &no_seed).is_err());

        let mut zero_n = base.clone();
        zero_n["strategy"] = json!({"kind": "random", "n": 0, "seed": 1});
        assert!(TuningSpec::from_json(program.clone(), &zero_n).is_err());

        let mut huge = base;
        huge["space"] = json!({
            "a": {"from": 0, "to": 999, "step": 1},
            "b": {"from": 0, "to": 999, "step": 1}
        });
        assert!(TuningSpec::from_json(program, &huge).is_err());
    }

    #[test]
    fn sweep_finds_known_optimum_and_records_everything() {
        let dir = tempfile::tempdir().unwrap();
        let registry = crate::registry::Registry::init(dir.path()).unwrap();
        let program = ComponentRef::new("program", "quadratic");
        // Metric is (x - 3)^2 + 1: unique minimum at x = 3.
        registry
            .add_component(
                &program,
                json!({
                    "run_cmds": {
                        "default": {
                            "cmd": "m=$(( (CK_CHOICE_X - 3) * (CK_CHOICE_X - 3) + 1 )); \
                                    printf '{\"cost\": %s}' $m > tmp-ck-output.json"
                        }
                    },
                    "exposed_choices": {"x": {"domain": [0, 1, 2, 3, 4, 5], "default": 0}}
                }),
                None,
                None,
            )
            .unwrap();
        let spec = TuningSpec {
            program_ref: program,
            cmd_key: None,
            space: space_of(&[(
                "x",
                ChoiceDomain::Values((0..=5).map(|v| json!(v)).collect()),
            )]),
            strategy: Strategy::Exhaustive,
            repetitions: 1,
            record_name: "quad-sweep".to_string(),
            objective: FrontierQuery {
                metrics: vec![MetricQuery {
                    name: "cost".to_string(),
                    direction: Direction::Minimize,
                    source: StatSource::Median,
                }],
                filter: None,
            },
        };
        let report = tune(&registry, &spec).unwrap();
        assert_eq!(report.evaluated, 6);
        assert_eq!(report.point_uids.len(), 6);
        assert!(report.failures.is_empty());
        assert_eq!(report.frontier_uids.len(), 1);

        let points = experiment::load_points(&registry, "quad-sweep").unwrap();
        assert_eq!(points.len(), 6);
        let best = points
            .iter()
            .find(|p| p.point_uid == report.frontier_uids[0])
            .unwrap();
        assert_eq!(best.choices.get("x"), Some(&json!(3)));
        assert_eq!(best.characteristics["cost"].median, 1.0);
        assert_eq!(report.best_per_metric[0].value, 1.0);
    }

    #[test]
    fn failing_configuration_is_listed_and_excluded() {
        let dir = tempfile::tempdir().unwrap();
        let registry = crate::registry::Registry::init(dir.path()).unwrap();
        let program = ComponentRef::new("program", "sentinel");
        // Exits nonzero when the sentinel choice value 2 comes up.
        registry
            .add_component(
                &program,
                json!({
                    "run_cmds": {
                        "default": {
                            "cmd": "if [ \"$CK_CHOICE_X\" = 2 ]; then exit 9; fi; \
                                    printf '{\"cost\": %s}' $CK_CHOICE_X > tmp-ck-output.json"
                        }
                    },
                    "exposed_choices": {"x": {"domain": [1, 2, 3], "default": 1}}
                }),
                None,
                None,
            )
            .unwrap();
        let spec = TuningSpec {
            program_ref: program,
            cmd_key: None,
            space: space_of(&[("x", ChoiceDomain::Values(vec![json!(1), json!(2), json!(3)]))]),
            strategy: Strategy::Exhaustive,
            repetitions: 1,
            record_name: "sentinel-sweep".to_string(),
            objective: FrontierQuery {
                metrics: vec![MetricQuery {
                    name: "cost".to_string(),
                    direction: Direction::Minimize,
                    source: StatSource::Median,
                }],
                filter: None,
            },
        };
        let report = tune(&registry, &spec).unwrap();
        assert_eq!(report.evaluated, 3);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].assignment.get("x"), Some(&json!(2)));
        // Frontier is over successful points only: cost 1 wins.
        assert_eq!(report.frontier_uids.len(), 1);
        let points = experiment::load_points(&registry, "sentinel-sweep").unwrap();
        let frontier_point = points
            .iter()
            .find(|p| p.point_uid == report.frontier_uids[0])
            .unwrap();
        assert_eq!(frontier_point.choices.get("x"), Some(&json!(1)));
        // The failed configuration is still in the record, with a
        // nonzero exit code.
        let failed = points
            .iter()
            .find(|p| p.choices.get("x") == Some(&json!(2)))
            .unwrap();
        assert_ne!(failed.characteristics["exit_code"].median, 0.0);
    }
}
