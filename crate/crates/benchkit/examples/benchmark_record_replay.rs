//! Benchmark a program, record the point with its complete
//! configuration, then replay the record and compare.
//!
//! Run with: cargo run --example benchmark_record_replay

use benchkit::experiment;
use benchkit::pipeline::{self, BenchmarkConfig};
use benchkit::registry::{ComponentRef, Registry};
use std::path::Path;

fn main() -> anyhow::Result<()> {
    let home = tempfile::tempdir()?;
    let registry = Registry::init(home.path())?;
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("cbench");
    registry.pull_repo(fixtures.to_str().unwrap(), None)?;

    // Benchmark with 3 repetitions and record into experiment:demo.
    let outcome = pipeline::benchmark(
        &registry,
        &ComponentRef::new("program", "hello-benchmark"),
        &BenchmarkConfig {
            repetitions: 3,
            record: Some("demo".to_string()),
            ..Default::default()
        },
    )?;
    println!("recorded point {} into experiment:demo", outcome.point.point_uid);
    for (metric, stats) in &outcome.point.characteristics {
        println!(
            "  {metric:<12} min {:>10.6} median {:>10.6} max {:>10.6}",
            stats.min, stats.median, stats.max
        );
    }
    println!(
        "  platform: {} {}, {} core(s)",
        outcome.point.platform["os"].as_str().unwrap_or("?"),
        outcome.point.platform["arch"].as_str().unwrap_or("?"),
        outcome.point.platform["logical_cores"]
    );

    // Replay re-resolves dependencies and re-runs the recorded config.
    let report = experiment::replay(&registry, "demo", None, experiment::REPLAY_TOLERANCE)?;
    println!("\nreplay of point {}:", report.point_uid);
    for metric in &report.metrics {
        println!(
            "  {:<12} original {:>10.6} replayed {:>10} -> {}",
            metric.name,
            metric.original,
            metric
                .replayed
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "missing".to_string()),
            if metric.within_tolerance { "ok" } else { "MISMATCH" },
        );
    }
    if report.dep_diff.is_empty() {
        println!("  dependencies: unchanged");
    } else {
        println!("  dependency changes: {:?}", report.dep_diff);
    }
    println!("overall: {}", if report.ok { "reproduced" } else { "differs (see above)" });
    Ok(())
}
