//! Pull the bundled sample repository, build the automotive workload
//! with the speed flag, and run it with an environment override.
//!
//! Run with: cargo run --example build_and_run

use benchkit::pipeline::{self, BuildOptions, RunOptions};
use benchkit::registry::{ComponentRef, Registry};
use std::collections::BTreeMap;
use std::path::Path;

fn main() -> anyhow::Result<()> {
    let home = tempfile::tempdir()?;
    let registry = Registry::init(home.path())?;
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("cbench");
    let pulled = registry.pull_repo(fixtures.to_str().unwrap(), None)?;
    println!("pulled repository {:?}", pulled.repo.name);

    let program = ComponentRef::new("program", "cbench-automotive-susan");

    // --speed selects the maximum value of the opt_level choice.
    let record = pipeline::build(
        &registry,
        &program,
        &BuildOptions {
            speed: true,
            ..Default::default()
        },
    )?;
    println!("built with choices {:?}", record.choices);

    // The override wins over everything the dependency env provides.
    let mut env_overrides = BTreeMap::new();
    env_overrides.insert("OMP_NUM_THREADS".to_string(), "4".to_string());
    let results = pipeline::run(
        &registry,
        &program,
        &RunOptions {
            env_overrides,
            repetitions: 3,
            ..Default::default()
        },
    )?;

    println!("\n{} repetition(s):", results.len());
    for (index, result) in results.iter().enumerate() {
        println!(
            "  run {index}: exit {} in {:.4}s, validated: {:?}, metrics: {:?}",
            result.exit_code, result.wall_time_s, result.validated, result.characteristics
        );
    }
    Ok(())
}
