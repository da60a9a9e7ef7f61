//! Dependency resolution: required tags, forbidden tags, version
//! windows and resolution order, plus automatic installation of a
//! missing dependency from a package recipe.
//!
//! Run with: cargo run --example dependency_resolution

use benchkit::package::{self, DependencySpec};
use benchkit::registry::{ComponentRef, Registry};
use serde_json::json;
use std::path::Path;

fn fixtures() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("cbench")
}

fn main() -> anyhow::Result<()> {
    let home = tempfile::tempdir()?;
    let registry = Registry::init(home.path())?;

    // Candidate environments, as detection would register them.
    for (alias, tags, version) in [
        ("tf-1.13", "lib,tensorflow,vstatic", vec![1u64, 13, 1]),
        ("tf-1.15", "lib,tensorflow,vstatic", vec![1, 15, 0]),
        ("tf-2.0", "lib,tensorflow,vstatic", vec![2, 0, 0]),
        ("tf-lite", "lib,tensorflow,vstatic,tensorflow-lite", vec![1, 14, 0]),
    ] {
        registry.add_component(
            &ComponentRef::new("env", alias),
            json!({
                "tags": tags,
                "version": version,
                "env": {"CK_ENV_LIB_TF": format!("/opt/{alias}")},
                "detected_path": format!("/opt/{alias}"),
                "source": "detected"
            }),
            None,
            None,
        )?;
    }

    // A requirement with a version window and a forbidden tag: accept
    // 1.13.1 <= v < 2.0.0 and never the lite build.
    let spec = DependencySpec::from_meta(
        "library",
        &json!({
            "name": "TensorFlow C++ API",
            "sort": 20,
            "tags": "lib,tensorflow,vstatic",
            "no_tags": "tensorflow-lite",
            "version_from": [1, 13, 1],
            "version_to": [2, 0, 0]
        }),
    )?;
    let candidates = benchkit::detect::all_env_entries(&registry)?;
    match package::match_dep(&spec, &candidates) {
        Some(best) => println!(
            "library resolves to {} v{} (highest version inside the window)",
            best.data_name,
            best.version_string()
        ),
        None => println!("library is unsatisfied"),
    }

    // Resolution processes specs ascending by `sort` and merges their
    // environment variables in that order.
    let specs = vec![
        DependencySpec::from_meta("library", &json!({"tags": "lib,tensorflow,vstatic", "no_tags": "tensorflow-lite", "sort": 20}))?,
        DependencySpec::from_meta("anything-tf", &json!({"tags": "tensorflow", "sort": 10}))?,
    ];
    let resolved = package::resolve(&registry, &specs, false)?;
    println!("\nresolution order and picks:");
    for dep in &resolved.entries {
        println!("  {:<12} uid {} v{}", dep.key, dep.uid, benchkit::detect::version_to_string(&dep.version));
    }
    println!("merged env: {:?}", resolved.merged_env);

    // A spec nothing satisfies installs the best matching package.
    registry.pull_repo(fixtures().to_str().unwrap(), None)?;
    let stub_spec = vec![DependencySpec::from_meta("tool", &json!({"tags": "stub,tool"}))?];
    println!("\nwithout install: {:?}", package::resolve(&registry, &stub_spec, false).err().map(|e| e.code));
    let resolved = package::resolve(&registry, &stub_spec, true)?;
    println!(
        "with install:    tool -> v{} via {}",
        benchkit::detect::version_to_string(&resolved.entries[0].version),
        resolved.merged_env["CK_ENV_STUB"]
    );
    Ok(())
}
