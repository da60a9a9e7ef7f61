//! Detect software already installed on this machine using the
//! detection rules shipped in the default repository, then add a custom
//! rule of our own.
//!
//! Run with: cargo run --example software_detection

use benchkit::detect;
use benchkit::registry::{ComponentRef, Registry};
use serde_json::json;

fn main() -> anyhow::Result<()> {
    let home = tempfile::tempdir()?;
    let registry = Registry::init(home.path())?;

    // The default repository ships rules for common tools.
    for plugin in ["shell-bash", "compiler-gcc", "python3"] {
        let outcome = detect::detect(&registry, &ComponentRef::new("soft", plugin), None)?;
        match outcome.entries.as_slice() {
            [] => println!("{plugin:<14} not found"),
            entries => {
                for entry in entries {
                    println!(
                        "{plugin:<14} v{:<10} at {}",
                        entry.version_string(),
                        entry.detected_path.display()
                    );
                }
            }
        }
    }

    // A custom rule is plain data: probe command, version regex, env
    // template. This one detects the `sort` coreutil.
    registry.add_component(
        &ComponentRef::new("soft", "coreutil-sort"),
        json!({
            "name": "sort coreutil",
            "tags": "coreutils,sort",
            "probe_commands": [{"exe": "sort", "version_arg": "--version"}],
            "version_regex": r"(\d+(?:\.\d+)+)",
            "env_template": {"CK_ENV_SORT": "{path}", "CK_ENV_SORT_VERSION": "{version}"}
        }),
        None,
        None,
    )?;
    let outcome = detect::detect(&registry, &ComponentRef::new("soft", "coreutil-sort"), None)?;
    for entry in &outcome.entries {
        println!(
            "coreutil-sort  v{:<10} env {:?}",
            entry.version_string(),
            entry.env
        );
    }
    for warning in &outcome.warnings {
        println!("warning: {warning}");
    }

    // Findings are ordinary `env` components; resolution queries them.
    let entries = detect::all_env_entries(&registry)?;
    println!("\n{} environment entr(ies) registered in local", entries.len());
    Ok(())
}
