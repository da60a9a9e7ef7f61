//! Component database basics: create a registry, wrap artifacts as
//! components, search by tags, copy, rename and remove.
//!
//! Run with: cargo run --example registry_basics

use benchkit::registry::{ComponentRef, Registry};
use serde_json::json;

fn main() -> anyhow::Result<()> {
    let home = tempfile::tempdir()?;
    let registry = Registry::init(home.path())?;
    println!("registry at {}", registry.config_dir().display());
    for repo in registry.repos()? {
        println!("  repo {:<8} uid {} ({})", repo.name, repo.uid, repo.path.display());
    }

    // Wrap three datasets as components in the local scratch-pad repo.
    for (name, tags) in [
        ("city-photo-1", "image,jpeg,street"),
        ("city-photo-2", "image,jpeg,night"),
        ("lidar-scan-1", "pointcloud,raw"),
    ] {
        let component = registry.add_component(
            &ComponentRef::new("dataset", name),
            json!({"tags": tags}),
            None,
            None,
        )?;
        println!("added dataset:{name} with uid {}", component.uid);
    }

    // Tag search uses superset semantics: both tags must be present.
    let jpeg = registry.search_components("dataset", &["jpeg".to_string()], None)?;
    println!("\ndatasets tagged jpeg:");
    for reference in &jpeg {
        println!("  {reference}");
    }

    // Copies get a fresh uid; renames keep it.
    let copy = registry.copy_component(
        &ComponentRef::new("dataset", "city-photo-1"),
        &ComponentRef::parse("local:dataset:city-photo-1-copy")?,
    )?;
    println!("\ncopy has its own uid {}", copy.uid);

    let original = registry.load_component(&ComponentRef::new("dataset", "city-photo-2"))?;
    let renamed = registry.rename_component(&ComponentRef::new("dataset", "city-photo-2"), "night-photo")?;
    println!("renamed city-photo-2 -> night-photo, uid kept: {}", original.uid == renamed.uid);

    // The uid still resolves after the rename.
    let by_uid = registry.load_component(&ComponentRef::new("dataset", renamed.uid.as_str()))?;
    println!("lookup by uid finds alias {:?}", by_uid.data_name);

    registry.remove_component(&ComponentRef::new("dataset", "lidar-scan-1"))?;
    let left = registry.search_components("dataset", &[], Some("*"))?;
    println!("\n{} dataset component(s) remain", left.len());
    Ok(())
}
